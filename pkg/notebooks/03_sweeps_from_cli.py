# ---
# jupyter:
#   jupytext:
#     text_representation:
#       extension: .py
#       format_name: percent
#   kernelspec:
#     display_name: Python 3
#     name: python3
# ---

# %% [markdown]
# # Reading CLI runs
#
# The `idcap` commands leave plain CSV files behind. This script reads a run
# directory and prints the numbers behind each ablation. Produce one first:
#
# ```
# idcap gen-data --config configs/toy.ini
# idcap train --config configs/toy.ini
# idcap evaluate --config configs/toy.ini
# idcap ood --config configs/toy.ini
# idcap data-efficiency --config configs/toy.ini
# ```

# %%
import csv
import sys
from pathlib import Path

RUN = Path(sys.argv[1] if len(sys.argv) > 1 and not sys.argv[1].startswith("-") else "runs/toy")


def read(name):
    path = RUN / name
    if not path.exists():
        print(f"(no {path}; run the matching idcap command)")
        return []
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# %% [markdown]
# Calibration table. Post-hoc rows repeat the base PSNR by construction.

# %%
for r in read("evaluate.csv"):
    print(f"{r['method']:14s} PSNR {float(r['psnr']):6.2f}  UCE {float(r['uce']):.2e}  C.Coeff {float(r['c_coeff']):+.3f}")

# %% [markdown]
# Noise on the cap input breaks the identity mapping; watch SSIM fall and UCE rise.

# %%
for r in read("degrade_sweep.csv"):
    print(f"kappa {float(r['kappa']):.3f}  SSIM {float(r['ssim_cap_vs_yhat']):.3f}  UCE cap {float(r['uce_cap']):.2e}")

# %% [markdown]
# Out-of-distribution detection: AUROC per detector and split.

# %%
for r in read("ood_summary.csv"):
    print(f"{r['detector']:17s} {r['quantity']:10s} {float(r['value']):.4f}")

# %% [markdown]
# Data efficiency: SSIM against the clean target as the training set shrinks.

# %%
for r in read("data_efficiency.csv"):
    print(f"fraction {r['fraction']:5s} {r['model']:12s} SSIM {float(r['ssim']):.4f}  plateau epoch {r['epochs_to_plateau']}")
