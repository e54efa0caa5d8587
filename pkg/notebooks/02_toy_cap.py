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
# # Post-hoc uncertainty for a frozen denoiser
#
# We train a small denoiser, freeze it, and fit a cap on its outputs. The
# cap reconstructs the frozen output and predicts a per-pixel distribution
# around it. Epoch counts here are cut down so the script runs in about a
# minute; `configs/toy.ini` holds the full settings.

# %%
import numpy as np

from idcap import baselines as B
from idcap import metrics as Me
from idcap import models as Mo
from idcap.data import DatasetSpec, DegradationOp, make_dataset

ds = make_dataset(DatasetSpec(count=200, degradation=DegradationOp(sigma=0.05), seed=0))
x_tr, y_tr = ds.subset("train")
x_te, y_te = ds.subset("test")
print(x_tr.shape, x_te.shape)

# %%
base = Mo.train_base(x_tr, y_tr, Mo.TrainConfig(epochs=60, lr=2e-3, seed=1)).ckpt.net
y_hat = Mo.base_forward(base, x_te)
print(f"input PSNR {Me.psnr(x_te, y_te):.2f} dB, base PSNR {Me.psnr(y_hat, y_te):.2f} dB")

# %% [markdown]
# The cap only ever sees the base output. The identity weight starts at 10
# and decays each epoch, so early training is mostly reconstruction.

# %%
cap_res = Mo.train_cap(base, x_tr, y_tr, Mo.TrainConfig(epochs=40, lr=2e-3, seed=2))
for h in cap_res.history[::10]:
    print(f"epoch {h.epoch:3d}  lambda {h.lam:7.4f}  identity {h.identity_term:.2e}  nll {h.nll_term:+.3f}")

# %%
pred = Mo.cap_forward(cap_res.ckpt.net, y_hat)
print(f"SSIM(reconstruction, base output) = {Me.ssim(pred.y_tilde, y_hat):.4f}")

# %% [markdown]
# Compare calibration with test-time augmentation and MC dropout. All rows
# share the frozen base output as their point estimate.

# %%
rng = np.random.default_rng(3)
rows = [Me.evaluate("cap", "test", y_hat, y_te, pred.variance, pred)]
for name, kind in (("ttda-p", "pixel_noise"), ("ttda-a", "affine"), ("ttda-pac", "combined")):
    st = B.ttda(base, x_te, B.AugmentSpec(kind), rng)
    rows.append(Me.evaluate(name, "test", y_hat, y_te, st.var))
rows.append(Me.evaluate("do", "test", y_hat, y_te, B.mc_dropout(base, x_te, rng=rng).var))
for r in rows:
    print(f"{r.method:9s} UCE {r.uce:.2e}  C.Coeff {r.c_coeff:+.3f}")
