"""Experiment configuration and the commands behind the ``idcap`` CLI.

Every command reads an INI config, derives all of its random streams from
the master seed, writes CSV files into the output directory, and stamps each
CSV row with the config hash and the seed. Commands communicate only through
files in that directory (dataset tensors, checkpoints), so they can be run
one at a time in the natural order::

    gen-data -> train -> evaluate / degrade-sweep / data-efficiency / ood /
    ablate-no-identity / recalibrate
"""

import configparser
import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import baselines as B
from . import metrics as Me
from . import models as Mo
from . import nn, ood
from .data import Dataset, DatasetSpec, DegradationOp, load_tensor, make_dataset, read_manifest, write_dataset
from .seeding import derive_seed, make_rng

log = logging.getLogger(__name__)

ROLES = ("base", "cap", "scratch-gauss", "scratch-ggd", "ae")
DEFAULT_KAPPAS = (0.0, 0.025, 0.05, 0.075, 0.1, 0.125, 0.15)
DEFAULT_FRACTIONS = (0.1, 0.25, 0.5, 1.0)
CONSTANTS = (0.015, 0.95)


class ConfigError(ValueError):
    pass


class MissingArtifact(FileNotFoundError):
    pass


# -- configuration -----------------------------------------------------------

@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/toy"
    data: DatasetSpec = field(default_factory=DatasetSpec)
    base: Mo.TrainConfig = field(default_factory=lambda: Mo.TrainConfig(epochs=40))
    cap: Mo.TrainConfig = field(default_factory=lambda: Mo.TrainConfig(epochs=100, lr=2e-3))
    scratch: Mo.TrainConfig = field(default_factory=lambda: Mo.TrainConfig(epochs=100, lr=2e-3))
    ae: Mo.TrainConfig = field(default_factory=lambda: Mo.TrainConfig(epochs=30))
    n_bins: int = 100
    split: str = "test"
    passes: int = 20
    dropout_p: float = 0.2
    augment: B.AugmentSpec = field(default_factory=B.AugmentSpec)
    kappas: tuple = DEFAULT_KAPPAS
    fractions: tuple = DEFAULT_FRACTIONS
    ood_count: int = 100

    def config_hash(self):
        """Short digest of every setting except the seed and output directory."""
        h = hashlib.sha256(_canonical(self).encode())
        return h.hexdigest()[:16]


def _canonical(cfg):
    parts = []
    for f in fields(cfg):
        if f.name in ("seed", "out"):
            continue
        parts.append(f"{f.name}={_canonical_value(getattr(cfg, f.name))}")
    return ";".join(parts)


def _canonical_value(v):
    if hasattr(v, "__dataclass_fields__"):
        return "{" + ",".join(f"{f.name}:{_canonical_value(getattr(v, f.name))}" for f in fields(v)) + "}"
    if isinstance(v, (tuple, list)):
        return "(" + ",".join(_canonical_value(x) for x in v) + ")"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _floats(text):
    return tuple(float(t) for t in text.replace(" ", "").split(",") if t)


_TRAIN_KEYS = {"epochs": int, "batch_size": int, "lr": float, "lambda0": float, "gamma": float,
               "width": int, "dropout_p": float}


def _train_section(sec, default, name):
    kw = {}
    for key, value in sec.items():
        if key not in _TRAIN_KEYS:
            raise ConfigError(f"[{name}] unknown key {key!r}")
        kw[key] = _TRAIN_KEYS[key](value)
    return replace(default, **kw)


def parse_config(text, seed=None, out=None):
    """Build an :class:`ExperimentConfig` from INI text; CLI overrides win."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    known = {"experiment", "data", "base", "cap", "scratch", "ae", "baselines", "sweep", "ood"}
    extra = set(cp.sections()) - known
    if extra:
        raise ConfigError(f"unknown config sections {sorted(extra)}")
    cfg = ExperimentConfig()
    try:
        if cp.has_section("experiment"):
            sec = dict(cp["experiment"])
            cfg.seed = int(sec.pop("seed", cfg.seed))
            cfg.out = sec.pop("out", cfg.out)
            cfg.n_bins = int(sec.pop("n_bins", cfg.n_bins))
            cfg.split = sec.pop("split", cfg.split)
            if sec:
                raise ConfigError(f"[experiment] unknown keys {sorted(sec)}")
        if cp.has_section("data"):
            sec = dict(cp["data"])
            op_kw = {}
            op_kw["kind"] = sec.pop("degradation", "gauss_noise")
            for key, conv in (("sigma", float), ("radius", int), ("sigma_b", float), ("w", int), ("h", int)):
                if key in sec:
                    op_kw[key] = conv(sec.pop(key))
            data_kw = {"degradation": DegradationOp(**op_kw)}
            for key, conv in (("family", str), ("size", int), ("count", int)):
                if key in sec:
                    data_kw[key] = conv(sec.pop(key))
            if "splits" in sec:
                data_kw["splits"] = _floats(sec.pop("splits"))
            if sec:
                raise ConfigError(f"[data] unknown keys {sorted(sec)}")
            cfg.data = DatasetSpec(**data_kw)
        for role in ("base", "cap", "scratch", "ae"):
            if cp.has_section(role):
                setattr(cfg, role, _train_section(cp[role], getattr(cfg, role), role))
        if cp.has_section("baselines"):
            sec = dict(cp["baselines"])
            cfg.passes = int(sec.pop("passes", cfg.passes))
            cfg.dropout_p = float(sec.pop("dropout_p", cfg.dropout_p))
            aug = {}
            if "noise_sigma" in sec:
                aug["sigma"] = float(sec.pop("noise_sigma"))
            if "max_shift" in sec:
                aug["max_shift"] = int(sec.pop("max_shift"))
            if "flip" in sec:
                aug["flip"] = sec.pop("flip").strip().lower() in ("1", "true", "yes", "on")
            for key in ("blur", "contrast", "jitter"):
                if key in sec:
                    aug[key] = _floats(sec.pop(key))
            if sec:
                raise ConfigError(f"[baselines] unknown keys {sorted(sec)}")
            cfg.augment = B.AugmentSpec(passes=cfg.passes, **aug)
        else:
            cfg.augment = B.AugmentSpec(passes=cfg.passes)
        if cp.has_section("sweep"):
            sec = dict(cp["sweep"])
            if "kappas" in sec:
                cfg.kappas = _floats(sec.pop("kappas"))
            if "fractions" in sec:
                cfg.fractions = _floats(sec.pop("fractions"))
            if sec:
                raise ConfigError(f"[sweep] unknown keys {sorted(sec)}")
        if cp.has_section("ood"):
            sec = dict(cp["ood"])
            cfg.ood_count = int(sec.pop("count", cfg.ood_count))
            if sec:
                raise ConfigError(f"[ood] unknown keys {sorted(sec)}")
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    if seed is not None:
        cfg.seed = int(seed)
    if out is not None:
        cfg.out = str(out)
    _validate(cfg)
    return cfg


def _validate(cfg):
    if cfg.split not in ("train", "val", "test"):
        raise ConfigError(f"unknown split {cfg.split!r}")
    if cfg.n_bins < 1:
        raise ConfigError("n_bins must be >= 1")
    if any(k < 0 for k in cfg.kappas):
        raise ConfigError("kappas must be non-negative")
    if not cfg.kappas:
        raise ConfigError("kappa list is empty")
    if not cfg.fractions or any(not 0.0 < f <= 1.0 for f in cfg.fractions):
        raise ConfigError("data fractions must lie in (0, 1]")
    if not 0.0 <= cfg.dropout_p < 1.0:
        raise ConfigError("dropout_p must lie in [0, 1)")
    if cfg.ood_count < 10:
        raise ConfigError("ood count must be >= 10")
    if cfg.seed < 0:
        raise ConfigError("seed must be non-negative")


def load_config(path, seed=None, out=None):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, seed, out)


# -- run context -------------------------------------------------------------

class Run:
    """Paths, seeds and provenance columns for one config + seed."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.out = Path(cfg.out)
        self.hash = cfg.config_hash()

    @property
    def stamp(self):
        return {"config_hash": self.hash, "seed": self.cfg.seed}

    def path(self, *parts):
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def rng(self, tag):
        return make_rng(self.cfg.seed, tag)

    def train_cfg(self, role, **over):
        base = {"base": self.cfg.base, "cap": self.cfg.cap, "scratch-gauss": self.cfg.scratch,
                "scratch-ggd": self.cfg.scratch, "ae": self.cfg.ae}[role]
        return replace(base, seed=derive_seed(self.cfg.seed, f"train/{role}") & 0x7FFFFFFF, **over)

    def data_spec(self):
        return replace(self.cfg.data, seed=self.cfg.seed)

    def ckpt_path(self, role):
        return self.out / "models" / f"{role}.ckpt"

    def load_model(self, role):
        p = self.ckpt_path(role)
        if not p.exists():
            raise MissingArtifact(f"missing {role} checkpoint {p}; run 'idcap train' first")
        return nn.load_checkpoint(p).net

    def load_data(self):
        manifest = self.out / "data" / "manifest.csv"
        if not manifest.exists():
            raise MissingArtifact(f"missing dataset {manifest}; run 'idcap gen-data' first")
        rows = read_manifest(manifest)
        spec = self.data_spec()
        if len(rows) != spec.count:
            raise MissingArtifact(f"{manifest} has {len(rows)} rows, config expects {spec.count}")
        x = np.stack([load_tensor(manifest.parent / r["path_x"]) for r in rows])
        y = np.stack([load_tensor(manifest.parent / r["path_y"]) for r in rows])
        return Dataset(spec, x, y, np.array([r["split"] for r in rows]))


def _write_rows(path, header, rows, stamp):
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(list(stamp) + list(header))
        for r in rows:
            wr.writerow([str(v) for v in stamp.values()] + [_fmt(v) for v in r])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


# -- gen-data / train --------------------------------------------------------

def cmd_gen_data(cfg):
    run = Run(cfg)
    ds = make_dataset(run.data_spec())
    manifest = write_dataset(ds, run.out / "data")
    log.info("wrote %d images to %s", ds.spec.count, manifest.parent)
    return manifest


def train_role(run, role, ds, base=None, **over):
    """Train one role on the train split; returns the :class:`~idcap.models.TrainResult`."""
    x, y = ds.subset("train")
    tc = run.train_cfg(role, **over)
    if role == "base":
        return Mo.train_base(x, y, tc)
    if role == "cap":
        return Mo.train_cap(base, x, y, tc)
    if role == "ae":
        return Mo.train_autoencoder(Mo.base_forward(base, x), tc)
    return Mo.train_scratch(x, y, tc, {"scratch-gauss": "gaussian", "scratch-ggd": "ggd"}[role])


def cmd_train(cfg, role="all"):
    """Train ``role`` (or every role in dependency order); returns checkpoint paths."""
    run = Run(cfg)
    roles = ROLES if role == "all" else (role,)
    if role != "all" and role not in ROLES:
        raise ConfigError(f"unknown role {role!r}; expected one of {', '.join(ROLES)} or all")
    ds = run.load_data()
    paths = []
    for r in roles:
        base = None
        if r in ("cap", "ae"):
            base = run.load_model("base")
        res = train_role(run, r, ds, base)
        p = run.path("models", f"{r}.ckpt")
        nn.save_checkpoint(p, res.ckpt)
        Mo.write_train_log(run.path("logs", f"{r}.csv"), res.history, run.stamp)
        log.info("trained %s (%d epochs) -> %s", r, len(res.history), p)
        paths.append(p)
    return paths


# -- evaluate ----------------------------------------------------------------

def _baseline_stats(run, base, x, tag_prefix="eval"):
    cfg = run.cfg
    out = {}
    for name, kind in (("ttda-p", "pixel_noise"), ("ttda-a", "affine"), ("ttda-c", "corrupt"), ("ttda-pac", "combined")):
        spec = replace(cfg.augment, kind=kind)
        out[name] = B.ttda(base, x, spec, run.rng(f"{tag_prefix}/{name}"))
    out["do"] = B.mc_dropout(base, x, cfg.passes, cfg.dropout_p, run.rng(f"{tag_prefix}/do"))
    out["dopac"] = B.ttda(base, x, replace(cfg.augment, kind="combined"), run.rng(f"{tag_prefix}/dopac"),
                          dropout_p=cfg.dropout_p)
    return out


def _point_only_report(method, split, point, y, n_bins):
    nan = math.nan
    return Me.CalibrationReport(method, split, Me.psnr(point, y), Me.ssim(point, y), nan, nan, nan, nan, nan,
                                int(np.size(y)), n_bins)


def evaluate_all(run, ds, models, split=None, save_baselines=False):
    """Calibration reports for every method on ``split``; ``models`` maps role -> network."""
    cfg = run.cfg
    split = split or cfg.split
    x, y = ds.subset(split)
    base = models["base"]
    digest = base.digest()
    y_hat = Mo.base_forward(base, x)
    rows = [_point_only_report("base", split, y_hat, y, cfg.n_bins)]
    bins = {}

    def add(method, point, var, pred=None):
        rep = Me.evaluate(method, split, point, y, var, pred, cfg.n_bins)
        rows.append(rep)
        bins[method] = Me.uce((point - y) ** 2, var, cfg.n_bins)[1]

    cap_pred = Mo.cap_forward(models["cap"], y_hat)
    add("cap", y_hat, cap_pred.variance, cap_pred)
    g = Mo.scratch_forward(models["scratch-gauss"], x, "gaussian")
    add("scratch-gauss", g.y_tilde, g.variance, g)
    s = Mo.scratch_forward(models["scratch-ggd"], x, "ggd")
    add("scratch-ggd", s.y_tilde, s.variance, s)
    stats = _baseline_stats(run, base, x)
    for name, st in stats.items():
        add(name, y_hat, st.var)
        if save_baselines:
            B.save_pass_stats(run.out / "baselines" / name, st)
    for c in CONSTANTS:
        add(f"const({c})", y_hat, B.constant_uncertainty(y.shape, c))
    if base.digest() != digest or not np.array_equal(Mo.base_forward(base, x), y_hat):
        raise AssertionError("a post-hoc method altered the base network")
    return rows, bins


def cmd_evaluate(cfg, split=None):
    run = Run(cfg)
    ds = run.load_data()
    models = {r: run.load_model(r) for r in ("base", "cap", "scratch-gauss", "scratch-ggd")}
    rows, bins = evaluate_all(run, ds, models, split, save_baselines=True)
    path = run.path("evaluate.csv")
    Me.write_reports(path, rows, run.stamp)
    for method, b in bins.items():
        Me.write_bins(run.path("bins", f"{method}.csv"), b)
    return rows


# -- identity degradation sweep ----------------------------------------------

SWEEP_COLUMNS = ("kappa", "ssim_cap_vs_yhat", "uce_cap", "c_coeff_cap", "uce_ttda_pac",
                 "uce_const_0.015", "uce_const_0.95", "mse")


def degrade_sweep(run, ds, base, cap, kappas=None):
    """Noise the cap's input with N(0, kappa^2) and track reconstruction and calibration.

    The degraded prediction ``y_hat + kappa * n`` is both the cap's input and
    the point estimate that the cap and the constant controls are scored
    against, so kappa = 0 reproduces the evaluate numbers. TTDApac sees the
    base run on an input degraded by the same kappa. One noise draw is shared
    by every kappa.
    """
    cfg = run.cfg
    kappas = cfg.kappas if kappas is None else kappas
    if any(k < 0 for k in kappas):
        raise ConfigError("kappas must be non-negative")
    x, y = ds.subset(cfg.split)
    y_hat = Mo.base_forward(base, x)
    rng = run.rng("sweep/noise")
    n_out = rng.standard_normal(y_hat.shape)
    n_in = rng.standard_normal(x.shape)
    pac = replace(cfg.augment, kind="combined")
    rows = []
    for k in kappas:
        point = y_hat + k * n_out
        pred = Mo.cap_forward(cap, point)
        sq = (point - y) ** 2
        uce_cap = Me.uce(sq, pred.variance, cfg.n_bins)[0]
        xk = x + k * n_in
        st = B.ttda(base, xk, pac, run.rng("eval/ttda-pac"))
        uce_pac = Me.uce((Mo.base_forward(base, xk) - y) ** 2, st.var, cfg.n_bins)[0]
        consts = [Me.uce(sq, B.constant_uncertainty(sq.shape, c), cfg.n_bins)[0] for c in CONSTANTS]
        rows.append((k, Me.ssim(pred.y_tilde, y_hat), uce_cap, Me.pearson_corr(sq, pred.variance), uce_pac,
                     *consts, float(sq.mean())))
    return rows


def cmd_degrade_sweep(cfg):
    run = Run(cfg)
    rows = degrade_sweep(run, run.load_data(), run.load_model("base"), run.load_model("cap"))
    _write_rows(run.path("degrade_sweep.csv"), SWEEP_COLUMNS, rows, run.stamp)
    return rows


# -- data efficiency ---------------------------------------------------------

EFFICIENCY_COLUMNS = ("fraction", "n_train", "model", "ssim", "ssim_vs_yhat", "uce", "c_coeff",
                      "epochs_to_plateau")


def epochs_to_plateau(history, tol=0.05):
    """First epoch whose loss is within ``tol`` of the total improvement from the best loss."""
    losses = np.array([h.loss for h in history])
    if losses.size == 0:
        return 0
    best, first = losses.min(), losses[0]
    thresh = best + tol * (first - best)
    return int(np.argmax(losses <= thresh))


def _fraction_subset(run, ds, fraction):
    idx = ds.indices("train")
    order = run.rng("efficiency/order").permutation(len(idx))
    n = max(1, int(round(fraction * len(idx))))
    keep = np.sort(idx[order[:n]])
    split = ds.split.copy()
    split[np.setdiff1d(idx, keep)] = "unused"
    return Dataset(ds.spec, ds.x, ds.y, split), n


def data_efficiency(run, ds, base, fractions=None, cached=None):
    """Retrain cap and scratch-ggd on growing train fractions (base stays fixed)."""
    cfg = run.cfg
    fractions = cfg.fractions if fractions is None else fractions
    cached = cached or {}
    x, y = ds.subset(cfg.split)
    y_hat = Mo.base_forward(base, x)
    e2 = (y_hat - y) ** 2
    rows = []
    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise ConfigError(f"fraction {f} outside (0, 1]")
        sub, n = _fraction_subset(run, ds, f)
        for role in ("cap", "scratch-ggd"):
            if f == 1.0 and role in cached:
                res = cached[role]
            else:
                res = train_role(run, role, sub, base)
            net = res.ckpt.net
            if role == "cap":
                pred = Mo.cap_forward(net, y_hat)
                sq = e2
                ssim_yhat = Me.ssim(pred.y_tilde, y_hat)
            else:
                pred = Mo.scratch_forward(net, x, "ggd")
                sq = (pred.y_tilde - y) ** 2
                ssim_yhat = math.nan
            rows.append((f, n, role, Me.ssim(pred.y_tilde, y), ssim_yhat, Me.uce(sq, pred.variance, cfg.n_bins)[0],
                         Me.pearson_corr(sq, pred.variance), epochs_to_plateau(res.history)))
    return rows


def cmd_data_efficiency(cfg):
    run = Run(cfg)
    rows = data_efficiency(run, run.load_data(), run.load_model("base"))
    _write_rows(run.path("data_efficiency.csv"), EFFICIENCY_COLUMNS, rows, run.stamp)
    return rows


# -- OOD -----------------------------------------------------------------------

DETECTORS = ("feature", "ae", "mean-uncertainty")


@dataclass
class OODResult:
    scores: dict  # detector -> per-image scores, aligned with ids/families
    ids: list
    families: list
    auroc: dict  # (detector, comparison) -> value
    roc: dict  # detector -> (fpr, tpr) for A vs B+C
    mean_uncertainty: dict  # family -> mean score


def ood_sets(run):
    """Fresh in-distribution (A) and shifted (B, C) sets under the training degradation."""
    cfg = run.cfg
    out = {}
    for fam in ("A", "B", "C"):
        spec = replace(cfg.data, family=fam, count=cfg.ood_count, seed=derive_seed(cfg.seed, f"ood/{fam}") & 0x7FFFFFFF)
        out[fam] = make_dataset(spec).x
    return out


def ood_experiment(run, ds, base, cap, ae):
    x_val, _ = ds.subset("val")
    sets = ood_sets(run)
    mean_feat = ood.feature_mean(ood.base_features(base, x_val))
    mean_code = ood.feature_mean(ood.ae_bottleneck(ae, base, x_val))
    scores = {d: [] for d in DETECTORS}
    ids, fams = [], []
    for fam, x in sets.items():
        scores["feature"].append(ood.feature_distance_score(ood.base_features(base, x), mean_feat))
        scores["ae"].append(ood.feature_distance_score(ood.ae_bottleneck(ae, base, x), mean_code))
        scores["mean-uncertainty"].append(ood.mean_uncertainty_score(base, cap, x))
        ids += [f"{fam}{i:04d}" for i in range(len(x))]
        fams += [fam] * len(x)
    scores = {d: np.concatenate(v) for d, v in scores.items()}
    fams_arr = np.array(fams)
    auroc, roc = {}, {}
    for d, s in scores.items():
        for name, outs in (("A-vs-BC", ("B", "C")), ("A-vs-B", ("B",)), ("A-vs-C", ("C",))):
            sel = (fams_arr == "A") | np.isin(fams_arr, outs)
            curve, val = ood.roc_auroc(s[sel], fams_arr[sel] != "A")
            auroc[(d, name)] = val
            if name == "A-vs-BC":
                roc[d] = curve
    mu = {f: float(scores["mean-uncertainty"][fams_arr == f].mean()) for f in ("A", "B", "C")}
    return OODResult(scores, ids, fams, auroc, roc, mu)


def cmd_ood(cfg):
    run = Run(cfg)
    res = ood_experiment(run, run.load_data(), run.load_model("base"), run.load_model("cap"), run.load_model("ae"))
    rows = []
    for d in DETECTORS:
        for i, sid in enumerate(res.ids):
            rows.append((sid, d, res.scores[d][i], ood.IN if res.families[i] == "A" else ood.OUT))
    ood.write_scores(run.path("ood_scores.csv"), rows, run.stamp)
    for d, (fpr, tpr) in res.roc.items():
        ood.write_roc(run.path("roc", f"{d}.csv"), fpr, tpr, run.stamp)
    summary = [(d, comp, v) for (d, comp), v in res.auroc.items()]
    summary += [("mean-uncertainty", f"mean({f})", v) for f, v in res.mean_uncertainty.items()]
    _write_rows(run.path("ood_summary.csv"), ("detector", "quantity", "value"), summary, run.stamp)
    return res


# -- ablation / recalibration ------------------------------------------------

def cmd_ablate_no_identity(cfg):
    run = Run(cfg)
    ds = run.load_data()
    base = run.load_model("base")
    full = run.load_model("cap")
    res = train_role(run, "cap", ds, base, lambda_fixed=0.0)
    nn.save_checkpoint(run.path("models", "cap-no-identity.ckpt"), res.ckpt)
    Mo.write_train_log(run.path("logs", "cap-no-identity.csv"), res.history, run.stamp)
    rows = ablation_reports(run, ds, base, full, res.ckpt.net)
    Me.write_reports(run.path("ablate_no_identity.csv"), rows, run.stamp)
    return rows


def ablation_reports(run, ds, base, full, ablated):
    x, y = ds.subset(run.cfg.split)
    y_hat = Mo.base_forward(base, x)
    rows = []
    for name, cap in (("cap", full), ("cap-no-identity", ablated)):
        pred = Mo.cap_forward(cap, y_hat)
        rows.append(Me.evaluate(name, run.cfg.split, y_hat, y, pred.variance, pred, run.cfg.n_bins))
    return rows


RECAL_COLUMNS = ("model", "fit_split", "eval_split", "s_star", "uce_pre", "uce_post")


def _variance_outputs(role, net, base, x):
    """(point estimate, variance map) of a variance-producing model on ``x``."""
    if role == "cap":
        y_hat = Mo.base_forward(base, x)
        return y_hat, Mo.cap_forward(net, y_hat).variance
    pred = Mo.scratch_forward(net, x, "gaussian" if role == "scratch-gauss" else "ggd")
    return pred.y_tilde, pred.variance


def recalibrate(run, ds, models, roles=("scratch-gauss", "scratch-ggd", "cap")):
    """Fit the variance scale on val, report UCE before/after on the configured split."""
    xv, yv = ds.subset("val")
    xt, yt = ds.subset(run.cfg.split)
    rows = []
    for role in roles:
        pv, vv = _variance_outputs(role, models[role], models["base"], xv)
        s = Me.variance_scaling_fit((pv - yv) ** 2, vv)
        pt, vt = _variance_outputs(role, models[role], models["base"], xt)
        sq = (pt - yt) ** 2
        pre = Me.uce(sq, vt, run.cfg.n_bins)[0]
        post = Me.uce(sq, Me.apply_variance_scaling(vt, s), run.cfg.n_bins)[0]
        rows.append((role, "val", run.cfg.split, s, pre, post))
    return rows


def cmd_recalibrate(cfg, model="all"):
    run = Run(cfg)
    roles = ("scratch-gauss", "scratch-ggd", "cap") if model == "all" else (model,)
    if any(r not in ("scratch-gauss", "scratch-ggd", "cap") for r in roles):
        raise ConfigError(f"model {model!r} produces no variance map")
    ds = run.load_data()
    models = {"base": run.load_model("base")}
    models.update({r: run.load_model(r) for r in roles})
    rows = recalibrate(run, ds, models, roles)
    _write_rows(run.path("recalibrate.csv"), RECAL_COLUMNS, rows, run.stamp)
    return rows
