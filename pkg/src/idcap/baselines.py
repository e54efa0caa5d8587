"""Post-hoc uncertainty baselines for a frozen base network.

None of these retrain anything. Test-time augmentation (TTDA) perturbs the
input ``T`` times and takes the per-pixel population variance of the base
outputs; MC dropout does the same with random dropout masks inserted before
the base's last layer. The point estimate reported for every baseline is
still ``base(x)``; the pass mean is returned only for inspection.

Affine passes shift (and maybe mirror) each image, run the base, and warp
the output back. Output pixels whose source fell outside the frame are
dropped from that pass, so each pixel keeps a count of valid passes.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import nn
from .data import _blur, save_tensor
from .models import base_forward, from_net, to_net

KINDS = ("pixel_noise", "affine", "corrupt", "combined")


@dataclass(frozen=True)
class AugmentSpec:
    kind: str = "pixel_noise"
    passes: int = 20
    sigma: float = 0.05  # pixel noise std
    max_shift: int = 2  # pixels, each axis
    flip: bool = True  # horizontal mirror allowed
    blur: tuple = (0.0, 1.0)  # gaussian blur std range
    contrast: tuple = (0.8, 1.2)  # gain about the image mean
    jitter: tuple = (-0.1, 0.1)  # additive brightness offset

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown augmentation {self.kind!r}")
        if self.passes < 1:
            raise ValueError("need at least one pass")
        if self.sigma < 0 or self.max_shift < 0:
            raise ValueError("noise std and shift must be non-negative")
        for lo, hi in (self.blur, self.contrast, self.jitter):
            if lo > hi:
                raise ValueError(f"empty range ({lo}, {hi})")
        if self.blur[0] < 0:
            raise ValueError("blur std must be non-negative")


class PassStats(NamedTuple):
    mean: np.ndarray
    var: np.ndarray
    count: np.ndarray  # valid passes per pixel

    @property
    def mask(self):
        return self.count > 0


def eval_workers():
    """Worker count for pass-level parallelism, from ``IDCAP_THREADS`` (default 1)."""
    raw = os.environ.get("IDCAP_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"IDCAP_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ValueError("IDCAP_THREADS must be >= 1")
    return n


# -- augmentations -----------------------------------------------------------

def shift_image(img, dy, dx, flip):
    """Warp ``(1, H, W)``: optional mirror, then move content by ``(dy, dx)``.

    Pixels uncovered by the move repeat the nearest edge.
    """
    h, w = img.shape[-2:]
    src = img[..., ::-1] if flip else img
    rows = np.clip(np.arange(h) - dy, 0, h - 1)
    cols = np.clip(np.arange(w) - dx, 0, w - 1)
    return src[..., rows[:, None], cols[None, :]]


def unshift_output(out, dy, dx, flip):
    """Inverse of :func:`shift_image` on a base output; returns ``(image, valid)``."""
    h, w = out.shape[-2:]
    rows = np.arange(h) + dy
    cols = np.arange(w) + dx
    valid = ((rows >= 0) & (rows < h))[:, None] & ((cols >= 0) & (cols < w))[None, :]
    back = out[..., np.clip(rows, 0, h - 1)[:, None], np.clip(cols, 0, w - 1)[None, :]]
    if flip:
        back, valid = back[..., ::-1], valid[:, ::-1]
    return back, np.broadcast_to(valid, out.shape)


def _corrupt(img, spec, rng):
    sb = rng.uniform(*spec.blur)
    gain = rng.uniform(*spec.contrast)
    offset = rng.uniform(*spec.jitter)
    if sb > 0:
        img = _blur(img, 2, sb)
    m = img.mean()
    return (img - m) * gain + m + offset


def _perturb(x, spec, rng):
    """One perturbed copy of the batch plus per-image inverse-warp parameters."""
    out = np.empty_like(x)
    warps = []
    for i, img in enumerate(x):
        if spec.kind in ("corrupt", "combined"):
            img = _corrupt(img, spec, rng)
        if spec.kind in ("pixel_noise", "combined") and spec.sigma > 0:
            img = img + spec.sigma * rng.standard_normal(img.shape)
        warp = None
        if spec.kind in ("affine", "combined"):
            dy, dx = (int(v) for v in rng.integers(-spec.max_shift, spec.max_shift + 1, size=2))
            flip = bool(spec.flip and rng.random() < 0.5)
            img = shift_image(img, dy, dx, flip)
            warp = (dy, dx, flip)
        out[i] = img
        warps.append(warp)
    return out, warps


# -- pass aggregation --------------------------------------------------------

def _accumulate(passes, shape):
    """Welford mean/variance over ``(output, valid)`` pairs in pass order."""
    count = np.zeros(shape)
    mean = np.zeros(shape)
    m2 = np.zeros(shape)
    for out, valid in passes:
        count += valid
        delta = np.where(valid, out - mean, 0.0)
        mean += np.divide(delta, count, out=np.zeros(shape), where=count > 0)
        m2 += np.where(valid, delta * (out - mean), 0.0)
    var = np.divide(m2, count, out=np.zeros(shape), where=count > 0)
    return PassStats(mean, var, count.astype(np.int64))


def _run_passes(one_pass, n, rng, workers):
    seeds = rng.integers(0, 2**63 - 1, size=n)
    rngs = [np.random.default_rng(int(s)) for s in seeds]
    workers = eval_workers() if workers is None else workers
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(one_pass, rngs))
    return [one_pass(r) for r in rngs]


def _stochastic_base(net, x, rng):
    out, _ = nn.forward(net, to_net(x), "eval", rng, mc_dropout=True)
    return from_net(out)


def ttda(base, x, spec, rng, dropout_p=0.0, workers=None):
    """Test-time augmentation statistics over ``spec.passes`` perturbed copies of ``x``.

    With ``dropout_p > 0`` every pass also draws a dropout mask before the
    base's last layer (the combined dropout + augmentation baseline).
    """
    if not 0.0 <= dropout_p < 1.0:
        raise ValueError("dropout p must lie in [0, 1)")
    x = np.asarray(x, dtype=np.float64)
    net = base.with_dropout(dropout_p) if dropout_p > 0 else base

    def one_pass(r):
        xp, warps = _perturb(x, spec, r)
        out = _stochastic_base(net, xp, r) if dropout_p > 0 else base_forward(base, xp)
        valid = np.ones(out.shape, dtype=bool)
        for i, warp in enumerate(warps):
            if warp is not None:
                out[i], valid[i] = unshift_output(out[i], *warp)
        return out, valid

    return _accumulate(_run_passes(one_pass, spec.passes, rng, workers), x.shape)


def mc_dropout(base, x, passes=20, p=0.2, rng=None, workers=None):
    """MC-dropout statistics: ``passes`` forwards with a dropout site before the last layer."""
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout p must lie in [0, 1)")
    if passes < 1:
        raise ValueError("need at least one pass")
    x = np.asarray(x, dtype=np.float64)
    net = base.with_dropout(p)

    def one_pass(r):
        return _stochastic_base(net, x, r), np.ones(x.shape, dtype=bool)

    return _accumulate(_run_passes(one_pass, passes, rng, workers), x.shape)


def constant_uncertainty(shape, c):
    if c < 0:
        raise ValueError("constant uncertainty must be non-negative")
    return np.full(shape, float(c))


def save_pass_stats(outdir, stats):
    """Write ``mean.tnsr``, ``var.tnsr`` and ``mask.tnsr`` (1.0 where any pass was valid)."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    save_tensor(outdir / "mean.tnsr", stats.mean)
    save_tensor(outdir / "var.tnsr", stats.var)
    save_tensor(outdir / "mask.tnsr", stats.mask.astype(np.float64))
