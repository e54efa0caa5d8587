"""Reconstruction and calibration metrics, plus variance-scaling recalibration.

Calibration metrics treat every pixel as one sample: ``sq_errors`` holds
per-pixel squared residuals and ``variances`` the matching predicted
variances, in any (equal) shape.
"""

import csv
import math
from dataclasses import asdict, dataclass, fields

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import gammaincinv

from . import ggd

SSIM_WINDOW = 8


def psnr(a, b, peak=1.0):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(peak**2 / mse))


def ssim(a, b, window=SSIM_WINDOW, peak=1.0):
    """Mean SSIM over all ``window x window`` patches (stride 1, uniform weights).

    Leading axes are treated as a batch of single-channel images; the result
    averages over every window of every image. Window statistics use the
    population (1/n) normalization.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim < 2 or min(a.shape[-2:]) < window:
        raise ValueError(f"image {a.shape[-2:]} smaller than the {window}x{window} window")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    wa = sliding_window_view(a, (window, window), axis=(-2, -1))
    wb = sliding_window_view(b, (window, window), axis=(-2, -1))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = wa.var(axis=(-2, -1))
    var_b = wb.var(axis=(-2, -1))
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass(frozen=True)
class BinStats:
    index: int
    lo: float
    hi: float
    count: int
    err: float
    uncer: float


def uce(sq_errors, variances, n_bins=100):
    """Uncertainty calibration error and per-bin statistics.

    Bins split ``[min(variances), max(variances)]`` into ``n_bins`` equal
    intervals; empty bins contribute nothing. If every variance is equal all
    samples land in the first bin.
    """
    e = np.asarray(sq_errors, dtype=np.float64).ravel()
    v = np.asarray(variances, dtype=np.float64).ravel()
    if e.size == 0:
        raise ValueError("uce needs at least one sample")
    if e.size != v.size:
        raise ValueError("sq_errors and variances differ in size")
    if np.any(v < 0):
        raise ValueError("variances must be non-negative")
    if n_bins < 1:
        raise ValueError("n_bins must be at least 1")
    lo, hi = float(v.min()), float(v.max())
    width = (hi - lo) / n_bins
    if hi > lo:
        idx = np.minimum(((v - lo) / (hi - lo) * n_bins).astype(np.int64), n_bins - 1)
    else:
        idx = np.zeros(v.size, dtype=np.int64)
    counts = np.bincount(idx, minlength=n_bins)
    err_sum = np.bincount(idx, weights=e, minlength=n_bins)
    unc_sum = np.bincount(idx, weights=v, minlength=n_bins)
    bins = []
    total = 0.0
    for m in range(n_bins):
        n = int(counts[m])
        err = err_sum[m] / n if n else 0.0
        unc = unc_sum[m] / n if n else 0.0
        total += n / e.size * abs(err - unc)
        bins.append(BinStats(m, lo + m * width, lo + (m + 1) * width, n, float(err), float(unc)))
    return float(total), bins


def pearson_corr(a, b):
    """Pearson correlation; NaN when either input has zero variance."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size or a.size < 2:
        raise ValueError("pearson_corr needs two equal-length inputs with N >= 2")
    if a.min() == a.max() or b.min() == b.max():
        return math.nan  # the mean of a constant array may be off by an ulp
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt(np.dot(da, da)), np.sqrt(np.dot(db, db))
    if sa == 0 or sb == 0:
        return math.nan
    return float(np.clip(np.dot(da, db) / (sa * sb), -1.0, 1.0))


DEFAULT_LEVELS = tuple(np.round(np.arange(1, 10) / 10, 1))


def ggd_central_halfwidth(alpha, beta, p):
    """Half-width of the central ``p`` interval of a zero-centred GGD."""
    beta = np.asarray(beta, dtype=np.float64)
    return np.asarray(alpha) * gammaincinv(1.0 / beta, p) ** (1.0 / beta)


def ece_quantile(residuals, pred, levels=DEFAULT_LEVELS):
    """Mean |empirical coverage - p| of the central ``p`` intervals of each pixel's GGD.

    ``residuals`` are ``y - y_tilde``; ``pred`` supplies ``alpha`` and ``beta``.
    """
    r = np.abs(np.asarray(residuals, dtype=np.float64))
    gaps = []
    for p in levels:
        if not 0.0 < p < 1.0:
            raise ValueError(f"coverage level {p} outside (0, 1)")
        covered = r <= ggd_central_halfwidth(pred.alpha, pred.beta, p)
        gaps.append(abs(covered.mean() - p))
    return float(np.mean(gaps))


def sharpness(variances):
    v = np.asarray(variances, dtype=np.float64)
    if v.size == 0:
        raise ValueError("sharpness needs at least one sample")
    return float(v.mean())


def gaussian_nll(y_hat, y, sigma2):
    """Mean of ``(y_hat - y)^2 / (2 sigma2) + log(sigma2) / 2``."""
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if np.any(sigma2 <= 0):
        raise ValueError("variances must be positive")
    r2 = (np.asarray(y_hat) - np.asarray(y)) ** 2
    return float(np.mean(r2 / (2 * sigma2) + 0.5 * np.log(sigma2)))


def nll_eval(pred, y):
    """Mean per-pixel NLL and the convention it follows.

    Predictions with ``alpha``/``beta`` use the three-term GGD loss (no log 2);
    Gaussian predictions (``beta is None``) use the Gaussian NLL without the
    log(2 pi)/2 constant.
    """
    if getattr(pred, "beta", None) is None:
        return gaussian_nll(pred.y_tilde, y, pred.variance), "gaussian-no-const"
    return float(np.mean(ggd.nll_term(y, pred.y_tilde, pred.alpha, pred.beta))), "ggd-no-ln2"


def variance_scaling_objective(s, sq_errors, sigmas2):
    """Gaussian NLL of the residuals under variances ``s^2 sigma^2`` (constants dropped)."""
    z = np.sum(np.asarray(sq_errors) / np.asarray(sigmas2))
    return np.size(sq_errors) * np.log(s) + z / (2.0 * np.asarray(s) ** 2)


def variance_scaling_fit(sq_errors, sigmas2):
    """Closed-form minimiser ``s* = sqrt(mean(e^2 / sigma^2))`` of the scaling objective."""
    e2 = np.asarray(sq_errors, dtype=np.float64).ravel()
    s2 = np.asarray(sigmas2, dtype=np.float64).ravel()
    if e2.size == 0 or e2.size != s2.size:
        raise ValueError("need equal, non-empty error and variance arrays")
    if np.any(s2 <= 0):
        raise ValueError("variances must be positive")
    return float(np.sqrt(np.mean(e2 / s2)))


def apply_variance_scaling(variances, s):
    return np.asarray(variances) * s**2


@dataclass
class CalibrationReport:
    method: str
    split: str
    psnr: float
    ssim: float
    uce: float
    c_coeff: float
    ece: float
    sharpness: float
    nll: float
    n_pixels: int
    n_bins: int
    nll_convention: str = ""
    ssim_window: int = SSIM_WINDOW

    @classmethod
    def columns(cls):
        return [f.name for f in fields(cls)]


def evaluate(method, split, point, y, variances, pred=None, n_bins=100):
    """Build a :class:`CalibrationReport` for a point estimate and its variance map.

    ``pred`` (a GGD or Gaussian predictive map) enables ECE and NLL; they are
    NaN otherwise.
    """
    point = np.asarray(point)
    y = np.asarray(y)
    sq = (point - y) ** 2
    u, _ = uce(sq, variances, n_bins)
    ece, nll, conv = math.nan, math.nan, ""
    if pred is not None:
        nll, conv = nll_eval(pred, y)
        if getattr(pred, "beta", None) is not None:
            ece = ece_quantile(y - pred.y_tilde, pred)
        else:
            # Gaussian = GGD with beta 2, alpha = sqrt(2 sigma^2)
            ece = ece_quantile(y - pred.y_tilde, _GaussAsGGD(pred.variance))
    return CalibrationReport(
        method=method, split=split, psnr=psnr(point, y), ssim=ssim(point, y),
        uce=u, c_coeff=pearson_corr(sq, variances), ece=ece, sharpness=sharpness(variances),
        nll=nll, n_pixels=int(sq.size), n_bins=n_bins, nll_convention=conv,
    )


class _GaussAsGGD:
    def __init__(self, variance):
        self.alpha = np.sqrt(2.0 * np.asarray(variance))
        self.beta = np.full_like(self.alpha, 2.0)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_reports(path, reports, extra=None):
    """Write reports as CSV; ``extra`` columns (e.g. config hash, seed) prefix every row."""
    extra = extra or {}
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(list(extra) + CalibrationReport.columns())
        for r in reports:
            d = asdict(r)
            wr.writerow([_fmt(v) for v in extra.values()] + [_fmt(d[c]) for c in CalibrationReport.columns()])


def write_bins(path, bins):
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["bin", "lo", "hi", "count", "err", "uncer"])
        for b in bins:
            wr.writerow([b.index, repr(b.lo), repr(b.hi), b.count, repr(b.err), repr(b.uncer)])
