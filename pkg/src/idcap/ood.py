"""Out-of-distribution scores and ROC analysis.

Three detectors, all with "higher score = more out-of-distribution":

* feature distance: squared L2 distance of the base network's penultimate
  conv activations to their mean over in-distribution validation images
* autoencoder distance: the same, on the bottleneck of an autoencoder
  trained on in-distribution base outputs
* mean uncertainty: the image-average of the cap's variance map
"""

import csv

import numpy as np

from . import nn
from .models import base_forward, cap_forward, to_net

IN, OUT = "in", "out"


def _conv_indices(net):
    return [i for i, s in enumerate(net.specs) if s.kind in ("conv3x3", "conv1x1")]


def base_features(base, x):
    """Penultimate conv activations of the base, flattened to ``(N, D)``."""
    convs = _conv_indices(base)
    if len(convs) < 2:
        raise ValueError("base needs at least two conv layers")
    _, tape = nn.forward(base, to_net(x), "eval")
    f = tape.activations[convs[-2]]
    return f.reshape(len(f), -1)


def ae_bottleneck(ae, base, x):
    """Bottleneck code (after the first dense layer's activation) of base outputs."""
    flat = base_forward(base, x).reshape(len(x), -1)
    _, tape = nn.forward(ae, flat, "eval")
    return tape.activations[1]


def ae_reconstruction_mse(ae, base, x):
    flat = base_forward(base, x).reshape(len(x), -1)
    return np.mean((nn.predict(ae, flat) - flat) ** 2, axis=1)


def feature_mean(features):
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or len(f) == 0:
        raise ValueError("need a non-empty (N, D) feature array")
    return f.mean(axis=0)


def feature_distance_score(features, mean):
    """Squared L2 distance of each row of ``features`` to ``mean``."""
    f = np.asarray(features, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    if f.ndim != 2 or f.shape[1:] != mean.shape:
        raise ValueError(f"features {f.shape} do not match mean {mean.shape}")
    return np.sum((f - mean) ** 2, axis=1)


def mean_uncertainty_score(base, cap, x):
    """Per-image mean of the cap's variance map on ``base(x)``."""
    var = cap_forward(cap, base_forward(base, x)).variance
    return var.reshape(len(var), -1).mean(axis=1)


def roc_curve(scores, labels):
    """ROC points for a descending threshold sweep; equal scores form one step.

    ``labels`` are booleans (True = out-of-distribution) or ``"in"``/``"out"``.
    Returns ``(fpr, tpr)`` starting at (0, 0) and ending at (1, 1).
    """
    s = np.asarray(scores, dtype=np.float64)
    y = _as_bool(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be equal-length 1-D sequences")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both in- and out-of-distribution samples")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # last index of each group of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[ends]
    fp = np.cumsum(~y)[ends]
    fpr = np.r_[0.0, fp / n_neg]
    tpr = np.r_[0.0, tp / n_pos]
    return fpr, tpr


def auroc(fpr, tpr):
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def roc_auroc(scores, labels):
    fpr, tpr = roc_curve(scores, labels)
    return (fpr, tpr), auroc(fpr, tpr)


def _as_bool(labels):
    arr = np.asarray(labels)
    if arr.dtype.kind in "US":
        bad = set(arr.tolist()) - {IN, OUT}
        if bad:
            raise ValueError(f"labels must be 'in' or 'out', got {sorted(bad)}")
        return arr == OUT
    return arr.astype(bool)


def write_scores(path, rows, extra=None):
    """Rows of ``(id, detector, score, label)``; ``extra`` columns prefix each row."""
    extra = extra or {}
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(list(extra) + ["id", "detector", "score", "label"])
        for sid, det, score, label in rows:
            wr.writerow([str(v) for v in extra.values()] + [sid, det, repr(float(score)), label])


def write_roc(path, fpr, tpr, extra=None):
    extra = extra or {}
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(list(extra) + ["fpr", "tpr"])
        for a, b in zip(fpr, tpr):
            wr.writerow([str(v) for v in extra.values()] + [repr(float(a)), repr(float(b))])
