"""Frozen base model, identity cap and from-scratch uncertainty models.

The base network maps a degraded image ``x`` to a point estimate ``y_hat``
and is trained once with MSE. The cap never sees ``x``: it takes ``y_hat``
and predicts a per-pixel generalized Gaussian ``(y_tilde, alpha, beta)``,
trained with a weighted identity term ``|y_tilde - y_hat|^2`` plus the GGD
negative log-likelihood of the clean target. The identity weight starts at
10 and decays exponentially per epoch.
"""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import ggd, nn
from .seeding import make_rng

log = logging.getLogger(__name__)

ALPHA_MIN, ALPHA_MAX = 1e-4, 1e4
BETA_MIN, BETA_MAX = 0.2, 10.0
VAR_MIN, VAR_MAX = 1e-6, 1e4


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class PredictiveMap:
    y_tilde: np.ndarray
    alpha: np.ndarray | None
    beta: np.ndarray | None
    variance: np.ndarray


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 8
    lr: float = 1e-3
    lambda0: float = 10.0
    gamma: float = 0.85
    seed: int = 0
    width: int = 16
    dropout_p: float = 0.2
    lambda_fixed: float | None = None  # overrides the annealing schedule when set

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("lambda decay gamma must lie in (0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class EpochLog:
    epoch: int
    lam: float
    loss: float
    identity_term: float
    nll_term: float


@dataclass
class TrainResult:
    ckpt: nn.Checkpoint
    history: list = field(default_factory=list)


# -- architectures -----------------------------------------------------------

def _trunk(n_in, width):
    return [nn.conv3x3(n_in, width), nn.leaky_relu(0.1),
            nn.conv3x3(width, width), nn.leaky_relu(0.1),
            nn.conv3x3(width, width), nn.leaky_relu(0.1)]


def base_net(rng, width=16):
    return nn.Network(_trunk(1, width) + [nn.conv3x3(width, 1)], rng=rng)


def cap_net(rng, width=16):
    # outputs: y_tilde, log alpha, beta pre-activation
    return nn.Network(_trunk(1 + N_POS, width) + [nn.conv1x1(width, 3)], rng=rng)


def scratch_net(rng, head, width=16):
    n_out = {"gaussian": 2, "ggd": 3}[head]
    return nn.Network(_trunk(1 + N_POS, width) + [nn.conv1x1(width, n_out)], rng=rng)


def autoencoder_net(rng, n_pixels=256, bottleneck=32):
    return nn.Network([nn.dense(n_pixels, bottleneck), nn.leaky_relu(0.1), nn.dense(bottleneck, n_pixels)], rng=rng)


# -- layout ------------------------------------------------------------------
# Public images are (N, 1, H, W); networks run channels-last (N, H, W, C).

def to_net(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1] != 1:
        raise ValueError(f"expected (N, 1, H, W) images, got {x.shape}")
    return x.reshape(x.shape[0], x.shape[2], x.shape[3], 1)


def from_net(out, channel=0):
    return out[..., channel][:, None]


# Replicate padding hides where the image border is, yet the base's error
# roughly doubles there. Uncertainty networks get two fixed channels holding
# exp(-distance to the nearest row/column edge) so they can see it.
N_POS = 2


def position_channels(h, w):
    dr = np.minimum(np.arange(h), h - 1 - np.arange(h))
    dc = np.minimum(np.arange(w), w - 1 - np.arange(w))
    rows = np.broadcast_to(np.exp(-dr)[:, None], (h, w))
    cols = np.broadcast_to(np.exp(-dc)[None, :], (h, w))
    return np.stack([rows, cols], axis=-1)


def with_position(x):
    """``(N, 1, H, W)`` images -> ``(N, H, W, 1 + N_POS)`` network input."""
    t = to_net(x)
    n, h, w, _ = t.shape
    pos = np.broadcast_to(position_channels(h, w), (n, h, w, N_POS))
    return np.concatenate([t, pos], axis=-1)


# -- heads -------------------------------------------------------------------

def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def ggd_head(raw):
    """Map raw ``(B, H, W, 3)`` outputs to a :class:`PredictiveMap` with clamped alpha/beta."""
    mu = from_net(raw, 0)
    alpha = np.clip(np.exp(np.clip(from_net(raw, 1), -50, 50)), ALPHA_MIN, ALPHA_MAX)
    beta = np.minimum(BETA_MIN + _softplus(from_net(raw, 2)), BETA_MAX)
    return PredictiveMap(mu, alpha, beta, ggd.variance(alpha, beta))


def gaussian_head(raw):
    mu = from_net(raw, 0)
    var = np.clip(np.exp(np.clip(from_net(raw, 1), -50, 50)), VAR_MIN, VAR_MAX)
    return PredictiveMap(mu, None, None, var)


def base_forward(base, x):
    """Point estimate of the frozen base (eval mode, no dropout)."""
    return from_net(nn.predict(base, to_net(x)))


def cap_forward(cap, y_hat):
    """Identity cap on the base output only: ``y_hat -> (y_tilde, alpha, beta, variance)``."""
    return ggd_head(nn.predict(cap, with_position(y_hat)))


def scratch_forward(net, x, head):
    raw = nn.predict(net, with_position(x))
    return ggd_head(raw) if head == "ggd" else gaussian_head(raw)


# -- losses ------------------------------------------------------------------

def gaussian_nll_loss(y_hat, y, sigma2):
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if np.any(sigma2 <= 0):
        raise ValueError("variances must be positive")
    return float(np.mean((y_hat - y) ** 2 / (2 * sigma2) + 0.5 * np.log(sigma2)))


def ggd_nll_loss(pred, y):
    if pred.y_tilde.shape != np.shape(y):
        raise ValueError(f"shape mismatch {pred.y_tilde.shape} vs {np.shape(y)}")
    return float(np.mean(ggd.nll_term(y, pred.y_tilde, pred.alpha, pred.beta)))


def identity_term(pred, y_hat):
    return float(np.mean((pred.y_tilde - y_hat) ** 2))


def cap_loss(pred, y_hat, y, lam):
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return lam * identity_term(pred, y_hat) + ggd_nll_loss(pred, y)


def anneal_lambda(epoch, cfg):
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if cfg.lambda_fixed is not None:
        return float(cfg.lambda_fixed)
    return cfg.lambda0 * cfg.gamma**epoch


def _ggd_raw_grad(raw, pred, y, d_mu_extra):
    """Gradient of mean GGD NLL (+ extra mu gradient) w.r.t. the raw head outputs."""
    n = pred.y_tilde.size
    g = ggd.nll_grad(y, pred.y_tilde, pred.alpha, pred.beta)
    alpha_free = (pred.alpha > ALPHA_MIN) & (pred.alpha < ALPHA_MAX)
    beta_free = pred.beta < BETA_MAX
    out = np.empty_like(raw)
    out[..., 0] = ((g.d_mu + d_mu_extra) / n)[:, 0]
    out[..., 1] = (np.where(alpha_free, g.d_alpha * pred.alpha, 0.0) / n)[:, 0]
    out[..., 2] = (np.where(beta_free, g.d_beta * _sigmoid(from_net(raw, 2)), 0.0) / n)[:, 0]
    return out


def cap_loss_and_grad(raw, y_hat, y, lam):
    """Loss terms and gradient w.r.t. raw cap outputs ``(B, H, W, 3)``."""
    pred = ggd_head(raw)
    ident = identity_term(pred, y_hat)
    nll = ggd_nll_loss(pred, y)
    grad = _ggd_raw_grad(raw, pred, y, lam * 2.0 * (pred.y_tilde - y_hat))
    return lam * ident + nll, ident, nll, grad


def gaussian_loss_and_grad(raw, y):
    pred = gaussian_head(raw)
    n = pred.y_tilde.size
    r = pred.y_tilde - y
    loss = gaussian_nll_loss(pred.y_tilde, y, pred.variance)
    grad = np.empty_like(raw)
    grad[..., 0] = (r / pred.variance / n)[:, 0]
    free = (pred.variance > VAR_MIN) & (pred.variance < VAR_MAX)
    grad[..., 1] = (np.where(free, 0.5 - r**2 / (2 * pred.variance), 0.0) / n)[:, 0]
    return loss, grad


def mse_loss_and_grad(out, y):
    r = out - y
    return float(np.mean(r**2)), 2.0 * r / r.size


# -- training ----------------------------------------------------------------

def _fit(net, inputs, loss_fn, cfg, tag, lam_fn=None, on_epoch=None):
    """Mini-batch Adam loop shared by every role.

    ``loss_fn(out, batch_idx, lam)`` returns ``(loss, identity, nll, grad_out)``.
    ``on_epoch(epoch, net)`` is called before the first epoch (epoch -1 state
    is reported as epoch 0) and after each epoch.
    """
    rng = make_rng(cfg.seed, f"{tag}/batches")
    drop_rng = make_rng(cfg.seed, f"{tag}/dropout")
    state = nn.AdamState(lr=cfg.lr)
    history = []
    n = len(inputs)
    if n == 0:
        raise ValueError("training split is empty")
    if on_epoch is not None:
        on_epoch(-1, net)
    for epoch in range(cfg.epochs):
        lam = lam_fn(epoch) if lam_fn else 0.0
        perm = rng.permutation(n)
        tot = ident_tot = nll_tot = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            out, tape = nn.forward(net, inputs[idx], "train", drop_rng)
            loss, ident, nll, g = loss_fn(out, idx, lam)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"{tag}: non-finite loss at epoch {epoch}")
            grads, _ = nn.backward(tape, g)
            nn.adam_step(net.flat_params(), nn.flat_grads(grads), state)
            net.version += 1
            w = len(idx) / n
            tot += w * loss
            ident_tot += w * ident
            nll_tot += w * nll
        history.append(EpochLog(epoch, lam, tot, ident_tot, nll_tot))
        log.debug("%s epoch %d lambda %.4g loss %.6g", tag, epoch, lam, tot)
        if on_epoch is not None:
            on_epoch(epoch, net)
    return state, history


def train_base(x, y, cfg):
    net = base_net(make_rng(cfg.seed, "base/init"), cfg.width)
    yn = to_net(y)

    def loss_fn(out, idx, lam):
        loss, g = mse_loss_and_grad(out, yn[idx])
        return loss, 0.0, 0.0, g

    state, history = _fit(net, to_net(x), loss_fn, cfg, "base")
    ckpt = nn.Checkpoint(net, cfg.seed, state.step, state, {"role": "base"})
    return TrainResult(ckpt, history)


def train_cap(base, x, y, cfg, on_epoch=None, y_hat=None):
    """Train an identity cap on the outputs of the frozen ``base`` network.

    ``y_hat`` may be supplied precomputed; otherwise it is ``base(x)``.
    The base weights are checked byte-for-byte after training.
    """
    digest = base.digest()
    if y_hat is None:
        y_hat = base_forward(base, x)
    net = cap_net(make_rng(cfg.seed, "cap/init"), cfg.width)

    def loss_fn(out, idx, lam):
        loss, ident, nll, g = cap_loss_and_grad(out, y_hat[idx], y[idx], lam)
        return loss, ident, nll, g

    state, history = _fit(net, with_position(y_hat), loss_fn, cfg, "cap", lambda e: anneal_lambda(e, cfg), on_epoch)
    if base.digest() != digest:
        raise AssertionError("base network was modified while training the cap")
    ckpt = nn.Checkpoint(net, cfg.seed, state.step, state, {"role": "cap", "base_digest": digest})
    return TrainResult(ckpt, history)


def train_scratch(x, y, cfg, head="gaussian", on_epoch=None):
    if head not in ("gaussian", "ggd"):
        raise ValueError(f"unknown head {head!r}")
    net = scratch_net(make_rng(cfg.seed, f"scratch-{head}/init"), head, cfg.width)

    def loss_fn(out, idx, lam):
        if head == "gaussian":
            loss, g = gaussian_loss_and_grad(out, y[idx])
            return loss, 0.0, loss, g
        loss, _, nll, g = cap_loss_and_grad(out, from_net(out, 0), y[idx], 0.0)
        return loss, 0.0, nll, g

    state, history = _fit(net, with_position(x), loss_fn, cfg, f"scratch-{head}", on_epoch=on_epoch)
    ckpt = nn.Checkpoint(net, cfg.seed, state.step, state, {"role": f"scratch-{head}"})
    return TrainResult(ckpt, history)


def train_autoencoder(y_hat, cfg):
    """Plain MSE autoencoder on flattened base outputs (bottleneck 32)."""
    flat = y_hat.reshape(len(y_hat), -1)
    net = autoencoder_net(make_rng(cfg.seed, "ae/init"), flat.shape[1])

    def loss_fn(out, idx, lam):
        loss, g = mse_loss_and_grad(out, flat[idx])
        return loss, 0.0, 0.0, g

    state, history = _fit(net, flat, loss_fn, cfg, "ae")
    return TrainResult(nn.Checkpoint(net, cfg.seed, state.step, state, {"role": "ae"}), history)


LOG_COLUMNS = ("epoch", "lambda", "loss", "identity_term", "nll_term")


def write_train_log(path, history, extra=None):
    extra = extra or {}
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(list(extra) + list(LOG_COLUMNS))
        for h in history:
            wr.writerow([str(v) for v in extra.values()]
                        + [h.epoch, repr(h.lam), repr(h.loss), repr(h.identity_term), repr(h.nll_term)])
