"""Small reverse-mode network toolkit on float64 numpy arrays.

Image activations are channels-last, ``(batch, height, width, channels)``;
dense layers flatten everything after the batch axis. A forward pass returns the
output together with a :class:`Tape` holding each layer's cache, and
:func:`backward` replays it in reverse.
"""

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

CHECK_FINITE = True

LAYER_KINDS = ("dense", "conv3x3", "conv1x1", "leaky_relu", "softplus", "exp", "dropout")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    n_in: int = 0
    n_out: int = 0
    slope: float = 0.1
    p: float = 0.0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("dense", "conv3x3", "conv1x1") and (self.n_in < 1 or self.n_out < 1):
            raise ValueError(f"{self.kind} needs positive n_in/n_out")
        if self.kind == "dropout" and not 0.0 <= self.p < 1.0:
            raise ValueError("dropout p must lie in [0, 1)")


def dense(n_in, n_out):
    return LayerSpec("dense", n_in, n_out)


def conv3x3(n_in, n_out):
    return LayerSpec("conv3x3", n_in, n_out)


def conv1x1(n_in, n_out):
    return LayerSpec("conv1x1", n_in, n_out)


def leaky_relu(slope=0.1):
    return LayerSpec("leaky_relu", slope=slope)


def softplus():
    return LayerSpec("softplus")


def exp():
    return LayerSpec("exp")


def dropout(p):
    return LayerSpec("dropout", p=p)


def _param_shapes(spec):
    if spec.kind == "dense":
        return [(spec.n_in, spec.n_out), (spec.n_out,)]
    if spec.kind == "conv3x3":
        return [(3, 3, spec.n_in, spec.n_out), (spec.n_out,)]
    if spec.kind == "conv1x1":
        return [(spec.n_in, spec.n_out), (spec.n_out,)]
    return []


def _fan_in(spec):
    return spec.n_in * (9 if spec.kind == "conv3x3" else 1)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _conv3x3_cols(x):
    # (b, h, w, 9c) with taps ordered (di, dj, channel), matching HWIO weights
    _, h, w, _ = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)), mode="edge")
    return np.concatenate([xp[:, di:di + h, dj:dj + w, :] for di in range(3) for dj in range(3)], axis=-1)


def _fold_edge_pad(gp):
    # adjoint of replicate padding by one pixel on each spatial side
    g = gp.copy()
    g[:, 1] += g[:, 0]
    g[:, -2] += g[:, -1]
    g = g[:, 1:-1]
    g[:, :, 1] += g[:, :, 0]
    g[:, :, -2] += g[:, :, -1]
    return g[:, :, 1:-1]


def _layer_forward(spec, params, x, stochastic, rng):
    k = spec.kind
    if k == "dense":
        w, b = params
        xf = x.reshape(x.shape[0], -1)
        if xf.shape[1] != spec.n_in:
            raise ValueError(f"dense expects {spec.n_in} features, got {xf.shape[1]}")
        return xf @ w + b, (x.shape, xf)
    if k == "conv3x3":
        w, b = params
        if x.ndim != 4 or x.shape[3] != spec.n_in:
            raise ValueError(f"conv3x3 expects (B, H, W, {spec.n_in}), got {x.shape}")
        cols = _conv3x3_cols(x)
        return cols @ w.reshape(-1, spec.n_out) + b, (x.shape, cols)
    if k == "conv1x1":
        w, b = params
        if x.ndim != 4 or x.shape[3] != spec.n_in:
            raise ValueError(f"conv1x1 expects (B, H, W, {spec.n_in}), got {x.shape}")
        return x @ w + b, x
    if k == "leaky_relu":
        return np.where(x > 0, x, spec.slope * x), x > 0
    if k == "softplus":
        return _softplus(x), x
    if k == "exp":
        y = np.exp(x)
        return y, y
    if k == "dropout":
        if not stochastic or spec.p == 0.0:
            return x, None
        mask = (rng.random(x.shape) >= spec.p) / (1.0 - spec.p)
        return x * mask, mask
    raise AssertionError(k)


def _layer_backward(spec, params, cache, gy):
    k = spec.kind
    if k == "dense":
        w, _ = params
        xshape, xf = cache
        return (gy @ w.T).reshape(xshape), [xf.T @ gy, gy.sum(axis=0)]
    if k == "conv3x3":
        w, _ = params
        xshape, cols = cache
        bs, h, wd, c = xshape
        g2 = gy.reshape(-1, spec.n_out)
        gw = (cols.reshape(-1, 9 * c).T @ g2).reshape(w.shape)
        gcols = gy @ w.reshape(-1, spec.n_out).T  # b, h, w, 9c
        gp = np.zeros((bs, h + 2, wd + 2, c))
        for k9 in range(9):
            di, dj = divmod(k9, 3)
            gp[:, di:di + h, dj:dj + wd, :] += gcols[..., k9 * c:(k9 + 1) * c]
        return _fold_edge_pad(gp), [gw, g2.sum(axis=0)]
    if k == "conv1x1":
        w, _ = params
        x = cache
        gw = x.reshape(-1, spec.n_in).T @ gy.reshape(-1, spec.n_out)
        return gy @ w.T, [gw, gy.sum(axis=(0, 1, 2))]
    if k == "leaky_relu":
        return np.where(cache, gy, spec.slope * gy), []
    if k == "softplus":
        return gy * _sigmoid(cache), []
    if k == "exp":
        return gy * cache, []
    if k == "dropout":
        return (gy if cache is None else gy * cache), []
    raise AssertionError(k)


class Network:
    """A sequential stack of layers with owned parameter arrays.

    ``params[i]`` is the list of arrays for layer ``i`` (empty for
    parameter-free layers). ``version`` increments whenever an optimizer
    touches the weights, which invalidates outstanding tapes.
    """

    def __init__(self, specs, params=None, rng=None):
        self.specs = list(specs)
        _check_chain(self.specs)
        if params is None:
            rng = np.random.default_rng() if rng is None else rng
            params = []
            for spec in self.specs:
                shapes = _param_shapes(spec)
                if shapes:
                    limit = np.sqrt(6.0 / _fan_in(spec))
                    params.append([rng.uniform(-limit, limit, size=shapes[0]), np.zeros(shapes[1])])
                else:
                    params.append([])
        self.params = [[np.asarray(p, dtype=np.float64) for p in ps] for ps in params]
        for spec, ps in zip(self.specs, self.params):
            if [p.shape for p in ps] != _param_shapes(spec):
                raise ValueError(f"parameter shapes do not match {spec}")
        self.version = 0

    def __repr__(self):
        return f"Network({[s.kind for s in self.specs]})"

    def flat_params(self):
        return [p for ps in self.params for p in ps]

    def n_params(self):
        return sum(p.size for p in self.flat_params())

    def copy(self):
        return Network(self.specs, [[p.copy() for p in ps] for ps in self.params])

    def digest(self):
        h = hashlib.sha256()
        for p in self.flat_params():
            h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
        return h.hexdigest()

    def with_dropout(self, p, before=-1):
        """Insert a dropout site before layer ``before`` sharing this network's weights."""
        idx = before % len(self.specs)
        specs = self.specs[:idx] + [dropout(p)] + self.specs[idx:]
        net = Network.__new__(Network)
        net.specs = specs
        net.params = self.params[:idx] + [[]] + self.params[idx:]
        net.version = 0
        return net


def _check_chain(specs):
    # dense layers flatten their input, so a conv -> dense hand-off is checked at run time
    width, prev = None, None
    for spec in specs:
        if spec.kind in ("dense", "conv3x3", "conv1x1"):
            flattening = spec.kind == "dense" and prev not in (None, "dense")
            if width is not None and not flattening and width != spec.n_in:
                raise ValueError(f"layer {spec} expects {spec.n_in} inputs but previous layer gives {width}")
            width, prev = spec.n_out, spec.kind


@dataclass
class Tape:
    net: Network
    version: int
    caches: list
    activations: list  # output of each layer, in order


def forward(net, x, mode="eval", rng=None, mc_dropout=False):
    """Run ``net`` on ``x``.

    Dropout masks are drawn only in ``"train"`` mode or with ``mc_dropout``;
    they then require ``rng``.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    stochastic = mode == "train" or mc_dropout
    if stochastic and rng is None and any(s.kind == "dropout" and s.p > 0 for s in net.specs):
        raise ValueError("stochastic dropout needs an rng")
    h = np.asarray(x, dtype=np.float64)
    caches, acts = [], []
    for spec, ps in zip(net.specs, net.params):
        h, cache = _layer_forward(spec, ps, h, stochastic, rng)
        if CHECK_FINITE and not np.all(np.isfinite(h)):
            raise FloatingPointError(f"non-finite activation after {spec.kind}")
        caches.append(cache)
        acts.append(h)
    return h, Tape(net, net.version, caches, acts)


def backward(tape, grad_out):
    """Return ``(param_grads, grad_in)`` where ``param_grads`` mirrors ``net.params``."""
    net = tape.net
    if tape.version != net.version or len(tape.caches) != len(net.specs):
        raise RuntimeError("tape is stale: network changed since the forward pass")
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != tape.activations[-1].shape:
        raise ValueError(f"grad_out shape {g.shape} != output shape {tape.activations[-1].shape}")
    grads = [None] * len(net.specs)
    for i in range(len(net.specs) - 1, -1, -1):
        g, grads[i] = _layer_backward(net.specs[i], net.params[i], tape.caches[i], g)
    return grads, g


def predict(net, x):
    return forward(net, x, "eval")[0]


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state):
    """One bias-corrected Adam update, applied in place to ``params``.

    ``params`` and ``grads`` are flat lists of arrays with matching shapes.
    Returns ``(params, state)``.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or m.shape != p.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def flat_grads(grads):
    return [g for gs in grads for g in gs]


def _kink_pattern(tape):
    return [c for spec, c in zip(tape.net.specs, tape.caches) if spec.kind == "leaky_relu"]


def finite_diff_check(net, x, h=1e-4, floor=1e-3, return_skipped=False):
    """Max relative error between backprop and central differences.

    The objective is the sum of the eval-mode outputs. Relative errors are
    taken against ``max(|analytic|, |numeric|, floor)``. Elements whose
    +-h perturbation flips a leaky-ReLU unit across its kink are skipped,
    since the central difference is not a derivative estimate there.
    """
    y, tape = forward(net, x)
    grads, _ = backward(tape, np.ones_like(y))
    pattern = _kink_pattern(tape)
    worst, skipped = 0.0, 0
    for p, g in zip(net.flat_params(), flat_grads(grads)):
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = p[idx]
            p[idx] = old + h
            yp, tp = forward(net, x)
            p[idx] = old - h
            ym, tm = forward(net, x)
            p[idx] = old
            same = all(np.array_equal(a, b) and np.array_equal(a, c)
                       for a, b, c in zip(pattern, _kink_pattern(tp), _kink_pattern(tm)))
            if not same:
                skipped += 1
                continue
            num = (yp.sum() - ym.sum()) / (2 * h)
            denom = max(abs(g[idx]), abs(num), floor)
            worst = max(worst, abs(g[idx] - num) / denom)
    return (worst, skipped) if return_skipped else worst


# -- checkpoint file ---------------------------------------------------------

CKPT_MAGIC = b"IDCAP1"


@dataclass
class Checkpoint:
    net: Network
    seed: int = 0
    step: int = 0
    adam: AdamState | None = None
    meta: dict = field(default_factory=dict)


def _write_block(f, arr):
    f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def save_checkpoint(path, ckpt):
    net = ckpt.net
    header = {
        "layers": [asdict(s) for s in net.specs],
        "shapes": [list(p.shape) for p in net.flat_params()],
        "seed": int(ckpt.seed),
        "step": int(ckpt.step),
        "adam": None,
        "meta": ckpt.meta,
    }
    moments = []
    if ckpt.adam is not None:
        a = ckpt.adam
        header["adam"] = {"lr": a.lr, "beta1": a.beta1, "beta2": a.beta2, "eps": a.eps,
                          "step": a.step, "has_moments": bool(a.m)}
        moments = list(a.m) + list(a.v)
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for p in net.flat_params():
            _write_block(f, p)
        for m in moments:
            _write_block(f, m)


def load_checkpoint(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:6] != CKPT_MAGIC:
        raise ValueError(f"{path}: not an IDCAP1 checkpoint")
    if len(data) < 10:
        raise ValueError(f"{path}: truncated header")
    (n,) = struct.unpack_from("<I", data, 6)
    if 10 + n > len(data):
        raise ValueError(f"{path}: truncated header")
    header = json.loads(data[10:10 + n])
    pos = 10 + n

    def take(shape):
        nonlocal pos
        count = int(np.prod(shape)) if shape else 1
        end = pos + 8 * count
        if end > len(data):
            raise ValueError(f"{path}: truncated weight block")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos = end
        return arr

    specs = [LayerSpec(**d) for d in header["layers"]]
    flat = [take(tuple(s)) for s in header["shapes"]]
    params, i = [], 0
    for spec in specs:
        k = len(_param_shapes(spec))
        params.append(flat[i:i + k])
        i += k
    net = Network(specs, params)
    adam = None
    if header["adam"] is not None:
        a = dict(header["adam"])
        has = a.pop("has_moments")
        adam = AdamState(**a)
        if has:
            adam.m = [take(p.shape) for p in flat]
            adam.v = [take(p.shape) for p in flat]
    if pos != len(data):
        raise ValueError(f"{path}: trailing bytes")
    return Checkpoint(net, header["seed"], header["step"], adam, header.get("meta", {}))
