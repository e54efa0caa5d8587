"""Procedural image-restoration datasets and tensor/image file I/O.

Three clean-image families stand in for in-distribution, shifted and
severely shifted data:

* ``A``: sum of three random 2-D sinusoids (1-4 cycles per image), min-max
  rescaled to [0, 1]
* ``B``: 4-8 random convex polygons with random gray levels
* ``C``: i.i.d. uniform noise

Images are ``(1, H, W)`` float64 arrays; datasets stack them as
``(N, 1, H, W)``.
"""

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .seeding import make_rng

FAMILIES = ("A", "B", "C")
DEGRADATIONS = ("gauss_noise", "gauss_blur", "box_mask", "downsample2x_then_upsample")


@dataclass(frozen=True)
class DegradationOp:
    kind: str = "gauss_noise"
    sigma: float = 0.0  # gauss_noise std
    radius: int = 1  # gauss_blur half-width
    sigma_b: float = 1.0  # gauss_blur std
    w: int = 4  # box_mask width
    h: int = 4  # box_mask height

    def __post_init__(self):
        if self.kind not in DEGRADATIONS:
            raise ValueError(f"unknown degradation {self.kind!r}")
        if min(self.sigma, self.radius, self.sigma_b, self.w, self.h) < 0:
            raise ValueError("degradation parameters must be non-negative")


@dataclass(frozen=True)
class DatasetSpec:
    family: str = "A"
    size: int = 16
    count: int = 200
    degradation: DegradationOp = field(default_factory=DegradationOp)
    splits: tuple = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.count < 10:
            raise ValueError("count must be at least 10")
        if len(self.splits) != 3 or min(self.splits) < 0 or abs(sum(self.splits) - 1.0) > 1e-9:
            raise ValueError("split fractions must be three non-negative numbers summing to 1")


@dataclass
class Dataset:
    spec: DatasetSpec
    x: np.ndarray
    y: np.ndarray
    split: np.ndarray  # "train" / "val" / "test" per index

    def indices(self, name):
        return np.flatnonzero(self.split == name)

    def subset(self, name):
        idx = self.indices(name)
        return self.x[idx], self.y[idx]


def _sinusoids(rng, n):
    coords = (np.arange(n) + 0.5) / n
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    img = np.zeros((n, n))
    for _ in range(3):
        freq = rng.uniform(1.0, 4.0)
        theta = rng.uniform(0.0, np.pi)
        phase = rng.uniform(0.0, 2 * np.pi)
        amp = rng.uniform(0.5, 1.0)
        img += amp * np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo) if hi > lo else np.full((n, n), 0.5)


def _polygons(rng, n):
    coords = (np.arange(n) + 0.5) / n
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    img = np.full((n, n), rng.uniform())
    for _ in range(int(rng.integers(4, 9))):
        cx, cy = rng.uniform(0.1, 0.9, size=2)
        radius = rng.uniform(0.15, 0.45)
        angles = np.sort(rng.uniform(0, 2 * np.pi, size=int(rng.integers(3, 8))))
        px = cx + radius * np.cos(angles)
        py = cy + radius * np.sin(angles)
        # vertices on a circle in angular order form a convex polygon;
        # inside = left of every counter-clockwise edge
        inside = np.ones((n, n), dtype=bool)
        for k in range(len(angles)):
            x0, y0 = px[k], py[k]
            x1, y1 = px[(k + 1) % len(angles)], py[(k + 1) % len(angles)]
            inside &= (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0) >= 0
        img[inside] = rng.uniform()
    return img


def gen_clean(spec, index):
    """Clean image ``index`` of ``spec``: a deterministic function of (seed, family, index)."""
    if not 0 <= index < spec.count:
        raise IndexError(f"index {index} outside [0, {spec.count})")
    rng = make_rng(spec.seed, f"clean/{spec.family}/{index}")
    n = spec.size
    if spec.family == "A":
        img = _sinusoids(rng, n)
    elif spec.family == "B":
        img = _polygons(rng, n)
    else:
        img = rng.uniform(size=(n, n))
    return np.clip(img, 0.0, 1.0)[None]


def _gauss_kernel(radius, sigma):
    if sigma == 0 or radius == 0:
        return np.array([1.0])
    t = np.arange(-radius, radius + 1)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def _blur(img, radius, sigma):
    k = _gauss_kernel(radius, sigma)
    r = len(k) // 2
    pad = [(0, 0)] * (img.ndim - 2) + [(r, r), (r, r)]
    p = np.pad(img, pad, mode="edge")
    h, w = img.shape[-2:]
    rows = sum(k[i] * p[..., i:i + h, :] for i in range(len(k)))
    return sum(k[i] * rows[..., :, i:i + w] for i in range(len(k)))


def degrade(y, op, rng):
    """Apply ``op`` to the last two axes of ``y``; the result has ``y``'s shape."""
    y = np.asarray(y, dtype=np.float64)
    h, w = y.shape[-2:]
    if op.kind == "gauss_noise":
        if op.sigma == 0:
            return y.copy()
        return y + op.sigma * rng.standard_normal(y.shape)
    if op.kind == "gauss_blur":
        return _blur(y, int(op.radius), op.sigma_b)
    if op.kind == "box_mask":
        if op.w > w or op.h > h:
            raise ValueError(f"mask {op.w}x{op.h} does not fit a {w}x{h} image")
        top = int(rng.integers(0, h - op.h + 1))
        left = int(rng.integers(0, w - op.w + 1))
        x = y.copy()
        x[..., top:top + op.h, left:left + op.w] = 0.0
        return x
    # downsample2x_then_upsample: 2x2 block mean, nearest-neighbour back up
    if h % 2 or w % 2:
        raise ValueError("downsampling needs even image sides")
    small = y.reshape(*y.shape[:-2], h // 2, 2, w // 2, 2).mean(axis=(-3, -1))
    return np.repeat(np.repeat(small, 2, axis=-2), 2, axis=-1)


def split_assignment(spec):
    """Partition ``range(count)`` into train/val/test by the spec's fractions."""
    perm = make_rng(spec.seed, "split").permutation(spec.count)
    n_train = int(round(spec.splits[0] * spec.count))
    n_val = int(round(spec.splits[1] * spec.count))
    labels = np.empty(spec.count, dtype=object)
    labels[perm[:n_train]] = "train"
    labels[perm[n_train:n_train + n_val]] = "val"
    labels[perm[n_train + n_val:]] = "test"
    return labels.astype(str)


def make_dataset(spec):
    ys = np.stack([gen_clean(spec, i) for i in range(spec.count)])
    xs = np.stack([degrade(ys[i], spec.degradation, make_rng(spec.seed, f"degrade/{spec.family}/{i}"))
                   for i in range(spec.count)])
    return Dataset(spec, xs, ys, split_assignment(spec))


# -- files -------------------------------------------------------------------

TENSOR_MAGIC = b"TNSR1"
_MAX_ELEMENTS = 1 << 31


def save_tensor(path, t):
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0 or t.size == 0:
        raise ValueError("tensor must have a non-empty shape")
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
        f.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def load_tensor(path):
    data = Path(path).read_bytes()
    if data[:5] != TENSOR_MAGIC:
        raise ValueError(f"{path}: bad magic")
    if len(data) < 9:
        raise ValueError(f"{path}: truncated header")
    (rank,) = struct.unpack_from("<I", data, 5)
    if rank == 0:
        raise ValueError(f"{path}: empty shape")
    if 9 + 4 * rank > len(data):
        raise ValueError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", data, 9)
    count = 1
    for d in dims:
        count *= d
    if count == 0 or count > _MAX_ELEMENTS:
        raise ValueError(f"{path}: shape {dims} out of range")
    offset = 9 + 4 * rank
    if len(data) != offset + 8 * count:
        raise ValueError(f"{path}: payload size does not match shape {dims}")
    return np.frombuffer(data, dtype="<f8", offset=offset).reshape(dims).astype(np.float64)


def export_pgm(path, t):
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 3:
        if t.shape[0] != 1:
            raise ValueError(f"PGM export needs one channel, got {t.shape[0]}")
        t = t[0]
    if t.ndim != 2:
        raise ValueError(f"PGM export needs a 1xHxW image, got shape {t.shape}")
    pix = np.floor(np.clip(t, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    h, w = pix.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(pix.tobytes())


def read_pgm(path):
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5" or int(parts[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit P5 PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], dtype=np.uint8, count=w * h).reshape(h, w)


MANIFEST_COLUMNS = ("index", "split", "family", "path_x", "path_y")


def write_dataset(ds, outdir):
    """Write every (x, y) pair as tensor files plus ``manifest.csv``; return the manifest path."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(ds.spec.count):
        px = f"x_{ds.spec.family}_{i:05d}.tnsr"
        py = f"y_{ds.spec.family}_{i:05d}.tnsr"
        save_tensor(outdir / px, ds.x[i])
        save_tensor(outdir / py, ds.y[i])
        rows.append((i, ds.split[i], ds.spec.family, px, py))
    manifest = outdir / "manifest.csv"
    with open(manifest, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(MANIFEST_COLUMNS)
        wr.writerows(rows)
    return manifest


def read_manifest(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
