from pathlib import Path

import numpy as np
import pytest
from scipy import stats
from scipy.cluster.vq import kmeans2

from idcap import nn
from idcap.data import (
    DatasetSpec,
    DegradationOp,
    degrade,
    export_pgm,
    gen_clean,
    load_tensor,
    make_dataset,
    read_manifest,
    read_pgm,
    save_tensor,
    split_assignment,
    write_dataset,
)

GOLDEN = Path(__file__).parent / "golden"


@pytest.mark.parametrize("family", ["A", "B", "C"])
def test_gen_clean_deterministic_and_in_range(family):
    spec = DatasetSpec(family=family, count=20, seed=3)
    a, b = gen_clean(spec, 7), gen_clean(spec, 7)
    assert a.shape == (1, 16, 16)
    np.testing.assert_array_equal(a, b)
    assert a.min() >= 0.0 and a.max() <= 1.0
    assert not np.array_equal(a, gen_clean(spec, 8))


def test_family_c_is_uniform():
    img = gen_clean(DatasetSpec(family="C", size=64, count=10, seed=1), 0)
    assert stats.kstest(img.ravel(), "uniform").statistic < 0.05


def test_family_separability():
    feats, labels = [], []
    for fam in ("A", "C"):
        spec = DatasetSpec(family=fam, count=100, seed=5)
        for i in range(100):
            img = gen_clean(spec, i)
            feats.append((img.mean(), img.var()))
            labels.append(fam == "C")
    f = np.array(feats)
    f = (f - f.mean(0)) / f.std(0)
    _, assign = kmeans2(f, 2, seed=0, minit="++")
    acc = np.mean(assign == np.array(labels))
    assert max(acc, 1 - acc) >= 0.95


def test_spec_validation():
    with pytest.raises(ValueError):
        DatasetSpec(splits=(0.5, 0.2, 0.2))
    with pytest.raises(ValueError):
        DatasetSpec(count=5)
    with pytest.raises(ValueError):
        DegradationOp("gauss_noise", sigma=-1)
    with pytest.raises(IndexError):
        gen_clean(DatasetSpec(count=10), 10)


def test_zero_noise_is_identity():
    y = gen_clean(DatasetSpec(), 0)
    np.testing.assert_array_equal(degrade(y, DegradationOp("gauss_noise", sigma=0.0), np.random.default_rng(0)), y)


def test_blur_preserves_constants():
    y = np.full((1, 16, 16), 0.37)
    x = degrade(y, DegradationOp("gauss_blur", radius=2, sigma_b=1.3), None)
    np.testing.assert_allclose(x, y, rtol=0, atol=1e-15)


def test_box_mask_region():
    y = gen_clean(DatasetSpec(), 1) + 0.1
    op = DegradationOp("box_mask", w=5, h=3)
    x = degrade(y, op, np.random.default_rng(2))
    zero = x == 0.0
    assert zero.sum() == 15
    rows, cols = np.nonzero(zero[0])
    assert rows.max() - rows.min() == 2 and cols.max() - cols.min() == 4
    np.testing.assert_array_equal(x[~zero], y[~zero])
    with pytest.raises(ValueError):
        degrade(y, DegradationOp("box_mask", w=17, h=2), np.random.default_rng(0))


def test_downsample_then_upsample():
    y = np.arange(16.0).reshape(1, 4, 4)
    x = degrade(y, DegradationOp("downsample2x_then_upsample"), None)
    assert x.shape == y.shape
    np.testing.assert_array_equal(x[0, :2, :2], np.full((2, 2), 2.5))
    # linear operator
    z = np.random.default_rng(0).random((1, 4, 4))
    op = DegradationOp("downsample2x_then_upsample")
    np.testing.assert_allclose(degrade(y + 2 * z, op, None), x + 2 * degrade(z, op, None))


def test_degradation_determinism():
    y = gen_clean(DatasetSpec(), 0)
    op = DegradationOp("gauss_noise", sigma=0.2)
    a = degrade(y, op, np.random.default_rng(11))
    b = degrade(y, op, np.random.default_rng(11))
    np.testing.assert_array_equal(a, b)


def test_splits_partition():
    spec = DatasetSpec(count=57, splits=(0.6, 0.25, 0.15), seed=9)
    labels = split_assignment(spec)
    assert len(labels) == 57
    counts = {s: int(np.sum(labels == s)) for s in ("train", "val", "test")}
    assert counts == {"train": 34, "val": 14, "test": 9}


def test_make_dataset_shapes():
    ds = make_dataset(DatasetSpec(count=20, degradation=DegradationOp("gauss_noise", sigma=0.1)))
    assert ds.x.shape == ds.y.shape == (20, 1, 16, 16)
    xtr, ytr = ds.subset("train")
    assert len(xtr) == 16


def test_tensor_round_trip(tmp_path):
    t = np.random.default_rng(0).normal(size=(3, 1, 4, 5))
    save_tensor(tmp_path / "t.tnsr", t)
    back = load_tensor(tmp_path / "t.tnsr")
    assert back.shape == t.shape and back.tobytes() == t.tobytes()


def test_tensor_rejections(tmp_path):
    with pytest.raises(ValueError):
        save_tensor(tmp_path / "e.tnsr", np.float64(3.0))
    (tmp_path / "bad.tnsr").write_bytes(b"XXXXX\x01\x00\x00\x00")
    with pytest.raises(ValueError):
        load_tensor(tmp_path / "bad.tnsr")
    good = GOLDEN.joinpath("tensor.tnsr").read_bytes()
    (tmp_path / "trunc.tnsr").write_bytes(good[:-3])
    with pytest.raises(ValueError):
        load_tensor(tmp_path / "trunc.tnsr")
    (tmp_path / "rank0.tnsr").write_bytes(b"TNSR1\x00\x00\x00\x00")
    with pytest.raises(ValueError):
        load_tensor(tmp_path / "rank0.tnsr")
    (tmp_path / "huge.tnsr").write_bytes(b"TNSR1\x02\x00\x00\x00" + b"\xff\xff\xff\xff" * 2)
    with pytest.raises(ValueError):
        load_tensor(tmp_path / "huge.tnsr")


def test_golden_tensor(tmp_path):
    t = load_tensor(GOLDEN / "tensor.tnsr")
    np.testing.assert_array_equal(t, [[-0.5, -0.25, 0.0], [0.25, 0.5, 0.75]])
    save_tensor(tmp_path / "t.tnsr", t)
    assert (tmp_path / "t.tnsr").read_bytes() == (GOLDEN / "tensor.tnsr").read_bytes()


def test_golden_pgm(tmp_path):
    raw = (GOLDEN / "image.pgm").read_bytes()
    assert raw == b"P5\n3 2\n255\n" + bytes([0, 128, 255, 64, 191, 255])
    export_pgm(tmp_path / "i.pgm", np.array([[[0.0, 0.5, 1.0], [0.25, 0.75, 0.999]]]))
    assert (tmp_path / "i.pgm").read_bytes() == raw


def test_golden_checkpoint(tmp_path):
    ck = nn.load_checkpoint(GOLDEN / "model.ckpt")
    assert ck.seed == 7 and ck.step == 3 and ck.meta == {"role": "golden"}
    assert [s.kind for s in ck.net.specs] == ["dense", "leaky_relu"]
    y = nn.predict(ck.net, np.ones((1, 4)))
    # column sums of arange(8).reshape(2,4).T / 8 are 6/8 and 22/8
    np.testing.assert_array_equal(y, [[0.75 + 0.5, 2.75 - 0.5]])
    nn.save_checkpoint(tmp_path / "m.ckpt", ck)
    assert (tmp_path / "m.ckpt").read_bytes() == (GOLDEN / "model.ckpt").read_bytes()


@pytest.mark.parametrize("value, byte", [(0.0, 0), (1.0, 255), (0.5, 128)])
def test_pgm_rounding(tmp_path, value, byte):
    export_pgm(tmp_path / "p.pgm", np.full((1, 3, 3), value))
    assert np.all(read_pgm(tmp_path / "p.pgm") == byte)


def test_pgm_channel_mismatch(tmp_path):
    with pytest.raises(ValueError):
        export_pgm(tmp_path / "p.pgm", np.zeros((2, 3, 3)))


def test_write_dataset_manifest(tmp_path):
    ds = make_dataset(DatasetSpec(count=12, splits=(0.5, 0.25, 0.25), degradation=DegradationOp("gauss_noise", sigma=0.1)))
    manifest = write_dataset(ds, tmp_path)
    rows = read_manifest(manifest)
    assert list(rows[0]) == ["index", "split", "family", "path_x", "path_y"]
    assert len(rows) == 12
    r = rows[4]
    np.testing.assert_array_equal(load_tensor(tmp_path / r["path_x"]), ds.x[4])
    assert r["split"] == ds.split[4]
