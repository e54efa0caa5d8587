import numpy as np
import pytest

from idcap import baselines as B
from idcap import metrics as Me
from idcap import models as Mo
from idcap import nn
from idcap.data import load_tensor


@pytest.fixture(scope="module")
def base():
    return Mo.base_net(np.random.default_rng(0), width=4)


@pytest.fixture(scope="module")
def x():
    return np.random.default_rng(1).random((3, 1, 16, 16))


def oracle_stats(outputs, valids):
    """Store every pass, then mean and population variance pixel by pixel."""
    outs, vals = np.array(outputs), np.array(valids)
    mean = np.zeros(outs.shape[1:])
    var = np.zeros(outs.shape[1:])
    for idx in np.ndindex(*outs.shape[1:]):
        sel = outs[(slice(None),) + idx][vals[(slice(None),) + idx]]
        if sel.size:
            m = sel.sum() / sel.size
            mean[idx] = m
            var[idx] = ((sel - m) ** 2).sum() / sel.size
    return mean, var


def record_passes(base, x, spec, seed, dropout_p=0.0):
    """Replay ttda's per-pass streams, keeping every output."""
    seeds = np.random.default_rng(seed).integers(0, 2**63 - 1, size=spec.passes)
    net = base.with_dropout(dropout_p) if dropout_p > 0 else base
    outs, valids = [], []
    for s in seeds:
        r = np.random.default_rng(int(s))
        xp, warps = B._perturb(x, spec, r)
        if dropout_p > 0:
            out = Mo.from_net(nn.forward(net, Mo.to_net(xp), "eval", r, mc_dropout=True)[0])
        else:
            out = Mo.base_forward(base, xp)
        valid = np.ones(out.shape, dtype=bool)
        for i, w in enumerate(warps):
            if w is not None:
                out[i], valid[i] = B.unshift_output(out[i], *w)
        outs.append(out)
        valids.append(valid)
    return outs, valids


def test_single_pass_has_zero_variance(base, x):
    for kind in B.KINDS:
        st = B.ttda(base, x, B.AugmentSpec(kind, passes=1), np.random.default_rng(2))
        assert np.all(st.var == 0)


def test_zero_noise_has_zero_variance(base, x):
    st = B.ttda(base, x, B.AugmentSpec("pixel_noise", passes=7, sigma=0.0), np.random.default_rng(3))
    assert np.all(st.var == 0)
    np.testing.assert_array_equal(st.mean, Mo.base_forward(base, x))


@pytest.mark.parametrize("kind", B.KINDS)
def test_ttda_matches_store_all_oracle(base, x, kind):
    spec = B.AugmentSpec(kind, passes=20)
    st = B.ttda(base, x, spec, np.random.default_rng(4))
    mean, var = oracle_stats(*record_passes(base, x, spec, 4))
    assert np.max(np.abs(st.var - var)) <= 1e-12
    assert np.max(np.abs(st.mean - mean)) <= 1e-12


def test_dropout_augmented_matches_oracle(base, x):
    spec = B.AugmentSpec("combined", passes=20)
    st = B.ttda(base, x, spec, np.random.default_rng(5), dropout_p=0.2)
    _, var = oracle_stats(*record_passes(base, x, spec, 5, dropout_p=0.2))
    assert np.max(np.abs(st.var - var)) <= 1e-12


def test_mc_dropout(base, x):
    st = B.mc_dropout(base, x, passes=20, p=0.2, rng=np.random.default_rng(6))
    again = B.mc_dropout(base, x, passes=20, p=0.2, rng=np.random.default_rng(6))
    np.testing.assert_array_equal(st.var, again.var)
    assert np.all(st.var >= 0) and st.var.max() > 0
    seeds = np.random.default_rng(6).integers(0, 2**63 - 1, size=20)
    net = base.with_dropout(0.2)
    outs = [Mo.from_net(nn.forward(net, Mo.to_net(x), "eval", np.random.default_rng(int(s)), mc_dropout=True)[0])
            for s in seeds]
    assert np.max(np.abs(st.var - np.var(outs, axis=0))) <= 1e-12
    zero = B.mc_dropout(base, x, passes=5, p=0.0, rng=np.random.default_rng(7))
    assert np.all(zero.var == 0)
    with pytest.raises(ValueError):
        B.mc_dropout(base, x, p=1.0, rng=np.random.default_rng(0))


def test_baselines_leave_base_untouched(base, x):
    before = base.digest()
    B.ttda(base, x, B.AugmentSpec("combined", passes=3), np.random.default_rng(8), dropout_p=0.2)
    B.mc_dropout(base, x, passes=3, rng=np.random.default_rng(8))
    assert base.digest() == before
    assert len(base.specs) == len(Mo.base_net(np.random.default_rng(0), width=4).specs)


def test_shift_round_trip():
    img = np.arange(25.0).reshape(1, 5, 5)
    for dy in range(-2, 3):
        for dx in range(-2, 3):
            for flip in (False, True):
                back, valid = B.unshift_output(B.shift_image(img, dy, dx, flip), dy, dx, flip)
                np.testing.assert_array_equal(back[valid], img[valid])
                assert valid.sum() == (5 - abs(dy)) * (5 - abs(dx))


def test_affine_interior_is_shift_invariant(x):
    # pure-conv base: shifting commutes with the network away from the border
    net = Mo.base_net(np.random.default_rng(9), width=4)
    spec = B.AugmentSpec("affine", passes=20, flip=False)
    st = B.ttda(net, x, spec, np.random.default_rng(10))
    margin = 4 + spec.max_shift  # receptive radius of four 3x3 convs, plus the shift
    inner = st.var[..., margin:-margin, margin:-margin]
    assert inner.size > 0 and np.max(inner) < 1e-10
    assert st.var.max() > 1e-10


def test_constant_uncertainty():
    assert np.all(B.constant_uncertainty((2, 3), 0.0) == 0)
    rng = np.random.default_rng(11)
    e2 = rng.random(500) ** 2
    for c in (0.015, 0.95):
        v = B.constant_uncertainty(e2.shape, c)
        assert np.all(v == c)
        assert Me.uce(e2, v)[0] == pytest.approx(abs(e2.mean() - c), rel=1e-12)
    with pytest.raises(ValueError):
        B.constant_uncertainty((2,), -0.1)


def test_spec_validation():
    with pytest.raises(ValueError):
        B.AugmentSpec("rotate")
    with pytest.raises(ValueError):
        B.AugmentSpec(passes=0)
    with pytest.raises(ValueError):
        B.AugmentSpec(contrast=(1.2, 0.8))


def test_workers_do_not_change_results(base, x, monkeypatch):
    spec = B.AugmentSpec("combined", passes=6)
    one = B.ttda(base, x, spec, np.random.default_rng(12), workers=1)
    many = B.ttda(base, x, spec, np.random.default_rng(12), workers=3)
    np.testing.assert_array_equal(one.var, many.var)
    monkeypatch.setenv("IDCAP_THREADS", "0")
    with pytest.raises(ValueError):
        B.eval_workers()


def test_save_pass_stats(tmp_path, base, x):
    st = B.ttda(base, x, B.AugmentSpec("affine", passes=4), np.random.default_rng(13))
    B.save_pass_stats(tmp_path, st)
    np.testing.assert_array_equal(load_tensor(tmp_path / "var.tnsr"), st.var)
    np.testing.assert_array_equal(load_tensor(tmp_path / "mask.tnsr"), st.mask.astype(float))
