import math

import numpy as np
import pytest

from multires import numcore as nc
from multires.consistency import (
    ATTENTION,
    MIL,
    AttentionParams,
    BoundAttention,
    SmaxConfig,
    attention_aggregate,
    attention_consistency,
    attention_weights,
    group_index,
    init_attention,
    mil_consistency,
    pair_consistency,
    smax_aggregate,
)
from multires.data import InstanceSet, UNLABELED, correspond_sets
from multires.models import ModelSpec, init
from multires.numcore import Tensor

# closed forms evaluated with mpmath at 30 digits
SMAX_02_08 = 0.587393783735477272
MIL_09 = 0.0977226464472215543


def smax_loop(p, base=math.e):
    num = sum(v * base**v for v in p)
    return num / sum(base**v for v in p)


def test_smax_examples():
    assert smax_aggregate([0.4, 0.4, 0.4]).item() == pytest.approx(0.4, abs=1e-15)
    assert smax_aggregate([0.2, 0.8]).item() == pytest.approx(SMAX_02_08, abs=1e-15)
    assert abs(smax_aggregate([0.2, 0.8], SmaxConfig(1e6)).item() - 0.8) < 1e-3
    with pytest.raises(ValueError):
        smax_aggregate(np.zeros(0))
    with pytest.raises(ValueError):
        SmaxConfig(1.0)


def test_smax_bounds_random():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        p = rng.random(rng.integers(1, 12))
        s = smax_aggregate(p).item()
        assert p.min() - 1e-15 <= s <= p.max() + 1e-15
        assert s == pytest.approx(smax_loop(p), rel=1e-12)


def test_smax_sharpens_with_base():
    rng = np.random.default_rng(1)
    for _ in range(100):
        p = rng.random(5)
        seq = [smax_aggregate(p, SmaxConfig(b)).item() for b in (math.e, 10, 1e3, 1e6)]
        assert all(b >= a - 1e-9 for a, b in zip(seq, seq[1:]))
        assert all(v <= p.max() + 1e-9 for v in seq)


def test_mil_examples():
    fine = [0.1, 0.7, 0.3]
    agree = smax_aggregate(fine).item()
    assert mil_consistency(agree, fine).item() == pytest.approx(0.0, abs=1e-30)
    assert mil_consistency(0.9, [0.2, 0.8]).item() == pytest.approx(MIL_09, abs=1e-15)
    assert mil_consistency(0.0, [1.0]).item() == 1.0


def _att(fine_dim, coarse_dim, seed=0, scale=1.0):
    return init_attention(fine_dim, coarse_dim, seed, align_dim=4, scale=scale)


def scores_loop(h_fine, h_coarse, att: AttentionParams):
    W, b, v = att.params["W"], att.params["b"], att.params["v"]
    out = []
    for h in h_fine:
        z = np.concatenate([h, h_coarse])
        out.append(sum(v[a] * math.tanh(sum(z[i] * W[i, a] for i in range(len(z))) + b[a]) for a in range(len(v))))
    e = [math.exp(s - max(out)) for s in out]
    return np.array(e) / sum(e)


def test_attention_weight_examples():
    att = _att(3, 2)
    assert attention_weights(np.ones((1, 3)), np.ones(2), att).value.tolist() == [1.0]
    same = attention_weights(np.tile([0.3, -0.1, 2.0], (4, 1)), np.array([1.0, 0.5]), att).value
    assert np.all(same == 0.25)
    rng = np.random.default_rng(2)
    hf, hc = rng.normal(size=(3, 3)), rng.normal(size=2)
    att.params["b"] = rng.normal(size=4)
    np.testing.assert_allclose(attention_weights(hf, hc, att).value, scores_loop(hf, hc, att), rtol=1e-12)


def test_attention_errors():
    att = _att(3, 2)
    with pytest.raises(ValueError):
        attention_weights(np.zeros((0, 3)), np.ones(2), att)
    with pytest.raises(nc.ShapeError):
        attention_weights(np.ones((2, 4)), np.ones(2), att)
    with pytest.raises(nc.ShapeError):
        attention_aggregate([0.5, 0.5], np.ones((3, 2)))


def test_attention_simplex_random():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        att = _att(3, 2, seed=int(rng.integers(1 << 30)), scale=3.0)
        a = attention_weights(rng.normal(size=(rng.integers(1, 10), 3)) * 5, rng.normal(size=2), att).value
        assert np.all(a > 0) and abs(a.sum() - 1) <= 1e-12


def test_attention_aggregate_examples():
    h = np.array([[1.0, 2.0], [3.0, -1.0]])
    np.testing.assert_array_equal(attention_aggregate([1.0, 0.0], h).value, h[0])
    np.testing.assert_array_equal(attention_aggregate([0.5, 0.5], [[0.0, 0.0], [2.0, 2.0]]).value, [1.0, 1.0])
    rng = np.random.default_rng(4)
    a, hs = nc.softmax(rng.normal(size=5)).value, rng.normal(size=(5, 3))
    loop = [sum(a[j] * hs[j, c] for j in range(5)) for c in range(3)]
    out = attention_aggregate(a, hs).value
    np.testing.assert_allclose(out, loop, rtol=1e-13)
    assert np.all(out >= hs.min(0) - 1e-12) and np.all(out <= hs.max(0) + 1e-12)


def test_permutation_equivariance():
    rng = np.random.default_rng(5)
    fine, coarse = init(ModelSpec("mlp1", 3, 4, init_scale=1.0), 0), init(ModelSpec("mlp1", 2, 3, init_scale=1.0), 1)
    att = _att(4, 3, scale=2.0)
    for _ in range(100):
        m = int(rng.integers(2, 9))
        xf, xc = rng.normal(size=(m, 3)), rng.normal(size=2)
        perm = rng.permutation(m)
        hf, hc = fine.hidden(xf), coarse.hidden(xc)
        a, ap = attention_weights(hf, hc, att).value, attention_weights(hf[perm], hc, att).value
        np.testing.assert_allclose(ap, a[perm], rtol=1e-12, atol=1e-15)
        p = fine.predict(xf)
        assert smax_aggregate(p[perm]).item() == pytest.approx(smax_aggregate(p).item(), rel=1e-13)
        np.testing.assert_allclose(attention_aggregate(ap, hf[perm]).value, attention_aggregate(a, hf).value, rtol=1e-12)
        d1 = attention_consistency(coarse.bind(), fine.bind(), xc, xf, att).item()
        d2 = attention_consistency(coarse.bind(), fine.bind(), xc, xf[perm], att).item()
        assert d1 == pytest.approx(d2, rel=1e-10, abs=1e-15)


def test_attention_consistency_examples():
    fine, coarse = init(ModelSpec("logreg", 3, init_scale=0.0), 0), init(ModelSpec("logreg", 2, init_scale=0.0), 0)
    att = _att(3, 2)
    rng = np.random.default_rng(6)
    assert attention_consistency(coarse.bind(), fine.bind(), rng.normal(size=2), rng.normal(size=(4, 3)), att).item() == 0.0
    # single fine instance whose head matches the coarse prediction
    fine = init(ModelSpec("logreg", 2, init_scale=1.0), 3)
    coarse = init(ModelSpec("logreg", 2), 0)
    coarse.params = {k: v.copy() for k, v in fine.params.items()}
    x = rng.normal(size=2)
    assert attention_consistency(coarse.bind(), fine.bind(), x, x[None, :], _att(2, 2)).item() == 0.0


def test_attention_consistency_matches_manual_composition():
    rng = np.random.default_rng(7)
    fine, coarse = init(ModelSpec("mlp1", 3, 4, init_scale=1.0), 2), init(ModelSpec("mlp1", 2, 3, init_scale=1.0), 3)
    att = _att(4, 3, scale=1.0)
    xf, xc = rng.normal(size=(5, 3)), rng.normal(size=2)
    hf = [np.tanh(x @ fine.params["W1"] + fine.params["b1"]) for x in xf]
    hc = np.tanh(xc @ coarse.params["W1"] + coarse.params["b1"])
    pc = 1 / (1 + math.exp(-(hc @ coarse.params["w2"] + coarse.params["b2"])))
    a = scores_loop(hf, hc, att)
    pooled = sum(a[j] * hf[j] for j in range(5))
    pf = 1 / (1 + math.exp(-(pooled @ fine.params["w2"] + fine.params["b2"])))
    got = attention_consistency(coarse.bind(), fine.bind(), xc, xf, att).item()
    assert got == pytest.approx((pc - pf) ** 2, rel=1e-11)


def test_consistency_zero_iff_predictions_coincide():
    rng = np.random.default_rng(8)
    for _ in range(50):
        p = rng.random(4)
        s = smax_aggregate(p).item()
        assert mil_consistency(s, p).item() == pytest.approx(0.0, abs=1e-30)
        c = rng.random()
        d = mil_consistency(c, p).item()
        assert d > 0 if c != s else d == 0


def _mini(seed=0):
    rng = np.random.default_rng(seed)
    coarse = InstanceSet([0, 1, 2], [[1.5, 1.5], [4.5, 1.5], [7.5, 1.5]], rng.normal(size=(3, 2)), [UNLABELED] * 3)
    fi, fj = np.meshgrid(np.arange(9), np.arange(3), indexing="ij")
    locs = np.stack([fi.ravel() + 0.5, fj.ravel() + 0.5], 1)
    fine = InstanceSet(np.arange(27), locs, rng.normal(size=(27, 3)), [UNLABELED] * 27)
    return coarse, fine


@pytest.mark.parametrize("mode", [MIL, ATTENTION])
def test_pair_consistency_matches_loop(mode):
    coarse, fine = _mini()
    corr = correspond_sets(coarse, fine)
    fm, cm = init(ModelSpec("mlp1", 3, 4, init_scale=1.0), 0), init(ModelSpec("mlp1", 2, 3, init_scale=1.0), 1)
    att = _att(4, 3)
    terms = []
    for row, cid in enumerate(coarse.ids):
        members = np.array(corr.groups[int(cid)])
        xc, xf = coarse.features[row], fine.features[members]
        if mode == MIL:
            terms.append(mil_consistency(cm.predict(xc), fm.predict(xf)).item())
        else:
            terms.append(attention_consistency(cm.bind(), fm.bind(), xc, xf, att).item())
    got = pair_consistency(coarse, fine, corr, mode, cm.bind(), fm.bind(), att.bind()).item()
    assert got == pytest.approx(np.mean(terms), rel=1e-12)
    total = pair_consistency(coarse, fine, corr, mode, cm.bind(), fm.bind(), att.bind(), reduce="sum").item()
    assert total == pytest.approx(np.sum(terms), rel=1e-12)


def test_pair_consistency_mean_rule_and_zero():
    coarse, fine = _mini()
    corr = correspond_sets(coarse, fine)
    zero = init(ModelSpec("logreg", 3, init_scale=0.0), 0)
    zc = init(ModelSpec("logreg", 2, init_scale=0.0), 0)
    assert pair_consistency(coarse, fine, corr, MIL, zc.bind(), zero.bind()).item() == pytest.approx(0.0, abs=1e-30)
    assert nc.mean(Tensor([0.1, 0.3])).item() == pytest.approx(0.2, abs=1e-16)
    with pytest.raises(ValueError):
        pair_consistency(coarse, fine, corr, MIL, zc.bind(), zero.bind(), reduce="max")


def test_groups_restricted_to_unlabeled_and_skipped_counted(caplog):
    coarse, fine = _mini()
    corr = correspond_sets(coarse, fine)
    only_first = fine.subset(np.arange(9))
    idx = group_index(corr, coarse, only_first)
    assert idx.n_groups == 1 and idx.skipped == 2
    assert "skipped" in caplog.text


@pytest.mark.parametrize("mode", [MIL, ATTENTION])
def test_consistency_gradients(mode):
    coarse, fine = _mini(3)
    coarse, fine = coarse.subset([0, 1]), fine.subset(np.arange(18))
    corr = correspond_sets(coarse, fine)
    fspec, cspec = ModelSpec("mlp1", 3, 3, init_scale=1.0), ModelSpec("mlp1", 2, 2, init_scale=1.0)
    params = {}
    for prefix, m in (("f.", init(fspec, 0)), ("c.", init(cspec, 1))):
        for k, v in m.params.items():
            params[prefix + k] = v + 0.1
    for k, v in _att(3, 2, scale=1.0).params.items():
        params["a." + k] = v + 0.05

    from multires.models import BoundClassifier

    def fn(tape, p):
        fm = BoundClassifier(fspec, {k[2:]: t for k, t in p.items() if k.startswith("f.")})
        cm = BoundClassifier(cspec, {k[2:]: t for k, t in p.items() if k.startswith("c.")})
        att = BoundAttention({k[2:]: t for k, t in p.items() if k.startswith("a.")})
        return pair_consistency(coarse, fine, corr, mode, cm, fm, att)

    report = nc.grad_check(fn, params)
    assert report.passed, report.errors
