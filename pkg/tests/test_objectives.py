import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advseq import autodiff as ad
from advseq.autodiff import Tensor
from advseq.model import EOS, ModelConfig, Seq2Seq
from advseq.objectives import (
    PROB_FLOOR,
    ObjectiveConfig,
    ProbSeq,
    kl_sym,
    kl_sym_rows,
    loss_e,
    loss_i,
    loss_o,
    nll_smoothed,
    restricted_loss_o,
)

from _oracles import REL_TOL, directional_check


def model(seed=0, arch="attention"):
    return Seq2Seq(ModelConfig(10, embed_dim=6, hidden_dim=8, num_encoder_layers=1, num_decoder_layers=1, arch=arch), seed=seed)


X = np.array([[4, 5, 6, 7], [8, 9, 4, 5]])
Y = np.array([[5, 6, EOS], [9, 4, EOS]])


def test_kl_sym_ln3_fixture():
    # direct summation: each direction is 0.75 ln 3 + 0.25 ln(1/3) = 0.5 ln 3
    assert kl_sym([0.75, 0.25], [0.25, 0.75]) == pytest.approx(math.log(3), abs=1e-12)
    assert kl_sym([0.5, 0.5], [0.5, 0.5]) == 0.0


def test_kl_sym_shape_mismatch():
    with pytest.raises(ValueError):
        kl_sym([0.5, 0.5], [1.0, 0.0, 0.0])


dist = st.integers(2, 8).flatmap(
    lambda n: st.tuples(
        st.lists(st.floats(0.01, 10), min_size=n, max_size=n),
        st.lists(st.floats(0.01, 10), min_size=n, max_size=n),
    )
)


@settings(max_examples=200, deadline=None)
@given(dist)
def test_kl_sym_symmetric_nonnegative(pair):
    p = np.array(pair[0]) / sum(pair[0])
    q = np.array(pair[1]) / sum(pair[1])
    a, b = kl_sym(p, q), kl_sym(q, p)
    assert a == pytest.approx(b, abs=1e-12)
    assert a >= 0
    if np.max(np.abs(p - q)) > 1e-6:
        assert a > 0


def test_nll_uniform_is_log_v():
    assert nll_smoothed(np.full((3, 4), 0.25), [0, 1, 2], 0.0).value == pytest.approx(math.log(4))


def test_nll_no_smoothing_is_cross_entropy():
    rng = np.random.default_rng(0)
    for _ in range(100):
        t, v = rng.integers(1, 6), rng.integers(2, 7)
        p = rng.dirichlet(np.ones(v), size=t)
        y = rng.integers(0, v, size=t)
        ce = -np.mean([np.log(p[i, y[i]]) for i in range(t)])
        assert nll_smoothed(p, y, 0.0).value == pytest.approx(ce, rel=1e-12)


def test_nll_smoothed_one_hot_rows_against_summation():
    v, s = 5, 0.1
    row = np.full(v, 1e-12 / (v - 1))
    row[2] = 1 - 1e-12
    p = np.stack([row, row])
    # written out: -(1-s) log(1-1e-12) - s/V [log(1-1e-12) + (V-1) log(1e-12/(V-1))]
    expect = -(1 - s) * math.log(1 - 1e-12) - s / v * (math.log(1 - 1e-12) + (v - 1) * math.log(max(1e-12 / (v - 1), PROB_FLOOR)))
    res = nll_smoothed(p, [2, 2], s)
    assert res.value == pytest.approx(expect, rel=1e-12)
    assert res.clamped == 2 * (v - 1)  # off-gold entries sit below the floor


def test_probseq_validation():
    with pytest.raises(ValueError):
        ProbSeq(np.array([[0.5, 0.6]]))
    with pytest.raises(ValueError):
        ProbSeq(np.array([[0.5, 0.5]]), mask=np.array([True, False]))
    assert ProbSeq(np.array([[0.5, 0.5]])).mask.tolist() == [True]


def test_loss_o_zero_perturbation_bit_equals_nll():
    m = model()
    cfg = ObjectiveConfig()
    lo = loss_o(m, X, Y, np.zeros((2, 4, 6)), np.zeros((2, 3, 6)), cfg)
    plain = loss_o(m, X, Y, None, None, cfg)
    assert lo.kl.item() == 0.0
    assert lo.total.item() == plain.nll.item()
    probs = np.exp(plain.clean_logp.data)
    by_hand = np.mean([nll_smoothed(probs[b], Y[b], 0.1).value for b in range(2)])
    assert plain.nll.item() == pytest.approx(by_hand, rel=1e-12)


def test_loss_o_kl_nonnegative_and_total_is_sum():
    m = model()
    rng = np.random.default_rng(1)
    for _ in range(10):
        lo = loss_o(m, X, Y, rng.normal(size=(2, 4, 6)) * 0.3, rng.normal(size=(2, 3, 6)) * 0.3)
        assert lo.kl.item() >= 0
        assert lo.total.item() == pytest.approx(lo.nll.item() + lo.kl.item(), rel=1e-15)


@pytest.mark.parametrize("arch", ["attention", "gru"])
def test_loss_o_gradients_match_finite_differences(arch):
    rng = np.random.default_rng(2)
    m = model(3, arch)
    w = m.site_width
    from advseq.model import DEC0, ENC0

    dx = Tensor(rng.normal(size=(2, 4, w(ENC0))) * 0.1, requires_grad=True)
    dy = Tensor(rng.normal(size=(2, 3, w(DEC0))) * 0.1, requires_grad=True)
    err = directional_check(lambda: loss_o(m, X, Y, dx, dy).total, m.parameters() + [dx, dy], rng)
    assert err < REL_TOL


def test_loss_i_zero_and_positive():
    m = model()
    assert loss_i(m, X, Y, np.zeros((2, 4, 6)), np.zeros((2, 3, 6))).item() == 0.0
    assert loss_i(m, X, Y, np.full((2, 4, 6), 0.2), None).item() > 0


def test_loss_i_small_delta_is_small():
    m = model()
    rng = np.random.default_rng(0)
    d = rng.normal(size=(2, 4, 6))
    d *= 1e-6 / np.linalg.norm(d)
    assert loss_i(m, X, Y, d, None).item() < 1e-6


def test_loss_e_cases():
    m = model()
    mask = np.ones_like(Y, dtype=bool)
    assert loss_e(m, X, X, Y, mask).item() == 0.0
    x2 = X.copy()
    x2[0, 1] = 9
    assert loss_e(m, x2, X, Y, np.zeros_like(mask)).item() == 0.0
    with pytest.raises(ValueError, match="shape"):
        loss_e(m, X[:, :3], X, Y, mask)


def test_loss_e_single_position_equals_row_kl():
    m = model()
    x2 = X[:1].copy()
    x2[0, 0] = 8
    mask = np.zeros((1, 3), dtype=bool)
    mask[0, 1] = True
    val = loss_e(m, x2, X[:1], Y[:1], mask, ObjectiveConfig(kl_average=False)).item()
    p = m.teacher_forced_dist(x2[0], Y[0])[1]
    q = m.teacher_forced_dist(X[0], Y[0])[1]
    assert val == pytest.approx(kl_sym(p, q), rel=1e-9)


def test_stop_grad_clean_changes_gradient_not_value():
    m = model()
    d = np.full((2, 4, 6), 0.1)
    vals, grads = [], []
    for stop in (False, True):
        m.zero_grad()
        lo = loss_i(m, X, Y, d, None, ObjectiveConfig(stop_grad_clean=stop))
        lo.backward()
        vals.append(lo.item())
        grads.append(m.params["out_w"].grad.copy())
    assert vals[0] == vals[1]
    assert not np.allclose(grads[0], grads[1])


def test_no_kl_variant_uses_perturbed_nll():
    m = model()
    cfg = ObjectiveConfig(use_kl=False)
    d = np.full((2, 4, 6), 0.1)
    lo = loss_o(m, X, Y, d, None, cfg)
    assert lo.kl.item() == 0.0 and lo.clean_logp is None
    plain = loss_o(m, X, Y, None, None, cfg)
    assert lo.nll.item() != plain.nll.item()


def test_restricted_loss_full_mask_equals_total():
    m = model()
    lo = loss_o(m, X, Y, np.full((2, 4, 6), 0.05), None)
    full = restricted_loss_o(lo, Y, np.ones_like(Y, dtype=bool), ObjectiveConfig())
    assert full.item() == pytest.approx(lo.total.item(), rel=1e-12)


def test_kl_sym_rows_matches_numpy():
    rng = np.random.default_rng(5)
    a = ad.log_softmax(Tensor(rng.normal(size=(2, 3, 4))))
    b = ad.log_softmax(Tensor(rng.normal(size=(2, 3, 4))))
    np.testing.assert_allclose(kl_sym_rows(a, b).data, kl_sym(np.exp(a.data), np.exp(b.data)), rtol=1e-12)
