import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from advseq.advgrad import (
    AdvGradConfig,
    ascent_step,
    ascent_step_batch,
    build_advgrad,
    delta_grads,
    frobenius_norm,
    init_deltas,
    preserved_param_grads,
    project_ball,
    project_ball_batch,
)
from advseq.model import EOS, ModelConfig, Seq2Seq
from advseq.objectives import ObjectiveConfig, loss_o

X = np.array([[4, 5, 6, 7], [8, 9, 4, 5]])
Y = np.array([[5, 6, EOS], [9, 4, EOS]])


def model():
    return Seq2Seq(ModelConfig(10, embed_dim=6, hidden_dim=8, num_encoder_layers=1, num_decoder_layers=1), seed=0)


def test_project_inside_ball_is_identity():
    d = np.full((2, 3), 0.01)
    np.testing.assert_array_equal(project_ball(d, 0.2), d)


def test_project_outside_ball_rescales_radially():
    d = np.array([[3.0, 4.0]])
    np.testing.assert_allclose(project_ball(d, 1.0), [[0.6, 0.8]])


def test_ascent_step_closed_form():
    # delta inside the ball and a step that stays inside: delta + alpha * g / |g|
    d = np.array([0.01, 0.0])
    g = np.array([0.0, 5.0])
    np.testing.assert_allclose(ascent_step(d, g, 0.1, 1.0), [0.01, 0.1])
    # step leaving the ball: result has norm epsilon and the same direction
    out = ascent_step(d, g, 0.4, 0.2)
    raw = d + 0.4 * g / 5.0
    np.testing.assert_allclose(out, raw * 0.2 / np.linalg.norm(raw))


def test_ascent_step_zero_gradient_only_projects():
    d = np.array([1.0, 0.0])
    np.testing.assert_allclose(ascent_step(d, np.zeros(2), 0.4, 0.2), [0.2, 0.0])


def test_ascent_step_shape_mismatch():
    with pytest.raises(ValueError):
        ascent_step(np.zeros(3), np.zeros(2), 0.1, 0.1)
    with pytest.raises(ValueError):
        project_ball(np.zeros(3), 0.0)


@settings(max_examples=300, deadline=None)
@given(
    hnp.arrays(np.float64, (3, 4), elements=st.floats(-10, 10)),
    hnp.arrays(np.float64, (3, 4), elements=st.floats(-10, 10)),
    st.floats(1e-3, 2.0),
    st.floats(1e-3, 1.0),
)
def test_ascent_step_never_leaves_ball(d, g, alpha, eps):
    assert frobenius_norm(ascent_step(d, g, alpha, eps)) <= eps + 1e-9


def test_batch_versions_match_per_sequence():
    rng = np.random.default_rng(0)
    d = rng.normal(size=(5, 3, 4))
    g = rng.normal(size=(5, 3, 4))
    g[2] = 0.0
    out = ascent_step_batch(d, g, 0.4, 0.2)
    for b in range(5):
        np.testing.assert_allclose(out[b], ascent_step(d[b], g[b], 0.4, 0.2), rtol=1e-12)
        np.testing.assert_allclose(project_ball_batch(d, 0.2)[b], project_ball(d[b], 0.2), rtol=1e-12)


def test_init_deltas_range_and_disabled_side():
    m = model()
    cfg = AdvGradConfig(use_y=False)
    dx, dy = init_deltas(m, X, Y, cfg, np.random.default_rng(0))
    assert dx.shape == (2, 4, 6) and dy.shape == (2, 3, 6)
    assert np.abs(dx).max() <= 1e-2 and np.abs(dx).max() > 0
    assert not dy.any()
    # disabling a side does not shift the stream for the other one
    dx2, _ = init_deltas(m, X, Y, AdvGradConfig(), np.random.default_rng(0))
    np.testing.assert_array_equal(dx, dx2)


def test_build_advgrad_respects_ball_and_raises_loss():
    m = model()
    cfg = AdvGradConfig()
    obj = ObjectiveConfig()
    pair = build_advgrad(m, X, Y, cfg, obj, np.random.default_rng(0))
    for b in range(2):
        assert frobenius_norm(pair.delta_x[b]) <= cfg.epsilon + 1e-9
        assert frobenius_norm(pair.delta_y[b]) <= cfg.epsilon + 1e-9
    init = init_deltas(m, X, Y, cfg, np.random.default_rng(0))
    before = loss_o(m, X, Y, init[0], init[1], obj).total.item()
    after = loss_o(m, X, Y, pair.delta_x, pair.delta_y, obj).total.item()
    assert after > before
    assert pair.ascent_steps_taken == {"x": 1, "y": 1}


def test_multi_step_counts_and_reuses_first_grads():
    m = model()
    cfg = AdvGradConfig(steps=3, use_x=False)
    pair = build_advgrad(m, X, Y, cfg, rng=np.random.default_rng(0))
    assert pair.ascent_steps_taken == {"x": 0, "y": 3}
    assert not pair.delta_x.any()
    init = init_deltas(m, X, Y, AdvGradConfig(), np.random.default_rng(4))
    g = delta_grads(m, X, Y, *init, AdvGradConfig(), ObjectiveConfig())
    a = build_advgrad(m, X, Y, AdvGradConfig(), init=init, first_grads=g)
    b = build_advgrad(m, X, Y, AdvGradConfig(), init=init)
    np.testing.assert_array_equal(a.delta_x, b.delta_x)


def test_delta_search_leaves_parameter_grads_alone():
    m = model()
    loss_o(m, X, Y, None, None).total.backward()
    before = {k: t.grad.copy() for k, t in m.params.items()}
    build_advgrad(m, X, Y, AdvGradConfig(steps=2), rng=np.random.default_rng(0))
    for k, t in m.params.items():
        np.testing.assert_array_equal(t.grad, before[k])


def test_preserved_param_grads_restores_none():
    m = model()
    with preserved_param_grads(m):
        loss_o(m, X, Y, None, None).total.backward()
    assert all(t.grad is None for t in m.params.values())


def test_config_validation():
    with pytest.raises(ValueError):
        AdvGradConfig(alpha=0)
    with pytest.raises(ValueError):
        AdvGradConfig(steps=0)
