import numpy as np
import pytest

from advseq.model import EOS, ModelConfig, Seq2Seq
from advseq.objectives import ObjectiveConfig, loss_o
from advseq.trainer import (
    LOG_FIELDS,
    Adam,
    TrainConfig,
    advseq_step,
    evaluate,
    load_state,
    make_batches,
    train,
)

from _oracles import AdamOracle

SMALL = dict(embed_dim=8, hidden_dim=12, num_encoder_layers=1, num_decoder_layers=1)
X = np.array([[4, 5, 6, 7, 8], [9, 10, 11, 4, 5]])
Y = np.array([[4, 5, 6, 7, 8, EOS], [9, 10, 11, 4, 5, EOS]])


def model(seed=0):
    return Seq2Seq(ModelConfig(12, **SMALL), seed=seed)


def copy_pairs(n, rng):
    out = []
    for _ in range(n):
        x = rng.integers(4, 12, size=int(rng.integers(3, 6))).tolist()
        out.append((x, list(x)))
    return out


def test_adam_matches_textbook_trace():
    m = model()
    opt = Adam(1e-3)
    ref = AdamOracle(1e-3)
    rng = np.random.default_rng(0)
    theta = m.params["out_b"].data.tolist()
    for _ in range(5):
        grads = {k: rng.normal(size=t.shape) for k, t in m.params.items()}
        opt.update(m.params, grads)
        theta = ref.step(theta, grads["out_b"].tolist())
        np.testing.assert_allclose(m.params["out_b"].data, theta, rtol=0, atol=1e-15)


def test_adam_first_step_is_signed_lr():
    m = model()
    before = m.params["out_b"].data.copy()
    g = np.linspace(-1, 1, 12)
    g[6] = 0.0
    Adam(1e-3).update({"out_b": m.params["out_b"]}, {"out_b": g})
    np.testing.assert_allclose(before - m.params["out_b"].data, 1e-3 * g / (np.abs(g) + 1e-8), atol=1e-15)


@pytest.mark.parametrize("kl", [False, True])
def test_weighting_identity_without_augmentations(kl):
    m = model(1)
    cfg = TrainConfig(advgrad=False, advswap=False, kl=kl, noise_range=0.0, **SMALL)
    advseq_step(m, (X, Y), cfg, None, np.random.default_rng(0))
    got = {k: t.grad.copy() for k, t in m.params.items()}
    m.zero_grad()
    loss_o(m, X, Y, None, None, ObjectiveConfig(0.1)).nll.backward()
    for k, t in m.params.items():
        np.testing.assert_allclose(got[k], 0.5 * t.grad, rtol=0, atol=1e-12)


def test_full_step_pass_counts_and_report():
    m = model()
    rep = advseq_step(m, (X, Y), TrainConfig(**SMALL), Adam(1e-3), np.random.default_rng(0), step=7)
    assert (rep.forward_passes, rep.backward_passes) == (4, 2)
    assert rep.step == 7 and rep.swaps == 2 and not rep.aborted
    assert rep.delta_x_norm == pytest.approx(0.2) and rep.delta_y_norm == pytest.approx(0.2)
    assert rep.l_i > 0 and rep.l_e > 0 and rep.grad_norm > 0
    assert len(rep.log_line().split("\t")) == len(LOG_FIELDS)


def test_spans_mode_step_runs():
    m = model()
    cfg = TrainConfig(target_mode="spans", num_spans=1, span_len=2, **SMALL)
    rep = advseq_step(m, (X, Y), cfg, Adam(1e-3), np.random.default_rng(0))
    assert rep.backward_passes == 3 and not rep.aborted


def test_plain_nll_step_runs_single_pass():
    m = model()
    cfg = TrainConfig(advgrad=False, advswap=False, kl=False, **SMALL)
    rep = advseq_step(m, (X, Y), cfg, Adam(1e-3), np.random.default_rng(0))
    assert (rep.forward_passes, rep.backward_passes) == (1, 1)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_skips_update():
    m = model()
    m.params["out_b"].data[5] = np.inf
    before = {k: t.data.copy() for k, t in m.params.items()}
    opt = Adam(1e-3)
    rep = advseq_step(m, (X, Y), TrainConfig(**SMALL), opt, np.random.default_rng(0))
    assert rep.aborted and opt.t == 0
    for k, t in m.params.items():
        np.testing.assert_array_equal(t.data, before[k])
        assert t.grad is None


def test_make_batches_equal_lengths_and_cover_all():
    rng = np.random.default_rng(0)
    pairs = copy_pairs(50, rng)
    batches = make_batches(pairs, 8, np.random.default_rng(1))
    assert sum(b[0].shape[0] for b in batches) == 50
    for x, y in batches:
        assert x.shape[0] <= 8 and y.shape[1] == x.shape[1] + 1
        assert (y[:, -1] == EOS).all()


def test_training_reduces_loss_and_is_deterministic(tmp_path):
    rng = np.random.default_rng(0)
    pairs = copy_pairs(64, rng)
    cfg = TrainConfig(epochs=3, batch_size=16, learning_rate=3e-3, **SMALL)
    a = train(pairs, cfg, 12, log_path=tmp_path / "a.log", checkpoint_dir=tmp_path / "a")
    train(pairs, cfg, 12, log_path=tmp_path / "b.log", checkpoint_dir=tmp_path / "b")
    assert (tmp_path / "a.log").read_bytes() == (tmp_path / "b.log").read_bytes()
    assert (tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "b" / "final.ckpt").read_bytes()
    first = np.mean([r.nll for r in a.log[:4]])
    last = np.mean([r.nll for r in a.log[-4:]])
    assert last < first
    lines = (tmp_path / "a.log").read_text().splitlines()
    assert lines[0].startswith("# advseq") and lines[2] == "# " + "\t".join(LOG_FIELDS)


def test_resume_from_checkpoint_is_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    pairs = copy_pairs(40, rng)
    cfg = TrainConfig(epochs=2, batch_size=16, checkpoint_every=1, **SMALL)
    full = train(pairs, cfg, 12, checkpoint_dir=tmp_path / "full")
    state, cfg2 = load_state(tmp_path / "full" / "epoch001.ckpt")
    assert cfg2 == cfg and state.epoch == 1
    resumed = train(pairs, cfg2, 12, state=state, checkpoint_dir=tmp_path / "resumed")
    for k, t in full.model.params.items():
        np.testing.assert_array_equal(t.data, resumed.model.params[k].data)
    assert (tmp_path / "full" / "final.ckpt").read_bytes() == (tmp_path / "resumed" / "final.ckpt").read_bytes()


def test_train_rejects_bad_data_and_config():
    with pytest.raises(ValueError, match="vocabulary"):
        train([([4, 40], [4])], TrainConfig(epochs=1, **SMALL), 12)
    with pytest.raises(ValueError, match="empty"):
        train([([], [4])], TrainConfig(epochs=1, **SMALL), 12)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(site_x="mid0")
    with pytest.raises(ValueError):
        TrainConfig(k=2.0)


def test_evaluate_counts():
    m = model()
    ev = evaluate(m, [([4, 5], [4, 5]), ([6, 7, 8], [6, 7, 8])])
    assert ev["n"] == 2 and 0 <= ev["seq_acc"] <= 1 and 0 <= ev["bleu"] <= 1
    assert evaluate(m, [])["n"] == 0
