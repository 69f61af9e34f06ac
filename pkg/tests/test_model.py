import numpy as np
import pytest

from advseq import autodiff as ad
from advseq.model import (
    BOS,
    DEC0,
    ENC0,
    EOS,
    ModelConfig,
    PerturbationSite,
    Seq2Seq,
    Vocab,
    load_checkpoint,
    save_checkpoint,
    with_eos,
)


def tiny(arch="attention", **kw):
    return Seq2Seq(ModelConfig(12, embed_dim=8, hidden_dim=12, num_encoder_layers=2, num_decoder_layers=2, arch=arch, **kw), seed=1)


def test_vocab_specials_first_and_round_trip(tmp_path):
    v = Vocab(["b", "a"])
    assert v.tokens[:4] == ["<pad>", "<bos>", "<eos>", "<unk>"]
    assert v.decode(v.encode(["a", "b"])) == ["a", "b"]
    v.save(tmp_path / "v.txt")
    assert Vocab.load(tmp_path / "v.txt") == v
    with pytest.raises(KeyError):
        v.encode(["zzz"])
    assert v.encode(["zzz"], strict=False) == [3]
    with pytest.raises(ValueError, match="duplicate"):
        Vocab(["a", "a"])


@pytest.mark.parametrize("text,site", [("enc0", ENC0), ("dec0", DEC0), ("encoder:2", PerturbationSite("encoder", 2))])
def test_site_parse(text, site):
    assert PerturbationSite.parse(text) == site
    assert PerturbationSite.parse(str(site)) == site


def test_site_validation():
    with pytest.raises(ValueError):
        PerturbationSite("middle", 0)
    with pytest.raises(ValueError):
        PerturbationSite("encoder", -1)
    m = tiny()
    with pytest.raises(ValueError, match="exceeds"):
        m.check_site(PerturbationSite("decoder", 3))


@pytest.mark.parametrize("arch", ["attention", "gru"])
def test_forward_shapes_and_normalization(arch):
    m = tiny(arch)
    x = np.array([[4, 5, 6], [7, 8, 9]])
    y = np.array([[5, 6, EOS, 0], [8, 9, 10, EOS]])
    out = m.forward(x, y)
    assert out.logp.shape == (2, 4, 12)
    np.testing.assert_allclose(np.exp(out.logp.data).sum(-1), 1.0, atol=1e-12)
    d = m.teacher_forced_dist([4, 5, 6], [5, 6, EOS])
    assert d.shape == (3, 12)


@pytest.mark.parametrize("arch", ["attention", "gru"])
def test_zero_perturbation_is_identity_and_nonzero_changes_output(arch):
    m = tiny(arch)
    x, y = [4, 5, 6, 7], [5, 6, EOS]
    base = m.teacher_forced_dist(x, y)
    zero = m.teacher_forced_dist(x, y, {ENC0: np.zeros((4, 8)), DEC0: np.zeros((3, m.site_width(DEC0)))})
    np.testing.assert_array_equal(base, zero)
    site = PerturbationSite("encoder", 1)
    moved = m.teacher_forced_dist(x, y, {site: np.full((4, m.site_width(site)), 0.3)})
    assert np.abs(moved - base).max() > 1e-6


def test_perturbation_shape_mismatch_errors():
    m = tiny()
    with pytest.raises(ad.ShapeError):
        m.forward([4, 5, 6], [5, EOS], {ENC0: np.zeros((2, 8))})


def test_decoder_is_causal():
    m = tiny()
    x = [4, 5, 6]
    a = m.teacher_forced_dist(x, [5, 6, 7, EOS])
    b = m.teacher_forced_dist(x, [5, 6, 9, EOS])
    # position t sees y_<t only, so rows 0..2 agree
    np.testing.assert_allclose(a[:3], b[:3], atol=1e-12)
    assert np.abs(a[3] - b[3]).max() > 0


def test_teacher_forcing_input_starts_with_bos():
    m = tiny()
    lp = m.sequence_logprob([4, 5], [6, EOS])
    d = m.teacher_forced_dist([4, 5], [6, EOS])
    assert lp == pytest.approx(np.log(d[0, 6]) + np.log(d[1, EOS]))
    assert BOS == 1


def test_batched_decode_matches_single():
    m = tiny()
    xs = np.array([[4, 5, 6], [9, 8, 7], [11, 4, 4]])
    batch = m.greedy_decode_batch(xs, max_len=6)
    assert batch == [m.greedy_decode(x, max_len=6) for x in xs]
    assert all(len(o) <= 6 and EOS not in o for o in batch)


def test_sequence_logprobs_batch_matches_single():
    m = tiny("gru")
    xs = np.array([[4, 5, 6], [9, 8, 7]])
    ys = np.array([[5, EOS], [8, EOS]])
    np.testing.assert_allclose(m.sequence_logprobs(xs, ys), [m.sequence_logprob(x, y) for x, y in zip(xs, ys)], rtol=1e-12)


def test_forward_input_validation():
    m = tiny()
    with pytest.raises(ValueError, match="outside"):
        m.forward([4, 12], [5])
    with pytest.raises(ValueError, match="batch size"):
        m.forward(np.array([[4, 5]]), np.array([[5], [6]]))
    with pytest.raises(ValueError, match="empty"):
        m.forward([], [5])


def test_zero_output_init_gives_uniform_distribution():
    m = tiny(output_init="zero")
    np.testing.assert_allclose(m.teacher_forced_dist([4, 5], [6, EOS]), 1 / 12, rtol=1e-12)


def test_embedding_vectors_is_a_read_only_copy():
    m = tiny()
    e = m.embedding_vectors()
    with pytest.raises(ValueError):
        e[0, 0] = 1.0
    np.testing.assert_array_equal(e, m.params["embed"].data)


@pytest.mark.parametrize("arch", ["attention", "gru"])
def test_checkpoint_round_trip_is_exact(tmp_path, arch):
    m = tiny(arch)
    extra = {"m/embed": np.arange(6.0).reshape(2, 3)}
    save_checkpoint(tmp_path / "a.ckpt", m, {"note": "x"}, extra)
    m2, meta, ex = load_checkpoint(tmp_path / "a.ckpt")
    assert meta == {"note": "x"}
    np.testing.assert_array_equal(ex["m/embed"], extra["m/embed"])
    for k, t in m.params.items():
        np.testing.assert_array_equal(t.data, m2.params[k].data)
    save_checkpoint(tmp_path / "b.ckpt", m2, {"note": "x"}, ex)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_rejects_bad_magic_and_trailing_bytes(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"nope")
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(p)
    save_checkpoint(p, tiny())
    p.write_bytes(p.read_bytes() + b"\0" * 8)
    with pytest.raises(ValueError, match="trailing"):
        load_checkpoint(p)


def test_snapshot_is_independent():
    m = tiny()
    s = m.snapshot()
    m.params["embed"].data = m.params["embed"].data + 1.0
    assert not np.array_equal(s.params["embed"].data, m.params["embed"].data)


def test_with_eos():
    assert with_eos([4, 5]) == [4, 5, EOS]
