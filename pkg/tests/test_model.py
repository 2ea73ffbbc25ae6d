"""Model-level contracts: source assembly, prompts, eos states, head, checkpoints."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tutorkit import (
    Conversation,
    GoldStrategy,
    LayerConfig,
    MaskedPrompt,
    Turn,
    TutorModel,
    WeightedMix,
    assemble_source,
    build_vocabulary,
    load_checkpoint,
    predict_strategy,
    save_checkpoint,
    select_strategies,
)
from tutorkit.autodiff import Tensor, mul, tsum
from tutorkit.model import DistributionSource
from conftest import grad_check


def conv(texts, target="ok", strategies=(0,)):
    turns = []
    for i, text in enumerate(texts):
        turns.append(Turn("student" if i % 2 == len(texts) % 2 else "tutor", text))
    return Conversation(id="t", turns=turns, strategies=list(strategies), target=target)


@pytest.fixture(scope="module")
def small_model(tiny_setup):
    _, _, vocab, _ = tiny_setup
    config = LayerConfig(
        d_model=32, n_heads=2, d_ff=48, n_enc_layers=1, n_dec_layers=1, max_positions=96
    )
    model = TutorModel(config, vocab, rng=3)
    model.eval_mode()
    return model


# -- assemble_source -----------------------------------------------------------

def test_assemble_one_turn_has_no_eos(tiny_setup):
    _, _, vocab, _ = tiny_setup
    c = conv(["hello there"])
    ids = assemble_source(c, vocab, max_positions=64)
    assert ids == vocab.encode("hello there") + [vocab.mask_id]
    assert vocab.eos_id not in ids


def test_assemble_two_turns_separated_by_eos(tiny_setup):
    _, _, vocab, _ = tiny_setup
    c = conv(["hello", "i am stuck today"])
    ids = assemble_source(c, vocab, max_positions=64)
    expected = (
        vocab.encode("hello") + [vocab.eos_id] + vocab.encode("i am stuck today") + [vocab.mask_id]
    )
    assert ids == expected


def test_assemble_truncates_whole_oldest_turns(tiny_setup):
    _, _, vocab, _ = tiny_setup
    texts = [f"turn number {i} says things and things again" for i in range(8)]
    c = conv(texts)
    full = assemble_source(c, vocab, max_positions=256)
    short = assemble_source(c, vocab, max_positions=30)
    assert len(short) <= 29
    assert short[-1] == vocab.mask_id
    # the suffix turns are intact: short is a suffix of full
    assert full[-len(short):] == short
    # the cut lands on a turn boundary: the first kept token follows an eos in full
    boundary = len(full) - len(short)
    assert full[boundary - 1] == vocab.eos_id


def test_assemble_final_turn_never_split(tiny_setup):
    _, _, vocab, _ = tiny_setup
    c = conv(["one word " * 30])
    with pytest.raises(ValueError, match="final turn"):
        assemble_source(c, vocab, max_positions=16)


def test_assemble_rejects_empty():
    with pytest.raises(ValueError, match="no turns"):
        Conversation(id="x", turns=[], strategies=[0], target="y")


# -- prompts and forward passes ---------------------------------------------

def _batch_from(model, texts, target="fine work"):
    vocab = model.vocab
    c = conv(texts, target=target)
    src = np.array([assemble_source(c, vocab, model.config.max_positions)])
    tgt = np.array([vocab.encode(target) + [vocab.eos_id]])
    return src, np.zeros_like(src, dtype=bool), tgt


def test_weighted_mix_degenerate_equals_gold_prompt(small_model):
    model = small_model
    src, pad, tgt = _batch_from(model, ["hello", "i am stuck"])
    enc = model.encode(src, pad)
    logits_gold, _ = model.forward_target(enc, tgt, GoldStrategy(1))
    logits_mix, _ = model.forward_target(enc, tgt, WeightedMix(((1, 1.0),)))
    assert np.allclose(logits_gold.data, logits_mix.data, atol=1e-12)


def test_masked_vs_gold_prompt_logits_differ(trained_tiny):
    model, _ = trained_tiny
    src, pad, tgt = _batch_from(model, ["hello", "i am completely stuck with algebra"])
    enc = model.encode(src, pad)
    logits_gold, _ = model.forward_target(enc, tgt, GoldStrategy(0))
    logits_masked, _ = model.forward_target(enc, tgt, MaskedPrompt())
    assert not np.allclose(logits_gold.data, logits_masked.data)


def test_gold_prompts_distinguish_strategies(trained_tiny):
    model, _ = trained_tiny
    src, pad, tgt = _batch_from(model, ["we practiced ratios and now i am quiz incoming"])
    enc = model.encode(src, pad)
    first = model.forward_target(enc, tgt, GoldStrategy(0))[0].data[:, 0]
    second = model.forward_target(enc, tgt, GoldStrategy(1))[0].data[:, 0]
    assert not np.allclose(first, second)


def test_prompt_is_literal_token_for_gold(small_model):
    model = small_model
    src, pad, tgt = _batch_from(model, ["hello"])
    enc = model.encode(src, pad)
    model.forward_target(enc, tgt, GoldStrategy(2))
    assert model.last_target_input_ids[0, 0] == model.vocab.strategy_token_id(2)
    model.forward_target(enc, tgt, MaskedPrompt())
    assert model.last_target_input_ids[0, 0] == model.vocab.mask_id
    model.forward_target(enc, tgt, WeightedMix(((0, 0.5), (1, 0.5))))
    assert model.last_target_input_ids[0, 0] == -1


def test_invalid_strategy_index_raises(small_model):
    model = small_model
    src, pad, tgt = _batch_from(model, ["hello"])
    enc = model.encode(src, pad)
    with pytest.raises(ValueError, match="out of range"):
        model.forward_target(enc, tgt, GoldStrategy(99))


def test_forward_source_shapes_and_availability(small_model):
    model = small_model
    src, pad, _ = _batch_from(model, ["hello", "i am stuck"])
    enc = model.encode(src, pad)
    logits, hidden = model.forward_source(enc, src)
    assert logits.shape == (1, src.shape[1], len(model.vocab))
    assert hidden.shape == (1, src.shape[1] + 1, model.config.d_model)


def test_eos_representation_unpadded_and_padded(small_model):
    model = small_model
    rng = np.random.default_rng(0)
    hidden = Tensor(rng.normal(0, 1, (2, 6, model.config.d_model)))
    lengths = np.array([5, 3])
    out = model.eos_representation(hidden, lengths)
    assert np.allclose(out.data[0], hidden.data[0, 5])
    assert np.allclose(out.data[1], hidden.data[1, 3])
    with pytest.raises(ValueError, match="empty"):
        model.eos_representation(hidden, np.array([0, 3]))


def test_source_and_target_eos_states_differ(trained_tiny):
    model, _ = trained_tiny
    src, pad, tgt = _batch_from(model, ["hello", "i am vaguely unsure about maps"])
    enc = model.encode(src, pad)
    _, target_hidden = model.forward_target(enc, tgt, MaskedPrompt(), need_logits=False)
    _, source_hidden = model.forward_source(enc, src)
    h_t = model.eos_representation(target_hidden, np.array([tgt.shape[1]]))
    h_s = model.eos_representation(source_hidden, np.array([src.shape[1]]))
    assert not np.allclose(h_t.data, h_s.data)


# -- strategy head -------------------------------------------------------------

def test_zero_head_gives_uniform(small_model):
    model = small_model
    saved = [(p.data.copy()) for p in (model.head_w1, model.head_b1, model.head_w2, model.head_b2)]
    for p in (model.head_w1, model.head_b1, model.head_w2, model.head_b2):
        p.data = np.zeros_like(p.data)
    h = Tensor(np.random.default_rng(1).normal(0, 1, (2, model.config.d_model)))
    probs = model.strategy_probs(h)
    n = len(model.strategies)
    assert np.allclose(probs.data, 1.0 / n)
    for p, data in zip((model.head_w1, model.head_b1, model.head_w2, model.head_b2), saved):
        p.data = data


def test_head_output_is_simplex(small_model):
    model = small_model
    h = Tensor(np.random.default_rng(2).normal(0, 4, (5, model.config.d_model)))
    probs = model.strategy_probs(h)
    assert np.allclose(probs.data.sum(axis=-1), 1.0, atol=1e-9)
    assert (probs.data >= 0).all()


def test_head_gradcheck(small_model):
    model = small_model
    h = Tensor(np.random.default_rng(3).uniform(-2, 2, (2, model.config.d_model)), requires_grad=True)
    w = np.random.default_rng(4).uniform(-1, 1, (2, len(model.strategies)))

    def f():
        return tsum(mul(model.strategy_probs(h), w))

    tensors = [("h", h), ("w1", model.head_w1), ("b1", model.head_b1), ("w2", model.head_w2)]
    grad_check(f, tensors, n_samples=8, seed=21)


def test_predict_strategy_wrapper(small_model):
    model = small_model
    h = Tensor(np.random.default_rng(5).normal(0, 1, (1, model.config.d_model)))
    dist = predict_strategy(model, h, DistributionSource.FROM_TARGET)
    assert dist.source == DistributionSource.FROM_TARGET
    assert dist.probs.shape == (len(model.strategies),)
    assert 0 <= dist.argmax() < len(model.strategies)


# -- select_strategies ----------------------------------------------------------

def test_select_strategies_renormalizes():
    out = select_strategies([0.5, 0.35, 0.15], theta=0.3)
    assert [j for j, _ in out] == [0, 1]
    assert out[0][1] == pytest.approx(0.5 / 0.85)
    assert out[1][1] == pytest.approx(0.35 / 0.85)


def test_select_strategies_argmax_fallback():
    out = select_strategies([0.25, 0.25, 0.25, 0.25], theta=0.3)
    assert out == [(0, 1.0)]


def test_select_strategies_one_hot_theta_one():
    out = select_strategies([0.0, 1.0, 0.0], theta=1.0)
    assert out == [(1, 1.0)]


def test_select_strategies_rejects_bad_theta():
    with pytest.raises(ValueError, match="theta"):
        select_strategies([1.0], theta=0.0)


@given(
    st.lists(st.floats(min_value=1e-3, max_value=1.0), min_size=2, max_size=8),
    st.floats(min_value=0.05, max_value=1.0),
)
@settings(max_examples=80, deadline=None)
def test_select_strategies_weights_sum_to_one_and_monotone(raw, theta):
    probs = np.array(raw) / np.sum(raw)
    out = select_strategies(probs, theta)
    weights = [w for _, w in out]
    assert abs(sum(weights) - 1.0) < 1e-9
    assert all(w > 0 for w in weights)
    # monotone over the selected set: bigger probability, bigger weight
    chosen = sorted(out, key=lambda jw: probs[jw[0]])
    assert all(a[1] <= b[1] + 1e-12 for a, b in zip(chosen, chosen[1:]))


# -- checkpoints ----------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(small_model, tmp_path):
    model = small_model
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)
    clone = load_checkpoint(path)
    for (name_a, a), (name_b, b) in zip(model.named_parameters(), clone.named_parameters()):
        assert name_a == name_b
        assert a.data.dtype == b.data.dtype == np.float64
        assert np.array_equal(a.data, b.data), name_a
    assert clone.config.to_dict() == model.config.to_dict()
    assert clone.vocab.to_dict() == model.vocab.to_dict()
    # save the clone again: byte-identical files
    path2 = tmp_path / "m2.ckpt"
    save_checkpoint(path2, clone)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_rejects_foreign_payload(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_text('{"format": "other"}', encoding="utf-8")
    with pytest.raises(ValueError, match="not a tutorkit checkpoint"):
        load_checkpoint(path)


def test_shared_decoder_flag_shares_parameters(tiny_setup):
    _, _, vocab, _ = tiny_setup
    config = LayerConfig(
        d_model=32, n_heads=2, d_ff=48, n_enc_layers=1, n_dec_layers=1,
        max_positions=96, share_decoders=True,
    )
    model = TutorModel(config, vocab, rng=1)
    assert model.source_decoder is model.target_decoder
    names = [n for n, _ in model.named_parameters()]
    assert not any(n.startswith("source_decoder") for n in names)
