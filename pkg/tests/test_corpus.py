"""Corpus loading, vocabulary, splitting, batching, and the synthetic generator."""

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tutorkit.corpus import (
    Conversation,
    StrategyList,
    Turn,
    Vocabulary,
    build_vocabulary,
    corpus_stats,
    detokenize,
    generate_synthetic,
    imbalance_profile,
    load_corpus,
    make_batches,
    normalize_text,
    save_corpus,
    split_corpus,
    synthetic_cues,
    synthetic_strategy_names,
    tokenize,
)

STRATS = StrategyList(("hint", "question", "correction"))


def _record(i=0, strategies=("hint",), target="well done"):
    return {
        "id": f"c{i}",
        "turns": [
            {"speaker": "tutor", "text": "hello there"},
            {"speaker": "student", "text": "i am stuck"},
        ],
        "strategies": list(strategies),
        "target": target,
    }


def _write_corpus(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")


def test_load_single_well_formed_line(tmp_path):
    path = tmp_path / "c.jsonl"
    _write_corpus(path, [_record()])
    convs = load_corpus(path, STRATS)
    assert len(convs) == 1
    assert convs[0].strategies == [0]
    assert convs[0].target == "well done"


def test_load_unknown_strategy_names_offender(tmp_path):
    path = tmp_path / "c.jsonl"
    _write_corpus(path, [_record(strategies=("noencouragement",))])
    with pytest.raises(ValueError, match="noencouragement"):
        load_corpus(path, STRATS)


def test_load_reports_line_numbers(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text(json.dumps(_record()) + "\n{broken\n", encoding="utf-8")
    with pytest.raises(ValueError, match=":2"):
        load_corpus(path, STRATS)


def test_load_rejects_empty_file(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text("", encoding="utf-8")
    with pytest.raises(ValueError, match="empty"):
        load_corpus(path, STRATS)


def test_load_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_corpus(tmp_path / "nope.jsonl", STRATS)


def test_five_strategy_record_loads_with_five_entry_list(tmp_path):
    strategies = StrategyList(tuple(f"s{i}" for i in range(5)))
    path = tmp_path / "c.jsonl"
    _write_corpus(path, [dict(_record(), strategies=["s4", "s0"])])
    convs = load_corpus(path, strategies)
    assert convs[0].strategies == [4, 0]


def test_corpus_round_trip(tmp_path):
    convs, strategies = generate_synthetic(12, 3, seed=3)
    path = tmp_path / "c.jsonl"
    save_corpus(path, convs, strategies)
    loaded = load_corpus(path, strategies)
    assert [c.id for c in loaded] == [c.id for c in convs]
    assert [c.target for c in loaded] == [c.target for c in convs]
    assert [c.strategies for c in loaded] == [c.strategies for c in convs]


def test_tokenize_detokenize_identity_on_normalized_text():
    text = normalize_text("  the   cat\tsat \n on the mat ")
    assert detokenize(tokenize(text)) == text


def test_vocabulary_min_freq_threshold():
    convs = [
        Conversation(
            id="x",
            turns=[Turn("student", "a a b")],
            strategies=[0],
            target="a",
        )
    ]
    vocab = build_vocabulary(convs, STRATS, min_freq=2)
    assert vocab.id_of("a") >= vocab.n_reserved
    assert vocab.id_of("b") == vocab.unk_id


def test_vocabulary_determinism():
    convs, strategies = generate_synthetic(30, 3, seed=9)
    v1 = build_vocabulary(convs, strategies)
    v2 = build_vocabulary(convs, strategies)
    assert v1.to_dict() == v2.to_dict()


def test_vocabulary_specials_always_present():
    convs = [Conversation(id="x", turns=[Turn("student", "hi")], strategies=[0], target="hi")]
    vocab = build_vocabulary(convs, STRATS)
    assert vocab.pad_id == 0 and vocab.unk_id == 1 and vocab.bos_id == 2
    assert vocab.eos_id == 3 and vocab.mask_id == 4
    assert vocab.strategy_token_ids == [5, 6, 7]


def test_vocabulary_reserved_surfaces_never_tokenized():
    convs = [
        Conversation(
            id="x", turns=[Turn("student", "<mask> says <strategy:hint>")],
            strategies=[0], target="ok then",
        )
    ]
    vocab = build_vocabulary(convs, STRATS)
    ids = vocab.encode("<mask> says <strategy:hint>")
    assert ids[0] == vocab.unk_id
    assert ids[2] == vocab.unk_id
    assert ids[1] == vocab.id_of("says")


def test_vocab_round_trip_preserves_ids():
    convs, strategies = generate_synthetic(20, 4, seed=2)
    vocab = build_vocabulary(convs, strategies)
    clone = Vocabulary.from_dict(vocab.to_dict())
    assert len(clone) == len(vocab)
    for tok in ("about", "<eos>", "<strategy:hint>"):
        assert clone.id_of(tok) == vocab.id_of(tok)


def test_split_ratios_and_partition():
    convs, _ = generate_synthetic(100, 3, seed=1)
    train, valid, test = split_corpus(convs, seed=4)
    assert (len(train), len(valid), len(test)) == (80, 10, 10)
    ids = [c.id for c in train + valid + test]
    assert sorted(ids) == sorted(c.id for c in convs)
    assert len(set(ids)) == len(ids)


def test_split_determinism():
    convs, _ = generate_synthetic(40, 3, seed=1)
    a = split_corpus(convs, seed=11)
    b = split_corpus(convs, seed=11)
    assert [c.id for c in a[0]] == [c.id for c in b[0]]
    c = split_corpus(convs, seed=12)
    assert [x.id for x in a[0]] != [x.id for x in c[0]]


def test_split_requires_ten():
    convs, _ = generate_synthetic(9, 2, seed=1)
    with pytest.raises(ValueError, match="at least 10"):
        split_corpus(convs, seed=0)


def test_make_batches_packing_and_budget():
    convs, strategies = generate_synthetic(40, 3, seed=6)
    vocab = build_vocabulary(convs, strategies)
    batches = make_batches(convs, vocab, max_tokens=128, max_positions=96)
    for b in batches:
        assert b.src.shape[0] * b.src.shape[1] <= 128
    assert sum(len(b) for b in batches) == 40


def test_make_batches_rejects_oversized_example():
    convs, strategies = generate_synthetic(5, 3, seed=6)
    vocab = build_vocabulary(convs, strategies)
    with pytest.raises(ValueError, match="max_tokens"):
        make_batches(convs, vocab, max_tokens=4, max_positions=96)


def test_make_batches_covers_every_gold_strategy():
    convs, strategies = generate_synthetic(60, 4, seed=8)
    vocab = build_vocabulary(convs, strategies)
    batches = make_batches(convs, vocab, max_tokens=256, max_positions=96)
    seen = {g for b in batches for golds in b.gold for g in golds}
    expected = {g for c in convs for g in c.strategies}
    assert seen == expected


def test_batch_masks_consistent_with_pads():
    convs, strategies = generate_synthetic(25, 3, seed=10)
    vocab = build_vocabulary(convs, strategies)
    for batch in make_batches(convs, vocab, max_tokens=512, max_positions=96):
        assert ((batch.src == vocab.pad_id) == batch.src_pad).all()
        assert ((batch.tgt == vocab.pad_id) == batch.tgt_pad).all()
        # every target row ends with eos at its true final position
        for i in range(len(batch)):
            assert batch.tgt[i, batch.tgt_lengths[i] - 1] == vocab.eos_id


def test_generator_determinism_byte_identical(tmp_path):
    a, strategies = generate_synthetic(50, 4, seed=77, cue_noise=0.4, imbalance="severe")
    b, _ = generate_synthetic(50, 4, seed=77, cue_noise=0.4, imbalance="severe")
    pa, pb = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    save_corpus(pa, a, strategies)
    save_corpus(pb, b, strategies)
    assert pa.read_bytes() == pb.read_bytes()


def _cue_rule(strategy_count):
    """Independent oracle: map the planted bigram back to its strategy."""
    table = {cue: i for i, cue in enumerate(synthetic_cues(strategy_count))}

    def predict(conv: Conversation) -> int | None:
        student_turns = [t for t in conv.turns if t.speaker == "student"]
        tokens = tokenize(student_turns[-1].text)
        for x, y in zip(tokens, tokens[1:]):
            if (x, y) in table:
                return table[(x, y)]
        return None

    return predict


def test_generator_noise_free_cue_is_perfect():
    convs, _ = generate_synthetic(300, 5, seed=13, cue_noise=0.0)
    rule = _cue_rule(5)
    predictions = [rule(c) for c in convs]
    assert all(p is not None for p in predictions)
    accuracy = np.mean([p == c.strategies[0] for p, c in zip(predictions, convs)])
    assert accuracy == 1.0


def test_generator_severe_imbalance_majority_share():
    convs, strategies = generate_synthetic(2000, 5, seed=14, imbalance="severe")
    stats = corpus_stats(convs, strategies)
    assert stats["majority_share"] >= 0.5


def test_generator_noise_one_has_zero_cue_information():
    n = 6000
    convs, _ = generate_synthetic(n, 4, seed=15, cue_noise=1.0, imbalance="mild")
    rule = _cue_rule(4)
    joint = np.zeros((4, 4))
    for c in convs:
        cue = rule(c)
        joint[c.strategies[0], cue] += 1
    joint /= joint.sum()
    px = joint.sum(axis=1, keepdims=True)
    py = joint.sum(axis=0, keepdims=True)
    mi = 0.0
    for i in range(4):
        for j in range(4):
            if joint[i, j] > 0:
                mi += joint[i, j] * math.log(joint[i, j] / (px[i, 0] * py[0, j]))
    # the empirical noise floor is about (K-1)^2 / (2N) nats
    assert mi < 0.01
    # and at noise 0 the cue carries full label information
    convs0, _ = generate_synthetic(500, 4, seed=15, cue_noise=0.0, imbalance="mild")
    agree = np.mean([rule(c) == c.strategies[0] for c in convs0])
    assert agree == 1.0


def test_imbalance_profiles_are_distributions():
    for kind in ("uniform", "mild", "severe"):
        for k in (2, 5, 12):
            p = imbalance_profile(k, kind)
            assert p.shape == (k,)
            assert abs(p.sum() - 1.0) < 1e-12
    assert imbalance_profile(8, "severe")[0] == pytest.approx(0.75)


def test_generator_rejects_bad_args():
    with pytest.raises(ValueError, match="strategies"):
        generate_synthetic(10, 1, seed=0)
    with pytest.raises(ValueError, match="cue_noise"):
        generate_synthetic(10, 3, seed=0, cue_noise=1.5)
    with pytest.raises(ValueError, match="imbalance"):
        generate_synthetic(10, 3, seed=0, imbalance="extreme")


def test_strategy_names_extend_beyond_base_list():
    names = synthetic_strategy_names(15)
    assert len(set(names)) == 15
    cues = synthetic_cues(15)
    assert len(set(cues)) == 15


@given(st.integers(min_value=2, max_value=14), st.integers(min_value=0, max_value=10_000))
@settings(max_examples=25, deadline=None)
def test_generator_single_gold_in_range(n_strategies, seed):
    convs, strategies = generate_synthetic(5, n_strategies, seed=seed)
    for c in convs:
        assert len(c.strategies) == 1
        assert 0 <= c.strategies[0] < len(strategies)
        assert c.target
        assert c.turns[-1].speaker == "student"


def test_strategy_list_validation():
    with pytest.raises(ValueError, match="unique"):
        StrategyList(("a", "a"))
    with pytest.raises(ValueError, match="unknown strategy"):
        STRATS.index("nope")


def test_strategy_list_file_round_trip(tmp_path):
    path = tmp_path / "s.txt"
    STRATS.save(path)
    assert StrategyList.load(path) == STRATS
