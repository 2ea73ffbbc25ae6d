"""Corpus data model, tokenizer, vocabulary, batching, and a synthetic generator.

Corpus files are UTF-8 JSON lines, one conversation per line:

    {"id": "...", "turns": [{"speaker": "tutor|student", "text": "..."}],
     "strategies": ["hint", ...], "target": "..."}

Strategy files list one strategy name per line; the line order fixes label ids.
Text is whitespace-tokenized; detokenization is a plain space join, so
tokenize/detokenize round-trips on whitespace-normalized text.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SPEAKERS = ("tutor", "student")

PAD, UNK, BOS, EOS, MASK = "<pad>", "<unk>", "<bos>", "<eos>", "<mask>"
SPECIAL_TOKENS = (PAD, UNK, BOS, EOS, MASK)


def tokenize(text: str) -> list[str]:
    return text.split()


def detokenize(tokens: Sequence[str]) -> str:
    return " ".join(tokens)


def normalize_text(text: str) -> str:
    return " ".join(text.split())


@dataclass
class Turn:
    speaker: str
    text: str

    def __post_init__(self):
        if self.speaker not in SPEAKERS:
            raise ValueError(f"unknown speaker {self.speaker!r}; expected one of {SPEAKERS}")
        self.text = normalize_text(self.text)


@dataclass
class Conversation:
    """Ordered turns, gold strategy ids for the next tutor response, and that response.

    ``target`` may be empty only for inference-time contexts; corpus loading
    rejects empty targets.
    """

    id: str
    turns: list[Turn]
    strategies: list[int]
    target: str = ""

    def __post_init__(self):
        if not self.turns:
            raise ValueError(f"conversation {self.id!r} has no turns")
        self.target = normalize_text(self.target)


@dataclass(frozen=True)
class StrategyList:
    """Ordered strategy names; the position in the list is the label id."""

    names: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ValueError("strategy names must be unique")
        if not self.names:
            raise ValueError("strategy list is empty")

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ValueError(
                f"unknown strategy {name!r}; valid strategies: {', '.join(self.names)}"
            ) from None

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(f"{n}\n" for n in self.names), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "StrategyList":
        lines = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines()]
        return cls(tuple(ln for ln in lines if ln))


class Vocabulary:
    """Token/id table with reserved ids first: specials, then strategy tokens.

    Reserved surfaces are never produced by text tokenization; a raw text token
    that collides with one maps to ``<unk>``.
    """

    def __init__(self, natural_tokens: Sequence[str], strategies: StrategyList):
        self.strategies = strategies
        strategy_tokens = [f"<strategy:{name}>" for name in strategies.names]
        self._tokens: list[str] = list(SPECIAL_TOKENS) + strategy_tokens + list(natural_tokens)
        if len(set(self._tokens)) != len(self._tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self._ids = {t: i for i, t in enumerate(self._tokens)}
        self._reserved = set(SPECIAL_TOKENS) | set(strategy_tokens)

    def __len__(self) -> int:
        return len(self._tokens)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    @property
    def bos_id(self) -> int:
        return 2

    @property
    def eos_id(self) -> int:
        return 3

    @property
    def mask_id(self) -> int:
        return 4

    @property
    def n_reserved(self) -> int:
        return len(SPECIAL_TOKENS) + len(self.strategies)

    @property
    def strategy_token_ids(self) -> list[int]:
        base = len(SPECIAL_TOKENS)
        return list(range(base, base + len(self.strategies)))

    def strategy_token_id(self, strategy_index: int) -> int:
        if not 0 <= strategy_index < len(self.strategies):
            raise ValueError(f"strategy index {strategy_index} out of range")
        return len(SPECIAL_TOKENS) + strategy_index

    def id_of(self, token: str) -> int:
        return self._ids.get(token, self.unk_id)

    def token_of(self, idx: int) -> str:
        return self._tokens[idx]

    def encode(self, text: str) -> list[int]:
        ids = []
        for tok in tokenize(text):
            if tok in self._reserved:
                ids.append(self.unk_id)
            else:
                ids.append(self._ids.get(tok, self.unk_id))
        return ids

    def decode(self, ids: Iterable[int], skip_reserved: bool = True) -> str:
        toks = []
        for i in ids:
            tok = self._tokens[int(i)]
            if skip_reserved and tok in self._reserved:
                continue
            toks.append(tok)
        return detokenize(toks)

    def to_dict(self) -> dict:
        return {
            "natural_tokens": self._tokens[self.n_reserved :],
            "strategies": list(self.strategies.names),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(d["natural_tokens"], StrategyList(tuple(d["strategies"])))


# -- corpus io ------------------------------------------------------------

def _parse_record(record: dict, strategies: StrategyList, where: str) -> Conversation:
    for key in ("id", "turns", "strategies", "target"):
        if key not in record:
            raise ValueError(f"{where}: missing field {key!r}")
    turns = []
    for t in record["turns"]:
        if not isinstance(t, dict) or "speaker" not in t or "text" not in t:
            raise ValueError(f"{where}: each turn needs 'speaker' and 'text'")
        if not normalize_text(str(t["text"])):
            raise ValueError(f"{where}: empty turn text")
        turns.append(Turn(speaker=t["speaker"], text=str(t["text"])))
    if not normalize_text(str(record["target"])):
        raise ValueError(f"{where}: empty target response")
    gold = [strategies.index(name) for name in record["strategies"]]
    if not gold:
        raise ValueError(f"{where}: record has no gold strategy")
    return Conversation(
        id=str(record["id"]), turns=turns, strategies=gold, target=str(record["target"])
    )


def load_corpus(path: str | Path, strategies: StrategyList) -> list[Conversation]:
    """Read a JSONL corpus, validating every record against the strategy list."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"corpus file not found: {path}")
    conversations = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            where = f"{path}:{lineno}"
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{where}: malformed JSON ({exc.msg})") from None
            conversations.append(_parse_record(record, strategies, where))
    if not conversations:
        raise ValueError(f"{path}: corpus is empty")
    return conversations


def save_corpus(path: str | Path, conversations: Sequence[Conversation], strategies: StrategyList) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for conv in conversations:
            record = {
                "id": conv.id,
                "turns": [{"speaker": t.speaker, "text": t.text} for t in conv.turns],
                "strategies": [strategies.names[i] for i in conv.strategies],
                "target": conv.target,
            }
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def build_vocabulary(
    conversations: Sequence[Conversation], strategies: StrategyList, min_freq: int = 1
) -> Vocabulary:
    """Whitespace tokens with frequency >= min_freq, ordered by (freq desc, token)."""
    if min_freq < 1:
        raise ValueError(f"min_freq must be >= 1, got {min_freq}")
    if not conversations:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts: dict[str, int] = {}
    for conv in conversations:
        for turn in conv.turns:
            for tok in tokenize(turn.text):
                counts[tok] = counts.get(tok, 0) + 1
        for tok in tokenize(conv.target):
            counts[tok] = counts.get(tok, 0) + 1
    kept = sorted(
        (t for t, c in counts.items() if c >= min_freq and t not in SPECIAL_TOKENS),
        key=lambda t: (-counts[t], t),
    )
    kept = [t for t in kept if not (t.startswith("<strategy:") and t.endswith(">"))]
    return Vocabulary(kept, strategies)


def split_corpus(
    conversations: Sequence[Conversation], seed: int
) -> tuple[list[Conversation], list[Conversation], list[Conversation]]:
    """Deterministic shuffled 8:1:1 split."""
    n = len(conversations)
    if n < 10:
        raise ValueError(f"need at least 10 conversations to split 8:1:1, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_valid = n // 10
    n_test = n // 10
    n_train = n - n_valid - n_test
    shuffled = [conversations[i] for i in order]
    return (
        shuffled[:n_train],
        shuffled[n_train : n_train + n_valid],
        shuffled[n_train + n_valid :],
    )


# -- batching --------------------------------------------------------------

@dataclass
class Batch:
    """Padded id matrices plus masks; ``tgt`` rows end with the eos token."""

    example_ids: list[str]
    src: np.ndarray  # (B, Ls) int64
    src_pad: np.ndarray  # (B, Ls) bool, True at padding
    src_lengths: np.ndarray  # (B,)
    tgt: np.ndarray  # (B, Lt) int64, gold tokens + eos, padded
    tgt_pad: np.ndarray  # (B, Lt) bool
    tgt_lengths: np.ndarray  # (B,)
    gold: list[list[int]]  # gold strategy ids per example

    def __len__(self) -> int:
        return len(self.example_ids)

    @property
    def n_target_tokens(self) -> int:
        return int(self.tgt_lengths.sum())

    @property
    def n_source_tokens(self) -> int:
        return int(self.src_lengths.sum())


def _pad_matrix(rows: list[list[int]], pad_id: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    lengths = np.array([len(r) for r in rows], dtype=np.int64)
    width = int(lengths.max())
    mat = np.full((len(rows), width), pad_id, dtype=np.int64)
    for i, r in enumerate(rows):
        mat[i, : len(r)] = r
    pad = np.arange(width)[None, :] >= lengths[:, None]
    return mat, pad, lengths


def make_batches(
    conversations: Sequence[Conversation],
    vocab: Vocabulary,
    max_tokens: int = 1024,
    max_positions: int = 256,
    seed: int | None = None,
) -> list[Batch]:
    """Length-bucketed batches whose padded source token count stays <= max_tokens.

    Order is deterministic: examples are sorted by assembled source length
    (stably, after an optional seeded shuffle) and packed greedily.
    """
    from .model import assemble_source  # the truncation policy lives with the model

    items = []
    indices = list(range(len(conversations)))
    if seed is not None:
        indices = list(np.random.default_rng(seed).permutation(len(conversations)))
    for i in indices:
        conv = conversations[i]
        src = assemble_source(conv, vocab, max_positions)
        if not conv.target:
            raise ValueError(f"conversation {conv.id!r} has no target response")
        tgt = vocab.encode(conv.target) + [vocab.eos_id]
        items.append((conv, src, tgt))

    longest = max(len(src) for _, src, _ in items)
    if longest > max_tokens:
        raise ValueError(
            f"max_tokens={max_tokens} is below the longest single source ({longest} tokens)"
        )

    items.sort(key=lambda it: len(it[1]))
    batches: list[Batch] = []
    current: list[tuple[Conversation, list[int], list[int]]] = []
    width = 0
    for item in items:
        new_width = max(width, len(item[1]))
        if current and (len(current) + 1) * new_width > max_tokens:
            batches.append(_finalize_batch(current, vocab))
            current, width = [], 0
            new_width = len(item[1])
        current.append(item)
        width = new_width
    if current:
        batches.append(_finalize_batch(current, vocab))
    return batches


def _finalize_batch(items, vocab: Vocabulary) -> Batch:
    src, src_pad, src_len = _pad_matrix([it[1] for it in items], vocab.pad_id)
    tgt, tgt_pad, tgt_len = _pad_matrix([it[2] for it in items], vocab.pad_id)
    return Batch(
        example_ids=[it[0].id for it in items],
        src=src,
        src_pad=src_pad,
        src_lengths=src_len,
        tgt=tgt,
        tgt_pad=tgt_pad,
        tgt_lengths=tgt_len,
        gold=[list(it[0].strategies) for it in items],
    )


# -- synthetic tutoring corpus ----------------------------------------------

_BASE_STRATEGIES = [
    "hint",
    "question",
    "correction",
    "confirmation",
    "example",
    "recap",
    "praise",
    "probe",
    "reframe",
    "challenge",
    "scaffold",
    "elaborate",
]

# One cue bigram per strategy, inserted verbatim into the student's last turn.
# Cue words are chosen to be disjoint from every template/filler/topic word so
# a bigram matcher can recover the cue without false positives.
_BASE_CUES = [
    ("completely", "stuck"),
    ("quiz", "incoming"),
    ("attempted", "answer"),
    ("double", "checking"),
    ("worked", "sample"),
    ("lost", "thread"),
    ("finally", "solved"),
    ("vaguely", "unsure"),
    ("explanation", "confusing"),
    ("too", "simple"),
    ("starting", "spot"),
    ("further", "detail"),
]

_RESPONSE_TEMPLATES = [
    "here is a small hint about {topic}",
    "let me ask you a question about {topic}",
    "not quite let us correct your work on {topic}",
    "yes exactly your {topic} answer is right",
    "consider this worked example of {topic}",
    "let us recap what we covered about {topic}",
    "great job your progress on {topic} is excellent",
    "tell me more about your thinking on {topic}",
    "let me explain {topic} in a different way",
    "try this harder problem about {topic}",
    "let us break {topic} into smaller steps",
    "here are more details about {topic}",
]

_TOPICS = [
    "fractions", "algebra", "geometry", "decimals", "ratios", "equations",
    "verbs", "nouns", "tenses", "plurals", "spelling", "grammar",
    "vowels", "syllables", "reading", "writing", "gravity", "energy",
    "magnets", "circuits", "planets", "weather", "atoms", "cells",
    "plants", "rivers", "maps", "history", "dates", "capitals",
    "money", "angles", "graphs", "tables", "percent", "area",
    "volume", "speed", "pronouns", "adverbs",
]

_STUDENT_TEMPLATES = [
    "i am {a} {b} with {topic}",
    "hey tutor i feel {a} {b} regarding {topic}",
    "we practiced {topic} and now i am {a} {b}",
    "so about {topic} i am {a} {b} today",
]

_TUTOR_OPENERS = [
    "hello what would you like to practice",
    "welcome back to our lesson",
    "good morning ready to learn something new",
]

_STUDENT_OPENERS = [
    "hi i want to work on {topic}",
    "hello can we go over {topic} please",
]

_TUTOR_FOLLOWUPS = [
    "of course let us look at that together",
    "sure thing tell me where you are",
]

IMBALANCE_PROFILES = ("uniform", "mild", "severe")


def synthetic_strategy_names(n_strategies: int) -> list[str]:
    names = list(_BASE_STRATEGIES[:n_strategies])
    for i in range(len(names), n_strategies):
        names.append(f"strategy{i}")
    return names


def synthetic_cues(n_strategies: int) -> list[tuple[str, str]]:
    """The cue bigram each strategy plants in the student's last turn."""
    cues = list(_BASE_CUES[:n_strategies])
    for i in range(len(cues), n_strategies):
        cues.append((f"cueword{i}", f"marker{i}"))
    return cues


def _response_template(strategy_index: int) -> str:
    if strategy_index < len(_RESPONSE_TEMPLATES):
        return _RESPONSE_TEMPLATES[strategy_index]
    return f"let us apply strategy{strategy_index} to {{topic}}"


def imbalance_profile(n_strategies: int, kind: str) -> np.ndarray:
    """Class prior over strategies. 'severe' puts 0.75 on the first class."""
    if kind not in IMBALANCE_PROFILES:
        raise ValueError(f"unknown imbalance profile {kind!r}; choose from {IMBALANCE_PROFILES}")
    if kind == "uniform":
        w = np.ones(n_strategies)
    elif kind == "mild":
        w = 0.75 ** np.arange(n_strategies)
    else:
        rest = 0.65 ** np.arange(n_strategies - 1)
        rest = 0.25 * rest / rest.sum()
        w = np.concatenate([[0.75], rest])
    return w / w.sum()


def generate_synthetic(
    n: int,
    n_strategies: int,
    seed: int,
    cue_noise: float = 0.0,
    imbalance: str = "uniform",
) -> tuple[list[Conversation], StrategyList]:
    """Templated tutoring dialogs with a lexically cued gold strategy.

    The student's last turn carries one cue bigram. With probability
    ``1 - cue_noise`` the cue matches the gold strategy; otherwise the cue is
    resampled from the class prior independently of the gold, so at
    ``cue_noise=1`` the cue carries no information about the label. The target
    response is a fixed template of (gold strategy, topic), so the label is
    always recoverable from the response text.
    """
    if n_strategies < 2:
        raise ValueError(f"need at least 2 strategies, got {n_strategies}")
    if not 0.0 <= cue_noise <= 1.0:
        raise ValueError(f"cue_noise must be in [0, 1], got {cue_noise}")
    strategies = StrategyList(tuple(synthetic_strategy_names(n_strategies)))
    cues = synthetic_cues(n_strategies)
    prior = imbalance_profile(n_strategies, imbalance)
    rng = np.random.default_rng(seed)

    conversations = []
    for i in range(n):
        gold = int(rng.choice(n_strategies, p=prior))
        if cue_noise > 0.0 and rng.random() < cue_noise:
            cue_strategy = int(rng.choice(n_strategies, p=prior))
        else:
            cue_strategy = gold
        topic = _TOPICS[int(rng.integers(len(_TOPICS)))]
        a, b = cues[cue_strategy]
        student_turn = _STUDENT_TEMPLATES[int(rng.integers(len(_STUDENT_TEMPLATES)))].format(
            a=a, b=b, topic=topic
        )
        depth = int(rng.choice([1, 2, 3], p=[0.3, 0.4, 0.3]))
        turns: list[Turn] = []
        if depth >= 3:
            turns.append(
                Turn("student", _STUDENT_OPENERS[int(rng.integers(len(_STUDENT_OPENERS)))].format(topic=topic))
            )
            turns.append(Turn("tutor", _TUTOR_FOLLOWUPS[int(rng.integers(len(_TUTOR_FOLLOWUPS)))]))
        elif depth == 2:
            turns.append(Turn("tutor", _TUTOR_OPENERS[int(rng.integers(len(_TUTOR_OPENERS)))]))
        turns.append(Turn("student", student_turn))
        target = _response_template(gold).format(topic=topic)
        conversations.append(
            Conversation(id=f"synth-{i:05d}", turns=turns, strategies=[gold], target=target)
        )
    return conversations, strategies


def corpus_stats(conversations: Sequence[Conversation], strategies: StrategyList) -> dict:
    """Counts used by the CLI stats subcommand."""
    counts = np.zeros(len(strategies), dtype=np.int64)
    src_tokens = 0
    tgt_tokens = 0
    for conv in conversations:
        for g in conv.strategies:
            counts[g] += 1
        src_tokens += sum(len(tokenize(t.text)) for t in conv.turns)
        tgt_tokens += len(tokenize(conv.target))
    total = int(counts.sum())
    shares = counts / max(total, 1)
    majority = int(counts.argmax())
    return {
        "n_conversations": len(conversations),
        "n_strategies": len(strategies),
        "strategy_counts": {strategies.names[i]: int(counts[i]) for i in range(len(strategies))},
        "strategy_shares": {strategies.names[i]: float(shares[i]) for i in range(len(strategies))},
        "majority_class": strategies.names[majority],
        "majority_share": float(shares[majority]),
        "context_tokens": src_tokens,
        "target_tokens": tgt_tokens,
    }
