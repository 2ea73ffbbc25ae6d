"""The joint tutoring model: shared encoder, two decoders, strategy head, prompts.

Source sequences are the conversation turns joined by ``<eos>`` separators with
a trailing ``<mask>`` token. The target decoder is teacher-forced on
``[prompt] + response + <eos>``; the prompt slot at position 0 carries either a
strategy token embedding, the ``<mask>`` embedding (neutral), or a
probability-weighted mix of strategy embeddings. The source decoder reconstructs
the source itself from ``[<bos>] + source``, which is always available, so its
final-token representation can drive strategy prediction at inference time.

The strategy head is a two-layer MLP over the final non-pad hidden state of
either decoder; its softmax output is the strategy distribution (source-side
"student" or target-side "teacher").
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .autodiff import (
    Tensor,
    add,
    concat,
    dropout,
    embedding,
    gather,
    matmul,
    mul,
    reshape,
    slice_axis,
    softmax,
    swap_last_axes,
    tsum,
)
from .corpus import Conversation, StrategyList, Vocabulary
from .layers import (
    EncoderOutput,
    LayerConfig,
    TransformerDecoder,
    TransformerEncoder,
    activation,
    init_param,
    parameter_count,
)

CHECKPOINT_FORMAT = "tutorkit-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class GoldStrategy:
    """Prompt with a strategy's reserved token; accepts one index for the whole
    batch or a sequence giving each example its own strategy."""

    index: int | tuple[int, ...]


@dataclass(frozen=True)
class MaskedPrompt:
    """Neutral prompt: the mask token embedding. Used when the strategy must not leak."""


@dataclass(frozen=True)
class WeightedMix:
    """Prompt made of a weighted sum of strategy-token embeddings."""

    pairs: tuple[tuple[int, float], ...]


Prompt = Union[GoldStrategy, MaskedPrompt, WeightedMix]


class DistributionSource(str, Enum):
    FROM_SOURCE = "source"
    FROM_TARGET = "target"


@dataclass
class StrategyDistribution:
    """A simplex over strategies plus which decoder produced it."""

    probs: np.ndarray
    source: DistributionSource

    def __post_init__(self):
        total = float(self.probs.sum())
        if abs(total - 1.0) > 1e-6 or (self.probs < 0).any():
            raise ValueError(f"probabilities must form a simplex, sum={total}")

    def argmax(self) -> int:
        return int(self.probs.argmax())


def assemble_source(conversation: Conversation, vocab: Vocabulary, max_positions: int) -> list[int]:
    """Token ids for the conversation context: turns joined by eos, then mask.

    When the result would exceed ``max_positions - 1`` (one slot is reserved for
    the decoder's start symbol), whole turns are dropped from the left so the
    most recent turns stay intact. The final turn is never split; if it alone
    does not fit, that is an error.
    """
    if not conversation.turns:
        raise ValueError("cannot assemble an empty conversation")
    turn_ids = [vocab.encode(turn.text) for turn in conversation.turns]
    budget = max_positions - 1  # the source decoder prepends <bos>

    def total_len(parts: list[list[int]]) -> int:
        return sum(len(p) for p in parts) + (len(parts) - 1) + 1  # separators + mask

    start = 0
    while total_len(turn_ids[start:]) > budget and start < len(turn_ids) - 1:
        start += 1
    kept = turn_ids[start:]
    if total_len(kept) > budget:
        raise ValueError(
            f"conversation {conversation.id!r}: final turn alone exceeds "
            f"max_positions={max_positions} and cannot be truncated"
        )
    out: list[int] = []
    for i, ids in enumerate(kept):
        if i > 0:
            out.append(vocab.eos_id)
        out.extend(ids)
    out.append(vocab.mask_id)
    return out


def select_strategies(probs: Sequence[float], theta: float) -> list[tuple[int, float]]:
    """Strategies whose probability clears ``theta``, weights renormalized to 1.

    Falls back to the argmax with weight 1 when nothing clears the threshold,
    so a generation step always has a prompt.
    """
    if not 0.0 < theta <= 1.0:
        raise ValueError(f"theta must be in (0, 1], got {theta}")
    probs = np.asarray(probs, dtype=np.float64)
    chosen = [int(j) for j in np.flatnonzero(probs >= theta)]
    if not chosen:
        return [(int(probs.argmax()), 1.0)]
    mass = float(probs[chosen].sum())
    return [(j, float(probs[j] / mass)) for j in chosen]


class TutorModel:
    """Encoder + target/source decoders + strategy head over a fixed vocabulary."""

    def __init__(
        self,
        config: LayerConfig,
        vocab: Vocabulary,
        rng: np.random.Generator | int = 0,
    ):
        if isinstance(rng, (int, np.integer)):
            rng = np.random.default_rng(int(rng))
        self.rng = rng
        self.vocab = vocab
        self.strategies = vocab.strategies
        config.vocab_size = len(vocab)
        config.validate(n_reserved=vocab.n_reserved)
        self.config = config
        self.training = True

        d = config.d_model
        n_d = len(self.strategies)
        self.token_table = init_param(rng, (config.vocab_size, d))
        self.pos_table = init_param(rng, (config.max_positions, d))
        self.encoder = TransformerEncoder(rng, config)
        self.target_decoder = TransformerDecoder(rng, config)
        if config.share_decoders:
            self.source_decoder = self.target_decoder
        else:
            self.source_decoder = TransformerDecoder(rng, config)
        self.head_w1 = init_param(rng, (d, d))
        self.head_b1 = Tensor(np.zeros(d), requires_grad=True)
        self.head_w2 = init_param(rng, (d, n_d))
        self.head_b2 = Tensor(np.zeros(n_d), requires_grad=True)
        self._head_act = activation(config.head_activation)
        # instrumentation: token ids fed to the target decoder on the last
        # forward_target call; -1 marks a non-token (mixed/masked brings its
        # own id) embedding slot
        self.last_target_input_ids: np.ndarray | None = None

    # -- bookkeeping ------------------------------------------------------
    def train_mode(self) -> None:
        self.training = True

    def eval_mode(self) -> None:
        self.training = False

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        params: list[tuple[str, Tensor]] = [
            ("token_table", self.token_table),
            ("pos_table", self.pos_table),
        ]
        params.extend(self.encoder.named_params("encoder"))
        params.extend(self.target_decoder.named_params("target_decoder"))
        if not self.config.share_decoders:
            params.extend(self.source_decoder.named_params("source_decoder"))
        params.extend(
            [
                ("head.w1", self.head_w1),
                ("head.b1", self.head_b1),
                ("head.w2", self.head_w2),
                ("head.b2", self.head_b2),
            ]
        )
        return params

    def parameter_count(self) -> int:
        total = sum(p.size for _, p in self.named_parameters())
        expected = parameter_count(self.config, len(self.strategies))
        assert total == expected, f"parameter count {total} != formula {expected}"
        return total

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()

    @property
    def strategy_token_ids(self) -> list[int]:
        return self.vocab.strategy_token_ids

    # -- embeddings -------------------------------------------------------
    def embed_tokens(self, ids: np.ndarray, position_offset: int = 0) -> Tensor:
        """Token rows plus learned positional rows, then dropout."""
        ids = np.asarray(ids)
        length = ids.shape[-1]
        if position_offset + length > self.config.max_positions:
            raise ValueError(
                f"sequence length {position_offset + length} exceeds "
                f"max_positions={self.config.max_positions}"
            )
        tok = embedding(self.token_table, ids)
        pos = slice_axis(self.pos_table, 0, position_offset, position_offset + length)
        return dropout(add(tok, pos), self.config.dropout_p, self.rng, self.training)

    def _prompt_vector(self, prompt: Prompt, batch_size: int) -> tuple[Tensor, np.ndarray]:
        """Embedding for decoder position 0 plus the instrumented token ids."""
        if isinstance(prompt, GoldStrategy):
            idx = np.asarray(prompt.index, dtype=np.int64).reshape(-1)
            if idx.size == 1:
                idx = np.repeat(idx, batch_size)
            elif idx.size != batch_size:
                raise ValueError(
                    f"GoldStrategy carries {idx.size} indices for a batch of {batch_size}"
                )
            ids = np.array(
                [[self.vocab.strategy_token_id(int(j))] for j in idx], dtype=np.int64
            )
            return embedding(self.token_table, ids), ids[:, 0]
        if isinstance(prompt, MaskedPrompt):
            ids = np.full((batch_size, 1), self.vocab.mask_id, dtype=np.int64)
            return embedding(self.token_table, ids), ids[:, 0]
        if isinstance(prompt, WeightedMix):
            if not prompt.pairs:
                raise ValueError("WeightedMix prompt needs at least one strategy")
            token_ids = np.array(
                [self.vocab.strategy_token_id(j) for j, _ in prompt.pairs], dtype=np.int64
            )
            weights = np.array([[w] for _, w in prompt.pairs], dtype=np.float64)
            rows = embedding(self.token_table, token_ids)  # (k, d)
            mixed = tsum(mul(rows, weights), axis=0, keepdims=True)  # (1, d)
            vec = reshape(mixed, (1, 1, self.config.d_model))
            tiled = concat([vec] * batch_size, axis=0) if batch_size > 1 else vec
            return tiled, np.full(batch_size, -1, dtype=np.int64)
        raise TypeError(f"unknown prompt type {type(prompt).__name__}")

    def _decoder_input(self, prompt: Prompt, token_ids: np.ndarray) -> Tensor:
        """[prompt embedding] + token embeddings, with shared positional rows."""
        batch, length = token_ids.shape
        if 1 + length > self.config.max_positions:
            raise ValueError(
                f"decoder input length {1 + length} exceeds max_positions="
                f"{self.config.max_positions}"
            )
        prompt_vec, prompt_ids = self._prompt_vector(prompt, batch)
        tok = embedding(self.token_table, token_ids)
        x = concat([prompt_vec, tok], axis=1)
        pos = slice_axis(self.pos_table, 0, 0, 1 + length)
        x = dropout(add(x, pos), self.config.dropout_p, self.rng, self.training)
        self.last_target_input_ids = np.concatenate([prompt_ids[:, None], token_ids], axis=1)
        return x

    def project_vocab(self, hidden: Tensor) -> Tensor:
        """Vocabulary logits via the tied (transposed) token embedding table."""
        return matmul(hidden, swap_last_axes(self.token_table))

    # -- forward passes -----------------------------------------------------
    def encode(self, src: np.ndarray, src_pad: np.ndarray) -> EncoderOutput:
        x = self.embed_tokens(src)
        hidden = self.encoder(x, src_pad, self.config.dropout_p, self.rng, self.training)
        return EncoderOutput(hidden=hidden, pad_mask=src_pad)

    def forward_target(
        self,
        enc: EncoderOutput,
        tgt: np.ndarray,
        prompt: Prompt,
        need_logits: bool = True,
    ) -> tuple[Tensor | None, Tensor]:
        """Teacher-forced target pass.

        ``tgt`` rows are gold tokens ending with eos (padded). Returns
        ``(logits, hidden)`` where ``logits[:, k]`` scores ``tgt[:, k]`` (the
        prediction made from the prompt and the first k tokens) and ``hidden``
        covers all ``tgt.shape[1] + 1`` decoder input positions, the last
        non-pad one being the eos representation. ``need_logits=False`` skips
        the vocabulary projection for passes that only need hidden states.
        """
        x = self._decoder_input(prompt, tgt)
        hidden = self.target_decoder(x, enc, self.config.dropout_p, self.rng, self.training)
        if not need_logits:
            return None, hidden
        gen_hidden = slice_axis(hidden, 1, 0, tgt.shape[1])
        return self.project_vocab(gen_hidden), hidden

    def forward_source(self, enc: EncoderOutput, src: np.ndarray) -> tuple[Tensor, Tensor]:
        """Reconstruct the source from ``[<bos>] + source``; always available.

        Returns ``(logits, hidden)`` with ``logits[:, k]`` scoring ``src[:, k]``.
        """
        batch = src.shape[0]
        bos = np.full((batch, 1), self.vocab.bos_id, dtype=np.int64)
        input_ids = np.concatenate([bos, src], axis=1)
        x = self.embed_tokens(input_ids)
        hidden = self.source_decoder(x, enc, self.config.dropout_p, self.rng, self.training)
        gen_hidden = slice_axis(hidden, 1, 0, src.shape[1])
        return self.project_vocab(gen_hidden), hidden

    def eos_representation(self, hidden: Tensor, lengths: np.ndarray) -> Tensor:
        """Hidden state at each example's final non-pad input position.

        For a decoder input ``[start] + seq`` the final non-pad position of an
        example with ``len(seq) == L`` is index ``L``.
        """
        lengths = np.asarray(lengths, dtype=np.int64)
        if hidden.shape[1] == 0 or (lengths <= 0).any():
            raise ValueError("eos_representation: empty sequence")
        idx = lengths[:, None, None] * np.ones((1, 1, hidden.shape[2]), dtype=np.int64)
        picked = gather(hidden, idx, axis=1)  # (B, 1, D)
        return reshape(picked, (hidden.shape[0], hidden.shape[2]))

    def strategy_logits(self, h_eos: Tensor) -> Tensor:
        inner = self._head_act(add(matmul(h_eos, self.head_w1), self.head_b1))
        return add(matmul(inner, self.head_w2), self.head_b2)

    def strategy_probs(self, h_eos: Tensor) -> Tensor:
        return softmax(self.strategy_logits(h_eos), axis=-1)

    def forward_prefix(self, enc: EncoderOutput, prompt: Prompt, prefix: np.ndarray) -> Tensor:
        """Next-token logits for generation: one row per hypothesis.

        ``prefix`` is (H, t) of already generated tokens (t may be 0); the
        encoded source in ``enc`` must already be tiled to H rows.
        """
        prefix = np.asarray(prefix, dtype=np.int64).reshape(prefix.shape[0], -1)
        x = self._decoder_input(prompt, prefix)
        hidden = self.target_decoder(x, enc, self.config.dropout_p, self.rng, self.training)
        last = slice_axis(hidden, 1, prefix.shape[1], prefix.shape[1] + 1)
        logits = self.project_vocab(last)
        return reshape(logits, (prefix.shape[0], self.config.vocab_size))

    def tile_encoding(self, enc: EncoderOutput, n: int) -> EncoderOutput:
        """Repeat a batch-1 encoding to n rows (inference helper)."""
        hidden = Tensor(np.repeat(enc.hidden.data, n, axis=0))
        return EncoderOutput(hidden=hidden, pad_mask=np.repeat(enc.pad_mask, n, axis=0))


def predict_strategy(
    model: TutorModel, h_eos: Tensor, source: DistributionSource = DistributionSource.FROM_SOURCE
) -> StrategyDistribution:
    """Run the two-layer head on a final-token representation."""
    probs = model.strategy_probs(h_eos)
    vec = probs.data.reshape(-1) if probs.data.ndim > 1 and probs.shape[0] == 1 else probs.data
    return StrategyDistribution(probs=np.array(vec, dtype=np.float64), source=source)


# -- persistence -------------------------------------------------------------

def _encode_array(a: np.ndarray) -> dict:
    return {
        "shape": list(a.shape),
        "dtype": str(a.dtype),
        "data": base64.b64encode(np.ascontiguousarray(a).tobytes()).decode("ascii"),
    }


def _decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype=np.dtype(d["dtype"])).reshape(d["shape"]).copy()


def checkpoint_payload(model: TutorModel) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "vocab": model.vocab.to_dict(),
        "params": {name: _encode_array(p.data) for name, p in model.named_parameters()},
    }


def save_checkpoint(path: str | Path, model: TutorModel, extra: dict | None = None) -> None:
    """Write a self-describing checkpoint; round-trips bit-exactly."""
    payload = checkpoint_payload(model)
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def model_from_payload(payload: dict, rng: np.random.Generator | int = 0) -> TutorModel:
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a tutorkit checkpoint")
    config = LayerConfig.from_dict(payload["config"])
    vocab = Vocabulary.from_dict(payload["vocab"])
    model = TutorModel(config, vocab, rng=rng)
    params = dict(model.named_parameters())
    saved = payload["params"]
    if set(saved) != set(params):
        missing = set(params) ^ set(saved)
        raise ValueError(f"checkpoint parameter names do not match the model: {sorted(missing)}")
    for name, spec in saved.items():
        arr = _decode_array(spec)
        if tuple(arr.shape) != params[name].shape:
            raise ValueError(
                f"checkpoint shape mismatch for {name}: {arr.shape} vs {params[name].shape}"
            )
        params[name].data = arr
    return model


def load_checkpoint(path: str | Path, rng: np.random.Generator | int = 0) -> TutorModel:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return model_from_payload(payload, rng=rng)
