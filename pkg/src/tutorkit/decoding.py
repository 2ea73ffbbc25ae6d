"""Greedy and beam-search decoding over the target decoder.

Hypotheses carry generated token ids (the terminating eos included once
finished) and their cumulative log-probability. Final selection is by
length-normalized score over every finished hypothesis; if the length budget
runs out, still-live hypotheses compete too.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import log_softmax, no_grad
from .layers import EncoderOutput
from .model import Prompt, TutorModel


@dataclass
class Hypothesis:
    """A partial or finished decode: token ids so far plus accumulated log-prob."""

    tokens: list[int] = field(default_factory=list)
    log_prob: float = 0.0
    finished: bool = False

    def score(self) -> float:
        """Length-normalized log-probability (normalizer exponent 1)."""
        return self.log_prob / max(1, len(self.tokens))


def _banned_ids(model: TutorModel) -> list[int]:
    # strategy prompts and padding are never valid generation output
    return [model.vocab.pad_id] + model.strategy_token_ids


def _next_log_probs(
    model: TutorModel, enc: EncoderOutput, prompt: Prompt, prefixes: np.ndarray
) -> np.ndarray:
    logits = model.forward_prefix(enc, prompt, prefixes)
    return log_softmax(logits, axis=-1).data


def greedy_decode(
    model: TutorModel, enc: EncoderOutput, prompt: Prompt, max_len: int = 32
) -> Hypothesis:
    """Pick the argmax token at every step; independent of beam_search."""
    was_training = model.training
    model.eval_mode()
    banned = _banned_ids(model)
    hyp = Hypothesis()
    with no_grad():
        for _ in range(max_len):
            prefix = np.array([hyp.tokens], dtype=np.int64)
            log_probs = _next_log_probs(model, enc, prompt, prefix)[0]
            log_probs[banned] = -np.inf
            token = int(log_probs.argmax())
            hyp.tokens.append(token)
            hyp.log_prob += float(log_probs[token])
            if token == model.vocab.eos_id:
                hyp.finished = True
                break
    if was_training:
        model.train_mode()
    return hyp


def beam_search(
    model: TutorModel,
    enc: EncoderOutput,
    prompt: Prompt,
    beam: int = 5,
    max_len: int = 32,
) -> Hypothesis:
    """Length-wise beam expansion; returns the best hypothesis by normalized score.

    ``enc`` must encode a single example (batch of one); it is tiled across the
    live hypotheses internally. Finished hypotheses are pooled as they appear;
    live ones are considered only when the length budget is exhausted.
    """
    if beam < 1:
        raise ValueError(f"beam must be >= 1, got {beam}")
    if enc.batch_size != 1:
        raise ValueError("beam_search expects a single encoded example")
    was_training = model.training
    model.eval_mode()
    banned = _banned_ids(model)
    eos = model.vocab.eos_id
    live: list[Hypothesis] = [Hypothesis()]
    finished: list[Hypothesis] = []
    with no_grad():
        for _ in range(max_len):
            if not live:
                break
            prefixes = np.array([h.tokens for h in live], dtype=np.int64).reshape(len(live), -1)
            tiled = enc if len(live) == 1 else model.tile_encoding(enc, len(live))
            log_probs = _next_log_probs(model, tiled, prompt, prefixes)
            log_probs[:, banned] = -np.inf
            candidates: list[tuple[float, int, int]] = []  # (cum_log_prob, hyp index, token)
            k = min(beam, log_probs.shape[1])
            for i, hyp in enumerate(live):
                top = np.argpartition(-log_probs[i], k - 1)[:k]
                top = top[np.argsort(-log_probs[i][top], kind="stable")]
                for token in top:
                    candidates.append((hyp.log_prob + float(log_probs[i][token]), i, int(token)))
            candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
            next_live: list[Hypothesis] = []
            for cum, i, token in candidates[:beam]:
                new = Hypothesis(
                    tokens=live[i].tokens + [token], log_prob=cum, finished=token == eos
                )
                if new.finished:
                    finished.append(new)
                else:
                    next_live.append(new)
            live = next_live
    if was_training:
        model.train_mode()
    pool = finished + live  # live is empty unless the length budget ran out
    if not pool:
        return Hypothesis()
    return max(pool, key=lambda h: h.score())
