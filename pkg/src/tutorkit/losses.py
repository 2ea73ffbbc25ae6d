"""Training objectives: generation, strategy prediction, and self-distillation.

The joint objective combines, with tradeoff weights (lambda, gamma, delta):

    total = gen_target + delta * gen_source + gamma * pred
    pred  = -(log p_s(gold) + log p_t(gold)) + lambda * sd
    sd    = -sum_j p_s(j) * log p_t(j)          ("as_written" direction)

where p_s comes from the source decoder's final-token state (context only) and
p_t from the target decoder's final-token state. Crucially, the target pass
that produces p_t runs under the neutral mask prompt, never the gold strategy
token, so the teacher distribution reflects the response content rather than a
leaked label; this is asserted at run time. The teacher side of sd is detached
by default so distillation shapes only the student.

Generation losses are means over non-pad token positions; prediction terms are
means over examples, so magnitudes are length-independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from .autodiff import Tensor, add, clamp_min, gather, log, log_softmax, mul, reshape, tsum
from .corpus import Batch
from .model import GoldStrategy, MaskedPrompt, TutorModel

LOG_EPS = 1e-9

DISTILL_DIRECTIONS = ("as_written", "conventional")


@dataclass
class LossWeights:
    """Tradeoff weights: lambda_sd scales distillation inside the prediction
    loss, gamma scales prediction in the total, delta scales source generation."""

    lambda_sd: float = 1.0
    gamma: float = 1.0
    delta: float = 0.2

    def validate(self) -> None:
        if self.lambda_sd < 0 or self.gamma < 0 or self.delta < 0:
            raise ValueError("loss weights must be non-negative")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class LossBundle:
    """All loss components for one batch, still attached to the graph."""

    gen_target: Tensor
    gen_source: Tensor
    pred: Tensor
    sd: Tensor
    total: Tensor
    n_target_tokens: int
    n_source_tokens: int
    n_examples: int

    def values(self) -> dict[str, float]:
        return {
            "gen_target": self.gen_target.item(),
            "gen_source": self.gen_source.item(),
            "pred": self.pred.item(),
            "sd": self.sd.item(),
            "total": self.total.item(),
        }


def generation_loss(logits: Tensor, gold_tokens: np.ndarray, pad_id: int) -> Tensor:
    """Mean negative log-likelihood of the gold tokens over non-pad positions."""
    gold_tokens = np.asarray(gold_tokens, dtype=np.int64)
    if logits.shape[:2] != gold_tokens.shape:
        raise ValueError(
            f"generation_loss: logits {logits.shape} do not align with gold {gold_tokens.shape}"
        )
    keep = gold_tokens != pad_id
    n_tokens = int(keep.sum())
    if n_tokens == 0:
        raise ValueError("generation_loss: target is entirely padding")
    logp = log_softmax(logits, axis=-1)
    picked = gather(logp, gold_tokens[:, :, None], axis=-1)
    picked = reshape(picked, gold_tokens.shape)
    summed = tsum(mul(picked, keep.astype(np.float64)))
    return mul(summed, -1.0 / n_tokens)


def _check_simplex(name: str, probs: Tensor) -> None:
    sums = probs.data.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-6) or np.any(probs.data < -1e-12):
        raise ValueError(f"{name} is not a probability simplex (row sums {sums})")


def self_distillation_loss(
    p_s: Tensor,
    p_t: Tensor,
    direction: str = "as_written",
    detach_teacher: bool = True,
) -> Tensor:
    """Cross-entropy coupling between the student (p_s) and teacher (p_t)
    strategy distributions, averaged over examples.

    ``as_written`` computes -sum p_s * log p_t; ``conventional`` computes
    -sum p_t * log p_s. The teacher (p_t) is detached by default so the
    coupling trains only the student side.
    """
    if direction not in DISTILL_DIRECTIONS:
        raise ValueError(f"direction must be one of {DISTILL_DIRECTIONS}, got {direction!r}")
    if p_s.ndim == 1:
        p_s = reshape(p_s, (1, p_s.shape[0]))
    if p_t.ndim == 1:
        p_t = reshape(p_t, (1, p_t.shape[0]))
    _check_simplex("p_s", p_s)
    _check_simplex("p_t", p_t)
    teacher = p_t.detach() if detach_teacher else p_t
    n_examples = p_s.shape[0]
    if direction == "as_written":
        terms = mul(p_s, log(clamp_min(teacher, LOG_EPS)))
    else:
        terms = mul(teacher, log(clamp_min(p_s, LOG_EPS)))
    return mul(tsum(terms), -1.0 / n_examples)


def _gold_matrix(golds: Sequence[Sequence[int]] | Sequence[int], n_classes: int) -> np.ndarray:
    rows = []
    for g in golds:
        entry = np.zeros(n_classes)
        indices = [g] if isinstance(g, (int, np.integer)) else list(g)
        if not indices:
            raise ValueError("an example has no gold strategy")
        for j in indices:
            if not 0 <= int(j) < n_classes:
                raise ValueError(f"gold strategy index {j} out of range [0, {n_classes})")
            entry[int(j)] += 1.0
        rows.append(entry)
    return np.stack(rows)


def _hard_prediction_terms(p_s: Tensor, p_t: Tensor, golds, n_classes: int) -> Tensor:
    """-(log p_s(gold) + log p_t(gold)), summed over an example's gold labels,
    averaged over examples."""
    sel = _gold_matrix(golds, n_classes)
    log_ps = log(clamp_min(p_s, LOG_EPS))
    log_pt = log(clamp_min(p_t, LOG_EPS))
    summed = add(tsum(mul(log_ps, sel)), tsum(mul(log_pt, sel)))
    return mul(summed, -1.0 / sel.shape[0])


def prediction_loss(
    p_s: Tensor,
    p_t: Tensor,
    gold: Sequence[Sequence[int]] | Sequence[int] | int,
    lambda_sd: float,
    direction: str = "as_written",
    detach_teacher: bool = True,
) -> Tensor:
    """Hard-label terms on both distributions plus the weighted distillation term."""
    if p_s.ndim == 1:
        p_s = reshape(p_s, (1, p_s.shape[0]))
    if p_t.ndim == 1:
        p_t = reshape(p_t, (1, p_t.shape[0]))
    if isinstance(gold, (int, np.integer)):
        gold = [[int(gold)]]
    hard = _hard_prediction_terms(p_s, p_t, gold, p_s.shape[-1])
    sd = self_distillation_loss(p_s, p_t, direction=direction, detach_teacher=detach_teacher)
    return add(hard, mul(sd, lambda_sd))


def joint_loss(
    model: TutorModel,
    batch: Batch,
    weights: LossWeights,
    distill_direction: str = "as_written",
    detach_teacher: bool = True,
) -> LossBundle:
    """Run the three decoder passes and assemble every loss component.

    Pass (a): target decoder under each example's gold-strategy prompt, for the
    target generation loss. Pass (b): target decoder under the mask prompt, for
    the teacher distribution p_t (the gold strategy token must never appear in
    this pass's input; verified against the recorded decoder input). Pass (c):
    source decoder reconstructing the source, for the source generation loss
    and the student distribution p_s.
    """
    weights.validate()
    pad_id = model.vocab.pad_id
    first_gold = tuple(g[0] for g in batch.gold)

    enc = model.encode(batch.src, batch.src_pad)

    gold_logits, _ = model.forward_target(enc, batch.tgt, GoldStrategy(first_gold))
    gen_target = generation_loss(gold_logits, batch.tgt, pad_id)

    _, masked_hidden = model.forward_target(enc, batch.tgt, MaskedPrompt(), need_logits=False)
    leaked = np.isin(model.last_target_input_ids, model.strategy_token_ids)
    if leaked.any():
        raise RuntimeError("strategy token leaked into the masked teacher pass")
    h_t = model.eos_representation(masked_hidden, batch.tgt_lengths)
    p_t = model.strategy_probs(h_t)

    src_logits, src_hidden = model.forward_source(enc, batch.src)
    gen_source = generation_loss(src_logits, batch.src, pad_id)
    h_s = model.eos_representation(src_hidden, batch.src_lengths)
    p_s = model.strategy_probs(h_s)

    sd = self_distillation_loss(
        p_s, p_t, direction=distill_direction, detach_teacher=detach_teacher
    )
    hard = _hard_prediction_terms(p_s, p_t, batch.gold, len(model.strategies))
    pred = add(hard, mul(sd, weights.lambda_sd))
    total = add(gen_target, add(mul(gen_source, weights.delta), mul(pred, weights.gamma)))

    bundle = LossBundle(
        gen_target=gen_target,
        gen_source=gen_source,
        pred=pred,
        sd=sd,
        total=total,
        n_target_tokens=batch.n_target_tokens,
        n_source_tokens=batch.n_source_tokens,
        n_examples=len(batch),
    )
    for name, value in bundle.values().items():
        if not np.isfinite(value):
            raise RuntimeError(f"non-finite loss component {name}: {value}")
    return bundle
