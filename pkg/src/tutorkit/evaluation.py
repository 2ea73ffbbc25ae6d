"""Evaluation: the three inference settings, strategy metrics, and corpus BLEU.

Settings:
  * without-ts      — generate under the neutral mask prompt; no strategy used.
  * golden-ts       — generate under the example's gold strategy token.
  * need-ts-predict — predict strategies from the source side, threshold them,
                      and generate under the weighted-mix prompt.

A separate diagnostic predicts strategies from the target side (the gold
response under the mask prompt), which upper-bounds what source-side
prediction could achieve.

BLEU here is corpus-level BLEU-4 over whitespace tokens (the corpora are
whitespace-tokenized by construction; reports carry a tokenization note).
Zero n-gram counts are exponentially smoothed: the n-th zero-count order
contributes 1 / (2^k * total_n) with k counting zero orders so far.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .autodiff import Tensor, no_grad
from .corpus import Batch, tokenize
from .decoding import beam_search
from .layers import EncoderOutput
from .model import (
    GoldStrategy,
    MaskedPrompt,
    Prompt,
    TutorModel,
    WeightedMix,
    select_strategies,
)


class EvalSetting(str, Enum):
    WITHOUT_TS = "without-ts"
    GOLDEN_TS = "golden-ts"
    NEED_TS_PREDICT = "need-ts-predict"


@dataclass
class ClassScores:
    name: str
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class StrategyMetrics:
    accuracy: float
    macro_f1: float
    per_class: list[ClassScores]


@dataclass
class EvalReport:
    """Aggregate scores plus per-example outputs for one evaluation run."""

    setting: str
    n_examples: int
    bleu: float
    accuracy: float | None = None
    macro_f1: float | None = None
    per_class: list[ClassScores] | None = None
    predict_from: str = "source"
    theta: float = 0.3
    beam: int = 5
    tokenization: str = "whitespace"
    examples: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {
            "setting": self.setting,
            "n_examples": self.n_examples,
            "bleu": self.bleu,
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "predict_from": self.predict_from,
            "theta": self.theta,
            "beam": self.beam,
            "tokenization": self.tokenization,
        }
        if self.per_class is not None:
            d["per_class"] = [vars(c) for c in self.per_class]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def format_table(self) -> str:
        lines = [
            f"setting: {self.setting}   examples: {self.n_examples}   "
            f"tokenization: {self.tokenization}",
            f"BLEU: {self.bleu:.2f}",
        ]
        if self.accuracy is not None:
            lines.append(
                f"strategy accuracy ({self.predict_from}-side): {self.accuracy:.4f}   "
                f"macro-F1: {self.macro_f1:.4f}"
            )
        if self.per_class:
            lines.append(f"{'class':<16}{'prec':>8}{'rec':>8}{'f1':>8}{'support':>9}")
            for c in self.per_class:
                lines.append(
                    f"{c.name:<16}{c.precision:>8.3f}{c.recall:>8.3f}{c.f1:>8.3f}{c.support:>9d}"
                )
        return "\n".join(lines)


# -- metrics ------------------------------------------------------------------

def strategy_metrics(
    golds: Sequence[int], predictions: Sequence[int], n_classes: int, names: Sequence[str] | None = None
) -> StrategyMetrics:
    """Accuracy and macro-F1 over all ``n_classes`` classes.

    Macro-F1 is the unweighted mean of per-class F1 where a class that never
    appears (no gold, no prediction) contributes 0.
    """
    if len(golds) != len(predictions):
        raise ValueError(f"golds ({len(golds)}) and predictions ({len(predictions)}) differ")
    if not golds:
        raise ValueError("cannot score an empty prediction list")
    golds = np.asarray(golds, dtype=np.int64)
    preds = np.asarray(predictions, dtype=np.int64)
    accuracy = float((golds == preds).mean())
    per_class = []
    f1_sum = 0.0
    for c in range(n_classes):
        tp = int(((preds == c) & (golds == c)).sum())
        fp = int(((preds == c) & (golds != c)).sum())
        fn = int(((preds != c) & (golds == c)).sum())
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        f1_sum += f1
        per_class.append(
            ClassScores(
                name=names[c] if names else str(c),
                precision=precision,
                recall=recall,
                f1=f1,
                support=int((golds == c).sum()),
            )
        )
    return StrategyMetrics(accuracy=accuracy, macro_f1=f1_sum / n_classes, per_class=per_class)


def majority_class(golds: Sequence[int]) -> int:
    """The most frequent class (lowest id on ties): the frequency baseline."""
    counts = Counter(int(g) for g in golds)
    best = max(counts.items(), key=lambda kv: (kv[1], -kv[0]))
    return best[0]


def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses: Sequence[str], references: Sequence[str], max_order: int = 4) -> float:
    """Corpus-level BLEU in [0, 100] on whitespace tokens.

    Geometric mean of clipped n-gram precisions (orders 1..max_order) times the
    brevity penalty exp(min(0, 1 - ref_len / hyp_len)).
    """
    if not references:
        raise ValueError("corpus_bleu: empty reference set")
    if len(hypotheses) != len(references):
        raise ValueError(
            f"corpus_bleu: {len(hypotheses)} hypotheses vs {len(references)} references"
        )
    correct = [0] * max_order
    total = [0] * max_order
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        h = tokenize(hyp)
        r = tokenize(ref)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_order + 1):
            h_counts = _ngram_counts(h, n)
            r_counts = _ngram_counts(r, n)
            total[n - 1] += max(len(h) - n + 1, 0)
            correct[n - 1] += sum(min(c, r_counts[g]) for g, c in h_counts.items())
    if hyp_len == 0:
        return 0.0
    log_precisions = 0.0
    smooth = 1.0
    for n in range(max_order):
        if correct[n] > 0:
            p = correct[n] / total[n]
        else:
            smooth *= 2.0
            p = 1.0 / (smooth * max(total[n], 1))
        log_precisions += math.log(p)
    bp = math.exp(min(0.0, 1.0 - ref_len / hyp_len))
    return 100.0 * bp * math.exp(log_precisions / max_order)


def paired_bootstrap(
    hyps_a: Sequence[str],
    hyps_b: Sequence[str],
    references: Sequence[str],
    n_resamples: int = 1000,
    seed: int = 0,
) -> dict:
    """Paired bootstrap over BLEU: how often system A beats system B on resamples."""
    if not (len(hyps_a) == len(hyps_b) == len(references)):
        raise ValueError("paired_bootstrap needs aligned hypothesis/reference lists")
    rng = np.random.default_rng(seed)
    n = len(references)
    wins_a = 0
    for _ in range(n_resamples):
        idx = rng.integers(0, n, size=n)
        sample_a = [hyps_a[i] for i in idx]
        sample_b = [hyps_b[i] for i in idx]
        sample_r = [references[i] for i in idx]
        if corpus_bleu(sample_a, sample_r) > corpus_bleu(sample_b, sample_r):
            wins_a += 1
    return {
        "bleu_a": corpus_bleu(hyps_a, references),
        "bleu_b": corpus_bleu(hyps_b, references),
        "p_a_beats_b": wins_a / n_resamples,
        "n_resamples": n_resamples,
    }


# -- strategy prediction over a corpus ---------------------------------------

def _source_probs(model: TutorModel, batch: Batch) -> np.ndarray:
    enc = model.encode(batch.src, batch.src_pad)
    _, hidden = model.forward_source(enc, batch.src)
    h = model.eos_representation(hidden, batch.src_lengths)
    return model.strategy_probs(h).data


def _target_probs(model: TutorModel, batch: Batch) -> np.ndarray:
    enc = model.encode(batch.src, batch.src_pad)
    _, hidden = model.forward_target(enc, batch.tgt, MaskedPrompt(), need_logits=False)
    h = model.eos_representation(hidden, batch.tgt_lengths)
    return model.strategy_probs(h).data


def predict_strategies(
    model: TutorModel, batches: Sequence[Batch], predict_from: str = "source"
) -> tuple[list[int], list[int], np.ndarray]:
    """Argmax strategy predictions over a corpus.

    ``predict_from='source'`` uses only the conversation context;
    ``predict_from='target'`` is the diagnostic that reads the gold response
    under the mask prompt. Returns (golds, predictions, probability rows);
    golds are each example's first gold label.
    """
    if predict_from not in ("source", "target"):
        raise ValueError(f"predict_from must be 'source' or 'target', got {predict_from!r}")
    was_training = model.training
    model.eval_mode()
    golds: list[int] = []
    preds: list[int] = []
    rows = []
    with no_grad():
        for batch in batches:
            probs = (
                _source_probs(model, batch)
                if predict_from == "source"
                else _target_probs(model, batch)
            )
            rows.append(probs)
            preds.extend(int(i) for i in probs.argmax(axis=-1))
            golds.extend(g[0] for g in batch.gold)
    if was_training:
        model.train_mode()
    return golds, preds, np.concatenate(rows, axis=0)


# -- generation pipeline -------------------------------------------------------

@dataclass
class PipelineResult:
    strategies: list[tuple[int, float]]  # (strategy id, prompt weight)
    tokens: list[int]
    text: str


def _encode_single(model: TutorModel, src_ids: Sequence[int]) -> EncoderOutput:
    src = np.asarray(src_ids, dtype=np.int64)[None, :]
    pad = np.zeros_like(src, dtype=bool)
    return model.encode(src, pad)


def pipeline_generate(
    model: TutorModel,
    src_ids: Sequence[int],
    setting: EvalSetting,
    theta: float = 0.3,
    beam: int = 5,
    max_len: int = 32,
    gold_strategy: int | None = None,
    forced_strategy: int | None = None,
) -> PipelineResult:
    """Choose the prompt for the requested setting, then beam-search a response.

    Only the source tokens ever enter this function; settings that predict
    strategies do so from the source decoder alone.
    """
    was_training = model.training
    model.eval_mode()
    with no_grad():
        enc = _encode_single(model, src_ids)
        prompt: Prompt
        if forced_strategy is not None:
            used = [(int(forced_strategy), 1.0)]
            prompt = GoldStrategy(int(forced_strategy))
        elif setting == EvalSetting.WITHOUT_TS:
            used = []
            prompt = MaskedPrompt()
        elif setting == EvalSetting.GOLDEN_TS:
            if gold_strategy is None:
                raise ValueError("golden-ts generation needs the gold strategy")
            used = [(int(gold_strategy), 1.0)]
            prompt = GoldStrategy(int(gold_strategy))
        elif setting == EvalSetting.NEED_TS_PREDICT:
            _, hidden = model.forward_source(enc, np.asarray(src_ids, dtype=np.int64)[None, :])
            h = model.eos_representation(hidden, np.array([len(src_ids)]))
            probs = model.strategy_probs(h).data.reshape(-1)
            used = select_strategies(probs, theta)
            prompt = WeightedMix(tuple(used))
        else:
            raise ValueError(f"unknown setting {setting!r}")
        hyp = beam_search(model, enc, prompt, beam=beam, max_len=max_len)
    if was_training:
        model.train_mode()
    text = model.vocab.decode(hyp.tokens)
    return PipelineResult(strategies=used, tokens=hyp.tokens, text=text)


def validation_metric(model: TutorModel, batches: Sequence[Batch], metric: str) -> float:
    """Cheap epoch-wise validation scores for early stopping (greedy decoding)."""
    if metric == "macro_f1":
        golds, preds, _ = predict_strategies(model, batches, predict_from="source")
        return strategy_metrics(golds, preds, len(model.strategies)).macro_f1
    if metric == "bleu":
        hyps, refs = [], []
        for batch in batches:
            for i in range(len(batch)):
                src = batch.src[i, : batch.src_lengths[i]]
                result = pipeline_generate(
                    model, src, EvalSetting.NEED_TS_PREDICT, beam=1, max_len=32
                )
                hyps.append(result.text)
                refs.append(model.vocab.decode(batch.tgt[i, : batch.tgt_lengths[i]]))
        return corpus_bleu(hyps, refs)
    raise ValueError(f"unknown validation metric {metric!r}")


def evaluate(
    model: TutorModel,
    batches: Sequence[Batch],
    setting: EvalSetting,
    theta: float = 0.3,
    beam: int = 5,
    max_len: int = 32,
    predict_from: str = "source",
) -> EvalReport:
    """Generate for every example under ``setting`` and aggregate metrics.

    Strategy metrics are included for need-ts-predict (source side) and for the
    target-side diagnostic (``predict_from='target'``, any setting).
    """
    setting = EvalSetting(setting)
    hyps: list[str] = []
    refs: list[str] = []
    examples: list[dict] = []
    for batch in batches:
        for i in range(len(batch)):
            src = batch.src[i, : batch.src_lengths[i]]
            result = pipeline_generate(
                model,
                src,
                setting,
                theta=theta,
                beam=beam,
                max_len=max_len,
                gold_strategy=batch.gold[i][0],
            )
            reference = model.vocab.decode(batch.tgt[i, : batch.tgt_lengths[i]])
            hyps.append(result.text)
            refs.append(reference)
            examples.append(
                {
                    "id": batch.example_ids[i],
                    "setting": setting.value,
                    "strategies": [
                        {"strategy": model.strategies.names[j], "weight": w}
                        for j, w in result.strategies
                    ],
                    "hypothesis": result.text,
                    "reference": reference,
                }
            )
    report = EvalReport(
        setting=setting.value,
        n_examples=len(hyps),
        bleu=corpus_bleu(hyps, refs),
        predict_from=predict_from,
        theta=theta,
        beam=beam,
        examples=examples,
    )
    if setting == EvalSetting.NEED_TS_PREDICT or predict_from == "target":
        golds, preds, _ = predict_strategies(model, batches, predict_from=predict_from)
        metrics = strategy_metrics(
            golds, preds, len(model.strategies), names=model.strategies.names
        )
        report.accuracy = metrics.accuracy
        report.macro_f1 = metrics.macro_f1
        report.per_class = metrics.per_class
    return report
