"""Optimization loop: Adam, warmup plus polynomial decay, gradient accumulation,
early stopping on validation performance, and bit-exact resumable checkpoints.

Gradient accumulation keeps batch-size semantics: the micro-batches of one
update group are re-weighted by their share of the group's target tokens,
source tokens, and examples, so k micro-batches produce the same gradient as
their concatenation would.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import no_grad
from .corpus import Batch
from .losses import LossBundle, LossWeights, joint_loss
from .model import TutorModel, _decode_array, _encode_array, checkpoint_payload, model_from_payload

L2_MODES = ("decoupled", "loss_penalty")
EARLY_STOP_METRICS = ("val_loss", "macro_f1", "bleu")


@dataclass
class TrainConfig:
    lr_peak: float = 1e-3
    warmup_steps: int = 100
    total_steps: int = 2000
    end_lr: float = 0.0
    decay_degree: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    l2_coeff: float = 0.01
    l2_mode: str = "decoupled"
    update_freq: int = 4
    max_tokens: int = 1024
    dropout_p: float = 0.0
    patience: int = 3
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    distill_direction: str = "as_written"
    detach_teacher: bool = True
    early_stop_metric: str = "val_loss"

    def validate(self) -> None:
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError(
                f"need 0 <= warmup_steps < total_steps, got {self.warmup_steps} / {self.total_steps}"
            )
        if not self.lr_peak > self.end_lr >= 0:
            raise ValueError(f"need lr_peak > end_lr >= 0, got {self.lr_peak} / {self.end_lr}")
        if self.l2_mode not in L2_MODES:
            raise ValueError(f"l2_mode must be one of {L2_MODES}")
        if self.early_stop_metric not in EARLY_STOP_METRICS:
            raise ValueError(f"early_stop_metric must be one of {EARLY_STOP_METRICS}")
        if self.update_freq < 1:
            raise ValueError("update_freq must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        self.weights.validate()

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["weights"] = self.weights.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        kwargs = {k: v for k, v in d.items() if k in known}
        if isinstance(kwargs.get("weights"), dict):
            kwargs["weights"] = LossWeights.from_dict(kwargs["weights"])
        return cls(**kwargs)


@dataclass
class TrainState:
    """Everything needed to resume training exactly where it stopped."""

    step: int = 0
    epoch: int = 0
    moments: dict = field(default_factory=dict)  # name -> (m, v) float64 arrays
    best_score: float | None = None
    bad_epochs: int = 0
    pending_order: list[int] = field(default_factory=list)
    rng: np.random.Generator | None = None


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup to lr_peak, then polynomial decay to end_lr by total_steps."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step < config.warmup_steps:
        return config.lr_peak * step / config.warmup_steps
    if step >= config.total_steps:
        return config.end_lr
    span = config.total_steps - config.warmup_steps
    remaining = (config.total_steps - step) / span
    return config.end_lr + (config.lr_peak - config.end_lr) * remaining**config.decay_degree


def adam_step(
    named_params: Sequence[tuple[str, "object"]],
    state: TrainState,
    lr: float,
    config: TrainConfig,
) -> None:
    """One bias-corrected Adam update over all parameters, in place.

    L2 regularization is decoupled weight decay by default
    (theta -= lr * l2_coeff * theta); ``l2_mode='loss_penalty'`` instead folds
    the classical penalty gradient l2_coeff * theta into the Adam moments.
    """
    t = state.step + 1
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    for name, p in named_params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise RuntimeError(f"non-finite gradient in parameter {name!r}; aborting step")
        if config.l2_mode == "loss_penalty" and config.l2_coeff:
            g = g + config.l2_coeff * p.data
        if name not in state.moments:
            state.moments[name] = (np.zeros_like(p.data), np.zeros_like(p.data))
        m, v = state.moments[name]
        m[...] = b1 * m + (1.0 - b1) * g
        v[...] = b2 * v + (1.0 - b2) * g * g
        update = (m / bias1) / (np.sqrt(v / bias2) + eps)
        if config.l2_mode == "decoupled" and config.l2_coeff:
            update = update + config.l2_coeff * p.data
        p.data = p.data - lr * update


@dataclass
class TrainResult:
    model: TutorModel
    state: TrainState
    log: list[dict]
    best_score: float | None
    epochs_run: int


def _group_backward(
    model: TutorModel, group: list[Batch], config: TrainConfig
) -> dict[str, float]:
    """Backward over one update group, weighting micro-batches so the result
    equals a single pass over their concatenation."""
    w = config.weights
    tot_t = sum(b.n_target_tokens for b in group)
    tot_s = sum(b.n_source_tokens for b in group)
    tot_e = sum(len(b) for b in group)
    record = {"gen_target": 0.0, "gen_source": 0.0, "pred": 0.0, "sd": 0.0, "total": 0.0}
    for batch in group:
        bundle: LossBundle = joint_loss(
            model,
            batch,
            w,
            distill_direction=config.distill_direction,
            detach_teacher=config.detach_teacher,
        )
        wt = batch.n_target_tokens / tot_t
        ws = batch.n_source_tokens / tot_s
        we = len(batch) / tot_e
        scaled = (
            bundle.gen_target * wt
            + bundle.gen_source * (w.delta * ws)
            + bundle.pred * (w.gamma * we)
        )
        scaled.backward()
        record["gen_target"] += wt * bundle.gen_target.item()
        record["gen_source"] += ws * bundle.gen_source.item()
        record["pred"] += we * bundle.pred.item()
        record["sd"] += we * bundle.sd.item()
    record["total"] = (
        record["gen_target"] + w.delta * record["gen_source"] + w.gamma * record["pred"]
    )
    return record


def validation_loss(model: TutorModel, batches: Sequence[Batch], config: TrainConfig) -> float:
    """Token/example-weighted joint loss over a whole split, without dropout."""
    was_training = model.training
    model.eval_mode()
    w = config.weights
    tot_t = sum(b.n_target_tokens for b in batches)
    tot_s = sum(b.n_source_tokens for b in batches)
    tot_e = sum(len(b) for b in batches)
    gen_t = gen_s = pred = 0.0
    with no_grad():
        for batch in batches:
            bundle = joint_loss(
                model,
                batch,
                w,
                distill_direction=config.distill_direction,
                detach_teacher=config.detach_teacher,
            )
            gen_t += bundle.gen_target.item() * batch.n_target_tokens / tot_t
            gen_s += bundle.gen_source.item() * batch.n_source_tokens / tot_s
            pred += bundle.pred.item() * len(batch) / tot_e
    if was_training:
        model.train_mode()
    return gen_t + w.delta * gen_s + w.gamma * pred


def _validation_score(model, valid_batches, config) -> tuple[float, bool]:
    """Return (score, higher_is_better) for the configured early-stop metric."""
    if config.early_stop_metric == "val_loss":
        return validation_loss(model, valid_batches, config), False
    from .evaluation import validation_metric  # avoid a module cycle at import time

    return validation_metric(model, valid_batches, config.early_stop_metric), True


def train(
    model: TutorModel,
    train_batches: Sequence[Batch],
    valid_batches: Sequence[Batch],
    config: TrainConfig,
    state: TrainState | None = None,
    stop_after_steps: int | None = None,
) -> TrainResult:
    """Run the optimization loop until the step budget, early stopping, or
    ``stop_after_steps`` (an absolute step count, for resumable runs).

    The model's best-validation parameters are restored before returning,
    unless the run was paused early via ``stop_after_steps``.
    """
    if not train_batches or not valid_batches:
        raise ValueError("train and validation splits must be non-empty")
    config.validate()
    model.config.dropout_p = config.dropout_p
    if state is None:
        state = TrainState(rng=model.rng)
    if state.rng is None:
        state.rng = model.rng
    model.rng = state.rng

    log: list[dict] = []
    best_params: dict[str, np.ndarray] | None = None
    params = model.named_parameters()
    model.train_mode()
    paused = False

    while state.step < config.total_steps:
        if stop_after_steps is not None and state.step >= stop_after_steps:
            paused = True
            break
        if not state.pending_order:
            state.pending_order = [int(i) for i in state.rng.permutation(len(train_batches))]
        take = min(config.update_freq, len(state.pending_order))
        group = [train_batches[i] for i in state.pending_order[:take]]
        model.zero_grad()
        record = _group_backward(model, group, config)
        lr = lr_at(state.step, config)
        adam_step(params, state, lr, config)
        state.pending_order = state.pending_order[take:]
        state.step += 1
        record.update({"step": state.step, "lr": lr, "epoch": state.epoch})
        log.append(record)
        if state.pending_order:
            continue
        # epoch boundary: score the validation split, track the best parameters
        state.epoch += 1
        score, higher_better = _validation_score(model, valid_batches, config)
        log.append({"step": state.step, "epoch": state.epoch, "validation": score})
        improved = state.best_score is None or (
            score > state.best_score if higher_better else score < state.best_score
        )
        if improved:
            state.best_score = score
            state.bad_epochs = 0
            best_params = {name: p.data.copy() for name, p in params}
        else:
            state.bad_epochs += 1
            if state.bad_epochs >= config.patience:
                break
        model.train_mode()

    if not paused and best_params is not None:
        for name, p in params:
            p.data = best_params[name]
    return TrainResult(
        model=model, state=state, log=log, best_score=state.best_score, epochs_run=state.epoch
    )


# -- full-state persistence ---------------------------------------------------

def save_train_checkpoint(
    path: str | Path, model: TutorModel, state: TrainState, config: TrainConfig
) -> None:
    payload = checkpoint_payload(model)
    payload["train_config"] = config.to_dict()
    payload["train_state"] = {
        "step": state.step,
        "epoch": state.epoch,
        "best_score": state.best_score,
        "bad_epochs": state.bad_epochs,
        "pending_order": list(state.pending_order),
        "moments": {
            name: [_encode_array(m), _encode_array(v)] for name, (m, v) in state.moments.items()
        },
        "rng_state": state.rng.bit_generator.state if state.rng is not None else None,
    }
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_train_checkpoint(path: str | Path) -> tuple[TutorModel, TrainState, TrainConfig]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if "train_state" not in payload:
        raise ValueError(f"{path} is a model checkpoint without training state")
    model = model_from_payload(payload)
    raw = payload["train_state"]
    rng = None
    if raw.get("rng_state") is not None:
        rng = np.random.default_rng(0)
        rng.bit_generator.state = raw["rng_state"]
    state = TrainState(
        step=raw["step"],
        epoch=raw["epoch"],
        moments={
            name: (_decode_array(m), _decode_array(v)) for name, (m, v) in raw["moments"].items()
        },
        best_score=raw["best_score"],
        bad_epochs=raw["bad_epochs"],
        pending_order=[int(i) for i in raw["pending_order"]],
        rng=rng,
    )
    config = TrainConfig.from_dict(payload["train_config"])
    return model, state, config
