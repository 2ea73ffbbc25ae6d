"""scikit-learn style facade over the full train/predict/generate pipeline.

``ConversationalTutor`` behaves like an sklearn classifier over conversations:
``fit`` builds the vocabulary and trains the joint model, ``predict`` returns
strategy labels inferred from context alone, ``predict_proba`` their
probabilities, and ``generate`` produces tutor responses under any of the
evaluation settings. Hyperparameters follow sklearn conventions (stored
verbatim in ``__init__``, fitted state in trailing-underscore attributes), so
``get_params``/``set_params``/``clone`` compose with the wider ecosystem.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .autodiff import no_grad
from .corpus import (
    Conversation,
    StrategyList,
    Vocabulary,
    build_vocabulary,
    make_batches,
    split_corpus,
)
from .evaluation import EvalSetting, pipeline_generate, predict_strategies
from .layers import LayerConfig
from .losses import LossWeights
from .model import (
    TutorModel,
    assemble_source,
    checkpoint_payload,
    model_from_payload,
)
from .training import TrainConfig, train
from .validation import check_conversations, check_is_fitted


class ConversationalTutor(BaseEstimator):
    """Joint teaching-strategy classifier and tutor-response generator.

    Parameters mirror the model, loss, and trainer configuration; see
    ``LayerConfig``, ``LossWeights`` and ``TrainConfig`` for semantics. The
    estimator owns a single random stream seeded by ``seed``; identical seeds
    and inputs reproduce identical fitted parameters bit for bit.
    """

    def __init__(
        self,
        d_model: int = 64,
        n_heads: int = 4,
        d_ff: int = 128,
        n_enc_layers: int = 2,
        n_dec_layers: int = 2,
        dropout_p: float = 0.0,
        max_positions: int = 256,
        share_decoders: bool = False,
        ffn_activation: str = "gelu",
        head_activation: str = "tanh",
        min_freq: int = 1,
        lr_peak: float = 1e-3,
        warmup_steps: int = 100,
        total_steps: int = 2000,
        end_lr: float = 0.0,
        decay_degree: float = 1.0,
        l2_coeff: float = 0.01,
        l2_mode: str = "decoupled",
        update_freq: int = 4,
        max_tokens: int = 1024,
        patience: int = 3,
        lambda_sd: float = 1.0,
        gamma: float = 1.0,
        delta: float = 0.2,
        distill_direction: str = "as_written",
        detach_teacher: bool = True,
        early_stop_metric: str = "val_loss",
        theta: float = 0.3,
        beam: int = 5,
        max_gen_len: int = 32,
        seed: int = 0,
    ):
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.n_enc_layers = n_enc_layers
        self.n_dec_layers = n_dec_layers
        self.dropout_p = dropout_p
        self.max_positions = max_positions
        self.share_decoders = share_decoders
        self.ffn_activation = ffn_activation
        self.head_activation = head_activation
        self.min_freq = min_freq
        self.lr_peak = lr_peak
        self.warmup_steps = warmup_steps
        self.total_steps = total_steps
        self.end_lr = end_lr
        self.decay_degree = decay_degree
        self.l2_coeff = l2_coeff
        self.l2_mode = l2_mode
        self.update_freq = update_freq
        self.max_tokens = max_tokens
        self.patience = patience
        self.lambda_sd = lambda_sd
        self.gamma = gamma
        self.delta = delta
        self.distill_direction = distill_direction
        self.detach_teacher = detach_teacher
        self.early_stop_metric = early_stop_metric
        self.theta = theta
        self.beam = beam
        self.max_gen_len = max_gen_len
        self.seed = seed

    # -- configuration assembly -------------------------------------------
    def _layer_config(self) -> LayerConfig:
        return LayerConfig(
            d_model=self.d_model,
            n_heads=self.n_heads,
            d_ff=self.d_ff,
            n_enc_layers=self.n_enc_layers,
            n_dec_layers=self.n_dec_layers,
            dropout_p=self.dropout_p,
            max_positions=self.max_positions,
            ffn_activation=self.ffn_activation,
            head_activation=self.head_activation,
            share_decoders=self.share_decoders,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            lr_peak=self.lr_peak,
            warmup_steps=self.warmup_steps,
            total_steps=self.total_steps,
            end_lr=self.end_lr,
            decay_degree=self.decay_degree,
            l2_coeff=self.l2_coeff,
            l2_mode=self.l2_mode,
            update_freq=self.update_freq,
            max_tokens=self.max_tokens,
            dropout_p=self.dropout_p,
            patience=self.patience,
            seed=self.seed,
            weights=LossWeights(lambda_sd=self.lambda_sd, gamma=self.gamma, delta=self.delta),
            distill_direction=self.distill_direction,
            detach_teacher=self.detach_teacher,
            early_stop_metric=self.early_stop_metric,
        )

    # -- estimator API -------------------------------------------------------
    def fit(
        self,
        X: Sequence[Conversation],
        y=None,
        *,
        strategy_names: Sequence[str] | None = None,
        validation: Sequence[Conversation] | None = None,
    ):
        """Train on conversations; gold strategies and targets live inside them.

        ``strategy_names`` fixes the label set (order = label id). When
        ``validation`` is omitted, a deterministic 8:1:1 split of ``X`` supplies
        the validation set (the held-out tenth is left untouched).
        """
        if strategy_names is None:
            raise ValueError(
                "strategy_names is required: conversations carry label ids whose "
                "meaning comes from the ordered strategy list"
            )
        strategies = (
            strategy_names
            if isinstance(strategy_names, StrategyList)
            else StrategyList(tuple(strategy_names))
        )
        conversations = check_conversations(X, n_strategies=len(strategies), require_target=True)
        if validation is None:
            train_convs, valid_convs, _ = split_corpus(conversations, seed=self.seed)
        else:
            train_convs = conversations
            valid_convs = check_conversations(
                validation, n_strategies=len(strategies), require_target=True
            )

        vocab = build_vocabulary(train_convs, strategies, min_freq=self.min_freq)
        rng = np.random.default_rng(self.seed)
        model = TutorModel(self._layer_config(), vocab, rng=rng)
        config = self._train_config()
        train_batches = make_batches(
            train_convs, vocab, max_tokens=self.max_tokens, max_positions=self.max_positions
        )
        valid_batches = make_batches(
            valid_convs, vocab, max_tokens=self.max_tokens, max_positions=self.max_positions
        )
        result = train(model, train_batches, valid_batches, config)

        self.vocab_ = vocab
        self.strategies_ = strategies
        self.model_ = result.model
        self.train_log_ = result.log
        self.best_score_ = result.best_score
        self.n_strategies_ = len(strategies)
        return self

    def _batches(self, conversations: Sequence[Conversation]):
        return make_batches(
            conversations,
            self.vocab_,
            max_tokens=self.max_tokens,
            max_positions=self.max_positions,
        )

    def predict(self, X: Sequence[Conversation]) -> np.ndarray:
        """Most likely strategy id for each conversation, from context alone."""
        return self.predict_proba(X).argmax(axis=-1)

    def predict_proba(self, X: Sequence[Conversation]) -> np.ndarray:
        check_is_fitted(self, ["model_"])
        conversations = check_conversations(X, n_strategies=self.n_strategies_)
        rows = []
        model = self.model_
        was_training = model.training
        model.eval_mode()
        with no_grad():
            for conv in conversations:
                src = np.asarray(
                    assemble_source(conv, self.vocab_, self.max_positions), dtype=np.int64
                )
                enc = model.encode(src[None, :], np.zeros((1, len(src)), dtype=bool))
                _, hidden = model.forward_source(enc, src[None, :])
                h = model.eos_representation(hidden, np.array([len(src)]))
                rows.append(model.strategy_probs(h).data.reshape(-1))
        if was_training:
            model.train_mode()
        return np.stack(rows)

    def score(self, X: Sequence[Conversation], y=None) -> float:
        """Strategy prediction accuracy against each conversation's first gold."""
        check_is_fitted(self, ["model_"])
        conversations = check_conversations(X, n_strategies=self.n_strategies_)
        golds = np.array([conv.strategies[0] for conv in conversations])
        preds = self.predict(conversations)
        return float((golds == preds).mean())

    def generate(
        self,
        X: Sequence[Conversation],
        setting: str | EvalSetting = EvalSetting.NEED_TS_PREDICT,
        force_strategy: str | None = None,
    ) -> list[str]:
        """Generate a tutor response per conversation under an evaluation setting."""
        check_is_fitted(self, ["model_"])
        setting = EvalSetting(setting)
        conversations = check_conversations(X)
        forced = self.strategies_.index(force_strategy) if force_strategy else None
        outputs = []
        for conv in conversations:
            src = assemble_source(conv, self.vocab_, self.max_positions)
            gold = conv.strategies[0] if conv.strategies else None
            if setting == EvalSetting.GOLDEN_TS and gold is None and forced is None:
                raise ValueError(f"conversation {conv.id!r} has no gold strategy for golden-ts")
            result = pipeline_generate(
                self.model_,
                src,
                setting,
                theta=self.theta,
                beam=self.beam,
                max_len=self.max_gen_len,
                gold_strategy=gold,
                forced_strategy=forced,
            )
            outputs.append(result.text)
        return outputs

    def predict_from_targets(self, X: Sequence[Conversation]) -> np.ndarray:
        """Diagnostic: strategy labels predicted from the gold responses."""
        check_is_fitted(self, ["model_"])
        conversations = check_conversations(
            X, n_strategies=self.n_strategies_, require_target=True
        )
        batches = self._batches(conversations)
        _, preds, _ = predict_strategies(self.model_, batches, predict_from="target")
        return np.asarray(preds)

    # -- persistence ----------------------------------------------------------
    def save(self, path: str | Path) -> None:
        check_is_fitted(self, ["model_"])
        payload = checkpoint_payload(self.model_)
        payload["estimator_params"] = self.get_params()
        Path(path).write_text(json.dumps(payload), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ConversationalTutor":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        params = payload.get("estimator_params", {})
        est = cls(**params)
        model = model_from_payload(payload, rng=np.random.default_rng(params.get("seed", 0)))
        est.model_ = model
        est.vocab_ = model.vocab
        est.strategies_ = model.strategies
        est.n_strategies_ = len(model.strategies)
        est.train_log_ = None
        est.best_score_ = None
        return est
