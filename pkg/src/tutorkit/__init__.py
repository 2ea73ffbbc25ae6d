"""tutorkit: joint teaching-strategy prediction and tutor-response generation.

A desk-scale conversational tutoring model: a transformer encoder with two
decoders (target response and source reconstruction), a strategy prediction
head fed by final-token representations from both decoders, self-distillation
from the target-side distribution to the source-side one, and strategy-token
prompting of the generator. Ships with a synthetic corpus generator, a full
training loop, beam-search inference, evaluation in three settings, an
sklearn-style estimator facade, and a CLI.
"""

from .autodiff import Tensor, no_grad
from .corpus import (
    Batch,
    Conversation,
    StrategyList,
    Turn,
    Vocabulary,
    build_vocabulary,
    generate_synthetic,
    load_corpus,
    make_batches,
    save_corpus,
    split_corpus,
)
from .decoding import Hypothesis, beam_search, greedy_decode
from .estimator import ConversationalTutor
from .evaluation import (
    EvalReport,
    EvalSetting,
    corpus_bleu,
    evaluate,
    pipeline_generate,
    predict_strategies,
    strategy_metrics,
)
from .layers import LayerConfig
from .losses import (
    LossBundle,
    LossWeights,
    generation_loss,
    joint_loss,
    prediction_loss,
    self_distillation_loss,
)
from .model import (
    GoldStrategy,
    MaskedPrompt,
    StrategyDistribution,
    TutorModel,
    WeightedMix,
    assemble_source,
    load_checkpoint,
    predict_strategy,
    save_checkpoint,
    select_strategies,
)
from .training import TrainConfig, TrainState, adam_step, lr_at, train

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "no_grad",
    "Batch",
    "Conversation",
    "StrategyList",
    "Turn",
    "Vocabulary",
    "build_vocabulary",
    "generate_synthetic",
    "load_corpus",
    "make_batches",
    "save_corpus",
    "split_corpus",
    "Hypothesis",
    "beam_search",
    "greedy_decode",
    "ConversationalTutor",
    "EvalReport",
    "EvalSetting",
    "corpus_bleu",
    "evaluate",
    "pipeline_generate",
    "predict_strategies",
    "strategy_metrics",
    "LayerConfig",
    "LossBundle",
    "LossWeights",
    "generation_loss",
    "joint_loss",
    "prediction_loss",
    "self_distillation_loss",
    "GoldStrategy",
    "MaskedPrompt",
    "StrategyDistribution",
    "TutorModel",
    "WeightedMix",
    "assemble_source",
    "load_checkpoint",
    "predict_strategy",
    "save_checkpoint",
    "select_strategies",
    "TrainConfig",
    "TrainState",
    "adam_step",
    "lr_at",
    "train",
]
