"""Transformer building blocks: attention, feed-forward, normalization, stacks.

Pre-norm residual arrangement throughout (more stable for small models trained
from scratch). Token/position embedding tables live on the model, not here; the
stacks consume already-embedded inputs so the same encoder output can feed two
separately parameterized decoders.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .autodiff import (
    Tensor,
    add,
    dropout,
    gelu,
    masked_fill,
    matmul,
    mul,
    pow_const,
    relu,
    reshape,
    softmax,
    sub,
    tanh,
    tmean,
    transpose,
)

_ACTIVATIONS = {"gelu": gelu, "relu": relu, "tanh": tanh}

NEG_INF = float("-inf")


@dataclass
class LayerConfig:
    """Sizes and switches for the whole network.

    ``vocab_size`` is filled in once the vocabulary is known. The defaults are
    the desk-scale configuration; everything is adjustable.
    """

    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    dropout_p: float = 0.0
    max_positions: int = 256
    vocab_size: int = 0
    ffn_activation: str = "gelu"
    head_activation: str = "tanh"
    share_decoders: bool = False

    def validate(self, n_reserved: int = 0) -> None:
        if self.d_model <= 0 or self.n_heads <= 0 or self.d_ff <= 0:
            raise ValueError("d_model, n_heads and d_ff must be positive")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} must be divisible by n_heads={self.n_heads}")
        if self.n_enc_layers <= 0 or self.n_dec_layers <= 0:
            raise ValueError("layer counts must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.max_positions <= 0:
            raise ValueError("max_positions must be positive")
        if self.vocab_size and self.vocab_size < n_reserved:
            raise ValueError(
                f"vocab_size={self.vocab_size} smaller than the {n_reserved} reserved ids"
            )
        if self.ffn_activation not in _ACTIVATIONS:
            raise ValueError(f"unknown ffn_activation {self.ffn_activation!r}")
        if self.head_activation not in _ACTIVATIONS:
            raise ValueError(f"unknown head_activation {self.head_activation!r}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class EncoderOutput:
    """Encoder hidden states plus the padding mask decoders must honor."""

    hidden: Tensor  # batch x src_len x d_model
    pad_mask: np.ndarray  # batch x src_len, True at padding

    @property
    def batch_size(self) -> int:
        return self.hidden.shape[0]


def activation(name: str):
    return _ACTIVATIONS[name]


def init_param(rng: np.random.Generator, shape, std: float = 0.02) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


class Linear:
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int):
        self.w = init_param(rng, (d_in, d_out))
        self.b = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.w), self.b)

    def named_params(self, prefix: str):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


class LayerNorm:
    """Normalize the last axis to zero mean / unit variance, then affine."""

    def __init__(self, d: int, eps: float = 1e-6):
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.bias = Tensor(np.zeros(d), requires_grad=True)
        self.eps = eps

    def normalize(self, x: Tensor) -> Tensor:
        mean = tmean(x, axis=-1, keepdims=True)
        centered = sub(x, mean)
        var = tmean(mul(centered, centered), axis=-1, keepdims=True)
        inv = pow_const(add(var, self.eps), -0.5)
        return mul(centered, inv)

    def __call__(self, x: Tensor) -> Tensor:
        return add(mul(self.normalize(x), self.gain), self.bias)

    def named_params(self, prefix: str):
        yield f"{prefix}.gain", self.gain
        yield f"{prefix}.bias", self.bias


class MultiHeadAttention:
    """Scaled dot-product attention with per-head projections.

    Masked key positions receive -inf before the softmax; a query row whose
    keys are all masked has no valid distribution and raises.
    """

    def __init__(self, rng: np.random.Generator, d_model: int, n_heads: int):
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.wq = Linear(rng, d_model, d_model)
        self.wk = Linear(rng, d_model, d_model)
        self.wv = Linear(rng, d_model, d_model)
        self.wo = Linear(rng, d_model, d_model)

    def _split(self, x: Tensor) -> Tensor:
        b, length, _ = x.shape
        x = reshape(x, (b, length, self.n_heads, self.d_head))
        return transpose(x, (0, 2, 1, 3))

    def __call__(
        self,
        q: Tensor,
        k: Tensor,
        v: Tensor,
        key_pad_mask: np.ndarray | None = None,
        causal: bool = False,
    ) -> Tensor:
        if q.shape[-1] != self.d_model or k.shape[-1] != self.d_model:
            raise ValueError(
                f"attention: inputs must have d_model={self.d_model}, got {q.shape} / {k.shape}"
            )
        if k.shape[1] != v.shape[1]:
            raise ValueError(f"attention: key/value lengths differ: {k.shape} vs {v.shape}")
        b, q_len, _ = q.shape
        k_len = k.shape[1]

        qh = self._split(self.wq(q))
        kh = self._split(self.wk(k))
        vh = self._split(self.wv(v))

        scores = mul(matmul(qh, transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(self.d_head))

        blocked = np.zeros((b, 1, q_len, k_len), dtype=bool)
        if key_pad_mask is not None:
            if key_pad_mask.shape != (b, k_len):
                raise ValueError(
                    f"attention: pad mask shape {key_pad_mask.shape} does not match keys ({b}, {k_len})"
                )
            blocked |= key_pad_mask[:, None, None, :]
        if causal:
            future = np.triu(np.ones((q_len, k_len), dtype=bool), k=1)
            blocked |= future[None, None, :, :]
        if blocked.any():
            if blocked.all(axis=-1).any():
                raise ValueError("attention: a query position has every key masked")
            scores = masked_fill(scores, blocked, NEG_INF)

        attn = softmax(scores, axis=-1)
        out = matmul(attn, vh)
        out = reshape(transpose(out, (0, 2, 1, 3)), (b, q_len, self.d_model))
        return self.wo(out)

    def named_params(self, prefix: str):
        yield from self.wq.named_params(f"{prefix}.wq")
        yield from self.wk.named_params(f"{prefix}.wk")
        yield from self.wv.named_params(f"{prefix}.wv")
        yield from self.wo.named_params(f"{prefix}.wo")


class FeedForward:
    def __init__(self, rng: np.random.Generator, d_model: int, d_ff: int, act: str):
        self.lin1 = Linear(rng, d_model, d_ff)
        self.lin2 = Linear(rng, d_ff, d_model)
        self.act = activation(act)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(self.act(self.lin1(x)))

    def named_params(self, prefix: str):
        yield from self.lin1.named_params(f"{prefix}.lin1")
        yield from self.lin2.named_params(f"{prefix}.lin2")


class EncoderLayer:
    def __init__(self, rng, config: LayerConfig):
        self.norm1 = LayerNorm(config.d_model)
        self.attn = MultiHeadAttention(rng, config.d_model, config.n_heads)
        self.norm2 = LayerNorm(config.d_model)
        self.ffn = FeedForward(rng, config.d_model, config.d_ff, config.ffn_activation)

    def __call__(self, x, pad_mask, p, rng, training):
        h = self.norm1(x)
        x = add(x, dropout(self.attn(h, h, h, key_pad_mask=pad_mask), p, rng, training))
        x = add(x, dropout(self.ffn(self.norm2(x)), p, rng, training))
        return x

    def named_params(self, prefix: str):
        yield from self.norm1.named_params(f"{prefix}.norm1")
        yield from self.attn.named_params(f"{prefix}.attn")
        yield from self.norm2.named_params(f"{prefix}.norm2")
        yield from self.ffn.named_params(f"{prefix}.ffn")


class DecoderLayer:
    def __init__(self, rng, config: LayerConfig):
        self.norm1 = LayerNorm(config.d_model)
        self.self_attn = MultiHeadAttention(rng, config.d_model, config.n_heads)
        self.norm2 = LayerNorm(config.d_model)
        self.cross_attn = MultiHeadAttention(rng, config.d_model, config.n_heads)
        self.norm3 = LayerNorm(config.d_model)
        self.ffn = FeedForward(rng, config.d_model, config.d_ff, config.ffn_activation)

    def __call__(self, x, enc: EncoderOutput, p, rng, training):
        h = self.norm1(x)
        x = add(x, dropout(self.self_attn(h, h, h, causal=True), p, rng, training))
        h = self.norm2(x)
        x = add(
            x,
            dropout(
                self.cross_attn(h, enc.hidden, enc.hidden, key_pad_mask=enc.pad_mask),
                p,
                rng,
                training,
            ),
        )
        x = add(x, dropout(self.ffn(self.norm3(x)), p, rng, training))
        return x

    def named_params(self, prefix: str):
        yield from self.norm1.named_params(f"{prefix}.norm1")
        yield from self.self_attn.named_params(f"{prefix}.self_attn")
        yield from self.norm2.named_params(f"{prefix}.norm2")
        yield from self.cross_attn.named_params(f"{prefix}.cross_attn")
        yield from self.norm3.named_params(f"{prefix}.norm3")
        yield from self.ffn.named_params(f"{prefix}.ffn")


class TransformerEncoder:
    def __init__(self, rng, config: LayerConfig):
        self.layers = [EncoderLayer(rng, config) for _ in range(config.n_enc_layers)]
        self.final_norm = LayerNorm(config.d_model)

    def __call__(self, x: Tensor, pad_mask: np.ndarray, p, rng, training) -> Tensor:
        for layer in self.layers:
            x = layer(x, pad_mask, p, rng, training)
        return self.final_norm(x)

    def named_params(self, prefix: str):
        for i, layer in enumerate(self.layers):
            yield from layer.named_params(f"{prefix}.layer{i}")
        yield from self.final_norm.named_params(f"{prefix}.final_norm")


class TransformerDecoder:
    def __init__(self, rng, config: LayerConfig):
        self.layers = [DecoderLayer(rng, config) for _ in range(config.n_dec_layers)]
        self.final_norm = LayerNorm(config.d_model)

    def __call__(self, x: Tensor, enc: EncoderOutput, p, rng, training) -> Tensor:
        if x.shape[0] != enc.batch_size:
            raise ValueError(
                f"decoder: batch size {x.shape[0]} does not match encoder batch {enc.batch_size}"
            )
        for layer in self.layers:
            x = layer(x, enc, p, rng, training)
        return self.final_norm(x)

    def named_params(self, prefix: str):
        for i, layer in enumerate(self.layers):
            yield from layer.named_params(f"{prefix}.layer{i}")
        yield from self.final_norm.named_params(f"{prefix}.final_norm")


def parameter_count(config: LayerConfig, n_strategies: int, head_hidden: int | None = None) -> int:
    """Closed-form trainable parameter count for a full model.

    token table V*D + position table P*D
    encoder: n_e * (attn 4(D^2+D) + 2 norms 2D + ffn (D*F+F+F*D+D)) + final norm
    decoder: n_d * (2 attn + 3 norms + ffn) + final norm, twice unless shared
    head: D*H + H + H*S + S (the output projection is tied to the token table)
    """
    d, f = config.d_model, config.d_ff
    h = head_hidden if head_hidden is not None else d
    attn = 4 * (d * d + d)
    norm = 2 * d
    ffn = d * f + f + f * d + d
    enc = config.n_enc_layers * (attn + 2 * norm + ffn) + norm
    dec = config.n_dec_layers * (2 * attn + 3 * norm + ffn) + norm
    n_decoders = 1 if config.share_decoders else 2
    tables = config.vocab_size * d + config.max_positions * d
    head = d * h + h + h * n_strategies + n_strategies
    return tables + enc + n_decoders * dec + head
