"""Transformer encoder over character-level token ids.

Post-norm layers: x -> LN(x + dropout(MHA(x))) -> LN(u + dropout(FFN(u))).
Attention masking is additive (-1e9 on masked keys), which drives masked
attention weights to exactly zero after the max-subtracted softmax.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import (
    DEFAULT_DTYPE,
    Rng,
    Tensor,
    add,
    dropout,
    embedding_lookup,
    layer_norm,
    matmul,
    mul,
    relu,
    reshape,
    softmax,
    transpose,
)

MASK_BIAS = -1e9


@dataclass
class EncoderConfig:
    vocab_size: int
    model_dim: int = 128
    num_heads: int = 4
    ffn_dim: int = 256
    num_layers: int = 2
    max_seq_len: int = 128
    dropout_p: float = 0.2
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.model_dim % self.num_heads != 0:
            raise ValueError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.max_seq_len < 2:
            raise ValueError("max_seq_len must allow at least [CLS] and [SEP]")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


@dataclass
class LayerParams:
    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    ln1_gamma: Tensor
    ln1_beta: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor


@dataclass
class EncoderParams:
    token_emb: Tensor
    segment_emb: Tensor
    position_emb: Tensor
    layers: list[LayerParams] = field(default_factory=list)


def _weight(rng: Rng, shape, dtype) -> Tensor:
    return Tensor(rng.uniform(-0.02, 0.02, shape, dtype=dtype), requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _ones(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


def init_encoder_params(config: EncoderConfig, rng: Rng, dtype=DEFAULT_DTYPE) -> EncoderParams:
    """Uniform(-0.02, 0.02) weights and embeddings; zero biases; identity LayerNorm."""
    if config.vocab_size <= 0:
        raise ValueError("vocab_size must be positive before initialization")
    d, f = config.model_dim, config.ffn_dim
    layers = []
    for _ in range(config.num_layers):
        layers.append(
            LayerParams(
                w_q=_weight(rng, (d, d), dtype),
                b_q=_zeros((d,), dtype),
                w_k=_weight(rng, (d, d), dtype),
                b_k=_zeros((d,), dtype),
                w_v=_weight(rng, (d, d), dtype),
                b_v=_zeros((d,), dtype),
                w_o=_weight(rng, (d, d), dtype),
                b_o=_zeros((d,), dtype),
                ffn_w1=_weight(rng, (d, f), dtype),
                ffn_b1=_zeros((f,), dtype),
                ffn_w2=_weight(rng, (f, d), dtype),
                ffn_b2=_zeros((d,), dtype),
                ln1_gamma=_ones((d,), dtype),
                ln1_beta=_zeros((d,), dtype),
                ln2_gamma=_ones((d,), dtype),
                ln2_beta=_zeros((d,), dtype),
            )
        )
    return EncoderParams(
        token_emb=_weight(rng, (config.vocab_size, d), dtype),
        segment_emb=_weight(rng, (2, d), dtype),
        position_emb=_weight(rng, (config.max_seq_len, d), dtype),
        layers=layers,
    )


@dataclass
class EncodedInput:
    input_ids: np.ndarray
    input_mask: np.ndarray
    segment_ids: np.ndarray

    def __post_init__(self):
        self.input_ids = np.asarray(self.input_ids, dtype=np.int64)
        self.input_mask = np.asarray(self.input_mask, dtype=np.int64)
        self.segment_ids = np.asarray(self.segment_ids, dtype=np.int64)
        if not (len(self.input_ids) == len(self.input_mask) == len(self.segment_ids)):
            raise ValueError(
                f"input arrays disagree on length: ids {len(self.input_ids)}, "
                f"mask {len(self.input_mask)}, segments {len(self.segment_ids)}"
            )

    def __len__(self) -> int:
        return len(self.input_ids)


def embed_inputs(
    x: EncodedInput,
    params: EncoderParams,
    config: EncoderConfig,
    training: bool = False,
    rng: Rng | None = None,
) -> Tensor:
    """Sum of token, segment and learned position embeddings, then dropout."""
    n = len(x)
    if n > config.max_seq_len:
        raise ValueError(f"sequence length {n} exceeds max_seq_len {config.max_seq_len}")
    h = embedding_lookup(params.token_emb, x.input_ids)
    h = add(h, embedding_lookup(params.segment_emb, x.segment_ids))
    h = add(h, embedding_lookup(params.position_emb, np.arange(n)))
    return dropout(h, config.dropout_p, training, rng)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add(matmul(x, w), b)


def multi_head_attention(
    x: Tensor, mask: np.ndarray, layer: LayerParams, config: EncoderConfig
) -> Tensor:
    """Scaled dot-product attention per head; masked keys get weight exactly 0."""
    n, d = x.shape
    nh, hd = config.num_heads, config.head_dim
    q = _linear(x, layer.w_q, layer.b_q)
    k = _linear(x, layer.w_k, layer.b_k)
    v = _linear(x, layer.w_v, layer.b_v)
    # [n, d] -> [heads, n, head_dim]
    q = transpose(reshape(q, (n, nh, hd)), (1, 0, 2))
    k = transpose(reshape(k, (n, nh, hd)), (1, 2, 0))
    v = transpose(reshape(v, (n, nh, hd)), (1, 0, 2))
    logits = mul(matmul(q, k), 1.0 / math.sqrt(hd))
    bias = ((1 - np.asarray(mask)) * MASK_BIAS).astype(x.dtype)
    att = softmax(add(logits, Tensor(bias)), axis=-1)
    ctx = matmul(att, v)
    ctx = reshape(transpose(ctx, (1, 0, 2)), (n, d))
    return _linear(ctx, layer.w_o, layer.b_o)


def feed_forward(x: Tensor, layer: LayerParams) -> Tensor:
    return _linear(relu(_linear(x, layer.ffn_w1, layer.ffn_b1)), layer.ffn_w2, layer.ffn_b2)


def encoder_layer(
    x: Tensor,
    mask: np.ndarray,
    layer: LayerParams,
    config: EncoderConfig,
    training: bool = False,
    rng: Rng | None = None,
) -> Tensor:
    a = dropout(multi_head_attention(x, mask, layer, config), config.dropout_p, training, rng)
    u = layer_norm(add(x, a), layer.ln1_gamma, layer.ln1_beta, config.ln_eps)
    f = dropout(feed_forward(u, layer), config.dropout_p, training, rng)
    return layer_norm(add(u, f), layer.ln2_gamma, layer.ln2_beta, config.ln_eps)


def encode(
    x: EncodedInput,
    params: EncoderParams,
    config: EncoderConfig,
    training: bool = False,
    rng: Rng | None = None,
) -> Tensor:
    """Full stack: embeddings plus num_layers encoder layers. Returns [n, model_dim]."""
    h = embed_inputs(x, params, config, training, rng)
    for layer in params.layers:
        h = encoder_layer(h, x.input_mask, layer, config, training, rng)
    return h
