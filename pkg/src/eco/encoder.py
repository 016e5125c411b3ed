"""Frozen transformer text encoder: forward to a joint-space feature and
backward to input-embedding gradients.

The architecture mirrors the CLIP text tower: learned positional embeddings,
pre-norm blocks (LN -> causal multi-head attention -> residual; LN -> MLP with
quick-GELU -> residual), a final layer norm, and a linear projection applied to
the row at the end-of-text position. Weights are immutable after construction;
the backward pass produces gradients with respect to the input embedding rows
only, never the weights.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    DimensionError,
    SINGLE,
    SeededRng,
    layer_norm,
    quick_gelu,
    quick_gelu_grad,
    softmax_rows,
)


class VocabularyError(ValueError):
    """Token id outside the embedding table."""


class SequenceLengthError(ValueError):
    """Assembled sequence longer than the positional table."""


@dataclass(frozen=True)
class EncoderConfig:
    layers: int
    heads: int
    model_width: int
    output_dim: int
    max_positions: int
    vocab_size: int
    eps: float = 1e-5

    def __post_init__(self):
        if self.model_width % self.heads != 0:
            raise DimensionError(
                f"model width {self.model_width} not divisible by {self.heads} heads"
            )

    @property
    def head_dim(self) -> int:
        return self.model_width // self.heads


@dataclass
class BlockWeights:
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    qkv_w: np.ndarray  # (w, 3w), fused query/key/value
    qkv_b: np.ndarray
    out_w: np.ndarray  # (w, w)
    out_b: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    fc_w: np.ndarray  # (w, 4w)
    fc_b: np.ndarray
    proj_w: np.ndarray  # (4w, w)
    proj_b: np.ndarray


@dataclass
class EncoderWeights:
    config: EncoderConfig
    token_table: np.ndarray  # (V, w), the word-embedding layer
    positional: np.ndarray  # (T, w)
    blocks: list[BlockWeights]
    final_gain: np.ndarray
    final_bias: np.ndarray
    projection: np.ndarray  # (w, d)

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        """Stable (name, array) listing covering every parameter."""
        out = [("token_table", self.token_table), ("positional", self.positional)]
        for i, b in enumerate(self.blocks):
            p = f"blocks.{i}."
            out += [
                (p + "ln1.gain", b.ln1_gain),
                (p + "ln1.bias", b.ln1_bias),
                (p + "attn.qkv_w", b.qkv_w),
                (p + "attn.qkv_b", b.qkv_b),
                (p + "attn.out_w", b.out_w),
                (p + "attn.out_b", b.out_b),
                (p + "ln2.gain", b.ln2_gain),
                (p + "ln2.bias", b.ln2_bias),
                (p + "mlp.fc_w", b.fc_w),
                (p + "mlp.fc_b", b.fc_b),
                (p + "mlp.proj_w", b.proj_w),
                (p + "mlp.proj_b", b.proj_b),
            ]
        out += [
            ("final.gain", self.final_gain),
            ("final.bias", self.final_bias),
            ("projection", self.projection),
        ]
        return out

    def content_hash(self) -> str:
        """SHA-256 over all parameter bytes; used to verify the base stays frozen."""
        h = hashlib.sha256()
        for name, arr in self.named_tensors():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def astype(self, dtype) -> "EncoderWeights":
        def c(a):
            return a.astype(dtype)

        return EncoderWeights(
            config=self.config,
            token_table=c(self.token_table),
            positional=c(self.positional),
            blocks=[
                BlockWeights(**{k: c(v) for k, v in vars(b).items()})
                for b in self.blocks
            ],
            final_gain=c(self.final_gain),
            final_bias=c(self.final_bias),
            projection=c(self.projection),
        )


@dataclass
class ForwardCache:
    """Activations saved by encode_sequence for the matching backward call.

    Valid only for the exact input it was produced from.
    """

    length: int
    eot_index: int
    dtype: np.dtype
    ln1: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)  # xhat, inv_std
    values: list[np.ndarray] = field(default_factory=list)  # (H, len, hd)
    keys: list[np.ndarray] = field(default_factory=list)
    queries: list[np.ndarray] = field(default_factory=list)
    probs: list[np.ndarray] = field(default_factory=list)  # (H, len, len)
    ln2: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    mlp_pre: list[np.ndarray] = field(default_factory=list)  # fc output before activation
    final: tuple[np.ndarray, np.ndarray] | None = None


def parameter_count(config: EncoderConfig) -> int:
    """Closed-form total parameter count for a given configuration."""
    w, d = config.model_width, config.output_dim
    per_block = (
        2 * w  # ln1
        + w * 3 * w + 3 * w  # qkv
        + w * w + w  # attention output projection
        + 2 * w  # ln2
        + w * 4 * w + 4 * w  # mlp expand
        + 4 * w * w + w  # mlp contract
    )
    return (
        config.vocab_size * w
        + config.max_positions * w
        + config.layers * per_block
        + 2 * w  # final layer norm
        + w * d
    )


def init_random(config: EncoderConfig, rng: SeededRng, dtype=SINGLE) -> EncoderWeights:
    """Gaussian(0, 0.02) weights, zero biases, unit layer-norm gains."""
    w, d = config.model_width, config.output_dim

    def g(shape):
        return rng.gaussian(shape, 0.0, 0.02).astype(dtype)

    def zeros(shape):
        return np.zeros(shape, dtype=dtype)

    def ones(shape):
        return np.ones(shape, dtype=dtype)

    blocks = []
    for _ in range(config.layers):
        blocks.append(
            BlockWeights(
                ln1_gain=ones(w),
                ln1_bias=zeros(w),
                qkv_w=g((w, 3 * w)),
                qkv_b=zeros(3 * w),
                out_w=g((w, w)),
                out_b=zeros(w),
                ln2_gain=ones(w),
                ln2_bias=zeros(w),
                fc_w=g((w, 4 * w)),
                fc_b=zeros(4 * w),
                proj_w=g((4 * w, w)),
                proj_b=zeros(w),
            )
        )
    return EncoderWeights(
        config=config,
        token_table=g((config.vocab_size, w)),
        positional=g((config.max_positions, w)),
        blocks=blocks,
        final_gain=ones(w),
        final_bias=zeros(w),
        projection=g((w, d)),
    )


def embed_tokens(weights: EncoderWeights, ids) -> np.ndarray:
    """Gather token-table rows for a sequence of ids (no positional term)."""
    ids = np.asarray(ids, dtype=np.int64)
    bad = ids >= weights.config.vocab_size
    if np.any(bad) or np.any(ids < 0):
        raise VocabularyError(
            f"token id {int(ids[bad | (ids < 0)][0])} outside vocabulary of size "
            f"{weights.config.vocab_size}"
        )
    return weights.token_table[ids].copy()


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    length, w = x.shape
    return x.reshape(length, heads, w // heads).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    heads, length, hd = x.shape
    return x.transpose(1, 0, 2).reshape(length, heads * hd)


def _ln_forward(x, gain, bias, eps):
    mean = np.mean(x, axis=-1, keepdims=True)
    var = np.mean((x - mean) ** 2, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv
    return gain * xhat + bias, xhat, inv


def _ln_backward(dy, xhat, inv, gain):
    t = dy * gain
    return inv * (
        t
        - np.mean(t, axis=-1, keepdims=True)
        - xhat * np.mean(t * xhat, axis=-1, keepdims=True)
    )


def encode_sequence(
    weights: EncoderWeights, embeddings: np.ndarray, eot_index: int
) -> tuple[np.ndarray, ForwardCache]:
    """Run the encoder on a token-embedding sequence.

    Adds positional embeddings, applies the causal blocks, and projects the
    final-norm row at eot_index into the joint space. The output is not
    length-normalized; normalization is the classifier's concern.
    """
    cfg = weights.config
    length = embeddings.shape[0]
    if length > cfg.max_positions:
        raise SequenceLengthError(
            f"sequence length {length} exceeds maximum {cfg.max_positions}"
        )
    if not (0 <= eot_index < length):
        raise DimensionError(f"eot index {eot_index} outside sequence of length {length}")

    dtype = embeddings.dtype
    scale = np.asarray(1.0 / np.sqrt(cfg.head_dim), dtype=dtype)
    causal = np.triu(np.ones((length, length), dtype=bool), k=1)

    cache = ForwardCache(length=length, eot_index=eot_index, dtype=dtype)
    x = embeddings + weights.positional[:length].astype(dtype)

    for b in weights.blocks:
        a, xhat1, inv1 = _ln_forward(x, b.ln1_gain, b.ln1_bias, cfg.eps)
        qkv = a @ b.qkv_w + b.qkv_b
        q, k, v = (np.ascontiguousarray(t) for t in np.split(qkv, 3, axis=1))
        qh, kh, vh = (_split_heads(t, cfg.heads) for t in (q, k, v))
        scores = (qh @ kh.transpose(0, 2, 1)) * scale
        scores = np.where(causal[None, :, :], np.array(-np.inf, dtype=dtype), scores)
        probs = softmax_rows(scores)
        ctx = _merge_heads(probs @ vh)
        x = x + ctx @ b.out_w + b.out_b

        h, xhat2, inv2 = _ln_forward(x, b.ln2_gain, b.ln2_bias, cfg.eps)
        pre = h @ b.fc_w + b.fc_b
        x = x + quick_gelu(pre) @ b.proj_w + b.proj_b

        cache.ln1.append((xhat1, inv1))
        cache.queries.append(qh)
        cache.keys.append(kh)
        cache.values.append(vh)
        cache.probs.append(probs)
        cache.ln2.append((xhat2, inv2))
        cache.mlp_pre.append(pre)

    final, xhatf, invf = _ln_forward(x, weights.final_gain, weights.final_bias, cfg.eps)
    cache.final = (xhatf, invf)
    feature = final[eot_index] @ weights.projection
    return feature, cache


def encode_backward(
    weights: EncoderWeights, cache: ForwardCache, d_feature: np.ndarray
) -> np.ndarray:
    """Gradient of (d_feature . feature) with respect to the input embedding rows.

    Weight gradients are never formed; the base model stays frozen.
    """
    cfg = weights.config
    if d_feature.shape != (cfg.output_dim,):
        raise DimensionError(
            f"feature gradient shape {d_feature.shape} != ({cfg.output_dim},)"
        )
    length = cache.length
    scale = np.asarray(1.0 / np.sqrt(cfg.head_dim), dtype=cache.dtype)

    xhatf, invf = cache.final
    d_final = np.zeros((length, cfg.model_width), dtype=cache.dtype)
    d_final[cache.eot_index] = weights.projection @ d_feature
    d_x = _ln_backward(d_final, xhatf, invf, weights.final_gain)

    for i in reversed(range(cfg.layers)):
        b = weights.blocks[i]

        # MLP branch (residual gradient flows through unchanged)
        pre = cache.mlp_pre[i]
        d_gelu = d_x @ b.proj_w.T
        d_pre = d_gelu * quick_gelu_grad(pre)
        d_h = d_pre @ b.fc_w.T
        xhat2, inv2 = cache.ln2[i]
        d_x = d_x + _ln_backward(d_h, xhat2, inv2, b.ln2_gain)

        # attention branch
        probs, qh, kh, vh = cache.probs[i], cache.queries[i], cache.keys[i], cache.values[i]
        d_ctx = _split_heads(d_x @ b.out_w.T, cfg.heads)
        d_probs = d_ctx @ vh.transpose(0, 2, 1)
        d_v = probs.transpose(0, 2, 1) @ d_ctx
        d_scores = probs * (d_probs - np.sum(d_probs * probs, axis=-1, keepdims=True))
        d_q = (d_scores @ kh) * scale
        d_k = (d_scores.transpose(0, 2, 1) @ qh) * scale
        d_qkv = np.concatenate(
            [_merge_heads(d_q), _merge_heads(d_k), _merge_heads(d_v)], axis=1
        )
        d_a = d_qkv @ b.qkv_w.T
        xhat1, inv1 = cache.ln1[i]
        d_x = d_x + _ln_backward(d_a, xhat1, inv1, b.ln1_gain)

    return d_x
