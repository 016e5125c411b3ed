"""The trainable object: D prompts of N learnable context vectors each.

Per class, the encoder input is [start token, context vectors, class tokens,
end token]; class features are the element-wise average of the D per-prompt
features, and gradients flowing back through the encoder are scattered onto
the context vectors only (everything else is frozen).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import encoder as enc
from .numerics import SINGLE, SeededRng


class ConfigurationError(ValueError):
    pass


class ContractError(RuntimeError):
    """Mismatched cache/gradient pairing between forward and backward calls."""


@dataclass
class PromptEnsemble:
    context: np.ndarray  # (D, N, w) vectors in token-embedding space

    @property
    def d_prompts(self) -> int:
        return self.context.shape[0]

    @property
    def n_ctx(self) -> int:
        return self.context.shape[1]

    @property
    def width(self) -> int:
        return self.context.shape[2]

    def parameter_count(self) -> int:
        return int(self.context.size)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.context).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class ClassTokenTable:
    names: list[str]
    token_ids: list[list[int]]  # pre-tokenized class-name sequences

    def __post_init__(self):
        if len(self.names) != len(self.token_ids):
            raise ConfigurationError("names and token sequences differ in length")
        if len(self.names) < 2:
            raise ConfigurationError("at least two classes are required")
        for name, ids in zip(self.names, self.token_ids):
            if len(ids) == 0:
                raise ConfigurationError(f"class {name!r} has an empty token sequence")

    @property
    def num_classes(self) -> int:
        return len(self.names)


@dataclass(frozen=True)
class SpecialTokens:
    sot_id: int
    eot_id: int

    def __post_init__(self):
        if self.sot_id == self.eot_id:
            raise ConfigurationError("start and end token ids must differ")


def init_context(
    d_prompts: int,
    n_ctx: int,
    width: int,
    rng: SeededRng,
    std: float = 0.02,
    dtype=SINGLE,
) -> PromptEnsemble:
    """I.i.d. Gaussian(0, std) context vectors, deterministic in the seed."""
    if d_prompts < 1 or n_ctx < 1:
        raise ConfigurationError(
            f"need at least one prompt and one context token, got D={d_prompts} N={n_ctx}"
        )
    ctx = rng.gaussian((d_prompts, n_ctx, width), 0.0, std).astype(dtype)
    return PromptEnsemble(context=ctx)


def assemble_sequence(
    ensemble: PromptEnsemble,
    prompt_index: int,
    class_table: ClassTokenTable,
    class_index: int,
    weights: enc.EncoderWeights,
    specials: SpecialTokens,
) -> tuple[np.ndarray, int, list[int]]:
    """Build the embedding sequence [sot, v_1..v_N, class tokens, eot].

    Returns (embeddings, eot_index, context positions). Context vectors occupy
    positions 1..N; the class token sits at the end, eot last.
    """
    n = ensemble.n_ctx
    class_ids = class_table.token_ids[class_index]
    ids = [specials.sot_id] + list(class_ids) + [specials.eot_id]
    tok = enc.embed_tokens(weights, ids).astype(ensemble.context.dtype)
    length = n + len(class_ids) + 2
    if length > weights.config.max_positions:
        raise enc.SequenceLengthError(
            f"assembled length {length} exceeds maximum {weights.config.max_positions}"
        )
    seq = np.empty((length, ensemble.width), dtype=ensemble.context.dtype)
    seq[0] = tok[0]
    seq[1 : 1 + n] = ensemble.context[prompt_index]
    seq[1 + n :] = tok[1:]
    return seq, length - 1, list(range(1, 1 + n))


def ensemble_class_features(
    weights: enc.EncoderWeights,
    ensemble: PromptEnsemble,
    class_table: ClassTokenTable,
    specials: SpecialTokens,
    normalize_per_prompt: bool = False,
) -> tuple[np.ndarray, list[list[enc.ForwardCache]]]:
    """Average per-prompt features for every class; keep caches for backward.

    features[k] = (1/D) sum_i g(v_i1..v_iN, c_k). Caches are indexed
    [prompt][class]. With normalize_per_prompt each feature is scaled to unit
    norm before averaging; that variant is inference-only, the gradient
    scatter assumes the default raw average.
    """
    d = ensemble.d_prompts
    k_classes = class_table.num_classes
    dim = weights.config.output_dim
    features = np.zeros((k_classes, dim), dtype=ensemble.context.dtype)
    caches: list[list[enc.ForwardCache]] = []
    for i in range(d):
        row: list[enc.ForwardCache] = []
        for k in range(k_classes):
            seq, eot, _ = assemble_sequence(ensemble, i, class_table, k, weights, specials)
            feat, cache = enc.encode_sequence(weights, seq, eot)
            if normalize_per_prompt:
                feat = feat / np.linalg.norm(feat)
            features[k] += feat
            row.append(cache)
        caches.append(row)
    features /= d
    return features, caches


def scatter_feature_grads(
    d_features: np.ndarray,
    caches: list[list[enc.ForwardCache]],
    weights: enc.EncoderWeights,
    ctx_positions: list[int],
) -> np.ndarray:
    """Backprop class-feature gradients onto the context tensor.

    context_grad[i] = sum_k (1/D) * rows-at-context-positions of the encoder
    backward pass for (prompt i, class k); class-token and special-token
    gradients are discarded (those embeddings are frozen). Classes are reduced
    in ascending order for deterministic floating-point sums.
    """
    d = len(caches)
    n = len(ctx_positions)
    w = weights.config.model_width
    if d == 0 or d_features.shape[0] != len(caches[0]):
        raise ContractError("cache layout does not match feature gradients")
    dtype = d_features.dtype
    inv_d = np.asarray(1.0 / d, dtype=dtype)
    grad = np.zeros((d, n, w), dtype=dtype)
    pos = np.asarray(ctx_positions)
    for i in range(d):
        for k in range(d_features.shape[0]):
            d_seq = enc.encode_backward(weights, caches[i][k], d_features[k])
            grad[i] += d_seq[pos]
        grad[i] *= inv_d
    return grad


@dataclass
class PrototypeBank:
    prototypes: np.ndarray  # (K, d) averaged class features
    encoder_hash: str
    ensemble_hash: str

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]


def precompute_prototypes(
    weights: enc.EncoderWeights,
    ensemble: PromptEnsemble,
    class_table: ClassTokenTable,
    specials: SpecialTokens,
    normalize_per_prompt: bool = False,
) -> PrototypeBank:
    """Freeze the averaged class features so inference needs no encoder calls."""
    features, _ = ensemble_class_features(
        weights, ensemble, class_table, specials, normalize_per_prompt
    )
    return PrototypeBank(
        prototypes=features,
        encoder_hash=weights.content_hash(),
        ensemble_hash=ensemble.content_hash(),
    )
