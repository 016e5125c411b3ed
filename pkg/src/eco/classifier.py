"""Temperature-scaled cosine softmax classifier, its loss/gradient, and the
two non-learned baselines (hand-prompt ensembling and a linear probe).

p(y=k | x) = exp(cos(t_k, x)/tau) / sum_j exp(cos(t_j, x)/tau)

tau is inherited frozen from the pretrained model (0.01 by default) and is
never trained here. Cosines are clamped to [-1, 1] to absorb rounding before
the exponential.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import encoder as enc
from .numerics import DimensionError, softmax_rows
from .prompts import PrototypeBank

DEFAULT_TAU = 0.01


class DegenerateFeatureError(ValueError):
    """A zero-norm vector cannot be cosine-classified."""


@dataclass(frozen=True)
class ClassifierConfig:
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class LossGrad:
    loss: float  # mean cross-entropy over the batch
    d_text_features: np.ndarray  # (K, d) exact gradient w.r.t. class features
    probabilities: np.ndarray  # (B, K)


def _normalize_rows(x: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=-1)
    if np.any(norms == 0):
        raise DegenerateFeatureError(f"zero-norm {what} vector")
    return x / norms[..., None], norms


def class_probabilities(
    image_feature: np.ndarray, text_features: np.ndarray, tau: float = DEFAULT_TAU
) -> np.ndarray:
    """Probability over classes for a single query vector."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    u, _ = _normalize_rows(image_feature[None, :], "image")
    t, _ = _normalize_rows(text_features, "text")
    cos = np.clip(u @ t.T, -1.0, 1.0)
    return softmax_rows(cos / tau)[0]


def cross_entropy(
    batch: np.ndarray,
    text_features: np.ndarray,
    labels: np.ndarray,
    tau: float = DEFAULT_TAU,
) -> LossGrad:
    """Mean cross-entropy over a batch, with the exact gradient w.r.t. the
    class features (including the cosine-normalization Jacobian).

    No gradient is produced for the image features; they are frozen inputs.
    """
    labels = np.asarray(labels, dtype=np.int64)
    k = text_features.shape[0]
    if np.any(labels < 0) or np.any(labels >= k):
        raise DimensionError(f"label outside [0, {k})")
    b = batch.shape[0]

    u, _ = _normalize_rows(batch, "image")
    t, t_norms = _normalize_rows(text_features, "text")
    cos = np.clip(u @ t.T, -1.0, 1.0)  # (B, K)
    # log-domain loss: at tau ~ 0.01 the true-class probability can underflow
    # to exactly zero in single precision, which would make log() non-finite
    shifted = cos / tau
    shifted = shifted - np.max(shifted, axis=1, keepdims=True)
    log_z = np.log(np.sum(np.exp(shifted), axis=1))
    loss = float(-np.mean(shifted[np.arange(b), labels] - log_z))
    probs = np.exp(shifted - log_z[:, None])

    onehot = np.zeros_like(probs)
    onehot[np.arange(b), labels] = 1.0
    g_cos = (probs - onehot) / np.asarray(tau * b, dtype=probs.dtype)  # dL/dcos (B, K)
    # d cos(t_k, u_b) / d t_k = (u_b - cos * t_k_hat) / ||t_k||
    d_t = (g_cos.T @ u - np.sum(g_cos * cos, axis=0)[:, None] * t) / t_norms[:, None]
    return LossGrad(loss=loss, d_text_features=d_t, probabilities=probs)


def predict(prototypes, image_feature: np.ndarray) -> int:
    """Argmax of cosine similarity; ties break to the lowest class index.

    Equals the argmax of class_probabilities for any positive temperature.
    """
    protos = prototypes.prototypes if isinstance(prototypes, PrototypeBank) else prototypes
    u, _ = _normalize_rows(image_feature[None, :], "query")
    t, _ = _normalize_rows(protos, "prototype")
    return int(np.argmax(u @ t.T))


def predict_batch(prototypes, queries: np.ndarray) -> np.ndarray:
    protos = prototypes.prototypes if isinstance(prototypes, PrototypeBank) else prototypes
    u, _ = _normalize_rows(queries, "query")
    t, _ = _normalize_rows(protos, "prototype")
    return np.argmax(u @ t.T, axis=1)


def zero_shot_baseline(
    weights: enc.EncoderWeights,
    hand_prompt_token_sequences: list[list[list[int]]],
    bank,
) -> float:
    """Accuracy of hand-crafted prompt ensembling over an embedding bank.

    hand_prompt_token_sequences[k] is a list of full token-id sequences for
    class k (end token last). Per class the encoded features are averaged,
    then every bank vector is classified by cosine argmax.
    """
    protos = []
    for sequences in hand_prompt_token_sequences:
        if len(sequences) == 0:
            raise ValueError("each class needs at least one hand prompt")
        feats = []
        for ids in sequences:
            seq = enc.embed_tokens(weights, ids)
            feat, _ = enc.encode_sequence(weights, seq, len(ids) - 1)
            feats.append(feat)
        protos.append(np.mean(feats, axis=0))
    protos = np.stack(protos)
    preds = predict_batch(protos, bank.vectors)
    return float(np.mean(preds == bank.labels))


class ProtocolError(ValueError):
    pass


def linear_probe(train_bank, test_bank, l2: float = 1e-3, max_iters: int = 200_000) -> float:
    """Multinomial logistic regression on raw image features.

    Full-batch first-order descent (Nesterov-accelerated, fixed 1/L step) to
    gradient-norm tolerance 1e-6, l2 penalty on the weights (not the bias),
    evaluated as top-1 accuracy on the test bank. The objective is convex, so
    acceleration changes only the iteration count, not the optimum.
    """
    x = np.asarray(train_bank.vectors, dtype=np.float64)
    y = np.asarray(train_bank.labels, dtype=np.int64)
    k = train_bank.num_classes
    present = np.unique(y)
    if len(present) != k:
        missing = sorted(set(range(k)) - set(present.tolist()))
        raise ProtocolError(f"training split missing class {missing[0]}")
    n, d = x.shape

    onehot = np.zeros((n, k))
    onehot[np.arange(n), y] = 1.0

    # 1/L step for the softmax-regression Lipschitz bound
    aug = np.hstack([x, np.ones((n, 1))])
    step = 1.0 / (0.5 * np.linalg.norm(aug, 2) ** 2 / n + l2)

    def gradient(wb):
        weights, bias = wb[:, :d], wb[:, d]
        probs = softmax_rows(x @ weights.T + bias)
        resid = (probs - onehot) / n
        g = np.empty_like(wb)
        g[:, :d] = resid.T @ x + l2 * weights
        g[:, d] = resid.sum(axis=0)
        return g

    wb = np.zeros((k, d + 1))
    look = wb.copy()
    momentum_t = 1.0
    for _ in range(max_iters):
        g = gradient(wb)
        if np.linalg.norm(g) <= 1e-6:
            break
        nxt = look - step * gradient(look)
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * momentum_t**2))
        look = nxt + ((momentum_t - 1.0) / t_next) * (nxt - wb)
        wb, momentum_t = nxt, t_next

    logits = np.asarray(test_bank.vectors, dtype=np.float64) @ wb[:, :d].T + wb[:, d]
    preds = np.argmax(logits, axis=1)
    return float(np.mean(preds == test_bank.labels))
