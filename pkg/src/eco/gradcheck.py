"""Finite-difference verification of every analytic gradient path: encoder
input gradients, the full context-vector pipeline, and the classifier loss.

All checks run in double precision with central differences (h=1e-3); errors
are reported as infinity-norm differences relative to the analytic gradient's
scale.
"""

from __future__ import annotations

import numpy as np

from . import encoder as enc
from .classifier import cross_entropy
from .numerics import DOUBLE, SeededRng, finite_difference_grad, max_relative_error
from .prompts import (
    ClassTokenTable,
    PromptEnsemble,
    SpecialTokens,
    ensemble_class_features,
    init_context,
    scatter_feature_grads,
)

TOY_CONFIG = enc.EncoderConfig(
    layers=2, heads=4, model_width=64, output_dim=32, max_positions=32, vocab_size=128
)


def check_encoder(seed: int, config: enc.EncoderConfig = TOY_CONFIG, length: int = 6,
                  h: float = 1e-3) -> float:
    """Max relative error of encode_backward vs finite differences, over every
    input-embedding coordinate."""
    rng = SeededRng(seed)
    weights = enc.init_random(config, rng, dtype=DOUBLE)
    x = rng.gaussian((length, config.model_width), 0.0, 0.5)
    d_feature = rng.gaussian(config.output_dim, 0.0, 1.0)
    eot = length - 1

    _, cache = enc.encode_sequence(weights, x, eot)
    analytic = enc.encode_backward(weights, cache, d_feature)

    def objective(perturbed):
        feat, _ = enc.encode_sequence(weights, perturbed, eot)
        return float(feat @ d_feature)

    numeric = finite_difference_grad(objective, x, h)
    return max_relative_error(numeric, analytic)


def _toy_task(seed: int, config: enc.EncoderConfig, d_prompts: int, n_ctx: int,
              num_classes: int, batch: int):
    rng = SeededRng(seed)
    weights = enc.init_random(config, rng, dtype=DOUBLE)
    specials = SpecialTokens(sot_id=config.vocab_size - 2, eot_id=config.vocab_size - 1)
    table = ClassTokenTable(
        names=[f"class_{k}" for k in range(num_classes)],
        token_ids=[[k, (k + 1) % (config.vocab_size - 2)] for k in range(num_classes)],
    )
    ensemble = init_context(d_prompts, n_ctx, config.model_width, rng, dtype=DOUBLE)
    queries = rng.gaussian((batch, config.output_dim), 0.0, 1.0)
    labels = np.arange(batch) % num_classes
    return weights, specials, table, ensemble, queries, labels


def check_context_pipeline(
    seed: int,
    config: enc.EncoderConfig = TOY_CONFIG,
    d_prompts: int = 2,
    n_ctx: int = 2,
    num_classes: int = 3,
    batch: int = 4,
    tau: float = 0.07,
    h: float = 1e-3,
) -> float:
    """End-to-end loss gradient w.r.t. every context coordinate vs finite
    differences through the full encode/average/classify pipeline."""
    weights, specials, table, ensemble, queries, labels = _toy_task(
        seed, config, d_prompts, n_ctx, num_classes, batch
    )
    features, caches = ensemble_class_features(weights, ensemble, table, specials)
    lg = cross_entropy(queries, features, labels, tau)
    analytic = scatter_feature_grads(
        lg.d_text_features, caches, weights, list(range(1, 1 + n_ctx))
    )

    def objective(ctx):
        feats, _ = ensemble_class_features(weights, PromptEnsemble(ctx), table, specials)
        return cross_entropy(queries, feats, labels, tau).loss

    numeric = finite_difference_grad(objective, ensemble.context, h)
    return max_relative_error(numeric, analytic)


def check_loss(seed: int, num_classes: int = 5, dim: int = 16, batch: int = 6,
               tau: float = 0.07, h: float = 1e-4) -> float:
    """Cross-entropy gradient w.r.t. the class features vs finite differences."""
    rng = SeededRng(seed)
    text = rng.gaussian((num_classes, dim), 0.0, 1.0)
    queries = rng.gaussian((batch, dim), 0.0, 1.0)
    labels = np.asarray(rng.integers(0, num_classes, size=batch))

    analytic = cross_entropy(queries, text, labels, tau).d_text_features

    def objective(t):
        return cross_entropy(queries, t, labels, tau).loss

    numeric = finite_difference_grad(objective, text, h)
    return max_relative_error(numeric, analytic)


def run_all(seed: int, config: enc.EncoderConfig = TOY_CONFIG) -> dict[str, float]:
    """All three gradient checks for one seed; returns path -> max rel error."""
    return {
        "encoder": check_encoder(seed, config),
        "context_pipeline": check_context_pipeline(seed, config),
        "loss": check_loss(seed),
    }
