"""Few-shot sampling, the SGD loop over context vectors, evaluation, and the
(D, N) sweep with multi-seed aggregation.

The optimizer recipe (SGD momentum 0.9, one warmup epoch at 1e-5, cosine decay
to zero, lr 0.002) is recorded here so runs reproduce without consulting any
other document. Only the context tensor ever changes; the encoder weight hash
is asserted unchanged around every run.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import encoder as enc
from .classifier import DEFAULT_TAU, ProtocolError, cross_entropy, predict_batch
from .data_io import EmbeddingBank
from .numerics import SeededRng
from .prompts import (
    ClassTokenTable,
    PromptEnsemble,
    SpecialTokens,
    ensemble_class_features,
    init_context,
    precompute_prototypes,
    scatter_feature_grads,
)

PROTOCOL_SHOTS = (1, 2, 4, 8, 16)
PROTOCOL_SEEDS = (1, 2, 3)


class DivergenceError(RuntimeError):
    pass


class ParityError(ValueError):
    """Grid cell breaking the trainable-parameter budget D*N == M."""


@dataclass(frozen=True)
class TrainConfig:
    shots: int = 16
    epochs: int = 50
    batch_size: int | None = None  # None -> min(32, K * shots)
    lr: float = 0.002
    momentum: float = 0.9
    warmup_epochs: int = 1
    warmup_lr: float = 1e-5
    seed: int = 1
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be nonnegative")

    def resolved_batch_size(self, num_classes: int) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return min(32, num_classes * self.shots)


@dataclass
class FewShotSplit:
    """Per class: the training example indices into an embedding bank."""

    shots: int
    indices: list[np.ndarray]  # one array of length `shots` per class

    def flattened(self) -> tuple[np.ndarray, np.ndarray]:
        """(bank row indices, labels), classes in ascending order."""
        rows = np.concatenate(self.indices)
        labels = np.repeat(np.arange(len(self.indices)), self.shots)
        return rows, labels


def sample_few_shot(bank: EmbeddingBank, shots: int, rng: SeededRng) -> FewShotSplit:
    """Uniform per-class sampling without replacement, deterministic in seed."""
    indices = []
    for k in range(bank.num_classes):
        pool = bank.class_indices(k)
        if len(pool) < shots:
            raise ProtocolError(
                f"class {bank.class_table.names[k]!r} has {len(pool)} examples, "
                f"needs {shots}"
            )
        pick = rng.choice_without_replacement(len(pool), shots)
        indices.append(np.sort(pool[pick]))
    return FewShotSplit(shots=shots, indices=indices)


def learning_rate(epoch: int, config: TrainConfig) -> float:
    """Warmup epochs at warmup_lr, then cosine decay from lr to 0."""
    if epoch < config.warmup_epochs:
        return config.warmup_lr
    span = max(config.epochs - config.warmup_epochs, 1)
    t = (epoch - config.warmup_epochs) / span
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * t))


def train(
    weights: enc.EncoderWeights,
    ensemble: PromptEnsemble,
    class_table: ClassTokenTable,
    specials: SpecialTokens,
    split: FewShotSplit,
    bank: EmbeddingBank,
    config: TrainConfig,
) -> tuple[PromptEnsemble, list[float]]:
    """SGD with momentum on the context tensor only.

    Returns a new trained ensemble and the per-epoch mean loss history. The
    encoder is asserted byte-identical before and after.
    """
    hash_before = weights.content_hash()
    ctx = ensemble.context.copy()
    dtype = ctx.dtype
    velocity = np.zeros_like(ctx)
    ctx_positions = list(range(1, 1 + ensemble.n_ctx))

    rows, labels = split.flattened()
    n = len(rows)
    batch_size = config.resolved_batch_size(bank.num_classes)
    shuffle_rng = SeededRng(config.seed)
    momentum = np.asarray(config.momentum, dtype=dtype)

    history: list[float] = []
    for epoch in range(config.epochs):
        lr = np.asarray(learning_rate(epoch, config), dtype=dtype)
        perm = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            batch = perm[start : start + batch_size]
            current = PromptEnsemble(context=ctx)
            features, caches = ensemble_class_features(weights, current, class_table, specials)
            lg = cross_entropy(bank.vectors[rows[batch]], features, labels[batch], config.tau)
            if not np.isfinite(lg.loss):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch} (lr={float(lr):g})"
                )
            grad = scatter_feature_grads(lg.d_text_features, caches, weights, ctx_positions)
            velocity = momentum * velocity + grad
            ctx = ctx - lr * velocity
            epoch_loss += lg.loss * len(batch)
        history.append(epoch_loss / n)

    if weights.content_hash() != hash_before:
        raise RuntimeError("encoder weights changed during training")
    return PromptEnsemble(context=ctx), history


def evaluate(
    weights: enc.EncoderWeights,
    ensemble: PromptEnsemble,
    class_table: ClassTokenTable,
    specials: SpecialTokens,
    test_bank: EmbeddingBank,
) -> float:
    """Top-1 accuracy over the full test bank via precomputed prototypes."""
    protos = precompute_prototypes(weights, ensemble, class_table, specials)
    preds = predict_batch(protos, test_bank.vectors)
    return float(np.mean(preds == test_bank.labels))


@dataclass
class RunRecord:
    dataset_id: str
    d_prompts: int
    n_ctx: int
    shots: int
    seed: int
    accuracy: float
    final_loss: float
    epochs: int
    wall_time: float


@dataclass
class RunReport:
    budget: int
    seeds: list[int]
    shots_list: list[int]
    grid: list[tuple[int, int]]
    records: list[RunRecord] = field(default_factory=list)

    def cell_mean(self, d_prompts: int, n_ctx: int, shots: int) -> float:
        vals = [
            r.accuracy
            for r in self.records
            if (r.d_prompts, r.n_ctx, r.shots) == (d_prompts, n_ctx, shots)
        ]
        if len(vals) != len(self.seeds):
            raise ValueError(
                f"cell ({d_prompts},{n_ctx},{shots}) has {len(vals)} records, "
                f"expected {len(self.seeds)}"
            )
        return float(np.mean(vals))

    def delta_vs_single_prompt(self, d_prompts: int, n_ctx: int, shots: int) -> float:
        """Gain of a cell over the (D=1, N=budget) single-prompt cell."""
        return self.cell_mean(d_prompts, n_ctx, shots) - self.cell_mean(1, self.budget, shots)


def check_parity(grid: list[tuple[int, int]], budget: int) -> None:
    for d_prompts, n_ctx in grid:
        if d_prompts * n_ctx != budget:
            raise ParityError(
                f"grid cell ({d_prompts},{n_ctx}) breaks parameter parity: "
                f"{d_prompts}*{n_ctx} != {budget}"
            )


def sweep(
    weights: enc.EncoderWeights,
    train_bank: EmbeddingBank,
    test_bank: EmbeddingBank,
    class_table: ClassTokenTable,
    specials: SpecialTokens,
    grid: list[tuple[int, int]],
    shots_list: list[int],
    seeds: list[int],
    base_config: TrainConfig,
    budget: int = 16,
    dataset_id: str = "synthetic",
) -> RunReport:
    """Train and evaluate every (grid cell, shots, seed) combination."""
    check_parity(grid, budget)
    report = RunReport(
        budget=budget, seeds=list(seeds), shots_list=list(shots_list), grid=list(grid)
    )
    width = weights.config.model_width
    for d_prompts, n_ctx in grid:
        for shots in shots_list:
            for seed in seeds:
                rng = SeededRng(seed)
                split = sample_few_shot(train_bank, shots, rng)
                ensemble = init_context(d_prompts, n_ctx, width, rng)
                config = replace(base_config, shots=shots, seed=seed)
                start = time.perf_counter()
                trained, history = train(
                    weights, ensemble, class_table, specials, split, train_bank, config
                )
                accuracy = evaluate(weights, trained, class_table, specials, test_bank)
                report.records.append(
                    RunRecord(
                        dataset_id=dataset_id,
                        d_prompts=d_prompts,
                        n_ctx=n_ctx,
                        shots=shots,
                        seed=seed,
                        accuracy=accuracy,
                        final_loss=history[-1],
                        epochs=config.epochs,
                        wall_time=time.perf_counter() - start,
                    )
                )
    return report
