"""Acceptance gate: one test per release criterion, each printing a single
PASS/FAIL line with the measured value next to its frozen threshold."""

import sys
import time

import numpy as np
import pytest

from eco import data_io as io
from eco import encoder as enc
from eco import gradcheck
from eco import trainer as tr
from eco.numerics import SeededRng
from eco.prompts import (
    ClassTokenTable,
    PromptEnsemble,
    ensemble_class_features,
    init_context,
    precompute_prototypes,
)
from eco.classifier import predict_batch
from reference_coop import train_single_prompt


RESULTS: list[str] = []  # echoed by the terminal-summary hook in conftest.py


def _report(name: str, ok: bool, detail: str) -> None:
    status = "PASS" if ok else "FAIL"
    line = f"[{status}] {name}: {detail}"
    RESULTS.append(line)
    print(line, flush=True)


@pytest.fixture(scope="module")
def toy_task():
    """Teacher-prompt task at the standard desk scale (5 classes, sigma 0.3)."""
    return io.generate_synthetic(io.SynthSpec())


def test_gradient_correctness():
    start = time.perf_counter()
    worst = 0.0
    for seed in (1, 2, 3):
        errors = gradcheck.run_all(seed, gradcheck.TOY_CONFIG)
        worst = max(worst, max(errors.values()))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-4 and elapsed < 30.0
    _report(
        "gradient correctness",
        ok,
        f"max relative error {worst:.3e} (tol 1e-4), {elapsed:.1f}s (limit 30s)",
    )
    assert ok


def test_single_prompt_equivalence(toy_task):
    rng = SeededRng(1)
    split = tr.sample_few_shot(toy_task.train_bank, 16, rng)
    ensemble = init_context(1, 16, toy_task.weights.config.model_width, rng)
    config = tr.TrainConfig(shots=16, epochs=20, seed=1)
    trained, history = tr.train(
        toy_task.weights, ensemble, toy_task.class_table, toy_task.specials,
        split, toy_task.train_bank, config,
    )
    ref_ctx, ref_history = train_single_prompt(
        toy_task.weights, ensemble.context[0], toy_task.class_table,
        toy_task.specials, split, toy_task.train_bank, config,
    )
    histories_equal = history == ref_history
    contexts_equal = np.array_equal(trained.context[0], ref_ctx)
    checkpoints_equal = io.save_checkpoint(
        PromptEnsemble(context=ref_ctx[None]), toy_task.weights.content_hash()
    ) == io.save_checkpoint(trained, toy_task.weights.content_hash())
    ok = histories_equal and contexts_equal and checkpoints_equal
    _report(
        "single-prompt equivalence",
        ok,
        f"20-epoch loss history bit-identical={histories_equal}, "
        f"checkpoint bit-identical={checkpoints_equal}",
    )
    assert ok


def test_precompute_equivalence(toy_task):
    rng = SeededRng(2)
    ensemble = init_context(4, 4, toy_task.weights.config.model_width, rng)
    stored = io.load_prototypes(
        io.save_prototypes(
            precompute_prototypes(
                toy_task.weights, ensemble, toy_task.class_table, toy_task.specials
            )
        )
    )
    features, _ = ensemble_class_features(
        toy_task.weights, ensemble, toy_task.class_table, toy_task.specials
    )
    queries = rng.gaussian((100, toy_task.weights.config.output_dim))

    def logits(protos):
        u = queries / np.linalg.norm(queries, axis=1, keepdims=True)
        t = protos / np.linalg.norm(protos, axis=1, keepdims=True)
        return u @ t.T

    gap = float(np.max(np.abs(logits(stored.prototypes) - logits(features))))
    same_preds = np.array_equal(
        predict_batch(stored, queries), predict_batch(features, queries)
    )
    ok = gap <= 1e-6 and same_preds
    _report(
        "precompute equivalence",
        ok,
        f"max logit gap {gap:.3e} (tol 1e-6) over 100 queries, "
        f"identical predictions={same_preds}",
    )
    assert ok


def test_prompt_permutation_invariance(toy_task):
    rng = SeededRng(3)
    ensemble = init_context(4, 4, toy_task.weights.config.model_width, rng)
    shuffled = PromptEnsemble(context=ensemble.context[[2, 0, 3, 1]].copy())
    base, _ = ensemble_class_features(
        toy_task.weights, ensemble, toy_task.class_table, toy_task.specials
    )
    permuted, _ = ensemble_class_features(
        toy_task.weights, shuffled, toy_task.class_table, toy_task.specials
    )
    gap = float(np.max(np.abs(base - permuted)))
    queries = rng.gaussian((1000, toy_task.weights.config.output_dim))
    same_preds = np.array_equal(
        predict_batch(base, queries), predict_batch(permuted, queries)
    )
    ok = gap <= 1e-6 and same_preds
    _report(
        "prompt-permutation invariance",
        ok,
        f"max feature gap {gap:.3e} (tol 1e-6), identical predictions on "
        f"1000 queries={same_preds}",
    )
    assert ok


def test_frozen_encoder(toy_task):
    hash_before = toy_task.weights.content_hash()
    rng = SeededRng(4)
    split = tr.sample_few_shot(toy_task.train_bank, 4, rng)
    ensemble = init_context(2, 8, toy_task.weights.config.model_width, rng)
    tr.train(
        toy_task.weights, ensemble, toy_task.class_table, toy_task.specials,
        split, toy_task.train_bank, tr.TrainConfig(shots=4, epochs=5, seed=4),
    )
    ok = toy_task.weights.content_hash() == hash_before
    _report("frozen encoder", ok, f"weight hash unchanged by training={ok}")
    assert ok


def test_parameter_parity():
    grid = [(16, 1), (8, 2), (4, 4), (2, 8), (1, 16)]
    try:
        tr.check_parity(grid, 16)
        accepts = True
    except tr.ParityError:
        accepts = False
    try:
        tr.check_parity([(3, 5)], 16)
        rejects = False
    except tr.ParityError:
        rejects = True
    ok = accepts and rejects
    _report(
        "parameter parity",
        ok,
        f"accepts all five budget-16 cells={accepts}, rejects (3,5)={rejects}",
    )
    assert ok


def test_end_to_end_learning(toy_task):
    start = time.perf_counter()
    accuracies = {}
    for shots in (16, 1):
        rng = SeededRng(1)
        split = tr.sample_few_shot(toy_task.train_bank, shots, rng)
        ensemble = init_context(4, 4, toy_task.weights.config.model_width, rng)
        config = tr.TrainConfig(shots=shots, epochs=50, seed=1)
        trained, _ = tr.train(
            toy_task.weights, ensemble, toy_task.class_table, toy_task.specials,
            split, toy_task.train_bank, config,
        )
        accuracies[shots] = tr.evaluate(
            toy_task.weights, trained, toy_task.class_table, toy_task.specials,
            toy_task.test_bank,
        )
    elapsed = time.perf_counter() - start
    chance = 1.0 / toy_task.train_bank.num_classes
    ok = (
        accuracies[16] >= 0.95
        and accuracies[1] >= chance + 0.20
        and elapsed < 120.0
    )
    _report(
        "end-to-end learning",
        ok,
        f"16-shot {100 * accuracies[16]:.1f}% (>=95%), "
        f"1-shot {100 * accuracies[1]:.1f}% (>={100 * (chance + 0.2):.0f}%), "
        f"{elapsed:.1f}s (limit 120s)",
    )
    assert ok


def test_format_round_trips():
    rng = SeededRng(99)
    survived = 0
    total = 100
    for case in range(total):
        kind = case % 3
        if kind == 0:
            k = 2 + int(rng.integers(0, 4))
            table = ClassTokenTable(
                names=[f"c{i}" for i in range(k)],
                token_ids=[[1 + i, 7] [: 1 + int(rng.integers(0, 2))] for i in range(k)],
            )
            labels = np.asarray(rng.integers(0, k, size=1 + int(rng.integers(0, 20))))
            vectors = rng.gaussian((len(labels), 1 + int(rng.integers(0, 8)))).astype(np.float32)
            data = io.write_bank(
                io.EmbeddingBank(class_table=table, labels=labels, vectors=vectors)
            )
            survived += io.write_bank(io.read_bank(data)) == data
        elif kind == 1:
            config = enc.EncoderConfig(
                layers=1 + int(rng.integers(0, 2)),
                heads=2,
                model_width=8,
                output_dim=4,
                max_positions=8,
                vocab_size=16,
            )
            weights = enc.init_random(config, SeededRng(case))
            data = io.write_weights(weights, {"sot_id": 14, "eot_id": 15})
            loaded, _ = io.read_weights(data)
            survived += io.write_weights(loaded, {"sot_id": 14, "eot_id": 15}) == data
        else:
            shape = (1 + int(rng.integers(0, 4)), 1 + int(rng.integers(0, 8)), 8)
            ensemble = PromptEnsemble(context=rng.gaussian(shape).astype(np.float32))
            data = io.save_checkpoint(ensemble, f"hash{case}")
            loaded, _, _ = io.load_checkpoint(data, f"hash{case}")
            survived += io.save_checkpoint(loaded, f"hash{case}") == data
    ok = survived == total
    _report("format round-trips", ok, f"{survived}/{total} instances bit-exact")
    assert ok
