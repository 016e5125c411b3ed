"""Command-line surface: synthetic data generation, training, evaluation,
(D, N) sweeps with report files and figures, gradient checking, and prototype
export.

Exit codes: 0 success, 1 user error (bad flags, bad paths, invalid
configuration), 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data_io, encoder, gradcheck, reporting, trainer
from .numerics import SeededRng
from .prompts import init_context, precompute_prototypes

EXIT_OK = 0
EXIT_USER = 1
EXIT_INTERNAL = 2


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits 2; flag errors are user errors
        self.print_usage(sys.stderr)
        raise UserError(message)


def _parse_dim_config(text: str) -> encoder.EncoderConfig:
    """'layers,heads,width,dim,vocab,max_positions' -> EncoderConfig."""
    parts = text.split(",")
    if len(parts) != 6:
        raise UserError(
            f"--dim-config wants 6 comma-separated integers "
            f"(layers,heads,width,dim,vocab,max_positions), got {text!r}"
        )
    try:
        layers, heads, width, dim, vocab, maxpos = (int(p) for p in parts)
        return encoder.EncoderConfig(
            layers=layers, heads=heads, model_width=width, output_dim=dim,
            max_positions=maxpos, vocab_size=vocab,
        )
    except ValueError as exc:
        raise UserError(f"bad --dim-config {text!r}: {exc}") from exc


def _parse_grid(text: str) -> list[tuple[int, int]]:
    """'16x1,8x2,4x4' -> [(16,1),(8,2),(4,4)]."""
    grid = []
    for token in text.split(","):
        try:
            d_str, n_str = token.split("x")
            grid.append((int(d_str), int(n_str)))
        except ValueError as exc:
            raise UserError(f"malformed grid token {token!r}") from exc
    return grid


def _parse_int_list(text: str, flag: str) -> list[int]:
    try:
        return [int(p) for p in text.split(",")]
    except ValueError as exc:
        raise UserError(f"bad {flag} value {text!r}") from exc


def _read_file(path: str) -> bytes:
    p = Path(path)
    if not p.is_file():
        raise UserError(f"no such file: {path}")
    return p.read_bytes()


def _load_weights(path: str):
    data = _read_file(path)
    weights, metadata = data_io.read_weights(data)
    specials = data_io.special_tokens_from_metadata(metadata)
    return weights, metadata, specials


def _write_logged(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    print(f"wrote {path} sha256={data_io.file_sha256(data)}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_synth(args) -> int:
    try:
        spec = data_io.SynthSpec(
            classes=args.classes,
            encoder=_parse_dim_config(args.dim_config),
            noise_std=args.noise,
            train_per_class=args.train_per_class,
            test_per_class=args.test_per_class,
            seed=args.seed,
        )
    except ValueError as exc:
        raise UserError(str(exc)) from exc
    result = data_io.generate_synthetic(spec)
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UserError(f"cannot create output directory {out}: {exc}") from exc

    _write_logged(out / "train.bank", data_io.write_bank(result.train_bank))
    _write_logged(out / "test.bank", data_io.write_bank(result.test_bank))
    _write_logged(
        out / "weights.eco",
        data_io.write_weights(
            result.weights,
            {"sot_id": result.specials.sot_id, "eot_id": result.specials.eot_id},
        ),
    )
    teachers = json.dumps(
        {"teacher_sequences": result.teacher_sequences}, sort_keys=True
    ).encode()
    _write_logged(out / "teachers.json", teachers)
    return EXIT_OK


def cmd_train(args) -> int:
    weights, _, specials = _load_weights(args.weights)
    bank = data_io.read_bank(_read_file(args.train_bank))
    if args.budget is not None and args.d_prompts * args.n_ctx != args.budget:
        raise UserError(
            f"parameter parity violated: {args.d_prompts}*{args.n_ctx} != {args.budget}"
        )
    rng = SeededRng(args.seed)
    split = trainer.sample_few_shot(bank, args.shots, rng)
    ensemble = init_context(args.d_prompts, args.n_ctx, weights.config.model_width, rng)
    config = trainer.TrainConfig(
        shots=args.shots, epochs=args.epochs, lr=args.lr, seed=args.seed
    )
    trained, history = trainer.train(
        weights, ensemble, bank.class_table, specials, split, bank, config
    )
    out = Path(args.out)
    _write_logged(out, data_io.save_checkpoint(trained, weights.content_hash()))
    log_path = out.with_suffix(out.suffix + ".losses.csv")
    log_path.write_text(
        "epoch,mean_loss\n"
        + "".join(f"{e},{loss:.8f}\n" for e, loss in enumerate(history))
    )
    print(f"wrote {log_path}")
    print(f"final epoch mean loss: {history[-1]:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if (args.checkpoint is None) == (args.prototypes is None):
        raise UserError("exactly one of --checkpoint or --prototypes is required")
    bank = data_io.read_bank(_read_file(args.test_bank))
    if args.prototypes is not None:
        protos = data_io.load_prototypes(_read_file(args.prototypes))
    else:
        if args.weights is None:
            raise UserError("--weights is required with --checkpoint")
        weights, _, specials = _load_weights(args.weights)
        ensemble, _, warning = data_io.load_checkpoint(
            _read_file(args.checkpoint), weights.content_hash()
        )
        if warning:
            print(f"warning: {warning}", file=sys.stderr)
        protos = precompute_prototypes(weights, ensemble, bank.class_table, specials)
    from .classifier import predict_batch

    preds = predict_batch(protos, bank.vectors)
    accuracy = float(np.mean(preds == bank.labels))
    print(f"top-1 accuracy: {100.0 * accuracy:.2f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    weights, _, specials = _load_weights(args.weights)
    train_bank = data_io.read_bank(_read_file(args.train_bank))
    test_bank = data_io.read_bank(_read_file(args.test_bank))
    grid = _parse_grid(args.grid)
    shots_list = _parse_int_list(args.shots, "--shots")
    seeds = _parse_int_list(args.seeds, "--seeds")
    try:
        trainer.check_parity(grid, args.budget)
    except trainer.ParityError as exc:
        raise UserError(str(exc)) from exc
    base = trainer.TrainConfig(epochs=args.epochs, lr=args.lr)
    report = trainer.sweep(
        weights, train_bank, test_bank, train_bank.class_table, specials,
        grid, shots_list, seeds, base, budget=args.budget,
    )
    paths = reporting.write_report_files(report, args.out_report)
    for p in paths:
        print(f"wrote {p}")
    print(reporting.format_table(report))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    config = _parse_dim_config(args.dim_config)
    seeds = _parse_int_list(args.seed, "--seed")
    worst = 0.0
    for seed in seeds:
        errors = gradcheck.run_all(seed, config)
        for path, err in errors.items():
            print(f"seed {seed} {path}: max relative error {err:.3e}")
        worst = max(worst, max(errors.values()))
    print(f"max relative error: {worst:.3e} (tolerance {args.tolerance:g})")
    if worst <= args.tolerance:
        print("PASS")
        return EXIT_OK
    print("FAIL")
    return EXIT_USER


def cmd_export_prototypes(args) -> int:
    weights, _, specials = _load_weights(args.weights)
    ensemble, _, warning = data_io.load_checkpoint(
        _read_file(args.checkpoint), weights.content_hash()
    )
    if warning:
        print(f"warning: {warning}", file=sys.stderr)
    if args.classes_bank is not None:
        table = data_io.read_bank(_read_file(args.classes_bank)).class_table
    else:
        raise UserError("--classes-bank is required to define the class token table")
    protos = precompute_prototypes(weights, ensemble, table, specials)
    _write_logged(Path(args.out), data_io.save_prototypes(protos))
    print(f"encoder fingerprint: {protos.encoder_hash}")
    print(f"ensemble fingerprint: {protos.ensemble_hash}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="eco", description=__doc__)
    parser.add_argument(
        "--threads",
        type=int,
        default=int(os.environ.get("ECO_THREADS", "1")),
        help="worker count; 1 (the default) forces bit-deterministic output",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a synthetic teacher-prompt task")
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--dim-config", default="2,4,64,32,128,32",
                   help="layers,heads,width,dim,vocab,max_positions")
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--train-per-class", type=int, default=100)
    p.add_argument("--test-per-class", type=int, default=100)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="train a prompt ensemble on a few-shot split")
    p.add_argument("--weights", required=True)
    p.add_argument("--train-bank", required=True)
    p.add_argument("--shots", type=int, default=16)
    p.add_argument("--d-prompts", type=int, default=4)
    p.add_argument("--n-ctx", type=int, default=4)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=0.002)
    p.add_argument("--budget", type=int, default=None,
                   help="if given, require d_prompts * n_ctx == budget")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or prototype bank")
    p.add_argument("--weights")
    p.add_argument("--checkpoint")
    p.add_argument("--prototypes")
    p.add_argument("--test-bank", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="run the (D, N) grid over shots and seeds")
    p.add_argument("--weights", required=True)
    p.add_argument("--train-bank", required=True)
    p.add_argument("--test-bank", required=True)
    p.add_argument("--grid", default="16x1,8x2,4x4,2x8,1x16")
    p.add_argument("--shots", default="1,2,4,8,16")
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--budget", type=int, default=16)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=0.002)
    p.add_argument("--out-report", required=True, help="output directory for report files")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--dim-config", default="2,4,64,32,128,32")
    p.add_argument("--seed", default="1", help="comma-separated seed list")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-prototypes", help="freeze class features to a file")
    p.add_argument("--weights", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--classes-bank", required=True,
                   help="bank file providing the class token table")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_prototypes)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    try:
        return args.func(args)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
