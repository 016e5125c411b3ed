"""Batch export entry point.

clip-export --model DIR [--out-weights F] [--dataset DIR --classes-file F
--out-bank F]. Exit codes: 0 success, 1 user error, 2 internal error.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from pathlib import Path

from .export import ArchitectureError, ExportJob, export_embeddings, export_text_tower


def _write(path: str, data: bytes) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(data)
    print(f"wrote {p} sha256={hashlib.sha256(data).hexdigest()}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clip-export", description=__doc__)
    parser.add_argument("--model", required=True, help="model checkpoint directory")
    parser.add_argument("--out-weights", help="text-tower manifest output path")
    parser.add_argument("--dataset", help="image root with one folder per class")
    parser.add_argument("--classes-file", help="one class name per line")
    parser.add_argument("--out-bank", help="embedding bank output path")
    return parser


def run(args) -> int:
    if args.out_weights is None and args.out_bank is None:
        print("error: nothing to do; pass --out-weights and/or --out-bank", file=sys.stderr)
        return 1
    if args.out_bank is not None and (args.dataset is None or args.classes_file is None):
        print("error: --out-bank needs --dataset and --classes-file", file=sys.stderr)
        return 1
    if not Path(args.model).is_dir():
        print(f"error: no model directory {args.model}", file=sys.stderr)
        return 1

    class_names: list[str] = []
    if args.classes_file is not None:
        path = Path(args.classes_file)
        if not path.is_file():
            print(f"error: no classes file {path}", file=sys.stderr)
            return 1
        class_names = [line.strip() for line in path.read_text().splitlines() if line.strip()]

    job = ExportJob(model_dir=args.model, dataset_dir=args.dataset, class_names=class_names)
    if args.out_weights is not None:
        _write(args.out_weights, export_text_tower(job))
    if args.out_bank is not None:
        bank, skipped = export_embeddings(job)
        _write(args.out_bank, bank)
        if skipped:
            print(f"skipped {skipped} unreadable image(s)", file=sys.stderr)
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        return run(args)
    except (ArchitectureError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
