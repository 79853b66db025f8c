"""Command line entry points.

Exit codes: 0 on success, 2 on configuration or artifact errors, 3 when a
simulation or optimization step produces non-finite numbers.
"""

from __future__ import annotations

import argparse
import sys
import traceback
from pathlib import Path

from .errors import (
    InvalidConfig,
    MissingArtifact,
    NumericalError,
    OutOfRangeParam,
    PushFuseError,
    SimulationDiverged,
)
from .pipeline import (
    export_cdf,
    load_config,
    run_ablation,
    run_evaluate,
    run_finetune,
    run_train_phase1,
    run_train_phase2,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pushfuse", description="Pushing policy training and evaluation")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("train-phase1", "train the conditioned policy on true parameters"),
        ("finetune", "continue training with noisy conditioning"),
        ("train-adapters", "fit the history-window ensemble on frozen-policy rollouts"),
        ("evaluate", "run the evaluation protocol for the configured method"),
        ("ablation", "sweep prior quality: fused vs direct conditioning"),
        ("export-cdf", "rebuild the error CDF csv from an evaluation metrics file"),
    ):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", required=True, help="path to the run config JSON")
        sp.add_argument("--seed", type=int, default=0, help="master seed")
        sp.add_argument("--out", required=True, help="run directory")
    return p


def _dump_diagnostics(out_dir: str, exc: BaseException) -> None:
    try:
        path = Path(out_dir)
        path.mkdir(parents=True, exist_ok=True)
        with open(path / "diagnostics.txt", "w") as f:
            f.write("".join(traceback.format_exception(type(exc), exc, exc.__traceback__)))
    except OSError:
        pass


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else 0

    try:
        cfg = load_config(args.config)
        if args.command == "train-phase1":
            path = run_train_phase1(cfg, args.out, args.seed)
            print(f"wrote {path}")
        elif args.command == "finetune":
            path = run_finetune(cfg, args.out, args.seed)
            print(f"wrote {path}")
        elif args.command == "train-adapters":
            path = run_train_phase2(cfg, args.out, args.seed)
            print(f"wrote {path}")
        elif args.command == "evaluate":
            for path in run_evaluate(cfg, args.out, args.seed):
                print(f"wrote {path}")
        elif args.command == "ablation":
            path = run_ablation(cfg, args.out, args.seed)
            print(f"wrote {path}")
        elif args.command == "export-cdf":
            metrics = Path(args.out) / "metrics" / f"evaluate_{cfg.method}_seed{args.seed}.json"
            out_csv = Path(args.out) / "metrics" / f"cdf_{cfg.method}_seed{args.seed}.csv"
            path = export_cdf(metrics, out_csv)
            print(f"wrote {path}")
        else:  # pragma: no cover - argparse enforces the choices
            parser.error(f"unknown command {args.command}")
    except (InvalidConfig, MissingArtifact, OutOfRangeParam) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SimulationDiverged, NumericalError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        _dump_diagnostics(args.out, exc)
        return EXIT_NUMERIC
    except PushFuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
