"""Command-line harness: `python -m app <subcommand> ...`.

Exit codes: 0 success, 1 configuration error, 2 runtime failure,
3 gradient-check failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Callable, Sequence

from pydantic import ValidationError

from app.adapters.artifact_store import ArtifactStore
from app.config import Settings, field_errors, get_settings, load_train_config
from app.errors import ConfigError, LabError
from app.models import TrainConfig
from app.orchestrator import (
    DEFAULT_LAMBDA_GRID,
    DEFAULT_M_GRID,
    DEFAULT_NOISE_KINDS,
    DEFAULT_NOISE_LOSSES,
    DEFAULT_NOISE_RATES,
    LabOrchestrator,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_GRADCHECK = 3


def _floats(text: str) -> list[float]:
    try:
        return [float(item) for item in text.split(",") if item.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _ints(text: str) -> list[int]:
    try:
        return [int(item) for item in text.split(",") if item.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _names(text: str) -> list[str]:
    return [item.strip() for item in text.split(",") if item.strip()]


def _add_overrides(parser: argparse.ArgumentParser, config_required: bool = True) -> None:
    parser.add_argument("--config", required=config_required, help="path to a TrainConfig JSON document")
    parser.add_argument("--lambda", dest="lambda_", type=float, help="override the center weight lambda")
    parser.add_argument("--m", type=float, help="override the additive cosine margin")
    parser.add_argument("--seed", type=int, help="override the run seed")
    parser.add_argument("--out-dir", help="runs directory (defaults to CCL_RUNS_DIR)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ccl-lab", description="Center contrastive loss experiments")
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", help="train one run and write its artifacts")
    _add_overrides(train)
    train.add_argument("--export-dataset", action="store_true", help="also write dataset.csv into the run directory")

    gradcheck = commands.add_parser("gradcheck", help="finite-difference check of every loss gradient")
    gradcheck.add_argument("--config", help="TrainConfig JSON whose seed is used when --seed is absent")
    gradcheck.add_argument("--seed", type=int)
    gradcheck.add_argument("--trials", type=int, default=20)
    gradcheck.add_argument("--out-dir", help="also write gradcheck.csv under this runs directory")

    sweep = commands.add_parser("sweep", help="Recall@1 over a lambda x m grid")
    _add_overrides(sweep)
    sweep.add_argument("--lambdas", type=_floats, default=DEFAULT_LAMBDA_GRID)
    sweep.add_argument("--ms", type=_floats, default=DEFAULT_M_GRID)

    noise = commands.add_parser("noise-study", help="Recall@1 under symmetric and long-tail label noise")
    _add_overrides(noise)
    noise.add_argument("--rates", type=_floats, default=DEFAULT_NOISE_RATES)
    noise.add_argument("--kinds", type=_names, default=DEFAULT_NOISE_KINDS)
    noise.add_argument("--losses", type=_names, default=DEFAULT_NOISE_LOSSES)

    mnist = commands.add_parser("mnist2d", help="2-D MNIST embedding with scatter export")
    _add_overrides(mnist, config_required=False)
    mnist.add_argument("--images", help="IDX image file (defaults to CCL_MNIST_DIR)")
    mnist.add_argument("--labels", help="IDX label file (defaults to CCL_MNIST_DIR)")
    mnist.add_argument("--loss", default="ccl", choices=["cross_entropy", "nsoftmax", "center_loss", "ccl"])
    mnist.add_argument("--epochs", type=int, default=10)
    mnist.add_argument("--max-records", type=int)

    dims = commands.add_parser("dim-sweep", help="Recall@1 per embedding dimension")
    _add_overrides(dims)
    dims.add_argument("--dims", type=_ints, default=[4, 8, 16, 32])

    stopgrad = commands.add_parser("stopgrad-study", help="Recall@1 per center update mode")
    _add_overrides(stopgrad)
    return parser


def _load_config(args: argparse.Namespace) -> TrainConfig:
    overrides = {"lambda": args.lambda_, "m": args.m, "seed": args.seed}
    return load_train_config(args.config, overrides)


def _orchestrator(args: argparse.Namespace, settings: Settings) -> LabOrchestrator:
    runs_dir = getattr(args, "out_dir", None) or settings.runs_path
    return LabOrchestrator(settings, ArtifactStore(runs_dir))


def _emit(payload) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def cmd_train(args: argparse.Namespace, settings: Settings) -> int:
    report = _orchestrator(args, settings).train(_load_config(args), export_dataset=args.export_dataset)
    _emit({"run_id": report.run_id, "final_recall": report.final_recall, "epochs": len(report.epochs)})
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace, settings: Settings) -> int:
    seed = args.seed
    if seed is None:
        seed = load_train_config(args.config).seed if args.config else 0
    result = _orchestrator(args, settings).gradcheck(seed=seed, trials=args.trials, export=args.out_dir is not None)
    print(f"{'loss':<22} {'trial':>5} {'group':<14} {'rel_error':>11} {'redraws':>7}  status")
    for row in result.rows:
        status = "ok" if row.passed else "FAIL"
        print(f"{row.loss:<22} {row.trial:>5} {row.group:<14} {row.relative_error:>11.3e} {row.redraws:>7}  {status}")
    return EXIT_OK if result.all_passed else EXIT_GRADCHECK


def cmd_sweep(args: argparse.Namespace, settings: Settings) -> int:
    cells = _orchestrator(args, settings).sweep(_load_config(args), args.lambdas, args.ms)
    _emit([cell.model_dump(by_alias=True) for cell in cells])
    return EXIT_OK


def cmd_noise_study(args: argparse.Namespace, settings: Settings) -> int:
    rows = _orchestrator(args, settings).noise_study(_load_config(args), args.rates, args.kinds, args.losses)
    _emit([row.model_dump() for row in rows])
    return EXIT_OK


def cmd_mnist2d(args: argparse.Namespace, settings: Settings) -> int:
    base = _load_config(args) if args.config else None
    seed = args.seed if args.seed is not None else (base.seed if base is not None else 0)
    report, svg_path = _orchestrator(args, settings).mnist2d(
        args.images,
        args.labels,
        args.loss,
        epochs=args.epochs,
        seed=seed,
        max_records=args.max_records,
        base=base,
    )
    geometry = report.geometry.model_dump() if report.geometry is not None else None
    _emit({"run_id": report.run_id, "scatter": str(svg_path), "geometry": geometry})
    return EXIT_OK


def cmd_dim_sweep(args: argparse.Namespace, settings: Settings) -> int:
    rows = _orchestrator(args, settings).dim_sweep(_load_config(args), args.dims)
    _emit([row.model_dump() for row in rows])
    return EXIT_OK


def cmd_stopgrad_study(args: argparse.Namespace, settings: Settings) -> int:
    rows = _orchestrator(args, settings).stopgrad_study(_load_config(args))
    _emit([row.model_dump() for row in rows])
    return EXIT_OK


COMMANDS: dict[str, Callable[[argparse.Namespace, Settings], int]] = {
    "train": cmd_train,
    "gradcheck": cmd_gradcheck,
    "sweep": cmd_sweep,
    "noise-study": cmd_noise_study,
    "mnist2d": cmd_mnist2d,
    "dim-sweep": cmd_dim_sweep,
    "stopgrad-study": cmd_stopgrad_study,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    settings = get_settings()
    logging.basicConfig(level=settings.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args, settings)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValidationError as exc:
        print("config error: " + "; ".join(field_errors(exc)), file=sys.stderr)
        return EXIT_CONFIG
    except (LabError, OSError) as exc:
        logger.error("%s failed: %s", args.command, exc)
        print(f"error: {exc.__class__.__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
