"""
`ean` command-line entry point.

    ean gen-data   --config exp.json --seed 0 --out data/
    ean train      --data data/ --out runs/s0 --seed 0 [--resume ckpt]
    ean eval       --data data/ --checkpoint runs/s0/final.ckpt --out runs/s0
    ean profile    --out runs/profile [--trace-out runs/profile/trace.ckpt]
    ean grad-check
    ean ablate     --data data/ --out runs/ablate --seed 0

Exit status: 0 on success, 1 when a gradient check fails, 2 on any
configuration, data, or I/O error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import TYPE_CHECKING

import structlog

from eanmap.config import get_settings
from eanmap.errors import EanError, GradCheckError
from eanmap.geometry import MapClass
from eanmap.logs import configure_logging

if TYPE_CHECKING:
    from collections.abc import Callable, Sequence

    from eanmap.experiment import ExperimentConfig

log = structlog.get_logger()

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_ERROR = 2

EVAL_REPORT = "eval_report.json"
SCENE_CSV = "scene_chamfer.csv"
PROFILE_CSV = "profile.csv"


def _seed(raw: str) -> int:
    value = int(raw)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be a u64, got {raw}")
    return value


def _fmt(value: float | None) -> str:
    return "-" if value is None else f"{value:.4f}"


def _config(args: argparse.Namespace) -> ExperimentConfig:
    from eanmap.experiment import load_config

    return load_config(args.config, args.overrides)


def cmd_gen_data(args: argparse.Namespace, threads: int) -> int:
    from eanmap.data.storage import save_split
    from eanmap.data.synthetic import generate_split

    cfg = _config(args)
    for split, count in (("train", cfg.train.train_scenes), ("val", cfg.train.val_scenes)):
        scenes = generate_split(cfg.scene, count, args.seed, split, threads)
        save_split(scenes, args.out, split, cfg.scene, args.seed)
    print(f"wrote {cfg.train.train_scenes} train / {cfg.train.val_scenes} val scenes to {args.out}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace, threads: int) -> int:
    from eanmap.data.storage import load_split
    from eanmap.training.trainer import train

    cfg = _config(args)
    scenes = load_split(args.data, "train")
    result = train(cfg, scenes, args.out, args.seed, args.resume)
    last = result.epoch_losses[-1] if result.epoch_losses else float("nan")
    print(f"final checkpoint {result.checkpoint} (last epoch loss {last:.6f})")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, threads: int) -> int:
    from eanmap.data.storage import load_split
    from eanmap.evaluation import evaluate_split, write_scene_chamfer_csv
    from eanmap.training.trainer import load_model

    cfg = _config(args)
    model = load_model(args.checkpoint, cfg)
    scenes = load_split(args.data, args.split)
    report, preds, gts = evaluate_split(model, scenes, cfg.eval, threads)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / EVAL_REPORT).write_text(report.model_dump_json(indent=2), encoding="utf-8")
    write_scene_chamfer_csv(out / SCENE_CSV, preds, gts)
    for ap in report.classes:
        cells = "  ".join(f"{t}: {_fmt(v)}" for t, v in ap.ap_by_threshold.items())
        print(f"{MapClass(ap.class_id).name.lower():<14} {cells}")
    print(f"mAP {report.mAP:.4f}")
    return EXIT_OK


def cmd_profile(args: argparse.Namespace, threads: int) -> int:
    from eanmap.profiler.complexity import sweep, trace_glsa, write_sweep_csv

    rows = sweep(args.groups, args.points, args.dims)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(out / PROFILE_CSV, rows)
    if args.trace_out is not None:
        M, N, d = args.groups[0], args.points[0], args.dims[0]
        trace_glsa(M, N, d, seed=args.seed).save(args.trace_out)
        print(f"wrote GL-SA attention trace (M={M} N={N} d={d}) to {args.trace_out}")
    for row in rows:
        print(
            f"M={row.groups:<4} N={row.points:<3} d={row.dim:<4} "
            f"measured={row.measured:.5f} predicted={row.predicted:.5f}"
        )
    return EXIT_OK


def cmd_grad_check(args: argparse.Namespace, threads: int) -> int:
    from eanmap.autodiff.gradcheck import get_registry
    from eanmap.training.checks import register_model_checks

    registry = get_registry()
    register_model_checks(registry)
    names = args.only or None
    if names:
        unknown = [n for n in names if registry.get(n) is None]
        if unknown:
            raise EanError(f"unknown grad-check cases: {unknown}")
    report = registry.run(args.seed, names, args.tolerance, threads)
    for result in report.results:
        status = "ok" if result.passed else "FAIL"
        print(f"{result.name:<18} {result.max_rel_error:.3e}  {status}")
    if not report.passed:
        raise GradCheckError(f"gradient checks failed: {[r.name for r in report.failures]}")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace, threads: int) -> int:
    from eanmap.data.storage import load_split
    from eanmap.training.ablation import AblationRunner, RunStatus

    cfg = _config(args)
    runner = AblationRunner(cfg, args.out, args.seed, threads)
    run = runner.run(load_split(args.data, "train"), load_split(args.data, "val"), args.rows)
    for row in run.rows:
        score = "-" if row.mAP is None else f"{row.mAP:.4f}"
        print(f"({row.name}) {row.label:<26} {row.status.value:<8} mAP {score}")
    return EXIT_OK if run.status == RunStatus.SUCCESS else EXIT_ERROR


COMMANDS: dict[str, Callable[[argparse.Namespace, int], int]] = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "profile": cmd_profile,
    "grad-check": cmd_grad_check,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="Experiment JSON file")
    common.add_argument("--seed", type=_seed, default=0, help="Seed for every random stream")
    common.add_argument("--out", type=Path, default=Path("out"), help="Output directory")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Config override, e.g. decoder.layers=3 (repeatable)",
    )

    parser = argparse.ArgumentParser(prog="ean", description="Anchor-neighborhood map detection head")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="Generate train/val splits")

    p = sub.add_parser("train", parents=[common], help="Train a decoder")
    p.add_argument("--data", type=Path, required=True, help="Dataset directory")
    p.add_argument("--resume", type=Path, default=None, help="Checkpoint to resume from")

    p = sub.add_parser("eval", parents=[common], help="Evaluate a checkpoint")
    p.add_argument("--data", type=Path, required=True, help="Dataset directory")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", default="val")

    p = sub.add_parser("profile", parents=[common], help="GL-SA vs vanilla cost sweep")
    p.add_argument("--groups", type=int, nargs="+", default=[25, 50, 100])
    p.add_argument("--points", type=int, nargs="+", default=[10, 20])
    p.add_argument("--dims", type=int, nargs="+", default=[64, 256])
    p.add_argument(
        "--trace-out",
        type=Path,
        default=None,
        help="Write the attention matrices of one GL-SA pass at the first grid point",
    )

    p = sub.add_parser("grad-check", parents=[common], help="Finite-difference gradient checks")
    p.add_argument("--only", nargs="+", default=None, help="Case names to run")
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = sub.add_parser("ablate", parents=[common], help="Train and evaluate the ablation rows")
    p.add_argument("--data", type=Path, required=True, help="Dataset directory")
    p.add_argument("--rows", nargs="+", default=None, choices=list("abcdefgh"))

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    settings = get_settings()
    configure_logging(settings)
    structlog.contextvars.bind_contextvars(command=args.command, seed=args.seed)
    try:
        return COMMANDS[args.command](args, max(1, settings.threads))
    except GradCheckError as e:
        log.warning("grad_check_rejected", error=str(e))
        return EXIT_CHECK_FAILED
    except (EanError, OSError) as e:
        log.exception("command_failed", error=str(e))
        return EXIT_ERROR
    finally:
        structlog.contextvars.clear_contextvars()


if __name__ == "__main__":
    sys.exit(main())
