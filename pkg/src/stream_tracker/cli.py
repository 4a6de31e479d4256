"""Command-line entry point: gen, train, track, eval, viz.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

from threadpoolctl import threadpool_limits

from stream_tracker import __version__
from stream_tracker.models import (
    ConfigError,
    EvaluationReport,
    FlowMetrics,
    ModelConfig,
    RunManifest,
    SceneConfig,
    TrainConfig,
    build_config,
    default_log_level,
    default_threads,
)
from stream_tracker.pipeline import evaluate_directory, generate_sequences, read_queries, track_directory
from stream_tracker.synth import FLOW_DIR, VIS_DIR, load_corpus
from stream_tracker.tensor import StreamTrackerError
from stream_tracker.trainer import CHECKPOINT_FILE, LOSS_LOG, Trainer, apply_overrides, load_checkpoint
from stream_tracker.viz import render_directory

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
MANIFEST_FILE = "run_manifest.json"

_LOGGING_SETUP = False


class UsageError(ConfigError):
    """argparse rejected the command line."""

    pass


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message: str) -> None:
        raise UsageError(message)


def _setup_logging(level: Optional[str], log_file: Optional[str]) -> None:
    """Attach handlers to the package logger once per process."""
    global _LOGGING_SETUP
    if _LOGGING_SETUP:
        return
    _LOGGING_SETUP = True
    formatter = logging.Formatter(LOG_FORMAT)
    pkg_logger = logging.getLogger("stream_tracker")
    stream = logging.StreamHandler(sys.stderr)
    stream.setFormatter(formatter)
    pkg_logger.addHandler(stream)
    if log_file:
        handler = logging.FileHandler(log_file, mode="a", encoding="utf-8")
        handler.setFormatter(formatter)
        pkg_logger.addHandler(handler)
    name = (level or default_log_level()).upper()
    if not isinstance(logging.getLevelName(name), int):
        raise ConfigError(f"unknown log level {name!r}")
    pkg_logger.setLevel(name)


def _write_manifest(args: argparse.Namespace, out_dir: Path, config: dict[str, Any]) -> Path:
    manifest = RunManifest(
        command=args.command,
        config=config,
        seed=args.seed,
        threads=args.threads,
        version=__version__,
        output_dir=str(out_dir),
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / MANIFEST_FILE
    path.write_text(manifest.model_dump_json(indent=2))
    logger.debug("manifest -> %s", path)
    return path


def _format_value(value: Optional[float]) -> str:
    return "nan" if value is None else f"{value:.6f}"


def _metric_lines(metrics: FlowMetrics) -> list[str]:
    lines = [f"epe,all,{_format_value(metrics.epe_all)}"]
    if metrics.epe_vis is not None:
        lines.append(f"epe,vis,{_format_value(metrics.epe_vis)}")
    if metrics.epe_occ is not None:
        lines.append(f"epe,occ,{_format_value(metrics.epe_occ)}")
    lines.append(f"oa,all,{_format_value(metrics.oa)}")
    return lines


def format_report(report: EvaluationReport) -> list[str]:
    """Human-readable key=value lines per sequence, then `metric,split,value` lines for the aggregate."""
    lines = []
    for name, evaluation in report.sequences.items():
        m = evaluation.frames
        lines.append(
            f"{name} epe_all={_format_value(m.epe_all)} epe_vis={_format_value(m.epe_vis)} "
            f"epe_occ={_format_value(m.epe_occ)} oa={_format_value(m.oa)} "
            f"last_epe_all={_format_value(evaluation.last_frame.epe_all)}"
        )
    lines.extend(_metric_lines(report.aggregate))
    if report.tap is not None:
        lines.append(f"aj,tap,{_format_value(report.tap.aj)}")
        lines.append(f"delta_avg,tap,{_format_value(report.tap.delta_avg)}")
        lines.append(f"oa,tap,{_format_value(report.tap.oa)}")
    return lines


# -- commands -------------------------------------------------------------


def cmd_gen(args: argparse.Namespace) -> int:
    scene = build_config(
        SceneConfig,
        height=args.size,
        width=args.size,
        frames=args.frames,
        num_objects=(args.min_objects, args.max_objects),
        rotation=args.rotation,
        seed=args.seed,
    )
    out_dir = Path(args.out)
    _write_manifest(args, out_dir, {"scene": scene.model_dump(mode="json"), "num": args.num})
    for directory, seed in generate_sequences(out_dir, args.num, scene, args.seed, workers=args.threads):
        print(f"{directory.name} seed={seed}")
    return 0


def _train_config(args: argparse.Namespace) -> TrainConfig:
    model = ModelConfig.toy() if args.scale == "toy" else ModelConfig()
    if args.ablate:
        model = model.with_ablations([name.strip() for name in args.ablate.split(",") if name.strip()])
    base = build_config(TrainConfig, model=model.model_dump())
    overrides: dict[str, Any] = {"seed": args.seed}
    for flag, key in (
        ("iters", "train_iters"),
        ("mem_len", "memory_length"),
        ("splat_mode", "splat_mode"),
        ("video_length", "video_length"),
        ("lr", "learning_rate"),
        ("steps", "steps"),
        ("batch_size", "batch_size"),
        ("bptt", "bptt_window"),
        ("log_every", "log_every"),
        ("checkpoint_every", "checkpoint_every"),
    ):
        value = getattr(args, flag)
        if value is not None:
            overrides[key] = value
    return apply_overrides(base, overrides)


def cmd_train(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    resume = load_checkpoint(args.resume) if args.resume else None
    if resume is not None:
        config = apply_overrides(resume.config, {"steps": args.steps}) if args.steps else resume.config
    else:
        config = _train_config(args)
    corpus = load_corpus(args.data)
    if not corpus:
        raise ConfigError(f"{args.data}: no training sequences")
    _write_manifest(args, out_dir, config.model_dump(mode="json"))
    trainer = Trainer(config, corpus, out_dir)
    if resume is not None:
        trainer.resume(resume)
    count = trainer.tracker.num_parameters()
    logger.info("training %d parameters for %d steps", count, config.steps)
    print(f"parameters={count}")
    result = trainer.run()
    print(f"checkpoint={out_dir / CHECKPOINT_FILE} step={result.checkpoint.step}")
    print(f"loss_log={out_dir / LOSS_LOG}")
    return 0


def cmd_track(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    _write_manifest(args, out_dir, {"checkpoint": str(args.checkpoint), "sequence": str(args.data), "iters": args.iters})
    written = track_directory(args.checkpoint, args.data, out_dir, iters=args.iters)
    print(f"frames={len(written)} out={out_dir}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    queries = read_queries(args.queries) if args.queries else None
    report = evaluate_directory(args.pred, args.gt, queries)
    for line in format_report(report):
        print(line)
    return 0


def cmd_viz(args: argparse.Namespace) -> int:
    pred = Path(args.pred)
    out_dir = Path(args.out)
    _write_manifest(args, out_dir, {"pred": str(pred), "max_flow": args.max_flow})
    vis_dir = pred / VIS_DIR if (pred / VIS_DIR).is_dir() and not args.no_overlay else None
    rendered = render_directory(pred / FLOW_DIR, out_dir, vis_dir, args.max_flow)
    print(f"images={len(rendered)} out={out_dir}")
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "track": cmd_track, "eval": cmd_eval, "viz": cmd_viz}


def build_parser() -> argparse.ArgumentParser:
    common = _ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=default_threads())
    common.add_argument("--log-level", default=None)
    common.add_argument("--log-file", default=None)

    parser = _ArgumentParser(prog="stream-tracker", description="Streaming dense point tracking.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)

    gen = sub.add_parser("gen", parents=[common], help="Generate synthetic sequences with ground truth.")
    gen.add_argument("--out", required=True)
    gen.add_argument("--num", type=int, default=4)
    gen.add_argument("--size", type=int, default=64)
    gen.add_argument("--frames", type=int, default=24)
    gen.add_argument("--min-objects", type=int, default=2)
    gen.add_argument("--max-objects", type=int, default=4)
    gen.add_argument("--rotation", action="store_true")

    train = sub.add_parser("train", parents=[common], help="Train a tracker on a synthetic corpus.")
    train.add_argument("--data", required=True)
    train.add_argument("--out", required=True)
    train.add_argument("--scale", choices=("toy", "default"), default="toy")
    train.add_argument("--steps", type=int)
    train.add_argument("--iters-N", dest="iters", type=int)
    train.add_argument("--mem-len", type=int)
    train.add_argument("--video-length", type=int)
    train.add_argument("--lr", type=float)
    train.add_argument("--batch-size", type=int)
    train.add_argument("--bptt", type=int)
    train.add_argument("--splat-mode")
    train.add_argument("--ablate", default="", help="Comma-separated toggles to switch off.")
    train.add_argument("--log-every", type=int)
    train.add_argument("--checkpoint-every", type=int)
    train.add_argument("--resume", default=None)

    track = sub.add_parser("track", parents=[common], help="Stream a sequence through a checkpoint.")
    track.add_argument("--checkpoint", required=True)
    track.add_argument("--data", required=True)
    track.add_argument("--out", required=True)
    track.add_argument("--iters-N", dest="iters", type=int, default=16)

    ev = sub.add_parser("eval", parents=[common], help="Score predictions against ground truth.")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--gt", required=True)
    ev.add_argument("--queries", default=None, help="File of 'x y' first-frame query points.")

    viz = sub.add_parser("viz", parents=[common], help="Render predicted flow with the color wheel.")
    viz.add_argument("--pred", required=True)
    viz.add_argument("--out", required=True)
    viz.add_argument("--max-flow", type=float, default=None)
    viz.add_argument("--no-overlay", action="store_true")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.threads < 1:
            raise ConfigError(f"--threads must be >= 1, got {args.threads}")
        _setup_logging(args.log_level, args.log_file)
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (StreamTrackerError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
