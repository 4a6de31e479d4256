"""Directory-level operations shared by the command line and the MCP server."""

import logging
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from stream_tracker.encoder import min_frame_size
from stream_tracker.formats import read_flo, read_pgm, write_flo, write_pgm
from stream_tracker.metrics import FlowErrorAccumulator, dense_to_queries, evaluate_sequence, tap_metrics
from stream_tracker.models import ConfigError, EvaluationReport, SceneConfig, TapMetrics
from stream_tracker.synth import FLOW_DIR, VIS_DIR, SequenceRecord, generate_corpus, load_frames, load_sequence, save_sequence, sequence_dirs
from stream_tracker.tensor import ContractError, ShapeError
from stream_tracker.trainer import load_checkpoint, tracker_from_checkpoint

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def generate_sequences(
    out_dir: PathLike,
    num: int,
    scene: SceneConfig,
    seed: int,
    workers: int = 1,
) -> list[tuple[Path, int]]:
    """Write `num` sequences to out_dir/seq_XXXXX; returns (directory, seed) pairs."""
    if num < 1:
        raise ConfigError(f"num must be >= 1, got {num}")
    out_dir = Path(out_dir)
    written = []
    for i, record in enumerate(generate_corpus(scene, num, seed, workers)):
        directory = save_sequence(record, out_dir / f"seq_{i:05d}")
        written.append((directory, record.config.seed))
    return written


def predicted_vis_to_pgm(vis_prob: np.ndarray) -> np.ndarray:
    return np.round(np.clip(vis_prob, 0.0, 1.0) * 255).astype(np.uint8)


def track_directory(
    checkpoint_path: PathLike,
    sequence_dir: PathLike,
    out_dir: PathLike,
    iters: Optional[int] = None,
    on_frame: Optional[Callable[[int, Path], None]] = None,
) -> list[Path]:
    """Stream a sequence through a trained tracker, writing flow/vis files as each frame completes."""
    frames = load_frames(sequence_dir)
    if not frames:
        raise ContractError(f"{sequence_dir}: no frames found")
    sizes = {f.shape for f in frames}
    if len(sizes) != 1:
        raise ConfigError(f"{sequence_dir}: frames have differing geometry {sorted(sizes)}")
    checkpoint = load_checkpoint(checkpoint_path)
    _, h, w = frames[0].shape
    levels = checkpoint.config.model.corr_levels
    smallest = min_frame_size(levels)
    if min(h, w) < smallest:
        raise ConfigError(
            f"{sequence_dir}: frames are {h}x{w} but the checkpoint's {levels}-level pyramid needs at least {smallest}x{smallest}"
        )
    tracker = tracker_from_checkpoint(checkpoint)
    iters = checkpoint.config.model.eval_iters if iters is None else iters

    out_dir = Path(out_dir)
    (out_dir / FLOW_DIR).mkdir(parents=True, exist_ok=True)
    (out_dir / VIS_DIR).mkdir(parents=True, exist_ok=True)
    written = []
    for t, output in enumerate(tracker.stream(frames, iters)):
        flow_path = out_dir / FLOW_DIR / f"{t:05d}.flo"
        write_flo(flow_path, output.flow_array())
        write_pgm(out_dir / VIS_DIR / f"{t:05d}.pgm", predicted_vis_to_pgm(output.vis_prob()))
        written.append(flow_path)
        logger.debug("frame %d -> %s", t, flow_path)
        if on_frame is not None:
            on_frame(t, flow_path)
    logger.info("tracked %d frames from %s into %s", len(frames), sequence_dir, out_dir)
    return written


def load_predictions(pred_dir: PathLike) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Predicted flows and visibility probabilities (pgm / 255)."""
    pred_dir = Path(pred_dir)
    flows = [read_flo(p) for p in sorted((pred_dir / FLOW_DIR).glob("*.flo"))]
    vis = [read_pgm(p).astype(np.float64) / 255.0 for p in sorted((pred_dir / VIS_DIR).glob("*.pgm"))]
    if len(flows) != len(vis):
        raise ShapeError(f"{pred_dir}: {len(flows)} flow files vs {len(vis)} visibility files")
    return flows, vis


def read_queries(path: PathLike) -> np.ndarray:
    """Whitespace- or comma-separated `x y` rows; '#' starts a comment."""
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].replace(",", " ").strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ConfigError(f"{path}: expected 'x y' per line, got {line!r}")
        rows.append([float(parts[0]), float(parts[1])])
    if not rows:
        raise ConfigError(f"{path}: no query points")
    return np.asarray(rows, dtype=np.float64)


def _pair_directories(pred_root: Path, gt_root: Path) -> list[tuple[str, Path, Path]]:
    gt_dirs = sequence_dirs(gt_root)
    if not gt_dirs:
        raise ConfigError(f"{gt_root}: no sequences found")
    if len(gt_dirs) == 1 and gt_dirs[0] == gt_root:
        return [(gt_root.name, pred_root, gt_root)]
    return [(d.name, pred_root / d.name, d) for d in gt_dirs]


def _sequence_tap(flows: Sequence[np.ndarray], vis: Sequence[np.ndarray], record: SequenceRecord, queries: np.ndarray):
    pred_tracks, pred_occ = dense_to_queries(flows, vis, queries)
    gt_tracks, gt_occ = dense_to_queries(record.gt_flow, [v.astype(np.float64) for v in record.gt_vis], queries)
    return pred_tracks, pred_occ, gt_tracks, gt_occ


def evaluate_directory(pred_root: PathLike, gt_root: PathLike, queries: Optional[np.ndarray] = None) -> EvaluationReport:
    """Flow metrics per sequence and pixel-weighted over all; TAP metrics when query points are given."""
    pred_root, gt_root = Path(pred_root), Path(gt_root)
    totals = FlowErrorAccumulator()
    sequences = {}
    tap_parts: list[tuple[np.ndarray, ...]] = []
    for name, pred_dir, gt_dir in _pair_directories(pred_root, gt_root):
        record = load_sequence(gt_dir)
        flows, vis = load_predictions(pred_dir)
        if len(flows) != len(record):
            raise ShapeError(f"{name}: {len(flows)} predicted frames vs {len(record)} ground-truth frames")
        sequences[name] = evaluate_sequence(flows, vis, record)
        for t in range(1, len(record)):
            totals.add(flows[t], vis[t], record.gt_flow[t], record.gt_vis[t])
        if queries is not None:
            tap_parts.append(_sequence_tap(flows, vis, record, queries))
        logger.debug("evaluated %s: epe_all=%.4f", name, sequences[name].frames.epe_all)

    tap: Optional[TapMetrics] = None
    if tap_parts:
        lengths = {p[0].shape[1] for p in tap_parts}
        if len(lengths) != 1:
            raise ShapeError(f"tap metrics need equal-length sequences, got lengths {sorted(lengths)}")
        pred_tracks, pred_occ, gt_tracks, gt_occ = (np.concatenate(arrs, axis=0) for arrs in zip(*tap_parts))
        tap = tap_metrics(pred_tracks, pred_occ, gt_tracks, gt_occ)
    return EvaluationReport(sequences=sequences, aggregate=totals.result(), tap=tap)
