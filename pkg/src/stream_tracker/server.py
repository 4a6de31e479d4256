"""MCP server: generate_sequences, track_sequence_dir, evaluate_predictions, render_flow."""

import logging
from pathlib import Path
from typing import Any, Optional

import numpy as np
from mcp.server.fastmcp import FastMCP
from pydantic import ValidationError

from stream_tracker.models import SceneConfig
from stream_tracker.pipeline import (
    evaluate_directory as do_evaluate_directory,
    generate_sequences as do_generate_sequences,
    track_directory as do_track_directory,
)
from stream_tracker.synth import FLOW_DIR, VIS_DIR
from stream_tracker.tensor import StreamTrackerError
from stream_tracker.viz import render_directory as do_render_directory

logger = logging.getLogger(__name__)

mcp = FastMCP(
    "Stream Tracker",
    json_response=True,
)


@mcp.tool()
def generate_sequences(
    out_dir: str,
    num: int = 4,
    scene: Optional[dict[str, Any]] = None,
    seed: int = 0,
) -> dict[str, Any]:
    """Render `num` synthetic sequences with exact flow and visibility ground truth into out_dir. `scene` holds SceneConfig fields (height, width, frames, num_objects, ...)."""
    try:
        config = SceneConfig.model_validate({**(scene or {}), "seed": seed})
    except ValidationError as e:
        raise ValueError(f"Invalid scene: {e}") from e
    try:
        written = do_generate_sequences(out_dir, num, config, seed)
        logger.info("generated %d sequences under %s", len(written), out_dir)
        return {"sequences": [{"path": str(path), "seed": s} for path, s in written]}
    except (StreamTrackerError, OSError) as e:
        raise ValueError(str(e)) from e


@mcp.tool()
def track_sequence_dir(
    checkpoint: str,
    sequence_dir: str,
    out_dir: str,
    iters: Optional[int] = None,
) -> dict[str, Any]:
    """Stream the frames of sequence_dir through a trained checkpoint; writes flow/%05d.flo and vis/%05d.pgm under out_dir."""
    if iters is not None and iters < 1:
        raise ValueError("iters must be >= 1 or omitted.")
    try:
        written = do_track_directory(checkpoint, sequence_dir, out_dir, iters=iters)
        return {"frames": len(written), "flow_files": [str(p) for p in written]}
    except (StreamTrackerError, OSError) as e:
        raise ValueError(str(e)) from e


@mcp.tool()
def evaluate_predictions(
    pred_dir: str,
    gt_dir: str,
    queries: Optional[list[list[float]]] = None,
) -> dict[str, Any]:
    """Score predicted flow/visibility against ground truth: EPE (all/vis/occ) and occlusion accuracy per sequence and overall; with `queries` ([[x, y], ...] on the first frame) also AJ and <delta_avg."""
    points = None
    if queries is not None:
        if not queries or any(len(q) != 2 for q in queries):
            raise ValueError("queries must be a non-empty list of [x, y] pairs or omitted.")
        points = [[float(x), float(y)] for x, y in queries]
    try:
        report = do_evaluate_directory(pred_dir, gt_dir, np.asarray(points) if points is not None else None)
        return report.model_dump()
    except (StreamTrackerError, OSError) as e:
        raise ValueError(str(e)) from e


@mcp.tool()
def render_flow(
    pred_dir: str,
    out_dir: str,
    max_flow: Optional[float] = None,
    overlay: bool = True,
) -> dict[str, Any]:
    """Render every flow file in pred_dir/flow with the optical-flow color wheel (PPM); occluded pixels get a striped overlay from pred_dir/vis."""
    if max_flow is not None and max_flow <= 0:
        raise ValueError("max_flow must be positive or omitted.")
    try:
        pred = Path(pred_dir)
        vis_dir = pred / VIS_DIR if overlay and (pred / VIS_DIR).is_dir() else None
        rendered = do_render_directory(pred / FLOW_DIR, out_dir, vis_dir, max_flow)
        return {"images": [str(p) for p in rendered]}
    except (StreamTrackerError, OSError) as e:
        raise ValueError(str(e)) from e


def main() -> None:
    """Run the MCP server (stdio by default)."""
    mcp.run()


if __name__ == "__main__":
    main()
