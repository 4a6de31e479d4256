"""Layered 2-D scenes with exact long-range flow and visibility.

Objects are textured rectangles and ellipses drawn back to front over a
static noise background. Each moves rigidly with constant velocity and
optional spin about its center, so the position of every first-frame pixel
at any later frame is known in closed form.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from stream_tracker.formats import read_flo, read_pgm, read_ppm, write_flo, write_pgm, write_ppm
from stream_tracker.functional import bilinear_lookup
from stream_tracker.models import ConfigError, SceneConfig, build_config

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

FRAMES_DIR = "frames"
FLOW_DIR = "flow"
VIS_DIR = "vis"
CONFIG_FILE = "config.json"


@dataclass
class SequenceRecord:
    frames: list[np.ndarray]
    gt_flow: list[np.ndarray]
    gt_vis: list[np.ndarray]
    config: SceneConfig

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def size(self) -> tuple[int, int]:
        return self.frames[0].shape[1], self.frames[0].shape[2]


@dataclass
class _Layer:
    kind: str
    center: np.ndarray
    half: np.ndarray
    velocity: np.ndarray
    angle0: float
    omega: float
    texture: np.ndarray

    def _pose(self, t: int) -> tuple[np.ndarray, float]:
        return self.center + t * self.velocity, self.angle0 + t * self.omega

    def to_local(self, x: np.ndarray, y: np.ndarray, t: int) -> tuple[np.ndarray, np.ndarray]:
        (cx, cy), angle = self._pose(t)
        c, s = np.cos(angle), np.sin(angle)
        dx, dy = x - cx, y - cy
        return c * dx + s * dy, -s * dx + c * dy

    def to_world(self, lx: np.ndarray, ly: np.ndarray, t: int) -> tuple[np.ndarray, np.ndarray]:
        (cx, cy), angle = self._pose(t)
        c, s = np.cos(angle), np.sin(angle)
        return cx + c * lx - s * ly, cy + s * lx + c * ly

    def contains(self, lx: np.ndarray, ly: np.ndarray) -> np.ndarray:
        hx, hy = self.half
        if self.kind == "rect":
            return (lx >= -hx) & (lx < hx) & (ly >= -hy) & (ly < hy)
        return (lx / hx) ** 2 + (ly / hy) ** 2 <= 1.0

    def shade(self, lx: np.ndarray, ly: np.ndarray) -> np.ndarray:
        _, th, tw = self.texture.shape
        u = np.clip(lx + self.half[0] + 0.5, 0, tw - 1)
        v = np.clip(ly + self.half[1] + 0.5, 0, th - 1)
        return bilinear_lookup(self.texture, u, v)


def smooth_noise(rng: np.random.Generator, shape: tuple[int, int, int]) -> np.ndarray:
    """Uniform noise passed once through a 3x3 box filter."""
    noise = rng.uniform(0.0, 1.0, size=shape)
    padded = np.pad(noise, ((0, 0), (1, 1), (1, 1)), mode="edge")
    _, h, w = shape
    return sum(padded[:, i : i + h, j : j + w] for i in range(3) for j in range(3)) / 9.0


def quantize(image: np.ndarray) -> np.ndarray:
    """Float image in [0, 1] -> H x W x 3 uint8."""
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def to_frame(rgb: np.ndarray) -> np.ndarray:
    """H x W x 3 uint8 -> 3 x H x W float32 in [0, 1]."""
    return rgb.transpose(2, 0, 1).astype(np.float32) / np.float32(255)


def _sample_layers(config: SceneConfig, rng: np.random.Generator) -> list[_Layer]:
    lo, hi = config.num_objects
    count = int(rng.integers(lo, hi + 1))
    layers = []
    for k in range(count):
        size = rng.uniform(*config.size_range, size=2)
        speed = rng.uniform(*config.velocity_range, size=2)
        sign = rng.choice([-1.0, 1.0], size=2)
        # draws stay in the stream so an override changes only the motion
        velocity = np.asarray(config.velocities[k], dtype=np.float64) if config.velocities else speed * sign
        omega = rng.uniform(-config.max_angular_velocity, config.max_angular_velocity) if config.rotation else 0.0
        angle0 = rng.uniform(0, 2 * np.pi) if config.rotation else 0.0
        half = size / 2
        tex_shape = (3, int(np.ceil(size[1])) + 2, int(np.ceil(size[0])) + 2)
        layers.append(
            _Layer(
                kind=str(rng.choice(["rect", "ellipse"])),
                center=np.array([rng.uniform(0, config.width), rng.uniform(0, config.height)]),
                half=half,
                velocity=velocity,
                angle0=float(angle0),
                omega=float(omega),
                texture=smooth_noise(rng, tex_shape),
            )
        )
    return layers


def _render(background: np.ndarray, layers: list[_Layer], t: int, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    image = background.copy()
    for layer in layers:
        lx, ly = layer.to_local(xs, ys, t)
        inside = layer.contains(lx, ly)
        if inside.any():
            image[:, inside] = layer.shade(lx[inside], ly[inside])
    return image


def generate(config: SceneConfig) -> SequenceRecord:
    """Render a sequence with ground truth; deterministic in `config.seed`."""
    h, w = config.height, config.width
    if config.size_range[1] > min(h, w):
        raise ConfigError(f"object size {config.size_range[1]} exceeds canvas {h}x{w}")
    rng = np.random.default_rng(config.seed)
    background = 0.25 + 0.5 * smooth_noise(rng, (3, h, w))
    layers = _sample_layers(config, rng)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)

    owner = np.full((h, w), -1, dtype=np.int64)
    local0 = []
    for k, layer in enumerate(layers):
        lx, ly = layer.to_local(xs, ys, 0)
        local0.append((lx, ly))
        owner[layer.contains(lx, ly)] = k

    frames, flows, visibility = [], [], []
    for t in range(config.frames):
        frames.append(to_frame(quantize(_render(background, layers, t, xs, ys))))
        px, py = xs.copy(), ys.copy()
        for k, layer in enumerate(layers):
            mask = owner == k
            if mask.any():
                lx, ly = local0[k]
                px[mask], py[mask] = layer.to_world(lx[mask], ly[mask], t)
        in_canvas = (px >= 0) & (px <= w - 1) & (py >= 0) & (py <= h - 1)
        occluded = np.zeros((h, w), dtype=bool)
        for j, layer in enumerate(layers):
            covered = layer.contains(*layer.to_local(px, py, t))
            occluded |= covered & (j > owner)
        flow = np.stack([px - xs, py - ys]).astype(np.float32)
        if t == 0:
            flow[:] = 0
        flows.append(flow)
        visibility.append(in_canvas & ~occluded)
    logger.debug("generated sequence seed=%d objects=%d frames=%d", config.seed, len(layers), config.frames)
    return SequenceRecord(frames=frames, gt_flow=flows, gt_vis=visibility, config=config)


def save_sequence(record: SequenceRecord, directory: PathLike) -> Path:
    directory = Path(directory)
    for sub in (FRAMES_DIR, FLOW_DIR, VIS_DIR):
        (directory / sub).mkdir(parents=True, exist_ok=True)
    for t, (frame, flow, vis) in enumerate(zip(record.frames, record.gt_flow, record.gt_vis)):
        write_ppm(directory / FRAMES_DIR / f"{t:05d}.ppm", quantize(frame))
        write_flo(directory / FLOW_DIR / f"{t:05d}.flo", flow)
        write_pgm(directory / VIS_DIR / f"{t:05d}.pgm", np.where(vis, 255, 0).astype(np.uint8))
    (directory / CONFIG_FILE).write_text(record.config.model_dump_json(indent=2))
    logger.info("wrote sequence (%d frames) to %s", len(record), directory)
    return directory


def load_frames(directory: PathLike) -> list[np.ndarray]:
    paths = sorted((Path(directory) / FRAMES_DIR).glob("*.ppm"))
    return [to_frame(read_ppm(p)) for p in paths]


def load_sequence(directory: PathLike) -> SequenceRecord:
    directory = Path(directory)
    config = SceneConfig.model_validate_json((directory / CONFIG_FILE).read_text())
    frames = load_frames(directory)
    flows = [read_flo(p) for p in sorted((directory / FLOW_DIR).glob("*.flo"))]
    vis = [read_pgm(p) > 127 for p in sorted((directory / VIS_DIR).glob("*.pgm"))]
    if not (len(frames) == len(flows) == len(vis)):
        raise ConfigError(f"{directory}: frame/flow/vis counts differ ({len(frames)}/{len(flows)}/{len(vis)})")
    return SequenceRecord(frames=frames, gt_flow=flows, gt_vis=vis, config=config)


def sequence_dirs(root: PathLike) -> list[Path]:
    """Sequence directories directly under `root` (or `root` itself), sorted."""
    root = Path(root)
    if (root / CONFIG_FILE).exists():
        return [root]
    return sorted(p for p in root.iterdir() if (p / CONFIG_FILE).exists()) if root.is_dir() else []


def load_corpus(root: PathLike) -> list[SequenceRecord]:
    return [load_sequence(p) for p in sequence_dirs(root)]


def generate_corpus(base: SceneConfig, num: int, seed: int, workers: int = 1) -> list[SequenceRecord]:
    """`num` sequences seeded seed, seed + 1, ...; generated in parallel."""
    configs = [build_config(SceneConfig, base.model_dump(), seed=seed + i) for i in range(num)]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return list(pool.map(generate, configs))
