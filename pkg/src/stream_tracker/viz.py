"""Flow color-wheel rendering and occlusion overlays."""

import logging
from pathlib import Path
from typing import Optional, Union

import numpy as np

from stream_tracker.formats import read_flo, read_pgm, write_ppm

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

NORM_EPS = 1e-5
STRIPE_PERIOD = 4
STRIPE_COLOR = (64, 64, 64)


def make_colorwheel() -> np.ndarray:
    """Middlebury color wheel, 55 x 3 in [0, 255]."""
    ry, yg, gc, cb, bm, mr = 15, 6, 4, 11, 13, 6
    wheel = np.zeros((ry + yg + gc + cb + bm + mr, 3))
    col = 0
    wheel[col : col + ry, 0] = 255
    wheel[col : col + ry, 1] = np.floor(255 * np.arange(ry) / ry)
    col += ry
    wheel[col : col + yg, 0] = 255 - np.floor(255 * np.arange(yg) / yg)
    wheel[col : col + yg, 1] = 255
    col += yg
    wheel[col : col + gc, 1] = 255
    wheel[col : col + gc, 2] = np.floor(255 * np.arange(gc) / gc)
    col += gc
    wheel[col : col + cb, 1] = 255 - np.floor(255 * np.arange(cb) / cb)
    wheel[col : col + cb, 2] = 255
    col += cb
    wheel[col : col + bm, 2] = 255
    wheel[col : col + bm, 0] = np.floor(255 * np.arange(bm) / bm)
    col += bm
    wheel[col : col + mr, 2] = 255 - np.floor(255 * np.arange(mr) / mr)
    wheel[col : col + mr, 0] = 255
    return wheel


def flow_to_color(flow: np.ndarray, max_flow: Optional[float] = None) -> np.ndarray:
    """2 x H x W flow -> H x W x 3 uint8. Magnitudes are normalized by max_flow or the image maximum."""
    u = flow[0].astype(np.float64)
    v = flow[1].astype(np.float64)
    rad = np.sqrt(u * u + v * v)
    scale = max_flow if max_flow is not None else rad.max()
    u = u / (scale + NORM_EPS)
    v = v / (scale + NORM_EPS)
    rad = np.sqrt(u * u + v * v)

    wheel = make_colorwheel()
    ncols = wheel.shape[0]
    angle = np.arctan2(-v, -u) / np.pi
    angle = np.where(angle >= 1.0, -1.0, angle)
    fk = (angle + 1) / 2 * (ncols - 1)
    k0 = np.floor(fk).astype(np.int64)
    k1 = (k0 + 1) % ncols
    f = fk - k0

    image = np.zeros(u.shape + (3,), dtype=np.uint8)
    for channel in range(3):
        col0 = wheel[k0, channel] / 255.0
        col1 = wheel[k1, channel] / 255.0
        col = (1 - f) * col0 + f * col1
        inside = rad <= 1
        col = np.where(inside, 1 - rad * (1 - col), col * 0.75)
        image[..., channel] = np.floor(255 * col).astype(np.uint8)
    return image


def overlay_occlusion(image: np.ndarray, vis_prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Diagonal stripes over pixels predicted occluded."""
    h, w = vis_prob.shape
    ys, xs = np.mgrid[0:h, 0:w]
    stripes = ((xs + ys) // STRIPE_PERIOD) % 2 == 0
    out = image.copy()
    out[(vis_prob <= threshold) & stripes] = STRIPE_COLOR
    return out


def render_flow_file(
    flow_path: PathLike,
    out_path: PathLike,
    vis_path: Optional[PathLike] = None,
    max_flow: Optional[float] = None,
) -> Path:
    image = flow_to_color(read_flo(flow_path), max_flow)
    if vis_path is not None:
        image = overlay_occlusion(image, read_pgm(vis_path) / 255.0)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_ppm(out_path, image)
    logger.debug("rendered %s -> %s", flow_path, out_path)
    return out_path


def render_directory(
    flow_dir: PathLike,
    out_dir: PathLike,
    vis_dir: Optional[PathLike] = None,
    max_flow: Optional[float] = None,
) -> list[Path]:
    """Render every .flo in flow_dir; a matching .pgm in vis_dir adds the occlusion overlay."""
    rendered = []
    for flow_path in sorted(Path(flow_dir).glob("*.flo")):
        vis_path = Path(vis_dir) / f"{flow_path.stem}.pgm" if vis_dir is not None else None
        if vis_path is not None and not vis_path.exists():
            vis_path = None
        rendered.append(render_flow_file(flow_path, Path(out_dir) / f"{flow_path.stem}.ppm", vis_path, max_flow))
    return rendered
