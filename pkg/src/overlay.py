"""Debug overlays: image edges in blue, kept matches in green, dropped matches in red."""

import logging
from pathlib import Path
from typing import Optional, Union

import numpy as np
from PIL import Image, ImageDraw

from src.edgemap import EdgeSet, to_uint8
from src.models import EdgeCorrespondences, GrayImage

logger = logging.getLogger(__name__)

EDGE_COLOR = (40, 90, 255)
KEPT_COLOR = (0, 220, 0)
DROPPED_COLOR = (230, 0, 0)
CONTOUR_COLOR = (255, 200, 0)


def _base(image: GrayImage, edges: Optional[EdgeSet]) -> Image.Image:
    canvas = Image.fromarray(to_uint8(image.pixels)).convert("RGB")
    if edges is not None and not edges.empty:
        pixels = np.asarray(canvas).copy()
        pixels[edges.pixels[:, 1], edges.pixels[:, 0]] = EDGE_COLOR
        canvas = Image.fromarray(pixels)
    return canvas


def _mark(draw: ImageDraw.ImageDraw, x: float, y: float, color, radius: float = 1.5) -> None:
    draw.ellipse([x - radius, y - radius, x + radius, y + radius], outline=color)


def draw_correspondences(
    image: GrayImage,
    edges: Optional[EdgeSet],
    correspondences: EdgeCorrespondences,
    path: Union[str, Path],
) -> None:
    canvas = _base(image, edges)
    draw = ImageDraw.Draw(canvas)
    for (px, py), (ex, ey), reason in zip(
        correspondences.projected.tolist(),
        correspondences.edge_pixels.tolist(),
        correspondences.reasons,
    ):
        color = KEPT_COLOR if reason == "kept" else DROPPED_COLOR
        draw.line([(px, py), (ex, ey)], fill=color)
        _mark(draw, px, py, color)
    canvas.save(path)
    logger.debug(
        f"Wrote overlay with {correspondences.kept_count}/{len(correspondences.reasons)} "
        f"kept matches to {path}"
    )


def draw_points(
    image: GrayImage,
    edges: Optional[EdgeSet],
    points: np.ndarray,
    path: Union[str, Path],
    color=CONTOUR_COLOR,
) -> None:
    """Projected contour vertices (or landmarks) over the image."""
    canvas = _base(image, edges)
    draw = ImageDraw.Draw(canvas)
    for x, y in np.asarray(points, dtype=np.float64).reshape(-1, 2).tolist():
        _mark(draw, x, y, color)
    canvas.save(path)
