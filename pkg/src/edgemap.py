"""Image edges, nearest-edge queries and the soft edge cost surface."""

import logging
from pathlib import Path
from typing import Any, Iterable, Tuple, Union

import numpy as np
from PIL import Image
from pydantic import Field, field_validator
from scipy import ndimage
from scipy.spatial import KDTree

from src.errors import InvalidArgumentError, NoEdgesError
from src.models import ArrayModel, GrayImage, ShapeModel

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# Gradient direction bins (0, 45, 90, 135 degrees) -> (dy, dx) step along the gradient.
_NMS_STEPS = ((0, 1), (1, 1), (1, 0), (1, -1))

# Largest cost below 1; pixels far from every edge (or with no edges at all) saturate here.
MAX_COST = float(np.nextafter(1.0, 0.0))


def load_image(path: PathLike) -> GrayImage:
    """Read a PGM (P5) or PNG as grayscale normalised to [0, 1]."""
    with Image.open(path) as im:
        if im.mode in ("I", "I;16", "I;16B", "I;16L"):
            pixels = np.asarray(im, dtype=np.float64) / 65535.0
        else:
            pixels = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    return GrayImage(pixels=np.clip(pixels, 0.0, 1.0))


def save_image(image: GrayImage, path: PathLike) -> None:
    """8-bit grayscale; the format follows the suffix (.pgm, .png)."""
    Image.fromarray(to_uint8(image.pixels)).save(path)


def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


class EdgeSet:
    """Edge pixels (x, y) with an exact kd-tree for nearest-edge queries."""

    def __init__(self, pixels: np.ndarray, width: int, height: int):
        pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
        if pixels.size and (
            pixels[:, 0].min() < 0
            or pixels[:, 0].max() >= width
            or pixels[:, 1].min() < 0
            or pixels[:, 1].max() >= height
        ):
            raise InvalidArgumentError("edge pixel outside the image")
        order = np.lexsort((pixels[:, 0], pixels[:, 1]))
        self.pixels = pixels[order]
        self.width = width
        self.height = height
        self.tree = KDTree(self.pixels.astype(np.float64)) if len(self.pixels) else None

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "EdgeSet":
        ys, xs = np.nonzero(mask)
        return cls(np.stack([xs, ys], axis=1), mask.shape[1], mask.shape[0])

    def __len__(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def empty(self) -> bool:
        return len(self) == 0

    def mask(self) -> np.ndarray:
        grid = np.zeros((self.height, self.width), dtype=bool)
        grid[self.pixels[:, 1], self.pixels[:, 0]] = True
        return grid

    def nearest(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Closest edge pixel and Euclidean distance for each query point (M, 2)."""
        if self.tree is None:
            raise NoEdgesError("edge set is empty")
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        distances, index = self.tree.query(points)
        return self.pixels[index], distances

    def nearest_edge(self, point: np.ndarray) -> Tuple[Tuple[int, int], float]:
        pixels, distances = self.nearest(point)
        return (int(pixels[0, 0]), int(pixels[0, 1])), float(distances[0])


def _gradient_nms(pixels: np.ndarray, sigma: float) -> np.ndarray:
    """Non-maximum suppressed gradient magnitude, normalised by its maximum."""
    smoothed = ndimage.gaussian_filter(pixels, sigma=sigma)
    gx = ndimage.sobel(smoothed, axis=1)
    gy = ndimage.sobel(smoothed, axis=0)
    magnitude = np.hypot(gx, gy)
    peak = magnitude.max() if magnitude.size else 0.0
    if peak <= 0:
        return np.zeros_like(magnitude)

    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    bins = ((angle + 22.5) // 45.0).astype(np.int64) % 4

    h, w = magnitude.shape
    padded = np.pad(magnitude, 1)
    keep = np.zeros_like(magnitude, dtype=bool)
    for b, (dy, dx) in enumerate(_NMS_STEPS):
        ahead = padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
        behind = padded[1 - dy : 1 - dy + h, 1 - dx : 1 - dx + w]
        # Ties go to the pixel ahead, so plateaus stay one pixel wide.
        keep |= (bins == b) & (magnitude >= behind) & (magnitude > ahead)
    return np.where(keep, magnitude / peak, 0.0)


def canny_edges(
    image: GrayImage, low: float = 0.05, high: float = 0.15, sigma: float = 1.4
) -> EdgeSet:
    """Canny detector; thresholds are fractions of the peak gradient magnitude."""
    if image.pixels.size == 0:
        raise InvalidArgumentError("image is empty")
    if not 0 <= low <= high <= 1:
        raise InvalidArgumentError(f"need 0 <= low <= high <= 1, got {low}, {high}")
    if sigma <= 0:
        raise InvalidArgumentError("sigma must be positive")

    nms = _gradient_nms(image.pixels, sigma)
    weak = nms >= max(low, np.finfo(float).tiny)
    strong = nms >= max(high, np.finfo(float).tiny)

    labels, _ = ndimage.label(weak, structure=np.ones((3, 3), dtype=bool))
    linked = np.isin(labels, np.unique(labels[strong])) & weak
    edges = EdgeSet.from_mask(linked)
    logger.debug(f"Canny found {len(edges)} edge pixels")
    return edges


def distance_transform(edge_mask: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance to the nearest edge pixel; +inf if there are none."""
    mask = np.asarray(edge_mask, dtype=bool)
    if not mask.any():
        return np.full(mask.shape, np.inf)
    return ndimage.distance_transform_edt(~mask)


class EdgeCostSurface(ArrayModel):
    """S(x, y) = (1/n) sum_i D_i / (D_i + kappa) over n distance fields.

    A field without edges (+inf) counts as 1 before averaging; the mean is
    capped at ``MAX_COST`` so that 0 <= S < 1 holds everywhere.

    ``fields`` keeps the distance transforms (working-resolution pixels) so the
    surface can be re-derived for another kappa without re-detecting edges.
    """

    fields: np.ndarray
    kappa: float = Field(gt=0)
    values: np.ndarray

    @field_validator("fields", "values", mode="before")
    @classmethod
    def _float_array(cls, value: Any) -> np.ndarray:
        arr = np.array(value, dtype=np.float64)
        arr.setflags(write=False)
        return arr

    @classmethod
    def from_fields(cls, fields: np.ndarray, kappa: float) -> "EdgeCostSurface":
        if kappa <= 0:
            raise InvalidArgumentError("kappa must be positive")
        fields = np.asarray(fields, dtype=np.float64)
        with np.errstate(invalid="ignore"):
            ratios = np.where(np.isinf(fields), 1.0, fields / (fields + kappa))
        values = np.minimum(ratios.mean(axis=0), MAX_COST)
        return cls(fields=fields, kappa=kappa, values=values)

    def with_kappa(self, kappa: float) -> "EdgeCostSurface":
        return EdgeCostSurface.from_fields(self.fields, kappa)

    @property
    def n(self) -> int:
        return int(self.fields.shape[0])


def _resample_to(field: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    """Bilinear resampling of a coarse field onto a finer pixel grid (centres aligned)."""
    if not np.all(np.isfinite(field)):
        return np.full(shape, np.inf)
    h, w = field.shape
    ys = (np.arange(shape[0]) + 0.5) * (h / shape[0]) - 0.5
    xs = (np.arange(shape[1]) + 0.5) * (w / shape[1]) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(field, [yy, xx], order=1, mode="nearest")


def build_distance_fields(
    image: GrayImage,
    thresholds: Iterable[float],
    scales: Iterable[float],
    sigma: float = 1.0,
) -> np.ndarray:
    """One distance field per (scale, threshold) pair, in working-resolution pixels."""
    thresholds, scales = list(thresholds), list(scales)
    if not thresholds or not scales:
        raise InvalidArgumentError("thresholds and scales must be non-empty")
    if any(not 0 < s <= 1 for s in scales):
        raise InvalidArgumentError("scales must lie in (0, 1]")

    pixels = image.pixels
    fields = []
    for scale in scales:
        if scale == 1:
            small = pixels
        else:
            blurred = ndimage.gaussian_filter(pixels, sigma=0.5 / scale)
            small = ndimage.zoom(blurred, scale, order=1, mode="nearest", grid_mode=True)
        nms = _gradient_nms(small, sigma)
        factor = pixels.shape[1] / small.shape[1]
        for threshold in thresholds:
            mask = (nms >= threshold) & (nms > 0)
            field = distance_transform(mask) * factor
            if small.shape != pixels.shape:
                field = _resample_to(field, pixels.shape)
            fields.append(field)
    return np.stack(fields)


def build_cost_surface(
    image: GrayImage,
    thresholds: Iterable[float],
    scales: Iterable[float],
    kappa: float,
    sigma: float = 1.0,
) -> EdgeCostSurface:
    """Multi-threshold, multi-scale edge cost surface for soft correspondence.

    Edges come from gradient magnitude thresholding with non-maximum
    suppression on the downscaled image; coarse distances are converted to
    working-resolution pixels before upsampling.
    """
    fields = build_distance_fields(image, thresholds, scales, sigma)
    return EdgeCostSurface.from_fields(fields, kappa)


def kappa_for_scale(model: ShapeModel, scale: float, fraction: float = 1.0 / 20.0) -> float:
    """Influence range: a fraction of the expected head height in pixels."""
    height = float(np.ptp(model.mean_vertices[:, 1]))
    return max(scale * height * fraction, 1e-6)


def sample_bilinear_with_gradient(
    grid: np.ndarray, points: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Bilinear samples (M,) and their (d/dx, d/dy) gradients (M, 2).

    Coordinates outside the grid are clamped to the border (zero gradient
    along the clamped axis); a coordinate on a cell boundary uses the cell
    of its clamped floor.
    """
    h, w = grid.shape
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    x = np.clip(pts[:, 0], 0.0, w - 1)
    y = np.clip(pts[:, 1], 0.0, h - 1)
    x0 = np.minimum(np.floor(x).astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.int64), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0

    v00, v01 = grid[y0, x0], grid[y0, x1]
    v10, v11 = grid[y1, x0], grid[y1, x1]
    values = (1 - fx) * (1 - fy) * v00 + fx * (1 - fy) * v01 + (1 - fx) * fy * v10 + fx * fy * v11

    dx = (1 - fy) * (v01 - v00) + fy * (v11 - v10)
    dy = (1 - fx) * (v10 - v00) + fx * (v11 - v01)
    dx = np.where((pts[:, 0] < 0) | (pts[:, 0] > w - 1), 0.0, dx)
    dy = np.where((pts[:, 1] < 0) | (pts[:, 1] > h - 1), 0.0, dy)
    return values, np.stack([dx, dy], axis=1)


def sample_bilinear(surface: Union[EdgeCostSurface, np.ndarray], points: np.ndarray) -> np.ndarray:
    grid = surface.values if isinstance(surface, EdgeCostSurface) else np.asarray(surface)
    values, _ = sample_bilinear_with_gradient(grid, points)
    return values


def save_edges_pgm(edges: EdgeSet, path: PathLike) -> None:
    Image.fromarray(edges.mask().astype(np.uint8) * 255).save(path)


def save_surface_pgm(surface: EdgeCostSurface, path: PathLike) -> None:
    Image.fromarray(to_uint8(surface.values)).save(path)
