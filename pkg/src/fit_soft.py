"""Soft-correspondence edge fitting on the distance-transform cost surface."""

import logging
from typing import Optional, Tuple

import numpy as np

from src.camera import sop
from src.edgemap import (
    EdgeCostSurface,
    build_distance_fields,
    kappa_for_scale,
    sample_bilinear,
    sample_bilinear_with_gradient,
)
from src.errors import DegenerateViewError
from src.fit_hard import fit_with_restarts
from src.models import (
    BoundaryVertexSet,
    FitResult,
    GrayImage,
    LandmarkSet,
    Pose,
    ShapeModel,
    SoftFitConfig,
)
from src.shape_model import vertex_basis

logger = logging.getLogger(__name__)

# Below this cost the square-root residual is treated as flat.
MIN_COST = 1e-12


class SoftEdgeTerm:
    """Residual sqrt(S(q)), so that the squared residual is the sampled cost."""

    width = 1

    def __init__(self, surface: EdgeCostSurface):
        self.surface = surface

    def residuals(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        values, grad = sample_bilinear_with_gradient(self.surface.values, points)
        values = np.maximum(values, 0.0)
        root = np.sqrt(values)
        scale = np.where(values > MIN_COST, 0.5 / np.maximum(root, MIN_COST), 0.0)
        return root[:, None], (grad * scale[:, None])[:, None, :]


def soft_edge_energy(
    model: ShapeModel,
    alpha: np.ndarray,
    pose: Pose,
    surface: EdgeCostSurface,
    boundary: BoundaryVertexSet,
) -> float:
    """Mean cost surface value at the projected boundary vertices."""
    if boundary.empty:
        raise DegenerateViewError("occluding boundary is empty")
    basis, mean = vertex_basis(model, boundary.indices)
    points = sop(basis @ np.asarray(alpha, dtype=np.float64) + mean, pose)
    return float(np.mean(sample_bilinear(surface, points)))


def hybrid_fit_soft(
    model: ShapeModel,
    landmarks: LandmarkSet,
    image: GrayImage,
    initial: Tuple[np.ndarray, Pose],
    config: Optional[SoftFitConfig] = None,
) -> FitResult:
    """Hybrid fit against the soft edge cost; kappa follows the current scale each round.

    Start from the landmark-only estimate. The distance fields are built once
    and only re-normalised per round.
    """
    config = config or SoftFitConfig()
    fields = build_distance_fields(
        image, config.thresholds, config.scales, config.detector_sigma
    )
    base = EdgeCostSurface.from_fields(
        fields, kappa_for_scale(model, initial[1].scale, config.kappa_fraction)
    )

    def term_for(pose: Pose) -> SoftEdgeTerm:
        kappa = kappa_for_scale(model, pose.scale, config.kappa_fraction)
        logger.debug(f"Soft edge cost with kappa={kappa:.4g}")
        return SoftEdgeTerm(base.with_kappa(kappa))

    return fit_with_restarts(
        model,
        landmarks,
        initial,
        config.weights,
        image.size,
        term_for,
        config.outer_restarts,
        config.inner_iters,
        config.step_tol,
        config.hyperbox_k,
        "soft",
    )
