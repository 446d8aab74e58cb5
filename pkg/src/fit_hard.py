"""Hard-correspondence edge fitting: closest-edge matching, ICEF and the hybrid objective."""

import logging
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from src.camera import sop
from src.contour import occluding_boundary
from src.edgemap import EdgeSet
from src.errors import DegenerateViewError, DimensionMismatchError, NoEdgesError
from src.landmark_fit import fit_landmarks
from src.models import (
    BoundaryVertexSet,
    EdgeCorrespondences,
    FitMethod,
    FitOptions,
    FitResult,
    HardFitConfig,
    HybridWeights,
    LandmarkSet,
    Pose,
    ShapeModel,
    StageDiagnostics,
)
from src.objective import (
    HybridObjective,
    PointTerm,
    pack_parameters,
    parameter_bounds,
    solve,
    unpack_parameters,
)
from src.shape_model import instantiate, vertex_basis

logger = logging.getLogger(__name__)


class HardEdgeTerm:
    """Residual q - nearest_edge(q); the match is re-queried at every evaluation."""

    width = 2

    def __init__(self, edges: EdgeSet):
        if edges.empty:
            raise NoEdgesError("edge set is empty")
        self.edges = edges

    def residuals(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        nearest, _ = self.edges.nearest(points)
        grad = np.broadcast_to(np.eye(2), (points.shape[0], 2, 2))
        return points - nearest, grad


class IcefResult(NamedTuple):
    alpha: np.ndarray
    pose: Pose
    stages: List[StageDiagnostics]
    kept_counts: List[int]
    warnings: List[str]
    correspondences: Optional[EdgeCorrespondences]


def _project_boundary(
    model: ShapeModel, alpha: np.ndarray, pose: Pose, boundary: BoundaryVertexSet
) -> np.ndarray:
    basis, mean = vertex_basis(model, boundary.indices)
    return sop(basis @ np.asarray(alpha, dtype=np.float64) + mean, pose)


def edge_energy_hard(
    model: ShapeModel,
    alpha: np.ndarray,
    pose: Pose,
    edges: EdgeSet,
    boundary: BoundaryVertexSet,
) -> float:
    """(1/|B|) sum over boundary vertices of the squared distance to the closest edge pixel."""
    if boundary.empty:
        raise DegenerateViewError("occluding boundary is empty")
    if edges.empty:
        raise NoEdgesError("edge set is empty")
    _, distances = edges.nearest(_project_boundary(model, alpha, pose, boundary))
    return float(np.mean(distances**2))


def prior_energy(alpha: np.ndarray, variances: np.ndarray) -> float:
    alpha = np.asarray(alpha, dtype=np.float64).reshape(-1)
    variances = np.asarray(variances, dtype=np.float64).reshape(-1)
    if alpha.shape != variances.shape:
        raise DimensionMismatchError(
            f"alpha has length {alpha.size}, variances {variances.size}"
        )
    return float(np.sum(alpha**2 / variances))


def filter_matches(
    distances: np.ndarray, scale: float, percentile_cut: float, dist_thresh_ratio: float
) -> List[str]:
    """Label each match "kept", "percentile" (worst fraction) or "threshold" (d / s too large)."""
    distances = np.asarray(distances, dtype=np.float64)
    n = distances.size
    reasons = ["kept"] * n
    n_drop = int(np.floor(percentile_cut * n + 0.5))
    if n_drop:
        for i in np.argsort(distances, kind="stable")[n - n_drop :].tolist():
            reasons[i] = "percentile"
    for i in np.flatnonzero(distances / scale > dist_thresh_ratio).tolist():
        if reasons[i] == "kept":
            reasons[i] = "threshold"
    return reasons


def icef_correspond(
    model: ShapeModel,
    alpha: np.ndarray,
    pose: Pose,
    edges: EdgeSet,
    image_size: Optional[Sequence[int]] = None,
    percentile_cut: float = 0.05,
    dist_thresh_ratio: float = 10.0,
) -> EdgeCorrespondences:
    """Match each visible boundary vertex to its closest edge pixel and filter the matches.

    No surviving pair is signalled by ``EdgeCorrespondences.empty``.
    """
    if edges.empty:
        raise NoEdgesError("edge set is empty")
    image_size = image_size or (edges.width, edges.height)
    boundary = occluding_boundary(instantiate(model, alpha), pose, image_size)
    if boundary.empty:
        return EdgeCorrespondences(
            vertex_ids=np.zeros(0, np.int64),
            projected=np.zeros((0, 2)),
            edge_pixels=np.zeros((0, 2), np.int64),
            distances=np.zeros(0),
            reasons=[],
        )

    projected = _project_boundary(model, alpha, pose, boundary)
    pixels, distances = edges.nearest(projected)
    reasons = filter_matches(distances, pose.scale, percentile_cut, dist_thresh_ratio)
    return EdgeCorrespondences(
        vertex_ids=boundary.indices,
        projected=projected,
        edge_pixels=pixels,
        distances=distances,
        reasons=reasons,
    )


def icef_fit(
    model: ShapeModel,
    landmarks: LandmarkSet,
    edges: EdgeSet,
    initial: Tuple[np.ndarray, Pose],
    iters: int = 10,
    config: Optional[HardFitConfig] = None,
    options: Optional[FitOptions] = None,
) -> IcefResult:
    """Iterated closest edge fitting.

    Each iteration turns the kept edge matches into pseudo-landmarks and
    refits shape and pose on them together with the true landmarks, warm
    started from the current estimate.
    """
    config = config or HardFitConfig()
    options = options or FitOptions(hyperbox_k=config.hyperbox_k)
    alpha, pose = np.asarray(initial[0], dtype=np.float64), initial[1]
    stages: List[StageDiagnostics] = []
    kept_counts: List[int] = []
    warnings: List[str] = []
    correspondences = None

    for i in range(iters):
        correspondences = icef_correspond(
            model, alpha, pose, edges, None, config.percentile_cut, config.dist_thresh_ratio
        )
        kept = correspondences.kept
        kept_counts.append(int(kept.sum()))
        if correspondences.empty:
            message = f"ICEF iteration {i + 1}: no edge correspondences survived filtering"
            if i == 0:
                message += ", keeping the landmark-only estimate"
            logger.warning(message)
            warnings.append(message)
            break

        combined = LandmarkSet.with_pseudo_landmarks(
            landmarks,
            correspondences.vertex_ids[kept],
            correspondences.edge_pixels[kept].astype(np.float64),
        )
        fit = fit_landmarks(model, combined, options, initial=(alpha, pose))
        alpha, pose = fit.alpha, fit.pose
        stages.append(
            StageDiagnostics(
                name=f"icef_{i + 1}",
                energy=fit.energy,
                iterations=sum(s.iterations for s in fit.stages),
                kept_pairs=int(kept.sum()),
            )
        )
        logger.debug(
            f"ICEF iteration {i + 1}: {kept.sum()}/{kept.size} pairs kept, E={fit.energy:.6g}"
        )

    return IcefResult(alpha, pose, stages, kept_counts, warnings, correspondences)


def fit_with_restarts(
    model: ShapeModel,
    landmarks: LandmarkSet,
    initial: Tuple[np.ndarray, Pose],
    weights: HybridWeights,
    image_size: Sequence[int],
    term_for: Callable[[Pose], PointTerm],
    outer_restarts: int,
    inner_iters: int,
    step_tol: float,
    hyperbox_k: float,
    method: FitMethod,
) -> FitResult:
    """Outer rounds refresh B (and the edge term), inner rounds run the bounded solver.

    Stops early once a round moves the parameters by less than ``step_tol``.
    The returned estimate never has a higher final-B energy than ``initial``.
    """
    bounds = parameter_bounds(model, hyperbox_k)
    x_initial = np.clip(pack_parameters(initial[0], initial[1]), *bounds)
    x = x_initial.copy()
    stages: List[StageDiagnostics] = []
    counts: List[int] = []
    warnings: List[str] = []

    def build(x: np.ndarray) -> Tuple[HybridObjective, BoundaryVertexSet]:
        alpha, pose = unpack_parameters(x, model.n_components)
        boundary = occluding_boundary(instantiate(model, alpha), pose, image_size)
        objective = HybridObjective(
            model, landmarks, weights, boundary_ids=boundary.indices, edge_term=term_for(pose)
        )
        return objective, boundary

    for round_index in range(outer_restarts):
        objective, boundary = build(x)
        counts.append(boundary.count)
        if boundary.empty:
            message = f"Round {round_index + 1}: empty occluding boundary, edge term skipped"
            logger.warning(message)
            warnings.append(message)

        start = objective.energy(x)
        if not np.isfinite(start):
            message = f"Round {round_index + 1}: non-finite energy, keeping best estimate"
            logger.warning(message)
            warnings.append(message)
            break

        result = solve(objective, x, bounds, inner_iters)
        step = float(np.linalg.norm(result.x - x))
        x = result.x
        stages.append(
            StageDiagnostics(
                name=f"hybrid_round_{round_index + 1}",
                energy=result.energy,
                iterations=result.evaluations,
                kept_pairs=boundary.count,
                note=f"start={start:.6g} step={step:.3g}",
            )
        )
        logger.debug(
            f"Hybrid round {round_index + 1}: |B|={boundary.count} "
            f"E {start:.6g} -> {result.energy:.6g}, step {step:.3g}"
        )
        if step < step_tol:
            break

    final_objective, _ = build(x)
    final_energy = final_objective.energy(x)
    initial_energy = final_objective.energy(x_initial)
    stages.append(
        StageDiagnostics(
            name="final_boundary",
            energy=final_energy,
            note=f"initial estimate under final boundary: {initial_energy:.6g}",
        )
    )
    if not np.isfinite(final_energy) or final_energy > initial_energy:
        message = "Hybrid fit did not improve on its initial estimate, returning it"
        logger.warning(message)
        warnings.append(message)
        x, final_energy = x_initial, initial_energy

    alpha, pose = unpack_parameters(x, model.n_components)
    logger.info(f"{method} hybrid fit: E={final_energy:.6g} after {len(stages) - 1} rounds")
    return FitResult.from_estimate(
        method,
        alpha,
        pose,
        final_energy,
        stages=stages,
        correspondence_counts=counts,
        warnings=warnings,
    )


def hybrid_fit_hard(
    model: ShapeModel,
    landmarks: LandmarkSet,
    edges: EdgeSet,
    initial: Tuple[np.ndarray, Pose],
    config: Optional[HardFitConfig] = None,
) -> FitResult:
    """Hybrid fit where each boundary vertex is pulled to its current closest edge pixel."""
    config = config or HardFitConfig()
    term = HardEdgeTerm(edges)
    return fit_with_restarts(
        model,
        landmarks,
        initial,
        config.weights,
        (edges.width, edges.height),
        lambda pose: term,
        config.outer_restarts,
        config.inner_iters,
        config.step_tol,
        config.hyperbox_k,
        "hard",
    )
