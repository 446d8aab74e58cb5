"""Parameter packing and the weighted least-squares objective shared by all fitters.

Parameter vector layout: [alpha (S) | axis-angle r (3) | t (2) | s (1)].
Every energy term is a sum of squared residuals of projected model vertices,
so one trust-region-reflective solver serves landmark-only, hard-edge and
soft-edge fitting.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy.optimize import least_squares

from src.camera import axis_angle_to_matrix, rotation_derivatives
from src.models import HybridWeights, LandmarkSet, Pose, ShapeModel
from src.shape_model import vertex_basis

logger = logging.getLogger(__name__)

MIN_SCALE = 1e-9


def pack_parameters(alpha: np.ndarray, pose: Pose) -> np.ndarray:
    aa = pose.to_axis_angle()
    return np.concatenate(
        [np.asarray(alpha, dtype=np.float64), aa.rotation_vector, aa.translation, [aa.scale]]
    )


def unpack_parameters(x: np.ndarray, n_components: int) -> Tuple[np.ndarray, Pose]:
    alpha = np.array(x[:n_components])
    r = x[n_components : n_components + 3]
    pose = Pose(
        rotation=axis_angle_to_matrix(r),
        translation=x[n_components + 3 : n_components + 5],
        scale=float(x[n_components + 5]),
    )
    return alpha, pose


def parameter_bounds(model: ShapeModel, hyperbox_k: float) -> Tuple[np.ndarray, np.ndarray]:
    box = hyperbox_k * model.std_devs
    lower = np.concatenate([-box, np.full(5, -np.inf), [MIN_SCALE]])
    upper = np.concatenate([box, np.full(6, np.inf)])
    return lower, upper


class VertexProjector:
    """Projects a fixed list of model vertices and differentiates the projection."""

    def __init__(self, model: ShapeModel, vertex_ids: np.ndarray):
        self.vertex_ids = np.asarray(vertex_ids, dtype=np.int64).reshape(-1)
        self.basis, self.mean = vertex_basis(model, self.vertex_ids)
        self.n_components = model.n_components

    @property
    def count(self) -> int:
        return int(self.vertex_ids.shape[0])

    def project(self, x: np.ndarray) -> np.ndarray:
        s_count = self.n_components
        alpha, r = x[:s_count], x[s_count : s_count + 3]
        t, s = x[s_count + 3 : s_count + 5], x[s_count + 5]
        vertices = self.basis @ alpha + self.mean
        return s * (vertices @ axis_angle_to_matrix(r)[:2].T + t)

    def project_with_jacobian(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Points (M, 2) and d points / d x as (M, 2, S + 6)."""
        s_count = self.n_components
        alpha, r = x[:s_count], x[s_count : s_count + 3]
        t, s = x[s_count + 3 : s_count + 5], x[s_count + 5]

        vertices = self.basis @ alpha + self.mean
        top = axis_angle_to_matrix(r)[:2]
        d_rot = rotation_derivatives(r)[:, :2, :]
        planar = vertices @ top.T + t

        m = self.count
        jac = np.empty((m, 2, s_count + 6))
        jac[:, :, :s_count] = s * np.einsum("ab,mbs->mas", top, self.basis)
        jac[:, :, s_count : s_count + 3] = s * np.einsum("kab,mb->mak", d_rot, vertices)
        jac[:, :, s_count + 3 : s_count + 5] = s * np.eye(2)
        jac[:, :, s_count + 5] = planar
        return s * planar, jac


class PointTerm(Protocol):
    """Residuals of projected points; ``width`` residuals per point."""

    width: int

    def residuals(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Return residuals (M, width) and their derivative w.r.t. points (M, width, 2)."""
        ...


class FixedTargetTerm:
    """Residual p - target, the landmark reprojection term."""

    width = 2

    def __init__(self, targets: np.ndarray):
        self.targets = np.asarray(targets, dtype=np.float64).reshape(-1, 2)

    def residuals(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        grad = np.broadcast_to(np.eye(2), (points.shape[0], 2, 2))
        return points - self.targets, grad


@dataclass
class _Block:
    projector: VertexProjector
    term: PointTerm
    weight: float


class HybridObjective:
    """w1 E_lmk + w2 E_edge + w3 E_prior with the boundary set held fixed.

    Landmark and edge terms are averaged over their point counts, so both
    are invariant to how many landmarks or contour vertices take part.
    """

    def __init__(
        self,
        model: ShapeModel,
        landmarks: Optional[LandmarkSet],
        weights: HybridWeights,
        boundary_ids: Optional[np.ndarray] = None,
        edge_term: Optional[PointTerm] = None,
    ):
        self.model = model
        self.weights = weights
        self.n_params = model.n_components + 6
        self.blocks: List[_Block] = []

        if landmarks is not None and landmarks.count and weights.w1 > 0:
            self.blocks.append(
                _Block(
                    VertexProjector(model, landmarks.vertex_ids),
                    FixedTargetTerm(landmarks.points),
                    weights.w1 / landmarks.count,
                )
            )
        if (
            edge_term is not None
            and boundary_ids is not None
            and len(boundary_ids)
            and weights.w2 > 0
        ):
            self.blocks.append(
                _Block(
                    VertexProjector(model, boundary_ids),
                    edge_term,
                    weights.w2 / len(boundary_ids),
                )
            )
        self.prior_scale = np.sqrt(weights.w3) / model.std_devs

    def residuals(self, x: np.ndarray) -> np.ndarray:
        parts = []
        for block in self.blocks:
            res, _ = block.term.residuals(block.projector.project(x))
            parts.append(np.sqrt(block.weight) * res.reshape(-1))
        if self.weights.w3 > 0:
            parts.append(self.prior_scale * x[: self.model.n_components])
        if not parts:
            return np.zeros(1)
        return np.concatenate(parts)

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        parts = []
        for block in self.blocks:
            points, d_points = block.projector.project_with_jacobian(x)
            _, d_res = block.term.residuals(points)
            jac = np.einsum("mkq,mqp->mkp", d_res, d_points)
            parts.append(np.sqrt(block.weight) * jac.reshape(-1, self.n_params))
        if self.weights.w3 > 0:
            prior = np.zeros((self.model.n_components, self.n_params))
            prior[:, : self.model.n_components] = np.diag(self.prior_scale)
            parts.append(prior)
        if not parts:
            return np.zeros((1, self.n_params))
        return np.vstack(parts)

    def energy(self, x: np.ndarray) -> float:
        r = self.residuals(x)
        return float(r @ r)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return 2.0 * self.jacobian(x).T @ self.residuals(x)


@dataclass
class SolveResult:
    x: np.ndarray
    energy: float
    evaluations: int
    status: int


def solve(
    objective: HybridObjective,
    x0: np.ndarray,
    bounds: Tuple[np.ndarray, np.ndarray],
    max_iters: int,
    xtol: float = 1e-8,
    free: Optional[Sequence[bool]] = None,
) -> SolveResult:
    """Trust-region-reflective least squares over the (optionally masked) parameters.

    Never returns a point with higher energy than ``x0``.
    """
    lower, upper = bounds
    x0 = np.clip(np.asarray(x0, dtype=np.float64), lower, upper)
    mask = np.ones(x0.shape[0], dtype=bool) if free is None else np.asarray(free, bool)

    def expand(z: np.ndarray) -> np.ndarray:
        x = x0.copy()
        x[mask] = z
        return x

    start_energy = objective.energy(x0)
    result = least_squares(
        lambda z: objective.residuals(expand(z)),
        x0[mask],
        jac=lambda z: objective.jacobian(expand(z))[:, mask],
        bounds=(lower[mask], upper[mask]),
        method="trf",
        x_scale="jac",
        xtol=xtol,
        max_nfev=max_iters,
    )
    x = expand(result.x)
    energy = objective.energy(x)
    if not np.isfinite(energy) or energy > start_energy:
        logger.debug(f"Solver did not improve ({energy:.6g} > {start_energy:.6g})")
        return SolveResult(x0, start_energy, int(result.nfev), int(result.status))
    logger.debug(
        f"Solver: {start_energy:.6g} -> {energy:.6g} in {result.nfev} evaluations"
    )
    return SolveResult(x, energy, int(result.nfev), int(result.status))
