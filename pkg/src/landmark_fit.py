import csv
import logging
from pathlib import Path
from typing import List, NamedTuple, Optional, Tuple, Union

import numpy as np
from scipy.optimize import lsq_linear

from src.errors import (
    DegenerateConfigurationError,
    InvalidArgumentError,
    SolverError,
)
from src.models import FitOptions, HybridWeights, LandmarkSet, Pose, ShapeModel, StageDiagnostics
from src.objective import (
    HybridObjective,
    pack_parameters,
    parameter_bounds,
    solve,
    unpack_parameters,
)
from src.shape_model import vertex_basis

logger = logging.getLogger(__name__)

# Relative singular value below which the POS system is treated as rank deficient.
RANK_TOL = 1e-10

LANDMARK_ONLY = HybridWeights(w1=1.0, w2=0.0, w3=0.0)


class LandmarkFit(NamedTuple):
    alpha: np.ndarray
    pose: Pose
    stages: List[StageDiagnostics]

    @property
    def energy(self) -> float:
        return self.stages[-1].energy


def load_landmarks(path: Union[str, Path]) -> LandmarkSet:
    """Read ``vertexIndex,x,y`` lines; '#' starts a comment, a header row is optional."""
    ids, points = [], []
    with open(path, newline="") as f:
        for line, row in enumerate(csv.reader(f), start=1):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                vertex = int(row[0])
            except ValueError:
                if not ids and line == 1:
                    continue  # header
                raise InvalidArgumentError(f"{path}:{line}: bad vertex index {row[0]!r}")
            if len(row) < 3:
                raise InvalidArgumentError(f"{path}:{line}: expected vertexIndex,x,y")
            try:
                points.append((float(row[1]), float(row[2])))
            except ValueError:
                raise InvalidArgumentError(f"{path}:{line}: bad coordinates {row[1:3]}")
            ids.append(vertex)
    return LandmarkSet(vertex_ids=np.array(ids, dtype=np.int64), points=np.array(points))


def save_landmarks(landmarks: LandmarkSet, path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["vertexIndex", "x", "y"])
        for vertex, (x, y) in zip(landmarks.vertex_ids.tolist(), landmarks.points.tolist()):
            writer.writerow([vertex, repr(x), repr(y)])


def landmark_energy(
    model: ShapeModel, landmarks: LandmarkSet, alpha: np.ndarray, pose: Pose
) -> float:
    """E_lmk = (1/L) sum ||x_i - SOP[P_i alpha + fbar_i]||^2."""
    if landmarks.count == 0:
        raise InvalidArgumentError("landmark set is empty")
    basis, mean = vertex_basis(model, landmarks.vertex_ids)
    vertices = basis @ np.asarray(alpha, dtype=np.float64) + mean
    projected = pose.scale * (vertices @ pose.rotation[:2].T + pose.translation)
    return float(np.sum((landmarks.points - projected) ** 2) / landmarks.count)


def estimate_pose_pos(points3d: np.ndarray, points2d: np.ndarray) -> Pose:
    """Linear POS estimate projected onto a proper rotation.

    Solves A k = d for the two scaled rotation rows and translation, takes
    s as the mean row norm and R = U V^T from the SVD of [r1; r2; r1 x r2].
    """
    world = np.asarray(points3d, dtype=np.float64).reshape(-1, 3)
    image = np.asarray(points2d, dtype=np.float64).reshape(-1, 2)
    n = world.shape[0]
    if n != image.shape[0]:
        raise InvalidArgumentError("3D and 2D point counts differ")
    if n < 4:
        raise InvalidArgumentError(f"POS needs at least 4 points, got {n}")

    homogeneous = np.hstack([world, np.ones((n, 1))])
    a = np.zeros((2 * n, 8))
    a[0::2, :4] = homogeneous
    a[1::2, 4:] = homogeneous
    d = image.reshape(-1)

    singular = np.linalg.svd(a, compute_uv=False)
    if singular[-1] <= RANK_TOL * singular[0]:
        raise DegenerateConfigurationError(
            f"POS system is rank deficient (condition {singular[0] / max(singular[-1], 1e-300):.3g})"
        )
    k = np.linalg.lstsq(a, d, rcond=None)[0]

    r1, r2 = k[0:3], k[4:7]
    s = (np.linalg.norm(r1) + np.linalg.norm(r2)) / 2.0
    if s <= 0:
        raise DegenerateConfigurationError("POS recovered a zero scale")
    t = np.array([k[3] / s, k[7] / s])

    u, _, vt = np.linalg.svd(np.vstack([r1, r2, np.cross(r1, r2)]))
    rotation = u @ vt
    if np.linalg.det(rotation) < 0:
        u[2, :] *= -1
        rotation = u @ vt
    return Pose(rotation=rotation, translation=t, scale=s)


def estimate_shape_lls(
    model: ShapeModel, landmarks: LandmarkSet, pose: Pose, hyperbox_k: float = 3.0
) -> np.ndarray:
    """Box-constrained linear least squares for alpha with the pose fixed."""
    if landmarks.count == 0:
        raise InvalidArgumentError("shape estimation needs at least one landmark")
    basis, mean = vertex_basis(model, landmarks.vertex_ids)
    top, s = pose.rotation[:2], pose.scale

    c = s * np.einsum("ab,mbs->mas", top, basis).reshape(-1, model.n_components)
    h = (landmarks.points - s * (mean @ top.T + pose.translation)).reshape(-1)

    box = hyperbox_k * model.std_devs
    result = lsq_linear(
        c,
        h,
        bounds=(-box, box),
        method="bvls",
        tol=1e-10,
        max_iter=10 * model.n_components + 100,
    )
    if result.status == 0:
        raise SolverError("bounded least squares did not converge", int(result.nit))
    return np.clip(result.x, -box, box)


def refine_pose(
    model: ShapeModel,
    landmarks: LandmarkSet,
    alpha: np.ndarray,
    pose: Pose,
    options: Optional[FitOptions] = None,
) -> Tuple[Pose, float]:
    """Nonlinear refinement of E_lmk over (r, t, s) with alpha held fixed."""
    options = options or FitOptions()
    objective = HybridObjective(model, landmarks, LANDMARK_ONLY)
    free = np.r_[np.zeros(model.n_components, bool), np.ones(6, bool)]
    x0 = pack_parameters(alpha, pose)
    result = solve(
        objective,
        x0,
        parameter_bounds(model, np.inf),
        options.nonlinear_max_iters,
        options.convergence_tol,
        free=free,
    )
    _, refined = unpack_parameters(result.x, model.n_components)
    return refined, result.energy


def fit_landmarks(
    model: ShapeModel,
    landmarks: LandmarkSet,
    options: Optional[FitOptions] = None,
    initial: Optional[Tuple[np.ndarray, Pose]] = None,
) -> LandmarkFit:
    """Fit shape and pose to landmarks with known correspondence.

    Cold start: POS on the mean-shape vertices. Then alternate pose
    refinement and the constrained linear shape step, and finish with a
    joint trust-region solve of E_lmk over (alpha, r, t, s). A warm start
    skips POS and begins the alternation from ``initial``.
    """
    options = options or FitOptions()
    if landmarks.count < 4:
        raise InvalidArgumentError(f"need at least 4 landmarks, got {landmarks.count}")
    box = options.hyperbox_k * model.std_devs
    stages: List[StageDiagnostics] = []

    if initial is None:
        alpha = np.zeros(model.n_components)
        pose = estimate_pose_pos(model.mean_vertices[landmarks.vertex_ids], landmarks.points)
        stage = "pos"
    else:
        alpha = np.clip(np.asarray(initial[0], dtype=np.float64), -box, box)
        pose = initial[1]
        stage = "initial"
    energy = landmark_energy(model, landmarks, alpha, pose)
    stages.append(StageDiagnostics(name=stage, energy=energy))

    for i in range(options.alternation_iters):
        pose, energy = refine_pose(model, landmarks, alpha, pose, options)
        candidate = estimate_shape_lls(model, landmarks, pose, options.hyperbox_k)
        candidate_energy = landmark_energy(model, landmarks, candidate, pose)
        if candidate_energy <= energy:
            alpha, energy = candidate, candidate_energy
        stages.append(StageDiagnostics(name=f"alternation_{i + 1}", energy=energy))
        logger.debug(f"Alternation {i + 1}: E_lmk={energy:.6g}")

    objective = HybridObjective(model, landmarks, LANDMARK_ONLY)
    result = solve(
        objective,
        pack_parameters(alpha, pose),
        parameter_bounds(model, options.hyperbox_k),
        options.nonlinear_max_iters,
        options.convergence_tol,
    )
    if result.energy <= energy:
        alpha, pose = unpack_parameters(result.x, model.n_components)
        energy = result.energy
    stages.append(
        StageDiagnostics(name="nonlinear", energy=energy, iterations=result.evaluations)
    )
    logger.info(f"Landmark fit on {landmarks.count} points: E_lmk={energy:.6g}")
    return LandmarkFit(alpha=np.clip(alpha, -box, box), pose=pose, stages=stages)
