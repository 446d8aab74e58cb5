from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    field_validator,
    model_validator,
)
from scipy.spatial.transform import Rotation

from src.errors import (
    DimensionMismatchError,
    EdgeFitError,
    InvalidArgumentError,
    ModelValidationError,
    TopologyError,
)

FitMethod = Literal["mean-shape", "landmarks", "icef", "hard", "soft"]


def _frozen_array(value: Any, dtype: Any) -> np.ndarray:
    arr = np.array(value, dtype=dtype)
    arr.setflags(write=False)
    return arr


def _domain_error(error: ValidationError) -> EdgeFitError:
    for detail in error.errors():
        cause = detail.get("ctx", {}).get("error")
        if isinstance(cause, EdgeFitError):
            return cause
    return InvalidArgumentError(str(error))


class DomainModel(BaseModel):
    """Direct construction raises the pipeline's own errors.

    ``model_validate`` and nested validation (e.g. inside ``Settings``) still
    report a pydantic ``ValidationError``.
    """

    def __init__(self, **data: Any):
        try:
            super().__init__(**data)
        except ValidationError as e:
            raise _domain_error(e) from e


class ArrayModel(DomainModel):
    """Base for immutable models carrying numpy arrays."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)


class MeshTopology(ArrayModel):
    """Triangle list plus the edge/face adjacency used for contour extraction.

    ``edge_faces[e]`` holds the (up to) two triangles sharing edge ``e``; the
    second entry is -1 for edges on the mesh boundary.
    """

    n_vertices: int = Field(gt=0)
    triangles: np.ndarray
    edges: np.ndarray
    edge_faces: np.ndarray

    @field_validator("triangles", "edges", "edge_faces", mode="before")
    @classmethod
    def _int_array(cls, value: Any) -> np.ndarray:
        return _frozen_array(value, np.int64)

    @classmethod
    def from_triangles(cls, triangles: Any, n_vertices: int) -> "MeshTopology":
        tri = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
        if tri.size and (tri.min() < 0 or tri.max() >= n_vertices):
            raise InvalidArgumentError(
                f"triangle index out of range [0, {n_vertices - 1}]"
            )

        n_tri = tri.shape[0]
        pairs = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
        faces = np.tile(np.arange(n_tri), 3)
        pairs = np.sort(pairs, axis=1)

        edges, inverse, counts = np.unique(
            pairs, axis=0, return_inverse=True, return_counts=True
        )
        inverse = inverse.reshape(-1)
        if np.any(counts > 2):
            bad = edges[np.argmax(counts)]
            raise TopologyError(
                f"edge ({bad[0]}, {bad[1]}) is shared by {counts.max()} triangles"
            )

        order = np.argsort(inverse, kind="stable")
        sorted_faces = faces[order]
        first = np.searchsorted(inverse[order], np.arange(len(edges)))
        edge_faces = np.full((len(edges), 2), -1, dtype=np.int64)
        edge_faces[:, 0] = sorted_faces[first]
        shared = counts == 2
        edge_faces[shared, 1] = sorted_faces[first[shared] + 1]

        return cls(
            n_vertices=n_vertices,
            triangles=tri,
            edges=edges.reshape(-1, 2),
            edge_faces=edge_faces,
        )

    @property
    def n_triangles(self) -> int:
        return int(self.triangles.shape[0])


class ShapeModel(ArrayModel):
    """PCA shape model f(alpha) = P alpha + fbar.

    ``mean_shape`` is the flat 3N vector [u1 v1 w1 ... uN vN wN]; ``components``
    holds unit-norm principal directions (3N x S) and ``variances`` the
    per-component eigenvalues. Indices are zero-based.
    """

    mean_shape: np.ndarray
    components: np.ndarray
    variances: np.ndarray
    topology: MeshTopology
    landmark_ids: np.ndarray = Field(default_factory=lambda: np.zeros(0, np.int64))

    @field_validator("mean_shape", "components", "variances", mode="before")
    @classmethod
    def _float_array(cls, value: Any) -> np.ndarray:
        return _frozen_array(value, np.float64)

    @field_validator("landmark_ids", mode="before")
    @classmethod
    def _id_array(cls, value: Any) -> np.ndarray:
        return _frozen_array(value, np.int64).reshape(-1)

    @model_validator(mode="after")
    def _check_dimensions(self) -> "ShapeModel":
        n3 = self.mean_shape.shape[0]
        if self.mean_shape.ndim != 1 or n3 % 3:
            raise DimensionMismatchError("mean_shape must be a flat vector of length 3N")
        if self.components.ndim != 2 or self.components.shape[0] != n3:
            raise DimensionMismatchError(f"components must have {n3} rows")
        if self.variances.shape != (self.components.shape[1],):
            raise DimensionMismatchError(
                f"variances has length {self.variances.shape[0]}, "
                f"expected S={self.components.shape[1]}"
            )
        if np.any(self.variances <= 0):
            raise ModelValidationError("must be strictly positive", "variances")
        if np.any(np.diff(self.variances) > 0):
            raise ModelValidationError("must be non-increasing", "variances")
        if self.topology.n_vertices != n3 // 3:
            raise DimensionMismatchError("topology vertex count does not match mean_shape")
        if self.landmark_ids.size and (
            self.landmark_ids.min() < 0 or self.landmark_ids.max() >= n3 // 3
        ):
            raise ModelValidationError("landmark id out of range", "landmarkIds")
        return self

    @property
    def n_vertices(self) -> int:
        return self.mean_shape.shape[0] // 3

    @property
    def n_components(self) -> int:
        return self.components.shape[1]

    @property
    def triangles(self) -> np.ndarray:
        return self.topology.triangles

    @property
    def mean_vertices(self) -> np.ndarray:
        return self.mean_shape.reshape(-1, 3)

    @property
    def std_devs(self) -> np.ndarray:
        return np.sqrt(self.variances)


class Mesh(ArrayModel):
    """Instantiated shape: vertices as an (N, 3) array sharing the model topology."""

    vertices: np.ndarray
    topology: MeshTopology

    @field_validator("vertices", mode="before")
    @classmethod
    def _vertices(cls, value: Any) -> np.ndarray:
        return _frozen_array(value, np.float64).reshape(-1, 3)

    @model_validator(mode="after")
    def _check_count(self) -> "Mesh":
        if self.vertices.shape[0] != self.topology.n_vertices:
            raise DimensionMismatchError(
                f"mesh has {self.vertices.shape[0]} vertices, "
                f"topology expects {self.topology.n_vertices}"
            )
        return self

    @property
    def flat(self) -> np.ndarray:
        return self.vertices.reshape(-1)

    @property
    def bounding_box_diagonal(self) -> float:
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))


class Pose(ArrayModel):
    """Scaled orthographic pose: rotation R, 2D translation t, scale s."""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float = Field(gt=0)

    @field_validator("rotation", mode="before")
    @classmethod
    def _rotation(cls, value: Any) -> np.ndarray:
        return _frozen_array(value, np.float64).reshape(3, 3)

    @field_validator("translation", mode="before")
    @classmethod
    def _translation(cls, value: Any) -> np.ndarray:
        return _frozen_array(value, np.float64).reshape(2)

    @model_validator(mode="after")
    def _check_rotation(self) -> "Pose":
        r = self.rotation
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-10:
            raise InvalidArgumentError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-10:
            raise InvalidArgumentError("rotation determinant is not +1")
        return self

    @classmethod
    def identity(cls) -> "Pose":
        return cls(rotation=np.eye(3), translation=np.zeros(2), scale=1.0)

    def to_axis_angle(self) -> "AxisAnglePose":
        return AxisAnglePose(
            rotation_vector=Rotation.from_matrix(self.rotation).as_rotvec(),
            translation=self.translation,
            scale=self.scale,
        )


class AxisAnglePose(ArrayModel):
    rotation_vector: np.ndarray
    translation: np.ndarray
    scale: float = Field(gt=0)

    @field_validator("rotation_vector", mode="before")
    @classmethod
    def _rotvec(cls, value: Any) -> np.ndarray:
        return _frozen_array(value, np.float64).reshape(3)

    @field_validator("translation", mode="before")
    @classmethod
    def _translation(cls, value: Any) -> np.ndarray:
        return _frozen_array(value, np.float64).reshape(2)

    @model_validator(mode="after")
    def _check_range(self) -> "AxisAnglePose":
        if np.linalg.norm(self.rotation_vector) > np.pi + 1e-9:
            raise InvalidArgumentError("rotation vector norm exceeds pi")
        return self

    def to_pose(self) -> Pose:
        return Pose(
            rotation=Rotation.from_rotvec(self.rotation_vector).as_matrix(),
            translation=self.translation,
            scale=self.scale,
        )


class LandmarkSet(ArrayModel):
    """Observed 2D positions with known model vertex correspondence."""

    vertex_ids: np.ndarray
    points: np.ndarray

    @field_validator("vertex_ids", mode="before")
    @classmethod
    def _ids(cls, value: Any) -> np.ndarray:
        return _frozen_array(value, np.int64).reshape(-1)

    @field_validator("points", mode="before")
    @classmethod
    def _points(cls, value: Any) -> np.ndarray:
        return _frozen_array(value, np.float64).reshape(-1, 2)

    @model_validator(mode="after")
    def _check(self) -> "LandmarkSet":
        if self.vertex_ids.shape[0] != self.points.shape[0]:
            raise DimensionMismatchError("vertex_ids and points differ in length")
        if np.unique(self.vertex_ids).size != self.vertex_ids.size:
            raise InvalidArgumentError("landmark vertex ids must be distinct")
        return self

    @classmethod
    def with_pseudo_landmarks(
        cls, landmarks: "LandmarkSet", vertex_ids: np.ndarray, points: np.ndarray
    ) -> "LandmarkSet":
        """Concatenate edge matches onto true landmarks.

        Edge matches may reuse a landmark vertex, so distinctness is not checked.
        """
        return cls.model_construct(
            vertex_ids=_frozen_array(
                np.concatenate([landmarks.vertex_ids, vertex_ids]), np.int64
            ),
            points=_frozen_array(
                np.concatenate([landmarks.points, np.reshape(points, (-1, 2))]),
                np.float64,
            ),
        )

    @property
    def count(self) -> int:
        return int(self.vertex_ids.shape[0])


class FitOptions(DomainModel):
    hyperbox_k: float = Field(3.0, gt=0)
    alternation_iters: int = Field(5, ge=1)
    nonlinear_max_iters: int = Field(200, ge=1)
    convergence_tol: float = Field(1e-8, gt=0)


class HybridWeights(DomainModel):
    w1: float = Field(0.15, ge=0)
    w2: float = Field(0.45, ge=0)
    w3: float = Field(0.40, ge=0)

    @model_validator(mode="after")
    def _not_all_zero(self) -> "HybridWeights":
        if self.w1 == 0 and self.w2 == 0 and self.w3 == 0:
            raise InvalidArgumentError("at least one weight must be positive")
        return self


class HardFitConfig(DomainModel):
    weights: HybridWeights = Field(default_factory=HybridWeights)
    icef_iters: int = Field(10, ge=0)
    percentile_cut: float = Field(0.05, ge=0, lt=1)
    dist_thresh_ratio: float = Field(10.0, gt=0)
    outer_restarts: int = Field(5, ge=1)
    inner_iters: int = Field(30, ge=1)
    step_tol: float = Field(1e-6, gt=0)
    hyperbox_k: float = Field(3.0, gt=0)


class SoftFitConfig(DomainModel):
    weights: HybridWeights = Field(default_factory=HybridWeights)
    thresholds: List[float] = Field(default_factory=lambda: [0.1, 0.2, 0.3])
    scales: List[float] = Field(default_factory=lambda: [1.0, 0.5, 0.25])
    outer_restarts: int = Field(5, ge=1)
    inner_iters: int = Field(30, ge=1)
    step_tol: float = Field(1e-6, gt=0)
    hyperbox_k: float = Field(3.0, gt=0)
    kappa_fraction: float = Field(1.0 / 20.0, gt=0)
    detector_sigma: float = Field(1.0, gt=0)

    @field_validator("thresholds", "scales")
    @classmethod
    def _non_empty(cls, value: List[float]) -> List[float]:
        if not value:
            raise InvalidArgumentError("parameter set must not be empty")
        return value


class StageDiagnostics(DomainModel):
    """Energy reached at the end of one fitting stage."""

    name: str
    energy: float
    iterations: int = 0
    kept_pairs: Optional[int] = None
    note: Optional[str] = None


class FitResult(DomainModel):
    method: FitMethod
    alpha: List[float]
    rotation_vector: List[float]
    translation: List[float]
    scale: float
    energy: float
    stages: List[StageDiagnostics] = Field(default_factory=list)
    correspondence_counts: List[int] = Field(default_factory=list)
    warnings: List[str] = Field(default_factory=list)

    @classmethod
    def from_estimate(
        cls, method: FitMethod, alpha: np.ndarray, pose: Pose, energy: float, **kwargs
    ) -> "FitResult":
        aa = pose.to_axis_angle()
        return cls(
            method=method,
            alpha=[float(a) for a in alpha],
            rotation_vector=[float(r) for r in aa.rotation_vector],
            translation=[float(t) for t in pose.translation],
            scale=float(pose.scale),
            energy=float(energy),
            **kwargs,
        )

    def alpha_array(self) -> np.ndarray:
        return np.asarray(self.alpha, dtype=np.float64)

    def pose(self) -> Pose:
        return AxisAnglePose(
            rotation_vector=self.rotation_vector,
            translation=self.translation,
            scale=self.scale,
        ).to_pose()


class GrayImage(ArrayModel):
    """Grayscale image, intensities in [0, 1], indexed [row(y), col(x)]."""

    pixels: np.ndarray

    @field_validator("pixels", mode="before")
    @classmethod
    def _pixels(cls, value: Any) -> np.ndarray:
        arr = _frozen_array(value, np.float64)
        if arr.ndim != 2:
            raise InvalidArgumentError("image must be 2-dimensional")
        return arr

    @model_validator(mode="after")
    def _check_range(self) -> "GrayImage":
        if self.pixels.size and (self.pixels.min() < 0 or self.pixels.max() > 1):
            raise InvalidArgumentError("intensities must lie in [0, 1]")
        return self

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def size(self) -> Tuple[int, int]:
        return self.width, self.height


class DepthBuffer(ArrayModel):
    """Per-pixel nearest camera-space z; +inf marks background."""

    depth: np.ndarray
    triangle_ids: np.ndarray

    @property
    def width(self) -> int:
        return int(self.depth.shape[1])

    @property
    def height(self) -> int:
        return int(self.depth.shape[0])


class BoundaryVertexSet(ArrayModel):
    """Occluding boundary vertices B plus the candidates rejected on the way."""

    indices: np.ndarray
    excluded: Dict[int, str] = Field(default_factory=dict)

    @property
    def count(self) -> int:
        return int(self.indices.shape[0])

    @property
    def empty(self) -> bool:
        return self.indices.size == 0


class EdgeCorrespondences(ArrayModel):
    """Closest-edge matches for the projected boundary vertices.

    ``reasons`` is "kept", "percentile" or "threshold" per pair.
    """

    vertex_ids: np.ndarray
    projected: np.ndarray
    edge_pixels: np.ndarray
    distances: np.ndarray
    reasons: List[str]

    @property
    def kept(self) -> np.ndarray:
        return np.array([r == "kept" for r in self.reasons], dtype=bool)

    @property
    def kept_count(self) -> int:
        return int(self.kept.sum())

    @property
    def empty(self) -> bool:
        return self.kept_count == 0


class SyntheticScene(ArrayModel):
    scene_id: str
    subject: int
    yaw: float
    sigma: float = 0.0
    ground_truth_alpha: np.ndarray
    ground_truth_pose: Pose
    image: GrayImage
    landmarks: LandmarkSet
    all_landmark_ids: np.ndarray


class ProtocolConfig(DomainModel):
    yaw_angles: List[float] = Field(
        default_factory=lambda: [0.0, 15.0, -15.0, 30.0, -30.0, 50.0, -50.0, 70.0, -70.0]
    )
    noise_sigmas: List[float] = Field(default_factory=lambda: [0.0])
    subjects: int = Field(10, ge=1)
    seed: int = 0
    n_vertices: int = Field(2000, ge=100)
    n_components: int = Field(20, ge=5)
    image_size: int = Field(512, ge=32)

    @field_validator("yaw_angles")
    @classmethod
    def _angles(cls, value: List[float]) -> List[float]:
        if any(abs(a) >= 90 for a in value):
            raise InvalidArgumentError("yaw angles must lie in (-90, 90) degrees")
        return value

    @field_validator("noise_sigmas")
    @classmethod
    def _sigmas(cls, value: List[float]) -> List[float]:
        if any(s < 0 for s in value):
            raise InvalidArgumentError("noise sigmas must be non-negative")
        return value


class ExperimentRecord(DomainModel):
    scene_id: str
    subject: int
    yaw: float
    sigma: float
    method: FitMethod
    error: Optional[float] = Field(None, ge=0)
    wall_time: Optional[float] = None
    status: str = "ok"
    diagnostics: Dict[str, Any] = Field(default_factory=dict)


class SimilarityTransform(ArrayModel):
    """x -> scale * R x + t in model space."""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float

    @field_validator("rotation", mode="before")
    @classmethod
    def _rotation(cls, value: Any) -> np.ndarray:
        return _frozen_array(value, np.float64).reshape(3, 3)

    @field_validator("translation", mode="before")
    @classmethod
    def _translation(cls, value: Any) -> np.ndarray:
        return _frozen_array(value, np.float64).reshape(3)

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(rotation=np.eye(3), translation=np.zeros(3), scale=1.0)

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return self.scale * points @ self.rotation.T + self.translation


class ResultsTable(DomainModel):
    """Per-scene records plus the axes used to summarise them."""

    methods: List[str]
    angles: List[float]
    sigmas: List[float]
    records: List[ExperimentRecord] = Field(default_factory=list)

    def errors(
        self, method: str, angle: Optional[float] = None, sigma: Optional[float] = None
    ) -> np.ndarray:
        values = [
            np.nan if r.error is None else r.error
            for r in self.records
            if r.method == method
            and (angle is None or r.yaw == angle)
            and (sigma is None or r.sigma == sigma)
        ]
        return np.array(values, dtype=np.float64)

    def cell(
        self, method: str, angle: Optional[float] = None, sigma: Optional[float] = None
    ) -> float:
        """Mean error over the matching scenes; failed scenes are left out, NaN if none remain."""
        values = self.errors(method, angle, sigma)
        values = values[np.isfinite(values)]
        return float(values.mean()) if values.size else float("nan")
