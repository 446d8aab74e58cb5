"""PCA shape model instantiation and file I/O.

Binary model file (little-endian), zero-based indices::

    "E3DM" | version u32 | N u32 | S u32
    meanShape   3N float64
    components  3N*S float64, column-major
    variances   S float64
    T u32 | triangles 3T u32
    optional: "LMKS" | count u32 | landmark vertex ids, count u32

Components must be unit-norm PCA directions with the eigenvalues stored
separately in ``variances``. Converters from models distributed with
variance-scaled components must divide each column by sqrt(lambda_i) first.
"""

import json
import logging
import struct
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from src.errors import (
    DimensionInconsistencyError,
    DimensionMismatchError,
    InvalidArgumentError,
    MalformedHeaderError,
    MissingFileError,
    ModelValidationError,
)
from src.models import Mesh, MeshTopology, ShapeModel

logger = logging.getLogger(__name__)

MAGIC = b"E3DM"
LANDMARK_TAG = b"LMKS"
FORMAT_VERSION = 1
JSON_FORMAT = "E3DM-json"

PathLike = Union[str, Path]


def instantiate(model: ShapeModel, alpha: np.ndarray) -> Mesh:
    """f(alpha) = P alpha + fbar, returned as an (N, 3) mesh."""
    alpha = np.asarray(alpha, dtype=np.float64).reshape(-1)
    if alpha.shape[0] != model.n_components:
        raise DimensionMismatchError(
            f"alpha has length {alpha.shape[0]}, model has S={model.n_components}"
        )
    flat = model.components @ alpha + model.mean_shape
    return Mesh(vertices=flat.reshape(-1, 3), topology=model.topology)


def vertex_submatrix(model: ShapeModel, i: int) -> Tuple[np.ndarray, np.ndarray]:
    """Rows 3i..3i+2 of P and fbar, so that v_i = P_i alpha + fbar_i."""
    if not 0 <= i < model.n_vertices:
        raise InvalidArgumentError(
            f"vertex index {i} out of range [0, {model.n_vertices - 1}]"
        )
    rows = slice(3 * i, 3 * i + 3)
    return model.components[rows], model.mean_shape[rows]


def vertex_basis(model: ShapeModel, ids: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Stacked P_i (M, 3, S) and fbar_i (M, 3) for many vertices at once."""
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= model.n_vertices):
        raise InvalidArgumentError("vertex index out of range")
    basis = model.components.reshape(model.n_vertices, 3, model.n_components)
    return basis[ids], model.mean_vertices[ids]


def build_model(
    mean_shape: np.ndarray,
    components: np.ndarray,
    variances: np.ndarray,
    triangles: np.ndarray,
    landmark_ids: np.ndarray = None,
) -> ShapeModel:
    """Check raw arrays field by field, then assemble a ShapeModel."""
    mean_shape = np.asarray(mean_shape, dtype=np.float64).reshape(-1)
    components = np.asarray(components, dtype=np.float64)
    variances = np.asarray(variances, dtype=np.float64).reshape(-1)
    if mean_shape.size % 3:
        raise DimensionInconsistencyError("length is not a multiple of 3", "meanShape")
    n = mean_shape.size // 3
    if components.ndim != 2 or components.shape[0] != 3 * n:
        raise DimensionInconsistencyError(
            f"expected {3 * n} rows, got shape {components.shape}", "components"
        )
    s = components.shape[1]
    if variances.shape[0] != s:
        raise DimensionInconsistencyError(
            f"length {variances.shape[0]} does not match S={s}", "variances"
        )
    if not np.all(np.isfinite(variances)) or np.any(variances <= 0):
        raise ModelValidationError("all variances must be positive", "variances")
    if np.any(np.diff(variances) > 0):
        raise ModelValidationError("variances must be non-increasing", "variances")
    if not (np.all(np.isfinite(mean_shape)) and np.all(np.isfinite(components))):
        raise ModelValidationError("non-finite coordinates", "components")

    triangles = np.asarray(triangles, dtype=np.int64)
    if triangles.size % 3:
        raise DimensionInconsistencyError("length is not a multiple of 3", "triangles")
    triangles = triangles.reshape(-1, 3)
    if triangles.size and (triangles.min() < 0 or triangles.max() >= n):
        raise ModelValidationError(f"index outside [0, {n - 1}]", "triangles")

    if landmark_ids is None:
        landmark_ids = np.zeros(0, dtype=np.int64)
    landmark_ids = np.asarray(landmark_ids, dtype=np.int64).reshape(-1)
    if landmark_ids.size and (landmark_ids.min() < 0 or landmark_ids.max() >= n):
        raise ModelValidationError(f"index outside [0, {n - 1}]", "landmarkIds")

    return ShapeModel(
        mean_shape=mean_shape,
        components=components,
        variances=variances,
        topology=MeshTopology.from_triangles(triangles, n),
        landmark_ids=landmark_ids,
    )


def save_model(model: ShapeModel, path: PathLike) -> None:
    """Write the binary format, or the JSON sidecar when the suffix is .json."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        _save_json(model, path)
        return

    n, s = model.n_vertices, model.n_components
    parts = [
        MAGIC,
        struct.pack("<III", FORMAT_VERSION, n, s),
        model.mean_shape.astype("<f8").tobytes(),
        model.components.astype("<f8").tobytes(order="F"),
        model.variances.astype("<f8").tobytes(),
        struct.pack("<I", model.topology.n_triangles),
        model.triangles.astype("<u4").tobytes(),
    ]
    if model.landmark_ids.size:
        parts += [
            LANDMARK_TAG,
            struct.pack("<I", model.landmark_ids.size),
            model.landmark_ids.astype("<u4").tobytes(),
        ]
    path.write_bytes(b"".join(parts))
    logger.info(f"Saved model N={n} S={s} to {path}")


def load_model(path: PathLike) -> ShapeModel:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"no such file: {path}", "path")
    if path.suffix.lower() == ".json":
        return _load_json(path)

    reader = _Reader(path.read_bytes())
    if reader.take(4, "magic") != MAGIC:
        raise MalformedHeaderError("bad magic bytes, expected 'E3DM'", "magic")
    version, n, s = reader.unpack("<III", "header")
    if version != FORMAT_VERSION:
        raise MalformedHeaderError(f"unsupported version {version}", "version")
    if n == 0 or s == 0:
        raise MalformedHeaderError(f"N={n}, S={s} must be positive", "header")

    mean_shape = reader.array("<f8", 3 * n, "meanShape")
    components = reader.array("<f8", 3 * n * s, "components").reshape(
        (3 * n, s), order="F"
    )
    variances = reader.array("<f8", s, "variances")
    (t,) = reader.unpack("<I", "triangleCount")
    triangles = reader.array("<u4", 3 * t, "triangles")

    landmark_ids = None
    if reader.remaining:
        if reader.take(4, "landmarkTag") != LANDMARK_TAG:
            raise DimensionInconsistencyError(
                f"{reader.remaining + 4} unexpected trailing bytes", "trailer"
            )
        (count,) = reader.unpack("<I", "landmarkCount")
        landmark_ids = reader.array("<u4", count, "landmarkIds")
        if reader.remaining:
            raise DimensionInconsistencyError(
                f"{reader.remaining} unexpected trailing bytes", "trailer"
            )

    model = build_model(mean_shape, components, variances, triangles, landmark_ids)
    logger.info(f"Loaded model N={n} S={s} T={t} from {path}")
    return model


def export_obj(mesh: Mesh, path: PathLike) -> None:
    """Wavefront OBJ with 1-based triangular faces."""
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.topology.triangles.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


class _Reader:
    """Sequential little-endian reader that names the field it ran out on."""

    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    @property
    def remaining(self) -> int:
        return len(self.data) - self.offset

    def take(self, count: int, field: str) -> bytes:
        if self.remaining < count:
            error = MalformedHeaderError if self.offset < 16 else DimensionInconsistencyError
            raise error(
                f"file truncated: need {count} bytes, {self.remaining} left", field
            )
        chunk = self.data[self.offset : self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt: str, field: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), field))

    def array(self, dtype: str, count: int, field: str) -> np.ndarray:
        item = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(item * count, field), dtype=dtype).astype(
            np.float64 if dtype.endswith("f8") else np.int64
        )


def _save_json(model: ShapeModel, path: Path) -> None:
    payload = {
        "format": JSON_FORMAT,
        "version": FORMAT_VERSION,
        "n_vertices": model.n_vertices,
        "n_components": model.n_components,
        "mean_shape": model.mean_shape.tolist(),
        "components": model.components.T.tolist(),
        "variances": model.variances.tolist(),
        "triangles": model.triangles.tolist(),
        "landmark_ids": model.landmark_ids.tolist(),
    }
    path.write_text(json.dumps(payload))
    logger.info(f"Saved model N={model.n_vertices} S={model.n_components} to {path}")


def _load_json(path: Path) -> ShapeModel:
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise MalformedHeaderError(f"invalid JSON: {e}", "json") from e

    if not isinstance(payload, dict) or payload.get("format") != JSON_FORMAT:
        raise MalformedHeaderError(f"expected format '{JSON_FORMAT}'", "format")
    if payload.get("version") != FORMAT_VERSION:
        raise MalformedHeaderError(
            f"unsupported version {payload.get('version')}", "version"
        )
    for key in ("n_vertices", "n_components", "mean_shape", "components",
                "variances", "triangles"):
        if key not in payload:
            raise MalformedHeaderError("missing field", key)

    n, s = int(payload["n_vertices"]), int(payload["n_components"])
    mean_shape = np.asarray(payload["mean_shape"], dtype=np.float64)
    if mean_shape.shape != (3 * n,):
        raise DimensionInconsistencyError(
            f"length {mean_shape.size} does not match N={n}", "meanShape"
        )
    columns = np.asarray(payload["components"], dtype=np.float64)
    if columns.shape != (s, 3 * n):
        raise DimensionInconsistencyError(
            f"shape {columns.shape} does not match S={s}, N={n}", "components"
        )
    variances = np.asarray(payload["variances"], dtype=np.float64)
    if variances.shape != (s,):
        raise DimensionInconsistencyError(
            f"length {variances.size} does not match S={s}", "variances"
        )
    return build_model(
        mean_shape,
        columns.T,
        variances,
        np.asarray(payload["triangles"], dtype=np.int64),
        np.asarray(payload.get("landmark_ids", []), dtype=np.int64),
    )
