"""Occluding boundary extraction with z-buffer visibility.

Depth is camera-aligned z in model units (smaller is nearer); pixel (x, y)
covers the point whose centre is at integer coordinates (x, y).
"""

import logging
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np

from src.camera import camera_depth, sop
from src.errors import InvalidArgumentError
from src.models import BoundaryVertexSet, DepthBuffer, Mesh, Pose

logger = logging.getLogger(__name__)

# Relative z slack for the visibility test, times the mesh bounding-box diagonal.
DEPTH_TOLERANCE = 1e-4

ImageSize = Tuple[int, int]


def _check_size(image_size: Sequence[int]) -> ImageSize:
    width, height = (int(v) for v in image_size)
    if width <= 0 or height <= 0:
        raise InvalidArgumentError(f"image size must be positive, got {width}x{height}")
    return width, height


def face_normal_z(mesh: Mesh, pose: Pose) -> np.ndarray:
    """z-component of each triangle's outward normal after rotation."""
    rotated = mesh.vertices @ pose.rotation.T
    tri = mesh.topology.triangles
    a, b, c = rotated[tri[:, 0]], rotated[tri[:, 1]], rotated[tri[:, 2]]
    return np.cross(b - a, c - a)[:, 2]


def _owns_edge(dx: float, dy: float) -> bool:
    # Shared edges are traversed in opposite directions, so exactly one side owns them.
    return dy < 0 or (dy == 0 and dx > 0)


def rasterize_depth(mesh: Mesh, pose: Pose, image_size: Sequence[int]) -> DepthBuffer:
    """Orthographic z-buffer: nearest camera z over triangles covering each pixel centre."""
    width, height = _check_size(image_size)
    points = sop(mesh.vertices, pose)
    z = camera_depth(mesh.vertices, pose)

    depth = np.full((height, width), np.inf)
    ids = np.full((height, width), -1, dtype=np.int64)

    for f, (i0, i1, i2) in enumerate(mesh.topology.triangles.tolist()):
        p = points[[i0, i1, i2]]
        zs = z[[i0, i1, i2]]
        area = (p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1]) - (p[1, 1] - p[0, 1]) * (
            p[2, 0] - p[0, 0]
        )
        if area == 0:
            continue
        if area < 0:
            p, zs, area = p[[0, 2, 1]], zs[[0, 2, 1]], -area

        x_lo = max(int(np.ceil(p[:, 0].min())), 0)
        x_hi = min(int(np.floor(p[:, 0].max())), width - 1)
        y_lo = max(int(np.ceil(p[:, 1].min())), 0)
        y_hi = min(int(np.floor(p[:, 1].max())), height - 1)
        if x_lo > x_hi or y_lo > y_hi:
            continue

        ys, xs = np.mgrid[y_lo : y_hi + 1, x_lo : x_hi + 1].astype(np.float64)
        inside = np.ones(xs.shape, dtype=bool)
        weights = []
        for a, b in ((1, 2), (2, 0), (0, 1)):
            dx, dy = p[b, 0] - p[a, 0], p[b, 1] - p[a, 1]
            e = dx * (ys - p[a, 1]) - dy * (xs - p[a, 0])
            inside &= (e > 0) | ((e == 0) & _owns_edge(dx, dy))
            weights.append(e / area)
        if not inside.any():
            continue

        zi = weights[0] * zs[0] + weights[1] * zs[1] + weights[2] * zs[2]
        window = depth[y_lo : y_hi + 1, x_lo : x_hi + 1]
        closer = inside & (zi < window)
        window[closer] = zi[closer]
        ids[y_lo : y_hi + 1, x_lo : x_hi + 1][closer] = f

    return DepthBuffer(depth=depth, triangle_ids=ids)


def depth_tolerance(mesh: Mesh) -> float:
    return DEPTH_TOLERANCE * mesh.bounding_box_diagonal


def visible_vertices(
    mesh: Mesh,
    pose: Pose,
    depth: DepthBuffer,
    vertex_ids: Sequence[int],
    require_front_facing: bool = False,
) -> Tuple[np.ndarray, Dict[int, str]]:
    """Split vertex ids into visible ones and a reason for each rejected one.

    A vertex is visible when its projection falls inside the image and its
    depth is no farther than the farthest depth in the surrounding 3x3 pixels
    plus the tolerance. With ``require_front_facing`` at least one adjacent
    triangle must also face the camera.
    """
    ids = np.unique(np.asarray(vertex_ids, dtype=np.int64))
    if ids.size == 0:
        return ids, {}

    points = sop(mesh.vertices[ids], pose)
    z = camera_depth(mesh.vertices[ids], pose)
    eps = depth_tolerance(mesh)
    height, width = depth.depth.shape

    front = None
    if require_front_facing:
        facing = face_normal_z(mesh, pose) < 0
        front = np.zeros(mesh.vertices.shape[0], dtype=bool)
        np.logical_or.at(front, mesh.topology.triangles.reshape(-1), np.repeat(facing, 3))

    visible, excluded = [], {}
    for vid, (x, y), zv in zip(ids.tolist(), points, z):
        ix, iy = int(np.rint(x)), int(np.rint(y))
        if not (0 <= ix < width and 0 <= iy < height):
            excluded[vid] = "outside-image"
            continue
        patch = depth.depth[max(iy - 1, 0) : iy + 2, max(ix - 1, 0) : ix + 2]
        if zv > patch.max() + eps:
            excluded[vid] = "occluded"
            continue
        if front is not None and not front[vid]:
            excluded[vid] = "back-facing"
            continue
        visible.append(vid)
    return np.array(visible, dtype=np.int64), excluded


def contour_edges(mesh: Mesh, pose: Pose) -> np.ndarray:
    """Interior edges whose two faces' rotated normals differ in z-sign (zero counts as negative)."""
    positive = face_normal_z(mesh, pose) > 0
    faces = mesh.topology.edge_faces
    interior = faces[:, 1] >= 0
    flips = np.zeros(len(faces), dtype=bool)
    flips[interior] = positive[faces[interior, 0]] != positive[faces[interior, 1]]
    return mesh.topology.edges[flips]


def occluding_boundary(
    mesh: Mesh,
    pose: Pose,
    image_size: Sequence[int],
    depth: Optional[DepthBuffer] = None,
) -> BoundaryVertexSet:
    """Visible endpoints of contour edges, silhouette and self-occlusion alike.

    Edges on the mesh boundary never qualify. Rejected candidates are kept in
    ``excluded`` with their reason; ``indices`` are sorted.
    """
    image_size = _check_size(image_size)
    if depth is None:
        depth = rasterize_depth(mesh, pose, image_size)

    candidates = np.unique(contour_edges(mesh, pose).reshape(-1))
    indices, excluded = visible_vertices(mesh, pose, depth, candidates)

    faces = mesh.topology.edge_faces
    open_edges = mesh.topology.edges[faces[:, 1] < 0]
    if open_edges.size:
        for vid in np.setdiff1d(np.unique(open_edges), candidates).tolist():
            excluded.setdefault(vid, "mesh-boundary")

    logger.debug(
        f"Boundary: {candidates.size} candidates, {indices.size} visible, "
        f"{len(excluded)} excluded"
    )
    return BoundaryVertexSet(indices=indices, excluded=excluded)


def save_depth_pgm(depth: DepthBuffer, path: Union[str, Path]) -> None:
    """16-bit binary PGM; foreground depth normalised to [0, 65534], background 65535."""
    values = depth.depth
    finite = np.isfinite(values)
    out = np.full(values.shape, 65535, dtype=np.uint16)
    if finite.any():
        lo, hi = values[finite].min(), values[finite].max()
        span = hi - lo if hi > lo else 1.0
        out[finite] = np.round((values[finite] - lo) / span * 65534).astype(np.uint16)
    header = f"P5\n{depth.width} {depth.height}\n65535\n".encode("ascii")
    Path(path).write_bytes(header + out.astype(">u2").tobytes())
