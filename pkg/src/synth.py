"""Synthetic head-like PCA model, orthographic renders and scene bundles."""

import json
import logging
from pathlib import Path
from typing import Iterator, Optional, Tuple, Union

import numpy as np

from src.camera import sop, yaw_rotation
from src.contour import rasterize_depth, visible_vertices
from src.edgemap import load_image, save_image
from src.errors import InvalidArgumentError, MissingFileError
from src.landmark_fit import load_landmarks, save_landmarks
from src.models import (
    AxisAnglePose,
    DepthBuffer,
    GrayImage,
    LandmarkSet,
    Mesh,
    Pose,
    ProtocolConfig,
    ShapeModel,
    SyntheticScene,
)
from src.shape_model import build_model, instantiate

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# Half-widths (x, y, z) of the base ellipsoid, in mm.
HEAD_RADII = np.array([75.0, 100.0, 85.0])

# (direction, amplitude mm, angular width) of the facial features. Pairs are mirrored in x.
FEATURES = (
    ((0.0, 0.12, -1.0), 24.0, 0.22),  # nose
    ((0.34, -0.36, -0.87), 7.0, 0.16),  # brows
    ((-0.34, -0.36, -0.87), 7.0, 0.16),
    ((0.30, -0.14, -0.94), -6.0, 0.12),  # eye sockets
    ((-0.30, -0.14, -0.94), -6.0, 0.12),
    ((0.0, 0.74, -0.67), 9.0, 0.22),  # chin
)

# Per-coordinate deformation (mm) carried by one standard deviation of the first component.
COMPONENT_SCALE_MM = 5.0
VARIANCE_DECAY = 1.5

AMBIENT = 0.35
LIGHT = np.array([0.0, -0.4, -1.0]) / np.linalg.norm([0.0, -0.4, -1.0])

# Symmetric grid of landmark targets: (latitude, longitude) in degrees, y down, face at -z.
_LANDMARK_LATITUDES = (-40, -25, -10, 5, 20, 35, 50)
_LANDMARK_LONGITUDES = (0, 12, -12, 24, -24, 36, -36, 50, -50)
_SILHOUETTE_LATITUDES = (-10, 15, 40)
_SILHOUETTE_LONGITUDES = (70, -70, 85, -85)


def _directions(lat_deg: np.ndarray, lon_deg: np.ndarray) -> np.ndarray:
    lat, lon = np.deg2rad(lat_deg), np.deg2rad(lon_deg)
    return np.stack(
        [np.cos(lat) * np.sin(lon), np.sin(lat), -np.cos(lat) * np.cos(lon)], axis=-1
    )


def uv_sphere(rings: int) -> Tuple[np.ndarray, np.ndarray]:
    """Unit UV sphere with poles on the y axis and exact mirror symmetry in x.

    Quad diagonals flip at the midline so the triangulation is mirror symmetric too.
    """
    segments = 2 * rings
    theta = np.pi * np.arange(1, rings + 1) / (rings + 1)
    phi = 2 * np.pi * np.arange(segments) / segments
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    ring = np.stack([np.sin(tt) * np.sin(pp), -np.cos(tt), -np.sin(tt) * np.cos(pp)], axis=-1)

    half = segments // 2
    ring[:, half + 1 :] = ring[:, 1:half][:, ::-1] * np.array([-1.0, 1.0, 1.0])
    ring[:, [0, half], 0] = 0.0

    top, bottom = 0, 1 + rings * segments
    vertices = np.vstack([[0.0, -1.0, 0.0], ring.reshape(-1, 3), [0.0, 1.0, 0.0]])

    def index(i: int, j: int) -> int:
        return 1 + i * segments + j % segments

    triangles = []
    for j in range(segments):
        triangles.append((top, index(0, j), index(0, j + 1)))
        triangles.append((bottom, index(rings - 1, j + 1), index(rings - 1, j)))
    for i in range(rings - 1):
        for j in range(segments):
            a, b = index(i, j), index(i, j + 1)
            c, d = index(i + 1, j), index(i + 1, j + 1)
            if j < half:
                triangles += [(a, c, d), (a, d, b)]
            else:
                triangles += [(a, c, b), (b, c, d)]
    triangles = np.array(triangles, dtype=np.int64)

    # Outward winding: the unit sphere is star-shaped about the origin.
    a, b, c = (vertices[triangles[:, k]] for k in range(3))
    inward = np.einsum("ij,ij->i", np.cross(b - a, c - a), a + b + c) < 0
    triangles[inward] = triangles[inward][:, [0, 2, 1]]
    return vertices, triangles


def _feature_offsets(unit: np.ndarray) -> np.ndarray:
    offsets = np.zeros(unit.shape[0])
    for direction, amplitude, width in FEATURES:
        centre = np.asarray(direction) / np.linalg.norm(direction)
        offsets += amplitude * np.exp(-np.sum((unit - centre) ** 2, axis=1) / (2 * width**2))
    return offsets


def _mirror_pairs(rings: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(left, right) vertex ids mirrored in x, plus the midline ids."""
    segments = 2 * rings
    half = segments // 2
    base = 1 + segments * np.arange(rings)[:, None]
    left = (base + np.arange(1, half)).reshape(-1)
    right = (base + (segments - np.arange(1, half))).reshape(-1)
    midline = np.concatenate(
        [[0, 1 + rings * segments], (base + np.array([0, half])).reshape(-1)]
    )
    return left, right, midline


def make_synthetic_model(
    n_vertices: int = 2000, n_components: int = 20, seed: int = 0
) -> ShapeModel:
    """Deformed ellipsoid head with nose, brows, eye sockets and chin.

    The vertex count is the closest UV-sphere size 2 + 2 r^2 to ``n_vertices``.
    Components are smooth random displacement fields, orthonormalised, with
    variances decaying as i^-1.5. About 70 landmark vertices are designated on
    a mirror-symmetric grid over the face.
    """
    if n_vertices < 100:
        raise InvalidArgumentError(f"need at least 100 vertices, got {n_vertices}")
    if n_components < 5:
        raise InvalidArgumentError(f"need at least 5 components, got {n_components}")

    rings = max(7, int(round(np.sqrt((n_vertices - 2) / 2.0))))
    unit, triangles = uv_sphere(rings)
    n = unit.shape[0]
    if 3 * n < n_components:
        raise InvalidArgumentError("more components than coordinates")

    radial = unit * HEAD_RADII
    normal = radial / np.linalg.norm(radial, axis=1, keepdims=True)
    mean = radial + _feature_offsets(unit)[:, None] * normal
    left, right, midline = _mirror_pairs(rings)
    mean[right] = mean[left] * np.array([-1.0, 1.0, 1.0])
    mean[midline, 0] = 0.0

    rng = np.random.default_rng(seed)
    fields = np.empty((3 * n, n_components))
    for k in range(n_components):
        centres = rng.normal(size=(12, 3))
        centres /= np.linalg.norm(centres, axis=1, keepdims=True)
        weights = np.exp(
            -np.sum((unit[:, None, :] - centres[None]) ** 2, axis=2) / (2 * 0.6**2)
        )
        fields[:, k] = (weights @ rng.normal(size=(12, 3))).reshape(-1)
    components, _ = np.linalg.qr(fields)

    variances = (COMPONENT_SCALE_MM**2 * 3 * n) * np.arange(1, n_components + 1) ** (
        -VARIANCE_DECAY
    )

    model = build_model(
        mean.reshape(-1), components, variances, triangles, designate_landmarks(unit)
    )
    logger.info(
        f"Synthetic model: N={n} S={n_components} T={len(triangles)} "
        f"landmarks={model.landmark_ids.size} (seed {seed})"
    )
    return model


def designate_landmarks(unit: np.ndarray) -> np.ndarray:
    """Nearest sphere vertex to each target direction, de-duplicated in target order."""
    lat, lon = np.meshgrid(_LANDMARK_LATITUDES, _LANDMARK_LONGITUDES, indexing="ij")
    slat, slon = np.meshgrid(_SILHOUETTE_LATITUDES, _SILHOUETTE_LONGITUDES, indexing="ij")
    targets = _directions(
        np.concatenate([lat.ravel(), slat.ravel()]),
        np.concatenate([lon.ravel(), slon.ravel()]),
    )
    nearest = np.argmin(
        np.sum((targets[:, None, :] - unit[None]) ** 2, axis=2), axis=1
    )
    _, first = np.unique(nearest, return_index=True)
    return nearest[np.sort(first)]


def sample_subject(model: ShapeModel, rng: np.random.Generator) -> np.ndarray:
    """Out-of-sample shape: standard normal coefficients clipped to 2 std."""
    return np.clip(rng.standard_normal(model.n_components), -2.0, 2.0) * model.std_devs


def framing_pose(mesh: Mesh, yaw_deg: float, image_size: Tuple[int, int]) -> Pose:
    """Yaw rotation, mesh height at 80% of the image, bounding box centred."""
    width, height = image_size
    rotation = yaw_rotation(yaw_deg)
    planar = mesh.vertices @ rotation[:2].T
    lo, hi = planar.min(axis=0), planar.max(axis=0)
    scale = 0.8 * height / (hi[1] - lo[1])
    centre = np.array([(width - 1) / 2.0, (height - 1) / 2.0])
    return Pose(rotation=rotation, translation=centre / scale - (lo + hi) / 2.0, scale=scale)


def shade(mesh: Mesh, pose: Pose, depth: DepthBuffer) -> GrayImage:
    """Flat Lambertian shading with one directional light, black background."""
    rotated = mesh.vertices @ pose.rotation.T
    tri = mesh.topology.triangles
    a, b, c = rotated[tri[:, 0]], rotated[tri[:, 1]], rotated[tri[:, 2]]
    normals = np.cross(b - a, c - a)
    lengths = np.linalg.norm(normals, axis=1, keepdims=True)
    normals = np.divide(normals, lengths, out=np.zeros_like(normals), where=lengths > 0)
    intensity = AMBIENT + (1.0 - AMBIENT) * np.clip(normals @ LIGHT, 0.0, 1.0)

    ids = depth.triangle_ids
    pixels = np.where(ids >= 0, intensity[np.maximum(ids, 0)], 0.0)
    return GrayImage(pixels=np.round(pixels * 255.0) / 255.0)


def render_scene(
    model: ShapeModel,
    alpha: np.ndarray,
    yaw_deg: float,
    image_size: int = 512,
    seed: int = 0,
    subject: int = 0,
    scene_id: Optional[str] = None,
) -> SyntheticScene:
    """Render a face at the given yaw and project its visible landmarks.

    Landmarks pass the z-buffer test, touch a front-facing triangle, and are
    rounded to the nearest pixel.
    """
    size = (int(image_size), int(image_size))
    mesh = instantiate(model, alpha)
    pose = framing_pose(mesh, yaw_deg, size)

    depth = rasterize_depth(mesh, pose, size)
    image = shade(mesh, pose, depth)
    visible, _ = visible_vertices(
        mesh, pose, depth, model.landmark_ids, require_front_facing=True
    )
    points = np.rint(sop(mesh.vertices[visible], pose))
    landmarks = LandmarkSet(vertex_ids=visible, points=points)

    scene_id = scene_id or f"subject{subject:02d}_yaw{yaw_deg:+04.0f}_seed{seed}"
    logger.info(f"Rendered {scene_id}: {landmarks.count} visible landmarks")
    return SyntheticScene(
        scene_id=scene_id,
        subject=subject,
        yaw=float(yaw_deg),
        ground_truth_alpha=np.asarray(alpha, dtype=np.float64),
        ground_truth_pose=pose,
        image=image,
        landmarks=landmarks,
        all_landmark_ids=model.landmark_ids,
    )


def add_landmark_noise(landmarks: LandmarkSet, sigma: float, seed: int = 0) -> LandmarkSet:
    """i.i.d. Gaussian noise on every coordinate; sigma 0 returns the input."""
    if sigma < 0:
        raise InvalidArgumentError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return landmarks
    rng = np.random.default_rng(seed)
    noisy = landmarks.points + rng.normal(0.0, sigma, size=landmarks.points.shape)
    return LandmarkSet(vertex_ids=landmarks.vertex_ids, points=noisy)


def subject_seed(seed: int, subject: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, subject])


def generate_scenes(model: ShapeModel, config: ProtocolConfig) -> Iterator[SyntheticScene]:
    """All (subject, yaw) renders of the protocol, in config order."""
    for subject in range(config.subjects):
        alpha = sample_subject(model, np.random.default_rng(subject_seed(config.seed, subject)))
        for yaw in config.yaw_angles:
            yield render_scene(
                model, alpha, yaw, config.image_size, config.seed, subject
            )


def save_scene(scene: SyntheticScene, directory: PathLike) -> Path:
    """Write image.pgm, landmarks.csv, ground_truth.json and scene_meta.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_image(scene.image, directory / "image.pgm")
    save_landmarks(scene.landmarks, directory / "landmarks.csv")

    pose = scene.ground_truth_pose.to_axis_angle()
    truth = {
        "alpha": scene.ground_truth_alpha.tolist(),
        "rotation_vector": pose.rotation_vector.tolist(),
        "translation": pose.translation.tolist(),
        "scale": pose.scale,
    }
    meta = {
        "scene_id": scene.scene_id,
        "subject": scene.subject,
        "yaw": scene.yaw,
        "sigma": scene.sigma,
        "width": scene.image.width,
        "height": scene.image.height,
        "all_landmark_ids": scene.all_landmark_ids.tolist(),
        "visible_landmarks": scene.landmarks.count,
    }
    (directory / "ground_truth.json").write_text(json.dumps(truth, indent=2, sort_keys=True))
    (directory / "scene_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return directory


def load_scene(directory: PathLike) -> SyntheticScene:
    directory = Path(directory)
    for name in ("image.pgm", "landmarks.csv", "ground_truth.json", "scene_meta.json"):
        if not (directory / name).is_file():
            raise MissingFileError(f"scene bundle is missing {directory / name}", name)

    truth = json.loads((directory / "ground_truth.json").read_text())
    meta = json.loads((directory / "scene_meta.json").read_text())
    pose = AxisAnglePose(
        rotation_vector=truth["rotation_vector"],
        translation=truth["translation"],
        scale=truth["scale"],
    ).to_pose()
    return SyntheticScene(
        scene_id=meta["scene_id"],
        subject=meta["subject"],
        yaw=meta["yaw"],
        sigma=meta.get("sigma", 0.0),
        ground_truth_alpha=np.asarray(truth["alpha"], dtype=np.float64),
        ground_truth_pose=pose,
        image=load_image(directory / "image.pgm"),
        landmarks=load_landmarks(directory / "landmarks.csv"),
        all_landmark_ids=np.asarray(meta["all_landmark_ids"], dtype=np.int64),
    )
