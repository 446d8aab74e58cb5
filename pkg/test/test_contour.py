import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from src.camera import yaw_rotation
from src.contour import (
    contour_edges,
    face_normal_z,
    occluding_boundary,
    rasterize_depth,
    save_depth_pgm,
    visible_vertices,
)
from src.errors import InvalidArgumentError
from src.models import DepthBuffer, Mesh, MeshTopology, Pose
from test.conftest import sphere_mesh

GENERIC = Rotation.from_rotvec([0.1, 0.2, 0.05]).as_matrix()


def triangle_soup(vertices) -> Mesh:
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    triangles = np.arange(len(vertices)).reshape(-1, 3)
    return Mesh(vertices=vertices, topology=MeshTopology.from_triangles(triangles, len(vertices)))


def brute_force_depth(points, z, triangles, width, height):
    depth = np.full((height, width), np.inf)
    for y in range(height):
        for x in range(width):
            for i0, i1, i2 in triangles:
                a, b, c = points[i0], points[i1], points[i2]
                v0, v1, v2 = b - a, c - a, np.array([x, y]) - a
                d = v0[0] * v1[1] - v0[1] * v1[0]
                if d == 0:
                    continue
                u = (v2[0] * v1[1] - v2[1] * v1[0]) / d
                v = (v0[0] * v2[1] - v0[1] * v2[0]) / d
                if u >= 0 and v >= 0 and u + v <= 1:
                    zi = (1 - u - v) * z[i0] + u * z[i1] + v * z[i2]
                    depth[y, x] = min(depth[y, x], zi)
    return depth


def centred_pose(rotation=GENERIC, scale=3.0, size=128) -> Pose:
    return Pose(rotation=rotation, translation=[size / 2 / scale] * 2, scale=scale)


def test_single_triangle_coverage():
    mesh = triangle_soup([[2, 2, 5], [10, 2, 5], [2, 10, 5]])
    depth = rasterize_depth(mesh, Pose.identity(), (16, 16))

    assert depth.depth[4, 4] == pytest.approx(5.0)
    assert depth.triangle_ids[4, 4] == 0
    assert np.isinf(depth.depth[0, 0])
    assert depth.triangle_ids[0, 0] == -1
    assert np.isinf(depth.depth[9, 9])


def test_nearer_triangle_wins():
    mesh = triangle_soup(
        [[0, 0, 5], [15, 0, 5], [0, 15, 5], [0, 0, 2], [15, 0, 2], [0, 15, 2]]
    )
    depth = rasterize_depth(mesh, Pose.identity(), (16, 16))
    assert depth.depth[3, 3] == pytest.approx(2.0)
    assert depth.triangle_ids[3, 3] == 1


def test_rasterizer_matches_brute_force(rng):
    vertices = np.column_stack([rng.uniform(-2, 34, size=(24, 2)), rng.uniform(-5, 5, 24)])
    mesh = triangle_soup(vertices)
    depth = rasterize_depth(mesh, Pose.identity(), (32, 32))

    expected = brute_force_depth(vertices[:, :2], vertices[:, 2], mesh.topology.triangles, 32, 32)
    assert np.allclose(depth.depth, expected)


def test_zero_image_size_rejected():
    mesh = triangle_soup([[0, 0, 0], [1, 0, 0], [0, 1, 0]])
    with pytest.raises(InvalidArgumentError):
        rasterize_depth(mesh, Pose.identity(), (0, 10))


def test_single_triangle_has_no_contour():
    mesh = triangle_soup([[2, 2, 0], [10, 2, 0], [2, 10, 0]])
    boundary = occluding_boundary(mesh, Pose.identity(), (16, 16))
    assert boundary.empty
    assert boundary.excluded == {0: "mesh-boundary", 1: "mesh-boundary", 2: "mesh-boundary"}


def test_sphere_boundary_matches_edge_oracle():
    mesh = sphere_mesh(rings=8)
    pose = centred_pose()
    rotated = mesh.vertices @ pose.rotation.T

    def normal_z(face):
        a, b, c = rotated[mesh.topology.triangles[face]]
        return np.cross(b - a, c - a)[2]

    expected = set()
    for (v0, v1), (f0, f1) in zip(mesh.topology.edges, mesh.topology.edge_faces):
        if (normal_z(f0) > 0) != (normal_z(f1) > 0):
            expected.update([int(v0), int(v1)])

    boundary = occluding_boundary(mesh, pose, (128, 128))
    assert boundary.indices.tolist() == sorted(expected)
    assert boundary.excluded == {}


def test_sphere_front_faces_cover_half():
    mesh = sphere_mesh(rings=8)
    nz = face_normal_z(mesh, centred_pose())
    assert 0.4 < np.mean(nz < 0) < 0.6


def test_rear_sphere_contour_is_occluded():
    front = sphere_mesh(rings=8, radius=10.0)
    rear = sphere_mesh(rings=8, radius=5.0, centre=(0.0, 0.0, 30.0))
    n = len(front.vertices)
    mesh = Mesh(
        vertices=np.vstack([front.vertices, rear.vertices]),
        topology=MeshTopology.from_triangles(
            np.vstack([front.topology.triangles, rear.topology.triangles + n]),
            2 * n,
        ),
    )
    pose = centred_pose(rotation=GENERIC)
    boundary = occluding_boundary(mesh, pose, (128, 128))

    assert boundary.count > 0
    assert boundary.indices.max() < n
    rear_reasons = {reason for vid, reason in boundary.excluded.items() if vid >= n}
    assert rear_reasons == {"occluded"}


def test_outside_image_vertices_are_excluded():
    mesh = sphere_mesh(rings=8)
    pose = Pose(rotation=GENERIC, translation=[0.0, 0.0], scale=3.0)
    depth = rasterize_depth(mesh, pose, (64, 64))
    visible, excluded = visible_vertices(mesh, pose, depth, np.arange(len(mesh.vertices)))
    assert "outside-image" in excluded.values()
    assert set(visible.tolist()).isdisjoint(excluded)


def occluder_buffer(near: float, clear: dict, size: int = 16) -> DepthBuffer:
    depth = np.full((size, size), near)
    for pixel, value in clear.items():
        depth[pixel] = value
    return DepthBuffer(depth=depth, triangle_ids=np.zeros((size, size), dtype=np.int64))


@pytest.mark.parametrize("neighbour, expected", [(np.inf, True), (10.0, True), (9.5, False)])
def test_vertex_behind_nearer_surface_uses_neighbourhood(neighbour, expected):
    mesh = triangle_soup([[5, 5, 10], [12, 5, 10], [5, 12, 10]])
    depth = occluder_buffer(near=2.0, clear={(5, 6): neighbour})

    visible, excluded = visible_vertices(mesh, Pose.identity(), depth, [0])

    assert (0 in visible.tolist()) is expected
    assert excluded == ({} if expected else {0: "occluded"})


def test_vertex_behind_whole_patch_is_occluded():
    mesh = triangle_soup([[5, 5, 10], [12, 5, 10], [5, 12, 10]])
    # only a pixel two steps away is clear
    depth = occluder_buffer(near=2.0, clear={(5, 7): np.inf})

    visible, excluded = visible_vertices(mesh, Pose.identity(), depth, [0])

    assert visible.size == 0
    assert excluded == {0: "occluded"}


def test_front_facing_filter_drops_far_side():
    mesh = sphere_mesh(rings=8)
    pose = centred_pose()
    depth = rasterize_depth(mesh, pose, (128, 128))
    ids = np.arange(len(mesh.vertices))
    plain, _ = visible_vertices(mesh, pose, depth, ids)
    facing, excluded = visible_vertices(mesh, pose, depth, ids, require_front_facing=True)
    assert set(facing.tolist()) <= set(plain.tolist())
    assert all(excluded[v] == "back-facing" for v in set(plain.tolist()) - set(facing.tolist()))


def test_contour_edges_invariant_to_view_flip():
    mesh = sphere_mesh(rings=8)
    pose = centred_pose()
    flipped = Pose(rotation=yaw_rotation(180) @ pose.rotation, translation=pose.translation, scale=pose.scale)
    assert np.array_equal(contour_edges(mesh, pose), contour_edges(mesh, flipped))


def test_boundary_is_deterministic():
    mesh = sphere_mesh(rings=8)
    pose = centred_pose()
    first = occluding_boundary(mesh, pose, (128, 128))
    second = occluding_boundary(mesh, pose, (128, 128))
    assert np.array_equal(first.indices, second.indices)
    assert first.excluded == second.excluded


def test_save_depth_pgm(tmp_path):
    mesh = sphere_mesh(rings=8)
    depth = rasterize_depth(mesh, centred_pose(), (128, 96))
    path = tmp_path / "depth.pgm"
    save_depth_pgm(depth, path)
    data = path.read_bytes()
    header = b"P5\n128 96\n65535\n"
    assert data.startswith(header)
    assert len(data) == len(header) + 2 * 128 * 96
