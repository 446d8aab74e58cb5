import struct

import numpy as np
import pytest

from src.errors import (
    DimensionInconsistencyError,
    DimensionMismatchError,
    InvalidArgumentError,
    MalformedHeaderError,
    MissingFileError,
    ModelValidationError,
    TopologyError,
)
from src.shape_model import (
    build_model,
    export_obj,
    instantiate,
    load_model,
    save_model,
    vertex_submatrix,
)
from test.conftest import TETRAHEDRON


def test_instantiate_zero_alpha_is_mean(toy_model):
    mesh = instantiate(toy_model, np.zeros(2))
    assert np.array_equal(mesh.flat, toy_model.mean_shape)
    assert mesh.vertices.shape == (4, 3)


def test_instantiate_is_linear(toy_model):
    alpha = np.array([0.5, -1.0])
    mesh = instantiate(toy_model, alpha)
    expected = toy_model.components @ alpha + toy_model.mean_shape
    assert np.allclose(mesh.flat, expected)


def test_instantiate_wrong_length(toy_model):
    with pytest.raises(DimensionMismatchError):
        instantiate(toy_model, np.zeros(3))


def test_vertex_submatrix(toy_model):
    p, f = vertex_submatrix(toy_model, 1)
    assert p.shape == (3, 2)
    assert np.array_equal(f, [10.0, 0.0, 0.0])
    alpha = np.array([1.0, 2.0])
    assert np.allclose(p @ alpha + f, instantiate(toy_model, alpha).vertices[1])

    with pytest.raises(InvalidArgumentError):
        vertex_submatrix(toy_model, 4)


def test_binary_round_trip_keeps_landmarks(tmp_path, small_model):
    path = tmp_path / "model.e3dm"
    save_model(small_model, path)
    loaded = load_model(path)

    assert np.array_equal(loaded.mean_shape, small_model.mean_shape)
    assert np.array_equal(loaded.components, small_model.components)
    assert np.array_equal(loaded.variances, small_model.variances)
    assert np.array_equal(loaded.triangles, small_model.triangles)
    assert np.array_equal(loaded.landmark_ids, small_model.landmark_ids)


def test_json_round_trip(tmp_path, toy_model):
    path = tmp_path / "model.json"
    save_model(toy_model, path)
    loaded = load_model(path)
    assert np.array_equal(loaded.components, toy_model.components)
    assert loaded.landmark_ids.size == 0


def test_bad_magic_names_field(tmp_path, toy_model):
    path = tmp_path / "model.e3dm"
    save_model(toy_model, path)
    data = bytearray(path.read_bytes())
    data[:4] = b"XXXX"
    path.write_bytes(bytes(data))

    with pytest.raises(MalformedHeaderError) as exc:
        load_model(path)
    assert exc.value.field == "magic"


def test_truncated_file(tmp_path, toy_model):
    path = tmp_path / "model.e3dm"
    save_model(toy_model, path)
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(DimensionInconsistencyError) as exc:
        load_model(path)
    assert exc.value.field == "triangles"


def test_short_header(tmp_path):
    path = tmp_path / "model.e3dm"
    path.write_bytes(b"E3DM" + struct.pack("<I", 1))
    with pytest.raises(MalformedHeaderError):
        load_model(path)


def test_trailing_garbage(tmp_path, toy_model):
    path = tmp_path / "model.e3dm"
    save_model(toy_model, path)
    path.write_bytes(path.read_bytes() + b"junk!")
    with pytest.raises(DimensionInconsistencyError):
        load_model(path)


def test_missing_file(tmp_path):
    with pytest.raises(MissingFileError):
        load_model(tmp_path / "nope.e3dm")


def test_increasing_variances_rejected(toy_model):
    with pytest.raises(ModelValidationError) as exc:
        build_model(toy_model.mean_shape, toy_model.components, [1.0, 4.0], TETRAHEDRON)
    assert exc.value.field == "variances"


def test_non_positive_variance_rejected(toy_model):
    with pytest.raises(ModelValidationError):
        build_model(toy_model.mean_shape, toy_model.components, [1.0, 0.0], TETRAHEDRON)


def test_component_rows_must_match(toy_model):
    with pytest.raises(DimensionInconsistencyError):
        build_model(toy_model.mean_shape, toy_model.components[:9], [4.0, 1.0], TETRAHEDRON)


def test_triangle_index_out_of_range(toy_model):
    with pytest.raises(ModelValidationError):
        build_model(toy_model.mean_shape, toy_model.components, [4.0, 1.0], [[0, 1, 7]])


def test_non_manifold_edge_rejected():
    mean = np.zeros(15)
    components = np.eye(15)[:, :1]
    # Edge (0, 1) shared by three triangles.
    triangles = [[0, 1, 2], [1, 0, 3], [0, 1, 4]]
    with pytest.raises(TopologyError):
        build_model(mean, components, [1.0], triangles)


def test_topology_edge_faces(toy_model):
    topo = toy_model.topology
    assert len(topo.edges) == 6
    assert np.all(topo.edge_faces >= 0)


def test_export_obj_is_one_based(tmp_path, toy_model):
    path = tmp_path / "mesh.obj"
    export_obj(instantiate(toy_model, np.zeros(2)), path)
    lines = path.read_text().splitlines()
    assert sum(line.startswith("v ") for line in lines) == 4
    assert "f 1 2 3" in lines
