import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from src.models import Mesh, MeshTopology, Pose
from src.shape_model import build_model
from src.synth import make_synthetic_model, uv_sphere

TETRAHEDRON = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_model():
    """4 vertices, 2 components, closed tetrahedron."""
    mean = np.array([0, 0, 0, 10, 0, 0, 0, 10, 0, 0, 0, 10], dtype=float)
    components = np.linspace(-1.0, 1.0, 24).reshape(12, 2)
    return build_model(mean, components, [4.0, 1.0], TETRAHEDRON)


@pytest.fixture(scope="session")
def small_model():
    return make_synthetic_model(n_vertices=128, n_components=6, seed=1)


@pytest.fixture(scope="session")
def medium_model():
    return make_synthetic_model(n_vertices=500, n_components=10, seed=0)


def random_pose(rng, scale=2.0, offset=100.0) -> Pose:
    return Pose(
        rotation=Rotation.from_rotvec(rng.normal(scale=0.4, size=3)).as_matrix(),
        translation=rng.uniform(offset - 10, offset + 10, size=2),
        scale=scale,
    )


def sphere_mesh(rings=8, radius=10.0, centre=(0.0, 0.0, 0.0)) -> Mesh:
    vertices, triangles = uv_sphere(rings)
    return Mesh(
        vertices=vertices * radius + np.asarray(centre),
        topology=MeshTopology.from_triangles(triangles, len(vertices)),
    )
