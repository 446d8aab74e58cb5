import numpy as np
import pytest

from src.camera import sop
from src.contour import occluding_boundary
from src.edgemap import EdgeCostSurface, build_cost_surface, kappa_for_scale, sample_bilinear
from src.errors import DegenerateViewError
from src.fit_soft import SoftEdgeTerm, hybrid_fit_soft, soft_edge_energy
from src.landmark_fit import fit_landmarks
from src.models import BoundaryVertexSet, HybridWeights, SoftFitConfig
from src.shape_model import instantiate
from src.synth import framing_pose, render_scene

SIZE = 128


def smooth_surface(size=SIZE, kappa=4.0) -> EdgeCostSurface:
    yy, xx = np.mgrid[:size, :size]
    fields = 5.0 + 3.0 * np.sin(xx / 7.0) * np.cos(yy / 5.0)
    return EdgeCostSurface.from_fields(fields[None], kappa)


@pytest.fixture
def framed(small_model):
    alpha = np.zeros(small_model.n_components)
    mesh = instantiate(small_model, alpha)
    pose = framing_pose(mesh, -25.0, (SIZE, SIZE))
    return alpha, pose, occluding_boundary(mesh, pose, (SIZE, SIZE))


def test_constant_surface_energy(small_model, framed):
    alpha, pose, boundary = framed
    surface = EdgeCostSurface.from_fields(np.full((1, SIZE, SIZE), 2.0), kappa=2.0)
    assert soft_edge_energy(small_model, alpha, pose, surface, boundary) == pytest.approx(0.5)


def test_soft_energy_is_mean_sampled_cost(small_model, framed):
    alpha, pose, boundary = framed
    surface = smooth_surface()
    points = sop(instantiate(small_model, alpha).vertices[boundary.indices], pose)
    expected = np.mean(sample_bilinear(surface, points))
    assert soft_edge_energy(small_model, alpha, pose, surface, boundary) == pytest.approx(expected)


def test_soft_energy_empty_boundary(small_model, framed):
    alpha, pose, _ = framed
    empty = BoundaryVertexSet(indices=np.zeros(0, np.int64))
    with pytest.raises(DegenerateViewError):
        soft_edge_energy(small_model, alpha, pose, smooth_surface(), empty)


def test_soft_term_squares_to_cost(rng):
    surface = smooth_surface()
    points = rng.uniform(5, 120, size=(25, 2))
    residuals, _ = SoftEdgeTerm(surface).residuals(points)
    assert residuals.shape == (25, 1)
    assert np.allclose(residuals[:, 0] ** 2, sample_bilinear(surface, points))


def test_soft_term_derivative_matches_finite_differences(rng):
    surface = smooth_surface()
    term = SoftEdgeTerm(surface)
    # Keep away from cell borders where the bilinear surface has kinks.
    points = rng.integers(5, 120, size=(20, 2)) + rng.uniform(0.2, 0.8, size=(20, 2))
    _, derivative = term.residuals(points)
    h = 1e-6
    for axis in range(2):
        step = np.zeros(2)
        step[axis] = h
        plus, _ = term.residuals(points + step)
        minus, _ = term.residuals(points - step)
        fd = (plus - minus)[:, 0] / (2 * h)
        assert np.allclose(derivative[:, 0, axis], fd, rtol=1e-3, atol=1e-7)


def test_soft_term_is_flat_on_zero_cost():
    fields = np.full((1, 8, 8), 3.0)
    fields[0, 4, 4] = 0.0
    surface = EdgeCostSurface.from_fields(fields, kappa=1.0)
    residuals, derivative = SoftEdgeTerm(surface).residuals(np.array([[4.0, 4.0]]))
    assert residuals[0, 0] == 0.0
    assert np.all(np.isfinite(derivative))


def test_soft_with_landmark_weight_only_matches_landmark_fit(medium_model):
    alpha = np.zeros(medium_model.n_components)
    scene = render_scene(medium_model, alpha, -15.0, image_size=SIZE)
    landmark_fit = fit_landmarks(medium_model, scene.landmarks)

    config = SoftFitConfig(weights=HybridWeights(w1=1.0, w2=0.0, w3=0.0), outer_restarts=2)
    result = hybrid_fit_soft(
        medium_model, scene.landmarks, scene.image, (landmark_fit.alpha, landmark_fit.pose), config
    )
    assert result.method == "soft"
    assert result.energy <= landmark_fit.energy + 1e-9


def test_soft_fit_edge_cost_stays_in_unit_range(medium_model):
    alpha = np.zeros(medium_model.n_components)
    scene = render_scene(medium_model, alpha, 30.0, image_size=SIZE)
    landmark_fit = fit_landmarks(medium_model, scene.landmarks)

    config = SoftFitConfig(outer_restarts=2, inner_iters=15)
    result = hybrid_fit_soft(
        medium_model, scene.landmarks, scene.image, (landmark_fit.alpha, landmark_fit.pose), config
    )
    pose = result.pose()
    boundary = occluding_boundary(instantiate(medium_model, result.alpha_array()), pose, (SIZE, SIZE))
    kappa = kappa_for_scale(medium_model, pose.scale)
    surface = build_cost_surface(scene.image, config.thresholds, config.scales, kappa)
    assert 0 <= soft_edge_energy(medium_model, result.alpha_array(), pose, surface, boundary) < 1
    assert np.all(np.abs(result.alpha_array()) <= 3 * medium_model.std_devs + 1e-9)
    assert result.stages[0].name == "hybrid_round_1"
