import numpy as np
import pytest
from PIL import Image

from src.edgemap import (
    MAX_COST,
    EdgeCostSurface,
    EdgeSet,
    build_cost_surface,
    build_distance_fields,
    canny_edges,
    distance_transform,
    kappa_for_scale,
    load_image,
    sample_bilinear,
    sample_bilinear_with_gradient,
    save_edges_pgm,
    save_image,
)
from src.errors import InvalidArgumentError, NoEdgesError
from src.models import GrayImage


def disk_image(size=128, radius=20.0) -> GrayImage:
    yy, xx = np.mgrid[:size, :size]
    centre = (size - 1) / 2
    inside = np.hypot(xx - centre, yy - centre) <= radius
    return GrayImage(pixels=inside.astype(np.float64))


def test_step_edge_is_one_column():
    pixels = np.zeros((32, 32))
    pixels[:, 16:] = 1.0
    edges = canny_edges(GrayImage(pixels=pixels))

    columns = np.unique(edges.pixels[:, 0])
    assert len(columns) == 1
    assert columns[0] in (15, 16)
    assert len(edges) == 32


def test_constant_image_has_no_edges():
    edges = canny_edges(GrayImage(pixels=np.full((20, 20), 0.5)))
    assert edges.empty


def test_disk_edges_follow_the_circle():
    radius = 20.0
    edges = canny_edges(disk_image(radius=radius))
    centre = (128 - 1) / 2
    dist = np.hypot(edges.pixels[:, 0] - centre, edges.pixels[:, 1] - centre)

    assert np.all(np.abs(dist - radius) <= 1.5)
    perimeter = 2 * np.pi * radius
    assert 0.7 * perimeter <= len(edges) <= 1.3 * perimeter


def test_canny_rejects_bad_thresholds():
    image = GrayImage(pixels=np.zeros((8, 8)))
    with pytest.raises(InvalidArgumentError):
        canny_edges(image, low=0.3, high=0.1)
    with pytest.raises(InvalidArgumentError):
        canny_edges(GrayImage(pixels=np.zeros((0, 0))))


def test_nearest_edge_example():
    edges = EdgeSet(np.array([[0, 0], [10, 0]]), 16, 16)
    pixel, distance = edges.nearest_edge(np.array([3.0, 4.0]))
    assert pixel == (0, 0)
    assert distance == pytest.approx(5.0)


def test_nearest_matches_brute_force(rng):
    pixels = rng.integers(0, 64, size=(50, 2))
    edges = EdgeSet(pixels, 64, 64)
    queries = rng.uniform(-5, 70, size=(200, 2))

    matched, distances = edges.nearest(queries)
    brute = np.min(np.linalg.norm(queries[:, None, :] - pixels[None, :, :], axis=2), axis=1)
    assert np.allclose(distances, brute)
    assert np.allclose(np.linalg.norm(queries - matched, axis=1), brute)


def test_nearest_on_empty_set():
    edges = EdgeSet(np.zeros((0, 2)), 8, 8)
    with pytest.raises(NoEdgesError):
        edges.nearest(np.zeros((1, 2)))


def test_edge_pixel_outside_image_rejected():
    with pytest.raises(InvalidArgumentError):
        EdgeSet(np.array([[8, 0]]), 8, 8)


def test_distance_transform_example():
    mask = np.zeros((5, 5), dtype=bool)
    mask[2, 2] = True
    dist = distance_transform(mask)
    assert dist[2, 2] == 0
    assert dist[0, 0] == pytest.approx(np.hypot(2, 2))
    assert dist[2, 4] == pytest.approx(2.0)


def test_distance_transform_empty_is_infinite():
    assert np.all(np.isinf(distance_transform(np.zeros((4, 4), dtype=bool))))


def test_distance_transform_matches_brute_force(rng):
    mask = rng.random((24, 24)) < 0.03
    mask[5, 5] = True
    dist = distance_transform(mask)

    ys, xs = np.nonzero(mask)
    yy, xx = np.mgrid[:24, :24]
    brute = np.min(np.hypot(yy[..., None] - ys, xx[..., None] - xs), axis=-1)
    assert np.allclose(dist, brute)


def test_cost_surface_limits():
    mask = np.zeros((16, 16), dtype=bool)
    mask[8, 8] = True
    fields = distance_transform(mask)[None]

    loose = EdgeCostSurface.from_fields(fields, kappa=1e6)
    assert loose.values.max() < 1e-4
    tight = EdgeCostSurface.from_fields(fields, kappa=1e-6)
    assert tight.values[8, 8] == 0
    assert tight.values[0, 0] > 0.999


def test_cost_surface_without_edges_saturates_below_one():
    fields = np.full((2, 4, 4), np.inf)
    surface = EdgeCostSurface.from_fields(fields, kappa=3.0)
    assert np.all(surface.values == MAX_COST)
    assert np.all(surface.values < 1.0)
    assert surface.values.max() == pytest.approx(1.0)


def test_cost_surface_stays_below_one_far_from_edges():
    mask = np.zeros((8, 8), dtype=bool)
    mask[0, 0] = True
    fields = np.stack([distance_transform(mask), np.full((8, 8), np.inf)])
    surface = EdgeCostSurface.from_fields(fields, kappa=1e-300)
    assert surface.values[0, 0] == pytest.approx(0.5)
    assert np.all(surface.values < 1.0)


def test_cost_surface_averages_fields():
    a = np.full((4, 4), 1.0)
    b = np.full((4, 4), 3.0)
    surface = EdgeCostSurface.from_fields(np.stack([a, b]), kappa=1.0)
    assert np.allclose(surface.values, (0.5 + 0.75) / 2)
    assert surface.n == 2


def test_build_cost_surface_composes_all_pairs():
    surface = build_cost_surface(disk_image(), [0.1, 0.3], [1.0, 0.5], kappa=5.0)
    assert surface.fields.shape == (4, 128, 128)
    assert surface.values.shape == (128, 128)
    assert surface.values.min() >= 0
    assert surface.values.max() < 1
    # On the circle the cost is lower than at the image centre.
    assert sample_bilinear(surface, [[63.5 + 20, 63.5]])[0] < surface.values[64, 64]


def test_with_kappa_keeps_fields():
    surface = build_cost_surface(disk_image(), [0.2], [1.0], kappa=2.0)
    wider = surface.with_kappa(8.0)
    assert np.array_equal(wider.fields, surface.fields)
    assert np.all(wider.values <= surface.values + 1e-12)


def test_coarse_distances_are_in_full_resolution_pixels():
    image = disk_image()
    fine, coarse = build_distance_fields(image, [0.2], [1.0, 0.5])
    centre = 64
    assert coarse[centre, centre] == pytest.approx(fine[centre, centre], abs=2.5)


def test_distance_fields_reject_bad_scale():
    with pytest.raises(InvalidArgumentError):
        build_distance_fields(disk_image(), [0.2], [1.5])


def test_kappa_for_scale(small_model):
    height = np.ptp(small_model.mean_vertices[:, 1])
    assert kappa_for_scale(small_model, 2.0) == pytest.approx(2.0 * height / 20)


def test_bilinear_examples():
    grid = np.arange(12, dtype=np.float64).reshape(3, 4)
    values, grads = sample_bilinear_with_gradient(grid, [[1.5, 0.5], [3.0, 2.0]])
    assert np.allclose(values, [3.5, 11.0])
    assert np.allclose(grads, [[1.0, 4.0], [1.0, 4.0]])


def test_bilinear_clamps_outside():
    grid = np.arange(12, dtype=np.float64).reshape(3, 4)
    values, grads = sample_bilinear_with_gradient(grid, [[-3.0, 1.0], [1.0, 9.0]])
    assert np.allclose(values, [4.0, 9.0])
    assert np.allclose(grads, [[0.0, 4.0], [1.0, 0.0]])


def test_bilinear_gradient_matches_finite_differences(rng):
    grid = rng.random((20, 20))
    points = rng.uniform(1, 18, size=(30, 2))
    _, grads = sample_bilinear_with_gradient(grid, points)
    h = 1e-6
    for axis in range(2):
        step = np.zeros(2)
        step[axis] = h
        fd = (sample_bilinear(grid, points + step) - sample_bilinear(grid, points - step)) / (2 * h)
        assert np.allclose(grads[:, axis], fd, atol=1e-5)


def test_image_round_trip_8bit(tmp_path, rng):
    pixels = np.round(rng.random((10, 12)) * 255) / 255
    path = tmp_path / "image.png"
    save_image(GrayImage(pixels=pixels), path)
    loaded = load_image(path)
    assert loaded.size == (12, 10)
    assert np.allclose(loaded.pixels, pixels)


def test_load_16bit_png(tmp_path):
    raw = np.array([[0, 65535], [32768, 1000]], dtype=np.uint16)
    path = tmp_path / "deep.png"
    Image.fromarray(raw).save(path)
    loaded = load_image(path)
    assert np.allclose(loaded.pixels, raw / 65535.0)


def test_save_edges_pgm(tmp_path):
    edges = EdgeSet(np.array([[1, 2], [3, 0]]), 5, 4)
    path = tmp_path / "edges.pgm"
    save_edges_pgm(edges, path)
    with Image.open(path) as im:
        mask = np.asarray(im) > 0
    assert np.array_equal(mask, edges.mask())
