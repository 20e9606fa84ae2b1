import math

import numpy as np
import pytest

from htprior import detector, hough
from htprior.dataset import render_line
from htprior.errors import ConfigurationError
from htprior.hough import LineParam


@pytest.fixture(scope="module")
def grid():
    return hough.build_grid(100, 100)


def recovered(grid, found, truth):
    return detector.bins_close(grid, detector.nearest_bin(grid, found.rho, found.theta),
                               detector.nearest_bin(grid, truth.rho, truth.theta))


def test_single_rendered_line(grid):
    img = np.zeros((100, 100), np.uint8)
    render_line(img, (0, 50), (99, 50))
    top = detector.detect_lines(img, k=1)[0]
    assert recovered(grid, top, LineParam(0.5, math.pi / 2))


def test_blank_image(grid):
    lines = detector.detect_lines(np.zeros((100, 100)), k=3)
    assert len(lines) == 3 and all(p.score == 0 for p in lines)


def test_two_perpendicular_lines(grid):
    img = np.zeros((100, 100), np.uint8)
    a, b = LineParam(-20.0, math.pi / 4), LineParam(15.0, 3 * math.pi / 4)
    img |= detector.rasterize_line(a, grid)
    img |= detector.rasterize_line(b, grid)
    found = detector.detect_lines(img, k=2)
    assert any(recovered(grid, f, a) for f in found)
    assert any(recovered(grid, f, b) for f in found)


def test_scores_non_increasing(rng, grid):
    img = (rng.uniform(size=(100, 100)) < 0.05).astype(np.uint8)
    scores = [p.score for p in detector.detect_lines(img, k=10)]
    assert scores == sorted(scores, reverse=True)


def test_k_must_be_positive():
    with pytest.raises(ConfigurationError):
        detector.detect_lines(np.zeros((10, 10)), k=0)


def test_rasterize_center_horizontal(grid):
    r = detector.rasterize_line(LineParam(0.0, math.pi / 2), grid)
    # y_c = 0 falls between rows 49 and 50; rounding half up picks row 50
    assert r[50].sum() == 100 and r.sum() == 100


def test_rasterize_rejects_far_offset(grid):
    with pytest.raises(ConfigurationError):
        detector.rasterize_line(LineParam(grid.diagonal / 2 + 1, 0.3), grid)


def test_nearest_bin_wraps(grid):
    assert detector.nearest_bin(grid, 10.0, math.pi + 0.2) == detector.nearest_bin(grid, -10.0, 0.2)
    r, t = detector.nearest_bin(grid, 5.0, math.pi - 1e-4)
    assert t == 0 and r == grid.rho_bin(-5.0)


def test_bins_close_across_seam(grid):
    assert detector.bins_close(grid, (100, 0), (grid.n_rho - 1 - 100, grid.n_theta - 1))
    assert not detector.bins_close(grid, (100, 0), (100, 30))


def test_round_trip(grid):
    rng = np.random.default_rng(2024)
    hits = 0
    for _ in range(100):
        truth = LineParam(float(rng.uniform(-35, 35)), float(rng.uniform(0, math.pi)))
        top = detector.detect_lines(detector.rasterize_line(truth, grid), k=1)[0]
        hits += recovered(grid, top, truth)
    assert hits >= 99
