import itertools

import numpy as np
import pytest

from shiftwarp import baselines
from shiftwarp.errors import ContractError, SpecError


def gray(values) -> np.ndarray:
    """Lift an HxW luminance array into an HxWx3 uint8 image."""
    arr = np.asarray(values, dtype=np.uint8)
    return np.repeat(arr[:, :, None], 3, axis=2)


def random_image(rng, h, w):
    return rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)


# -- energy ------------------------------------------------------------------

def test_energy_shape_and_sign():
    rng = np.random.default_rng(0)
    img = random_image(rng, 6, 9)
    e = baselines.energy_map(img)
    assert e.values.shape == (6, 9)
    assert e.values.min() >= 0.0


def test_energy_forward_differences():
    img = gray([[0, 255, 0], [0, 255, 0]])
    e = baselines.energy_map(img).values
    assert e[0, 0] == pytest.approx(1.0)   # |dx| only, |dy| = 0
    assert e[0, 2] == pytest.approx(0.0)   # replicated border: both diffs 0
    assert e[1, 1] == pytest.approx(1.0)   # last row: |dy| = 0, |dx| = 1


def test_energy_constant_image_is_zero():
    e = baselines.energy_map(gray(np.full((5, 7), 90)))
    assert np.all(e.values == 0.0)


def test_energy_rejects_bad_input():
    with pytest.raises(ContractError):
        baselines.energy_map(np.zeros((4, 4, 3)))
    with pytest.raises(ContractError):
        baselines.EnergyMap(np.array([[-1.0, 0.0]]))


# -- linear scaling ----------------------------------------------------------

def test_linear_scale_identity():
    rng = np.random.default_rng(1)
    img = random_image(rng, 5, 8)
    assert np.array_equal(baselines.linear_scale(img, 8), img)


def test_linear_scale_constant_image():
    img = gray(np.full((4, 10), 77))
    out = baselines.linear_scale(img, 6)
    assert out.shape == (4, 6, 3)
    assert np.all(out == 77)


def test_linear_scale_half_pixel_example():
    img = gray([[10, 20, 30, 40]])
    out = baselines.linear_scale(img, 2)
    assert out[0, :, 0].tolist() == [15, 35]


def test_linear_scale_upscale_width():
    img = gray([[0, 255]])
    out = baselines.linear_scale(img, 4)
    assert out.shape == (1, 4, 3)
    assert out[0, 0, 0] == 0 and out[0, 3, 0] == 255


def test_linear_scale_rejects_zero_width():
    with pytest.raises(SpecError):
        baselines.linear_scale(gray([[1, 2]]), 0)


# -- crops -------------------------------------------------------------------

def test_center_crop_offset():
    img = gray([np.arange(7)])
    out = baselines.center_crop(img, 3)
    assert out[0, :, 0].tolist() == [2, 3, 4]  # left offset (7-3)//2 = 2


def test_crop_rejects_wider_than_source():
    img = gray([[1, 2, 3]])
    for crop in (baselines.center_crop, baselines.edge_crop):
        with pytest.raises(ContractError):
            crop(img, 4)


def test_edge_crop_finds_energy_block():
    row = np.zeros(10, dtype=np.uint8)
    row[0:3] = 200  # gradients live at the left edge
    img = gray(np.tile(row, (4, 1)))
    out = baselines.edge_crop(img, 4)
    assert np.array_equal(out, img[:, 0:4])


def test_edge_crop_uniform_energy_ties_leftmost():
    img = gray(np.full((3, 8), 50))
    assert np.array_equal(baselines.edge_crop(img, 4), img[:, 0:4])
    assert np.array_equal(baselines.center_crop(img, 4), img[:, 2:6])


def test_edge_crop_matches_exhaustive_argmax():
    rng = np.random.default_rng(7)
    for _ in range(25):
        img = random_image(rng, 5, 8)
        e = baselines.energy_map(img).values
        sums = [e[:, k:k + 4].sum() for k in range(5)]
        best = int(np.argmax(sums))
        assert np.array_equal(baselines.edge_crop(img, 4), img[:, best:best + 4])


def test_edge_crop_dominates_center_crop():
    rng = np.random.default_rng(8)
    for _ in range(25):
        img = random_image(rng, 6, 11)
        e = baselines.energy_map(img).values
        center = baselines.center_crop(img, 5)
        edge = baselines.edge_crop(img, 5)

        def window_sum(cropped):
            for k in range(11 - 5 + 1):
                if np.array_equal(cropped, img[:, k:k + 5]):
                    return e[:, k:k + 5].sum()
            raise AssertionError("crop is not a window of the source")

        assert window_sum(edge) >= window_sum(center)


# -- seam carving ------------------------------------------------------------

def test_cumulative_cost_hand_table():
    e = baselines.EnergyMap(np.array([[1.0, 2, 3], [4, 1, 6], [7, 8, 1]]))
    m = baselines.cumulative_cost(e)
    assert np.array_equal(m, [[1, 2, 3], [5, 2, 8], [9, 10, 3]])
    seam = baselines.find_seam(e)
    assert seam.cols.tolist() == [0, 1, 2]
    assert m[-1].min() == 3.0


def test_seam_validation():
    with pytest.raises(ContractError):
        baselines.Seam(np.array([0, 2, 1]))


def test_uniform_energy_removes_leftmost_column():
    flat = gray(np.full((4, 6), 30))
    carved = baselines.seam_carve(flat, 5)
    assert carved.shape == (4, 5, 3)
    assert np.all(carved == 30)
    seam = baselines.find_seam(baselines.energy_map(flat))
    assert seam.cols.tolist() == [0, 0, 0, 0]


def test_seam_carve_output_width_and_rows():
    rng = np.random.default_rng(9)
    img = random_image(rng, 6, 9)
    out = baselines.seam_carve(img, 4)
    assert out.shape == (6, 4, 3)
    for r in range(6):
        src = img[r, :, 0].tolist()
        kept = out[r, :, 0].tolist()
        it = iter(src)
        assert all(any(v == w for w in it) for v in kept)  # order preserved


def _all_seam_costs(e: np.ndarray):
    h, w = e.shape
    best = np.inf
    for start in range(w):
        stack = [(start, e[0, start], (start,))]
        while stack:
            c, cost, path = stack.pop()
            r = len(path)
            if r == h:
                best = min(best, cost)
                continue
            for nc in (c - 1, c, c + 1):
                if 0 <= nc < w:
                    stack.append((nc, cost + e[r, nc], path + (nc,)))
    return best


def test_seam_cost_matches_exhaustive_minimum():
    rng = np.random.default_rng(10)
    for _ in range(100):
        h, w = int(rng.integers(2, 7)), int(rng.integers(2, 7))
        e = rng.uniform(0.0, 1.0, size=(h, w))
        m = baselines.cumulative_cost(baselines.EnergyMap(e))
        assert m[-1].min() == pytest.approx(_all_seam_costs(e), rel=1e-12)


def test_single_removal_matches_brute_force():
    rng = np.random.default_rng(11)
    img = random_image(rng, 6, 6)
    e = baselines.energy_map(img)
    seam = baselines.find_seam(e)
    cost = e.values[np.arange(6), seam.cols].sum()
    paths = itertools.product(range(6), *[(-1, 0, 1)] * 5)
    best = np.inf
    for p in paths:
        cols = np.concatenate([[p[0]], p[0] + np.cumsum(p[1:])])
        if cols.min() < 0 or cols.max() >= 6:
            continue
        best = min(best, e.values[np.arange(6), cols].sum())
    assert cost == pytest.approx(best, rel=1e-12)


def test_seam_carve_rejects_bad_widths():
    img = gray(np.zeros((3, 3)))
    with pytest.raises(SpecError):
        baselines.seam_carve(img, 0)
    with pytest.raises(ContractError):
        baselines.seam_carve(img, 5)
