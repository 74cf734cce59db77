# coding=utf-8
import math

import numpy as np
import pytest

from extra.errors import DataError
from extra.groundtruth import (
    CROWD_THRESHOLD,
    FALLBACK_SIGMA,
    DensityMap,
    PointAnnotation,
    adaptive_sigmas,
    compute_class_thresholds,
    density_from_points,
    make_cam,
    make_fam,
    make_targets,
    render_density,
    thresholds_for,
)


def _brute_sigmas(points, height, width):
  points = np.asarray(points, dtype=np.float64)
  if len(points) < 4:
    sigmas = np.full(len(points), FALLBACK_SIGMA)
  else:
    d = np.sqrt(((points[:, None, :] - points[None, :, :]) ** 2).sum(-1))
    np.fill_diagonal(d, np.inf)
    sigmas = np.sort(d, axis=1)[:, :3].mean(axis=1)
  return np.clip(sigmas, 1.0, max(1.0, 0.25 * min(height, width)))


class TestPointAnnotation:

  def test_point_on_right_edge_rejected(self):
    ann = PointAnnotation("img_7", width=10, height=10, points=[[10.0, 3.0]])
    with pytest.raises(DataError, match="img_7"):
      ann.validate()

  def test_negative_rejected(self):
    with pytest.raises(DataError):
      PointAnnotation("a", 10, 10, [[1.0, -0.1]]).validate()

  def test_valid(self):
    ann = PointAnnotation("a", 10, 10, [[0.0, 0.0], [9.99, 9.99]]).validate()
    assert len(ann) == 2


class TestAdaptiveSigmas:

  def test_square_corners(self):
    points = [[10, 10], [20, 10], [10, 20], [20, 20]]
    sigmas = adaptive_sigmas(points, 100, 100)
    np.testing.assert_allclose(sigmas, (20 + math.sqrt(200)) / 3, atol=1e-9)
    assert sigmas[0] == pytest.approx(11.3807, abs=1e-4)

  def test_cap_applies(self):
    points = [[10, 10], [20, 10], [10, 20], [20, 20]]
    np.testing.assert_allclose(adaptive_sigmas(points, 40, 40), 10.0)

  def test_single_point_fallback(self):
    np.testing.assert_array_equal(adaptive_sigmas([[5, 5]], 200, 200), [FALLBACK_SIGMA])

  def test_fallback_is_clamped_too(self):
    np.testing.assert_array_equal(adaptive_sigmas([[5, 5]], 16, 16), [4.0])

  def test_coincident_points_floor(self):
    points = [[5.0, 5.0], [5.0, 5.0], [5.0, 5.0], [5.5, 5.0], [90.0, 90.0]]
    sigmas = adaptive_sigmas(points, 100, 100)
    assert sigmas[0] == 1.0
    np.testing.assert_allclose(sigmas, _brute_sigmas(points, 100, 100), atol=1e-9)

  @pytest.mark.parametrize("seed", range(5))
  def test_matches_brute_force(self, seed):
    rng = np.random.default_rng(seed)
    points = rng.uniform(0, 64, size=(int(rng.integers(1, 60)), 2))
    np.testing.assert_allclose(adaptive_sigmas(points, 64, 80), _brute_sigmas(points, 64, 80), atol=1e-9)

  def test_empty(self):
    assert adaptive_sigmas(np.zeros((0, 2)), 10, 10).shape == (0,)


class TestRenderDensity:

  def test_single_point_normalized(self):
    ann = PointAnnotation("a", 32, 24, [[3.2, 20.7]])
    dm = render_density(ann, [6.0])
    assert dm.count == pytest.approx(1.0, abs=1e-6)
    assert dm.raster.dtype == np.float64

  def test_empty(self):
    dm = density_from_points(PointAnnotation("a", 8, 8))
    assert dm.count == 0.0
    assert dm.shape == (8, 8)

  def test_corner_points(self):
    ann = PointAnnotation("a", 40, 40, [[0.5, 0.5], [1.0, 2.0], [2.5, 0.2]])
    assert density_from_points(ann).count == pytest.approx(3.0, abs=3e-3)

  def test_sigma_count_mismatch(self):
    with pytest.raises(ValueError):
      render_density(PointAnnotation("a", 8, 8, [[1, 1]]), [1.0, 2.0])

  def test_mass_conservation(self):
    rng = np.random.default_rng(0)
    for i in range(100):
      h, w = int(rng.integers(16, 97)), int(rng.integers(16, 97))
      n = int(rng.integers(1, 201))
      points = np.stack([rng.uniform(0, w, n), rng.uniform(0, h, n)], axis=1)
      dm = density_from_points(PointAnnotation(f"a{i}", w, h, points))
      assert abs(dm.count - n) <= 1e-3 * n


class TestCam:

  def test_zero_map(self):
    assert make_cam(DensityMap(np.zeros((4, 4)))).sum() == 0

  def test_threshold_inclusive(self):
    raster = np.zeros((3, 3))
    raster[1, 2] = CROWD_THRESHOLD
    cam = make_cam(DensityMap(raster))
    assert cam[1, 2] == 1 and cam.sum() == 1

  def test_rendered_gaussian_contains_peak(self):
    dm = render_density(PointAnnotation("a", 31, 31, [[15.5, 15.5]]), [3.0])
    cam = make_cam(dm)
    peak = np.unravel_index(np.argmax(dm.raster), dm.shape)
    assert cam[peak] == 1
    np.testing.assert_array_equal(cam, (dm.raster >= CROWD_THRESHOLD).astype(np.uint8))
    assert cam[0, 0] == 0 and cam[15, 15] == 1


class TestThresholds:

  def test_equal_counts_quintiles(self):
    values = np.repeat([0.1, 0.2, 0.3, 0.4, 0.5], 200)
    raster = values.reshape(20, 50)
    thresholds = compute_class_thresholds([DensityMap(raster)], 6)
    np.testing.assert_allclose(thresholds, [0.42, 0.34, 0.26, 0.18, 0.1], atol=1e-12)

  def test_identical_values(self):
    dm = DensityMap(np.full((4, 4), 0.3))
    thresholds = compute_class_thresholds([dm], 6)
    np.testing.assert_allclose(thresholds, 0.3)
    fam = make_fam(dm, thresholds, 6)
    np.testing.assert_array_equal(fam, 5)

  def test_k2_degenerates_to_cam(self):
    dm = density_from_points(PointAnnotation("a", 24, 24, [[4, 4], [12, 12], [20, 3], [7, 18]]))
    thresholds = compute_class_thresholds([dm], 2)
    assert thresholds.shape == (1,)
    assert thresholds[0] == dm.raster[dm.raster >= CROWD_THRESHOLD].min()
    np.testing.assert_array_equal(make_fam(dm, thresholds, 2), make_cam(dm))

  def test_empty_support(self):
    with pytest.raises(DataError, match="empty crowd support"):
      compute_class_thresholds([DensityMap(np.zeros((4, 4)))], 6)

  def test_descending(self):
    ann = PointAnnotation("a", 48, 48, np.random.default_rng(1).uniform(0, 48, size=(30, 2)))
    thresholds = thresholds_for([ann], 6)
    assert np.all(np.diff(thresholds) <= 0)


class TestFam:

  def test_background_class_zero(self):
    assert make_fam(DensityMap(np.full((1, 1), 1e-6)), [.4, .3, .2, .1, .01], 6)[0, 0] == 0

  def test_above_largest(self):
    assert make_fam(DensityMap(np.full((1, 1), 0.9)), [.4, .3, .2, .1, .01], 6)[0, 0] == 5

  def test_linear_scan_example(self):
    assert make_fam(DensityMap(np.full((1, 1), 0.25)), [.4, .3, .2, .1, .01], 6)[0, 0] == 3

  def test_tie_goes_up(self):
    assert make_fam(DensityMap(np.full((1, 1), 0.3)), [.4, .3, .2, .1, .01], 6)[0, 0] == 4

  def test_crowd_pixel_below_smallest_cutoff(self):
    assert make_fam(DensityMap(np.full((1, 1), 0.005)), [.4, .3, .2, .1, .01], 6)[0, 0] == 1

  def test_wrong_threshold_count(self):
    with pytest.raises(ValueError):
      make_fam(DensityMap(np.zeros((2, 2))), [0.2, 0.1], 6)

  def test_ascending_thresholds_rejected(self):
    with pytest.raises(ValueError):
      make_fam(DensityMap(np.zeros((2, 2))), [0.1, 0.2], 3)

  def test_targets_agree(self):
    dm = density_from_points(PointAnnotation("a", 32, 32, np.random.default_rng(2).uniform(0, 32, (20, 2))))
    thresholds = compute_class_thresholds([dm], 6)
    targets = make_targets(dm, thresholds, 6)
    np.testing.assert_array_equal(targets.cam == 1, targets.fam > 0)
    assert targets.fam.max() == 5
