# coding=utf-8
"""Groundtruth generation: point annotations to density maps and attention targets."""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from extra.errors import DataError


logger = logging.getLogger(__name__)

CROWD_THRESHOLD = 1e-5
FALLBACK_SIGMA = 15.0
MIN_SIGMA = 1.0
KERNEL_RADIUS = 4.0
NUM_NEIGHBORS = 3


@dataclass
class PointAnnotation:
  """Head coordinates of one image. ``points`` is an (n, 2) array of (x, y) in pixel units."""

  image_id: str
  width: int
  height: int
  points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
  image_path: Optional[str] = None

  def __post_init__(self):
    self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)

  def __len__(self):
    return len(self.points)

  def validate(self) -> "PointAnnotation":
    if self.width < 1 or self.height < 1:
      raise DataError(f"Image {self.image_id!r} has invalid size {self.width}x{self.height}")
    if not np.all(np.isfinite(self.points)):
      raise DataError(f"Image {self.image_id!r} has non-finite point coordinates")
    xs, ys = self.points[:, 0], self.points[:, 1]
    bad = (xs < 0) | (xs >= self.width) | (ys < 0) | (ys >= self.height)
    if np.any(bad):
      x, y = self.points[np.argmax(bad)]
      raise DataError(
          f"Image {self.image_id!r}: point ({x}, {y}) outside the {self.width}x{self.height} image")
    return self


@dataclass
class DensityMap:
  raster: np.ndarray

  @property
  def count(self) -> float:
    return float(self.raster.sum())

  @property
  def shape(self) -> Tuple[int, int]:
    return self.raster.shape


@dataclass
class AttentionTargets:
  cam: np.ndarray
  fam: np.ndarray
  k: int
  thresholds: np.ndarray


def adaptive_sigmas(points, height: int, width: int) -> np.ndarray:
  """Per-head kernel width: mean distance to the 3 nearest other heads, clamped.

  With fewer than 4 heads the rule is undefined and every head gets ``FALLBACK_SIGMA``.
  """
  points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
  cap = max(MIN_SIGMA, 0.25 * min(height, width))
  if len(points) == 0:
    return np.zeros(0)
  if len(points) <= NUM_NEIGHBORS:
    sigmas = np.full(len(points), FALLBACK_SIGMA)
  else:
    tree = cKDTree(points)
    # the closest hit is the query point itself (distance 0)
    distances, _ = tree.query(points, k=NUM_NEIGHBORS + 1)
    sigmas = distances[:, 1:].mean(axis=1)
  return np.clip(sigmas, MIN_SIGMA, cap)


def _axis_kernel(center: float, sigma: float, size: int) -> Tuple[int, np.ndarray]:
  lo = max(0, int(np.floor(center - KERNEL_RADIUS * sigma)))
  hi = min(size, int(np.ceil(center + KERNEL_RADIUS * sigma)) + 1)
  coords = np.arange(lo, hi) + 0.5
  return lo, np.exp(-((coords - center) ** 2) / (2.0 * sigma * sigma))


def render_density(annotation: PointAnnotation, sigmas: Sequence[float]) -> DensityMap:
  """Rasterize one renormalized, ±4σ-truncated Gaussian per head.

  Pixel (r, c) is centred at (c + 0.5, r + 0.5). Each kernel is rescaled so its in-bounds sum is
  exactly one, hence the map integrates to the head count even at the borders.
  """
  sigmas = np.asarray(sigmas, dtype=np.float64)
  if len(sigmas) != len(annotation.points):
    raise ValueError(f"Got {len(sigmas)} sigmas for {len(annotation.points)} points")
  raster = np.zeros((annotation.height, annotation.width), dtype=np.float64)
  for (x, y), sigma in zip(annotation.points, sigmas):
    top, gy = _axis_kernel(y, sigma, annotation.height)
    left, gx = _axis_kernel(x, sigma, annotation.width)
    kernel = np.outer(gy, gx)
    total = kernel.sum()
    if total <= 0:
      raise DataError(f"Image {annotation.image_id!r}: empty kernel at ({x}, {y})")
    raster[top:top + len(gy), left:left + len(gx)] += kernel / total
  return DensityMap(raster)


def density_from_points(annotation: PointAnnotation) -> DensityMap:
  return render_density(annotation, adaptive_sigmas(annotation.points, annotation.height, annotation.width))


def make_cam(dm: DensityMap) -> np.ndarray:
  return (dm.raster >= CROWD_THRESHOLD).astype(np.uint8)


def compute_class_thresholds(dataset: Sequence[DensityMap], k: int) -> np.ndarray:
  """Equal-mass cutoffs of the pooled crowd pixel values, descending.

  Cutoff j is the linear quantile at j/(k-1) for j = 0..k-2, so the smallest cutoff is the
  minimum crowd value.
  """
  if k < 2:
    raise ValueError(f"k must be at least 2, got {k}")
  if len(dataset) == 0:
    raise ValueError("compute_class_thresholds needs at least one density map")
  values = np.concatenate([dm.raster[dm.raster >= CROWD_THRESHOLD].ravel() for dm in dataset])
  if values.size == 0:
    raise DataError("empty crowd support: no density value reaches the crowd threshold")
  quantiles = np.arange(k - 1) / (k - 1)
  return np.quantile(values, quantiles)[::-1].copy()


def make_fam(dm: DensityMap, thresholds, k: int) -> np.ndarray:
  """Class 0 for background; otherwise the number of cutoffs at or below the value, in [1, k-1]."""
  thresholds = np.asarray(thresholds, dtype=np.float64)
  if thresholds.shape != (k - 1,):
    raise ValueError(f"Expected {k - 1} thresholds for k={k}, got {thresholds.shape}")
  if np.any(np.diff(thresholds) > 0):
    raise ValueError("thresholds must be in descending order")
  ascending = thresholds[::-1]
  levels = np.searchsorted(ascending, dm.raster, side="right")
  levels = np.clip(levels, 1, k - 1)
  return np.where(dm.raster >= CROWD_THRESHOLD, levels, 0).astype(np.int64)


def make_targets(dm: DensityMap, thresholds, k: int) -> AttentionTargets:
  return AttentionTargets(
      cam=make_cam(dm), fam=make_fam(dm, thresholds, k), k=k, thresholds=np.asarray(thresholds))


def thresholds_for(annotations: List[PointAnnotation], k: int) -> np.ndarray:
  """Dataset-level cutoffs rendered from raw annotations."""
  maps = [density_from_points(a) for a in annotations]
  thresholds = compute_class_thresholds(maps, k)
  logger.info(f"Class thresholds for k={k} over {len(maps)} maps: {np.round(thresholds, 6).tolist()}")
  return thresholds
