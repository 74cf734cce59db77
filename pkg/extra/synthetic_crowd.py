# coding=utf-8
"""Deterministic synthetic crowd scenes and the dataset manifest reader/writer."""

import json
import logging
import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from extra.errors import DataError
from extra.groundtruth import PointAnnotation
from extra.raster_io import read_image, write_image


logger = logging.getLogger(__name__)

LAYOUTS = ("uniform", "clustered", "gradient")
BACKGROUNDS = ("flat", "textured-noise", "geometric-clutter")
HEAD_INTENSITY = (0.1, 0.25)
FLAT_LEVEL = 0.75


@dataclass
class SceneSpec:
  width: int = field(default=96, metadata={"help": "Scene width in pixels."})
  height: int = field(default=96, metadata={"help": "Scene height in pixels."})
  n_people: int = field(default=40, metadata={"help": "Exact number of heads placed in the scene."})
  layout: str = field(default="uniform", metadata={"help": f"Head placement, one of {LAYOUTS}."})
  n_clusters: int = field(default=3, metadata={"help": "Number of Gaussian groups for the clustered layout."})
  head_radius_range: Tuple[float, float] = field(default=(1.5, 3.0), metadata={"help": "Head radius range."})
  background: str = field(default="flat", metadata={"help": f"Background, one of {BACKGROUNDS}."})
  seed: int = field(default=0, metadata={"help": "Scene seed."})

  def __post_init__(self):
    if self.width < 1 or self.height < 1:
      raise ValueError(f"Scene size must be positive, got {self.width}x{self.height}")
    if self.layout not in LAYOUTS:
      raise ValueError(f"Unknown layout {self.layout!r}, expected one of {LAYOUTS}")
    if self.background not in BACKGROUNDS:
      raise ValueError(f"Unknown background {self.background!r}, expected one of {BACKGROUNDS}")
    if self.n_people < 0:
      raise ValueError(f"n_people must be non-negative, got {self.n_people}")
    if self.n_people > self.width * self.height / 4:
      raise ValueError(
          f"Cannot place {self.n_people} heads in a {self.width}x{self.height} scene "
          f"(at most {self.width * self.height // 4})")
    if self.n_clusters < 1:
      raise ValueError(f"n_clusters must be positive, got {self.n_clusters}")
    lo, hi = self.head_radius_range
    if not 1.0 <= lo <= hi:
      raise ValueError(f"head_radius_range must satisfy 1 <= low <= high, got {self.head_radius_range}")


@dataclass
class Sample:
  image: np.ndarray
  annotation: PointAnnotation
  cluster_counts: Optional[np.ndarray] = None

  @property
  def image_id(self) -> str:
    return self.annotation.image_id


def _uniform_points(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
  xs = rng.uniform(0, spec.width, spec.n_people)
  ys = rng.uniform(0, spec.height, spec.n_people)
  return np.stack([xs, ys], axis=1)


def _gradient_points(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
  # density grows linearly along x
  xs = spec.width * np.sqrt(rng.uniform(0, 1, spec.n_people))
  ys = rng.uniform(0, spec.height, spec.n_people)
  return np.stack([np.minimum(xs, np.nextafter(spec.width, 0)), ys], axis=1)


def _clustered_points(spec: SceneSpec, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
  """Gaussian groups; draws centres, spreads, then the multinomial split, in that order."""
  size = np.array([spec.width, spec.height], dtype=np.float64)
  centres = rng.uniform(0.15, 0.85, size=(spec.n_clusters, 2)) * size
  spreads = rng.uniform(0.05, 0.12, size=spec.n_clusters) * min(spec.width, spec.height)
  counts = rng.multinomial(spec.n_people, np.full(spec.n_clusters, 1.0 / spec.n_clusters))
  groups = []
  for centre, spread, count in zip(centres, spreads, counts):
    accepted = np.zeros((0, 2))
    while len(accepted) < count:
      draws = rng.normal(centre, spread, size=(2 * (count - len(accepted)) + 4, 2))
      inside = np.all((draws >= 0) & (draws < size), axis=1)
      accepted = np.concatenate([accepted, draws[inside]])[:count]
    groups.append(accepted)
  points = np.concatenate(groups) if groups else np.zeros((0, 2))
  return points, counts


def _background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
  h, w = spec.height, spec.width
  if spec.background == "flat":
    return np.full((h, w), FLAT_LEVEL)
  if spec.background == "textured-noise":
    noise = gaussian_filter(rng.normal(size=(h, w)), sigma=3.0, mode="reflect")
    noise /= max(np.abs(noise).max(), 1e-12)
    return np.clip(0.7 + 0.15 * noise, 0.45, 0.95)

  canvas = np.full((h, w), 0.7)
  rows, cols = np.mgrid[0:h, 0:w] + 0.5
  for _ in range(max(3, h * w // 800)):
    level = rng.uniform(0.4, 0.6)
    if rng.uniform() < 0.5:
      x0, y0 = rng.uniform(0, w), rng.uniform(0, h)
      x1, y1 = x0 + rng.uniform(4, w / 3), y0 + rng.uniform(4, h / 3)
      canvas[(cols >= x0) & (cols < x1) & (rows >= y0) & (rows < y1)] = level
    else:
      cx, cy, r = rng.uniform(0, w), rng.uniform(0, h), rng.uniform(3, min(h, w) / 6)
      canvas[(cols - cx) ** 2 + (rows - cy) ** 2 <= r * r] = level
  return canvas


def _paint_heads(canvas: np.ndarray, points: np.ndarray, spec: SceneSpec, rng: np.random.Generator):
  h, w = canvas.shape
  lo, hi = spec.head_radius_range
  for x, y in points:
    rx = rng.uniform(lo, hi)
    ry = 1.2 * rx
    shade = rng.uniform(*HEAD_INTENSITY)
    top, bottom = max(0, int(y - ry) - 1), min(h, int(y + ry) + 2)
    left, right = max(0, int(x - rx) - 1), min(w, int(x + rx) + 2)
    rr, cc = np.mgrid[top:bottom, left:right] + 0.5
    inside = ((cc - x) / rx) ** 2 + ((rr - y) / ry) ** 2 <= 1.0
    patch = canvas[top:bottom, left:right]
    patch[inside] = np.minimum(patch[inside], shade)


def generate_scene(spec: SceneSpec, image_id: Optional[str] = None) -> Sample:
  """Render dark elliptical heads over a background; a pure function of ``spec``."""
  rng = np.random.default_rng(spec.seed)
  cluster_counts = None
  if spec.layout == "clustered":
    points, cluster_counts = _clustered_points(spec, rng)
  elif spec.layout == "gradient":
    points = _gradient_points(spec, rng)
  else:
    points = _uniform_points(spec, rng)

  canvas = _background(spec, rng)
  _paint_heads(canvas, points, spec, rng)
  image = np.repeat(canvas[None].astype(np.float32), 3, axis=0)
  annotation = PointAnnotation(
      image_id=image_id or f"scene_{spec.seed}", width=spec.width, height=spec.height, points=points)
  return Sample(image=image, annotation=annotation.validate(), cluster_counts=cluster_counts)


def scene_specs(
    n_scenes: int,
    width: int,
    height: int,
    seed: int,
    backgrounds: Sequence[str] = ("flat", "textured-noise"),
    layouts: Sequence[str] = LAYOUTS,
    people_range: Tuple[int, int] = (20, 80),
) -> List[SceneSpec]:
  """Specs of a deterministic desk-scale set cycling through layouts and backgrounds."""
  rng = np.random.default_rng(seed)
  specs = []
  for i in range(n_scenes):
    specs.append(
        SceneSpec(
            width=width,
            height=height,
            n_people=int(rng.integers(people_range[0], people_range[1] + 1)),
            layout=layouts[i % len(layouts)],
            background=backgrounds[i % len(backgrounds)],
            seed=int(rng.integers(0, 2 ** 31 - 1)),
        ))
  return specs


def synthesize(specs: Sequence[SceneSpec], prefix: str = "scene", executor=None) -> List[Sample]:
  ids = [f"{prefix}_{i:04d}" for i in range(len(specs))]
  if executor is None:
    return [generate_scene(spec, image_id) for spec, image_id in zip(specs, ids)]
  return list(executor.map(generate_scene, specs, ids))


def write_dataset(samples: Sequence[Sample], out_dir: str, manifest_name: str = "manifest.json") -> str:
  """Write ``<id>.ppm`` images and a manifest; returns the manifest path."""
  os.makedirs(out_dir, exist_ok=True)
  entries = []
  for sample in samples:
    file_name = f"{sample.image_id}.ppm"
    write_image(os.path.join(out_dir, file_name), sample.image)
    ann = sample.annotation
    entries.append({
        "image": file_name,
        "width": int(ann.width),
        "height": int(ann.height),
        "points": ann.points.tolist(),
    })
  manifest_path = os.path.join(out_dir, manifest_name)
  with open(manifest_path, "w") as f:
    json.dump(entries, f, indent=2)
  logger.info(f"Wrote {len(entries)} samples to {out_dir}")
  return manifest_path


def load_dataset(manifest_path: str, input_channels: int = 3) -> List[Sample]:
  """Read a manifest of ``{"image", "width", "height", "points"}`` entries; image paths are
  relative to the manifest's directory."""
  with open(manifest_path) as f:
    try:
      entries = json.load(f)
    except json.JSONDecodeError as e:
      raise DataError(f"{manifest_path}: invalid JSON ({e})")
  if not isinstance(entries, list):
    raise DataError(f"{manifest_path}: expected a list of entries")
  root = os.path.dirname(os.path.abspath(manifest_path))
  samples = []
  for index, entry in enumerate(entries):
    try:
      image_name, width, height = entry["image"], int(entry["width"]), int(entry["height"])
      points = entry.get("points", [])
    except (KeyError, TypeError, ValueError) as e:
      raise DataError(f"{manifest_path}: malformed entry {index} ({e})")
    image_id = os.path.splitext(os.path.basename(image_name))[0]
    annotation = PointAnnotation(
        image_id=image_id, width=width, height=height, points=np.asarray(points, dtype=np.float64),
        image_path=os.path.join(root, image_name))
    annotation.validate()
    image = read_image(annotation.image_path, channels=input_channels)
    if image.shape[1:] != (height, width):
      raise DataError(
          f"Image {image_id!r} is {image.shape[2]}x{image.shape[1]}, manifest says {width}x{height}")
    samples.append(Sample(image=image, annotation=annotation))
  logger.info(f"Loaded {len(samples)} samples from {manifest_path}")
  return samples
