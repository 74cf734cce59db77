# coding=utf-8
import json

import numpy as np
import pytest
from scipy.ndimage import median_filter

from extra.errors import DataError
from extra.synthetic_crowd import (
    BACKGROUNDS,
    FLAT_LEVEL,
    SceneSpec,
    generate_scene,
    load_dataset,
    scene_specs,
    synthesize,
    write_dataset,
)


class TestSceneSpec:

  def test_too_many_people(self):
    with pytest.raises(ValueError):
      SceneSpec(width=8, height=8, n_people=17)

  @pytest.mark.parametrize("kwargs", [{"layout": "spiral"}, {"background": "sky"}, {"n_people": -1},
                                      {"head_radius_range": (0.5, 2.0)}])
  def test_invalid(self, kwargs):
    with pytest.raises(ValueError):
      SceneSpec(**kwargs)


class TestGenerateScene:

  def test_empty_flat(self):
    sample = generate_scene(SceneSpec(width=16, height=12, n_people=0, background="flat"))
    assert len(sample.annotation) == 0
    assert sample.image.shape == (3, 12, 16)
    np.testing.assert_array_equal(sample.image, np.float32(FLAT_LEVEL))

  @pytest.mark.parametrize("layout", ["uniform", "clustered", "gradient"])
  @pytest.mark.parametrize("background", ["flat", "textured-noise", "geometric-clutter"])
  def test_deterministic_and_in_bounds(self, layout, background):
    spec = SceneSpec(width=40, height=32, n_people=60, layout=layout, background=background, seed=11)
    a, b = generate_scene(spec), generate_scene(spec)
    assert a.image.tobytes() == b.image.tobytes()
    assert a.annotation.points.tobytes() == b.annotation.points.tobytes()
    assert len(a.annotation) == 60
    a.annotation.validate()
    assert a.image.min() >= 0.0 and a.image.max() <= 1.0

  @pytest.mark.parametrize("background", BACKGROUNDS)
  def test_heads_darker_than_local_background(self, background):
    darker, total = 0, 0
    for seed in range(3):
      sample = generate_scene(SceneSpec(width=96, height=96, n_people=30, background=background, seed=seed))
      local_median = median_filter(sample.image[0], size=15, mode="reflect")
      for x, y in sample.annotation.points:
        row, col = int(y), int(x)
        darker += sample.image[0, row, col] < local_median[row, col]
        total += 1
    assert darker >= 0.95 * total

  def test_cluster_counts_follow_multinomial(self):
    spec = SceneSpec(width=96, height=96, n_people=200, layout="clustered", n_clusters=3, seed=5)
    sample = generate_scene(spec)
    rng = np.random.default_rng(5)
    rng.uniform(0.15, 0.85, size=(3, 2))
    rng.uniform(0.05, 0.12, size=3)
    expected = rng.multinomial(200, np.full(3, 1.0 / 3))
    np.testing.assert_array_equal(sample.cluster_counts, expected)
    assert sample.cluster_counts.sum() == 200

  def test_gradient_denser_on_right(self):
    sample = generate_scene(SceneSpec(width=64, height=64, n_people=400, layout="gradient", seed=0))
    xs = sample.annotation.points[:, 0]
    assert (xs >= 32).sum() > 2 * (xs < 32).sum()


class TestSceneSpecs:

  def test_cycles_layouts_and_backgrounds(self):
    specs = scene_specs(6, 48, 40, seed=1)
    assert [s.layout for s in specs[:3]] == ["uniform", "clustered", "gradient"]
    assert [s.background for s in specs[:2]] == ["flat", "textured-noise"]
    assert all(20 <= s.n_people <= 80 for s in specs)
    assert specs == scene_specs(6, 48, 40, seed=1)

  def test_synthesize_ids(self):
    samples = synthesize(scene_specs(2, 24, 24, seed=0, people_range=(3, 5)), prefix="train")
    assert [s.image_id for s in samples] == ["train_0000", "train_0001"]


class TestDataset:

  def test_round_trip(self, tmp_path):
    samples = synthesize(scene_specs(3, 32, 24, seed=2, people_range=(5, 10)))
    manifest = write_dataset(samples, str(tmp_path))
    loaded = load_dataset(manifest)
    assert len(loaded) == 3
    for original, restored in zip(samples, loaded):
      assert restored.image_id == original.image_id
      np.testing.assert_array_equal(restored.annotation.points, original.annotation.points)
      np.testing.assert_allclose(restored.image, original.image, atol=1 / 255)

  def _manifest(self, tmp_path, entries):
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(entries))
    return str(path)

  def test_point_on_width_rejected(self, tmp_path):
    samples = synthesize(scene_specs(1, 16, 16, seed=0, people_range=(1, 1)))
    write_dataset(samples, str(tmp_path))
    manifest = self._manifest(tmp_path, [{"image": "scene_0000.ppm", "width": 16, "height": 16, "points": [[16, 3]]}])
    with pytest.raises(DataError, match="scene_0000"):
      load_dataset(manifest)

  def test_missing_image(self, tmp_path):
    manifest = self._manifest(tmp_path, [{"image": "nope.ppm", "width": 16, "height": 16, "points": []}])
    with pytest.raises(FileNotFoundError):
      load_dataset(manifest)

  def test_malformed_entry(self, tmp_path):
    with pytest.raises(DataError):
      load_dataset(self._manifest(tmp_path, [{"width": 16}]))

  def test_size_mismatch(self, tmp_path):
    samples = synthesize(scene_specs(1, 16, 16, seed=0, people_range=(1, 1)))
    write_dataset(samples, str(tmp_path))
    manifest = self._manifest(tmp_path, [{"image": "scene_0000.ppm", "width": 24, "height": 16, "points": []}])
    with pytest.raises(DataError):
      load_dataset(manifest)

  def test_invalid_json(self, tmp_path):
    path = tmp_path / "manifest.json"
    path.write_text("{not json")
    with pytest.raises(DataError):
      load_dataset(str(path))
