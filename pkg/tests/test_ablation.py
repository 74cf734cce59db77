# coding=utf-8
import json

import pytest

from extra.ablation import AXES, COLUMNS, format_table, run_ablation, write_ablation
from extra.cfanet_trainer import TrainConfig
from extra.synthetic_crowd import scene_specs, synthesize
from models.modeling_cfanet import ModelConfig


@pytest.fixture
def data():
  train = synthesize(scene_specs(2, 32, 32, seed=0, people_range=(6, 12)), prefix="train")
  held_out = synthesize(
      scene_specs(2, 32, 32, seed=1, backgrounds=("geometric-clutter",), people_range=(6, 12)), prefix="heldout")
  return train, held_out


class TestAxes:

  def test_branch_rows(self):
    assert list(AXES["branches"]) == ["baseline", "+CRR", "+DLE", "+CRR+DLE"]

  def test_k_values(self):
    assert [overrides[0]["k"] for overrides in AXES["k"].values()] == [4, 6, 8, 10]

  def test_loss_kinds(self):
    assert list(AXES["loss"]) == ["mse", "ssim_only", "sl_only", "bsl"]


class TestRunAblation:

  def test_branches_untrained(self, tmp_path, data):
    train, held_out = data
    rows = run_ablation(
        "branches", ModelConfig(width_mult=0.125), TrainConfig(epochs=0, disable_tqdm=True),
        train, held_out, seeds=[0], output_dir=str(tmp_path))
    assert [row["arm"] for row in rows] == ["baseline", "+CRR", "+DLE", "+CRR+DLE"]
    for row in rows:
      assert row["train_mae"] is None
      assert row["mae"] is not None and row["mae"] >= 0
    assert (tmp_path / "baseline" / "seed0" / "checkpoint.cfck").exists()

  @pytest.mark.slow
  def test_bl_axis_one_epoch(self, tmp_path, data):
    train, held_out = data
    rows = run_ablation(
        "bl", ModelConfig(width_mult=0.125), TrainConfig(epochs=1, learning_rate=1e-3, disable_tqdm=True),
        train, held_out, seeds=[0, 1], output_dir=str(tmp_path))
    assert [row["arm"] for row in rows] == ["w/o bg-aware loss", "w. bg-aware loss"]
    for row in rows:
      assert row["n_seeds"] == 2
      assert len(row["per_seed"]) == 2
      assert row["train_mae"] is not None
    log = (tmp_path / "w__bg_aware_loss" / "seed0" / "train_log.txt").read_text()
    assert " bl=" in log

  def test_unknown_axis(self, tmp_path, data):
    with pytest.raises(ValueError):
      run_ablation("depth", ModelConfig(width_mult=0.125), TrainConfig(epochs=0), data[0], data[1], [0], str(tmp_path))


class TestReporting:

  def test_format_table(self):
    rows = [
        {"arm": "baseline", "train_mae": None, "mae": 3.5, "rmse": 4.0, "mean_ssim": 0.5, "mean_psnr": 20.0,
         "mean_bg_ratio": 0.1},
        {"arm": "+CRR+DLE", "train_mae": 1.0, "mae": 2.25, "rmse": 3.0, "mean_ssim": 0.6, "mean_psnr": 21.0,
         "mean_bg_ratio": 0.05},
    ]
    lines = format_table(rows).splitlines()
    assert lines[0].split() == ["arm"] + list(COLUMNS)
    assert lines[2].split()[:3] == ["baseline", "-", "3.5000"]
    assert all(len(line.rstrip()) <= len(lines[1]) for line in lines)

  def test_write(self, tmp_path):
    rows = [{"arm": "a", "train_mae": 1.0, "mae": 1.0, "rmse": 1.0, "mean_ssim": None, "mean_psnr": None,
             "mean_bg_ratio": 0.0}]
    json_path, table_path = write_ablation(rows, str(tmp_path), "ablate_branches")
    with open(json_path) as f:
      assert json.load(f) == rows
    with open(table_path) as f:
      assert f.read().startswith("arm")
