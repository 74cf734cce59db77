# coding=utf-8
import math

import numpy as np
import pytest

from models import autograd as ag
from models.autograd import Tensor
from models.loss_cfanet import (
    LossTargets,
    LossWeights,
    SsimConstants,
    _warn_dropped_scales,
    attention_ce,
    background_loss,
    baseline_losses,
    cam_cross_entropy,
    density_term,
    fam_cross_entropy,
    ssim,
    structural_loss,
    total_loss,
    weight_schedule,
)
from models.modeling_cfanet import ModelOutputs

CONSTANT_MAP_SSIM = 0.01 / 1.01


def _map(values):
  return Tensor(np.asarray(values, dtype=np.float64))


def _perfect_case(size=24, k=6, seed=0):
  rng = np.random.default_rng(seed)
  density = np.zeros((1, 1, size, size))
  density[0, 0, 4:14, 6:18] = rng.uniform(0.5, 3.0, size=(10, 12))
  cam = (density > 0).astype(np.uint8)
  fam = np.where(density > 0, rng.integers(1, k, size=density.shape), 0)
  targets = LossTargets(density=density, cam=cam, fam=fam)

  cam_logits = np.where(cam == 1, 20.0, -20.0)
  fam_logits = np.zeros((1, k, size, size))
  for c in range(k):
    fam_logits[:, c:c + 1] = np.where(fam == c, 20.0, 0.0)
  outputs = ModelOutputs(
      cam_logits=[_map(cam_logits) for _ in range(4)],
      fam_logits=[_map(fam_logits) for _ in range(4)],
      density=[_map(density) for _ in range(4)],
      attention=[None] * 4,
  )
  return outputs, targets


def _random_case(size=24, k=6, seed=1):
  outputs, targets = _perfect_case(size, k, seed)
  rng = np.random.default_rng(seed + 100)
  outputs.density = [_map(rng.uniform(0, 2, size=(1, 1, size, size))) for _ in range(4)]
  outputs.cam_logits = [_map(rng.normal(size=(1, 1, size, size))) for _ in range(4)]
  outputs.fam_logits = [_map(rng.normal(size=(1, k, size, size))) for _ in range(4)]
  return outputs, targets


class TestSsim:

  def test_self_similarity(self):
    x = _map(np.random.default_rng(0).uniform(size=(1, 1, 20, 17)))
    assert ssim(x, x).item() == pytest.approx(1.0, abs=1e-9)

  def test_constant_maps(self):
    assert ssim(_map(np.zeros((1, 1, 16, 16))), _map(np.ones((1, 1, 16, 16)))).item() == pytest.approx(
        CONSTANT_MAP_SSIM, abs=1e-6)

  def test_symmetry(self):
    rng = np.random.default_rng(1)
    for _ in range(20):
      x, y = _map(rng.uniform(size=(1, 1, 14, 14))), _map(rng.uniform(size=(1, 1, 14, 14)))
      assert ssim(x, y).item() == ssim(y, x).item()

  def test_too_small(self):
    with pytest.raises(ValueError):
      ssim(_map(np.zeros((1, 1, 8, 8))), _map(np.zeros((1, 1, 8, 8))))

  def test_window_normalized(self):
    assert SsimConstants().window().sum() == pytest.approx(1.0, abs=1e-12)


class TestStructuralLoss:

  def test_identical(self):
    x = _map(np.random.default_rng(0).uniform(size=(1, 1, 48, 48)))
    assert structural_loss(x, x).item() == pytest.approx(0.0, abs=1e-9)

  def test_constant_maps_all_scales(self):
    loss = structural_loss(_map(np.zeros((1, 1, 88, 88))), _map(np.ones((1, 1, 88, 88))))
    assert loss.item() == pytest.approx(1 - CONSTANT_MAP_SSIM, abs=1e-6)
    assert loss.item() == pytest.approx(0.990099, abs=1e-6)

  def test_symmetry(self):
    rng = np.random.default_rng(2)
    for _ in range(20):
      x, y = _map(rng.uniform(size=(1, 1, 24, 24))), _map(rng.uniform(size=(1, 1, 24, 24)))
      assert structural_loss(x, y).item() == structural_loss(y, x).item()

  def test_drops_small_scales(self, caplog):
    x = np.random.default_rng(3).uniform(size=(1, 1, 30, 30))
    y = np.random.default_rng(4).uniform(size=(1, 1, 30, 30))
    with caplog.at_level("WARNING"):
      loss = structural_loss(_map(x), _map(y)).item()
    first = 1 - ssim(_map(x), _map(y)).item()
    second = 1 - ssim(ag.avgpool2(_map(x)), ag.avgpool2(_map(y))).item()
    assert loss == pytest.approx((first + second) / 2, abs=1e-12)

  def test_warns_once_per_size(self, caplog):
    _warn_dropped_scales.cache_clear()
    x = _map(np.random.default_rng(5).uniform(size=(1, 1, 26, 26)))
    with caplog.at_level("WARNING"):
      structural_loss(x, x)
      structural_loss(x, x)
    assert sum("dropping scales" in r.getMessage() for r in caplog.records) == 1

  def test_no_valid_scale(self):
    with pytest.raises(ValueError):
      structural_loss(_map(np.zeros((1, 1, 8, 8))), _map(np.zeros((1, 1, 8, 8))))


class TestBackgroundLoss:

  def test_ratio(self):
    est = np.zeros((1, 1, 2, 2))
    est[0, 0, 0, 0] = 2.0
    est[0, 0, 1, 1] = 8.0
    mask = np.array([[1, 0], [0, 0]])
    assert background_loss(_map(est), mask).item() == pytest.approx(0.2)

  def test_no_background_mass(self):
    est = np.zeros((1, 1, 2, 2))
    est[0, 0, 1, 1] = 3.0
    assert background_loss(_map(est), np.array([[1, 1], [1, 0]])).item() == 0.0

  def test_zero_prediction_guard(self):
    assert background_loss(_map(np.zeros((2, 1, 4, 4))), np.ones((4, 4))).item() == 0.0

  def test_scale_invariant(self):
    rng = np.random.default_rng(0)
    est = rng.uniform(size=(1, 1, 6, 6))
    mask = rng.uniform(size=(6, 6)) < 0.5
    assert background_loss(_map(est), mask).item() == pytest.approx(
        background_loss(_map(7.0 * est), mask).item(), rel=1e-12)


class TestCrossEntropy:

  def test_confident_correct(self):
    target = np.array([[1, 0], [0, 1]])
    logits = np.where(target == 1, 20.0, -20.0)[None, None]
    assert cam_cross_entropy(_map(logits), target).item() <= 1e-4

  def test_binary_zero_logit(self):
    target = np.random.default_rng(0).uniform(size=(3, 3)) < 0.5
    assert cam_cross_entropy(_map(np.zeros((1, 1, 3, 3))), target).item() == pytest.approx(math.log(2))

  def test_uniform_k6(self):
    target = np.random.default_rng(0).integers(0, 6, size=(1, 1, 4, 4))
    assert fam_cross_entropy(_map(np.zeros((1, 6, 4, 4))), target).item() == pytest.approx(math.log(6))

  def test_fam_confident(self):
    target = np.array([[0, 3], [5, 1]])
    logits = np.zeros((1, 6, 2, 2))
    for c in range(6):
      logits[0, c] = np.where(target == c, 20.0, -20.0)
    assert fam_cross_entropy(_map(logits), target).item() <= 1e-4

  def test_class_out_of_range(self):
    with pytest.raises(ValueError):
      fam_cross_entropy(_map(np.zeros((1, 4, 2, 2))), np.full((2, 2), 4))

  def test_dispatch(self):
    target = np.zeros((2, 2), dtype=np.int64)
    assert attention_ce(_map(np.zeros((1, 1, 2, 2))), target).item() == pytest.approx(math.log(2))
    assert attention_ce(_map(np.zeros((1, 3, 2, 2))), target).item() == pytest.approx(math.log(3))


class TestWeightSchedule:

  @pytest.mark.parametrize("epoch,expected", [(0, 1.0), (30, 0.55), (60, 0.1), (99, 0.1)])
  def test_values(self, epoch, expected):
    weights = weight_schedule(epoch, 100)
    assert weights.lam == pytest.approx(expected)
    assert weights.mu == weights.lam

  def test_invalid(self):
    with pytest.raises(ValueError):
      weight_schedule(-1, 10)


class TestBaselineLosses:

  def test_identical(self):
    x = _map(np.random.default_rng(0).uniform(size=(1, 1, 16, 16)))
    assert baseline_losses("mse", x, x).item() == 0.0
    assert baseline_losses("ssim_only", x, x).item() == pytest.approx(0.0, abs=1e-9)

  def test_constant_maps(self):
    zeros, ones = _map(np.zeros((1, 1, 16, 16))), _map(np.ones((1, 1, 16, 16)))
    assert baseline_losses("mse", zeros, ones).item() == 1.0
    assert baseline_losses("ssim_only", zeros, ones).item() == pytest.approx(0.990099, abs=1e-6)

  def test_unknown_kind(self):
    x = _map(np.zeros((1, 1, 16, 16)))
    with pytest.raises(ValueError):
      baseline_losses("l1", x, x)


class TestTotalLoss:

  def test_perfect_outputs(self):
    outputs, targets = _perfect_case()
    loss, breakdown = total_loss(outputs, targets, LossWeights(1.0, 1.0, 0))
    assert loss.item() <= 1e-3
    assert set(breakdown) == {"sl", "bl", "cam", "fam", "loss"}

  def test_non_negative(self):
    outputs, targets = _random_case()
    loss, breakdown = total_loss(outputs, targets, LossWeights(0.7, 0.3, 0))
    assert loss.item() >= 0
    assert all(v >= 0 for v in breakdown.values())

  def test_last_stage_only(self):
    outputs, targets = _random_case()
    weights = LossWeights(0.5, 0.25, 0)
    loss, _ = total_loss(outputs, targets, weights, supervision=(4,))
    gt = ag.constant(targets.density, like=outputs.final)
    expected = (
        density_term("bsl", outputs.density[3], gt, SsimConstants())[0].item()
        + background_loss(outputs.density[3], targets.bg_mask).item()
        + 0.5 * cam_cross_entropy(outputs.cam_logits[3], targets.cam).item()
        + 0.25 * fam_cross_entropy(outputs.fam_logits[3], targets.fam).item())
    assert loss.item() == pytest.approx(expected, rel=1e-12)

  def test_zero_attention_weights(self):
    outputs, targets = _random_case()
    loss, breakdown = total_loss(outputs, targets, LossWeights(0.0, 0.0, 0))
    gt = ag.constant(targets.density, like=outputs.final)
    expected = 0.0
    for i in range(4):
      expected += structural_loss(outputs.density[i], gt).item()
      expected += background_loss(outputs.density[i], targets.bg_mask).item()
    assert loss.item() == expected
    assert breakdown["cam"] > 0

  def test_bl_switch(self):
    outputs, targets = _random_case()
    _, with_bl = total_loss(outputs, targets, LossWeights(1.0, 1.0, 0), enable_bl=True)
    _, without = total_loss(outputs, targets, LossWeights(1.0, 1.0, 0), enable_bl=False)
    assert "bl" in with_bl and "bl" not in without
    assert with_bl["loss"] - without["loss"] == pytest.approx(with_bl["bl"], rel=1e-9)

  @pytest.mark.parametrize("kind,key", [("mse", "mse"), ("ssim_only", "ssim_only"), ("sl_only", "sl")])
  def test_other_kinds_have_no_bl(self, kind, key):
    outputs, targets = _random_case()
    _, breakdown = total_loss(outputs, targets, LossWeights(1.0, 1.0, 0), loss_kind=kind)
    assert key in breakdown and "bl" not in breakdown

  def test_baseline_outputs_skip_ce(self):
    outputs, targets = _random_case()
    outputs.cam_logits, outputs.fam_logits = [], []
    _, breakdown = total_loss(outputs, targets, LossWeights(1.0, 1.0, 0))
    assert "cam" not in breakdown and "fam" not in breakdown

  def test_invalid_stage(self):
    outputs, targets = _random_case()
    with pytest.raises(ValueError):
      total_loss(outputs, targets, LossWeights(1.0, 1.0, 0), supervision=(5,))
