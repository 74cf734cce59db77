# coding=utf-8
"""Background-aware structural loss (BSL), attention cross-entropies and the total training loss."""

import functools
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from models import autograd as ag
from models.autograd import Tensor
from models.modeling_cfanet import ModelOutputs


logger = logging.getLogger(__name__)

LOSS_KINDS = ("bsl", "sl_only", "mse", "ssim_only")
MASS_GUARD = 1e-8


@dataclass(frozen=True)
class SsimConstants:
  c1: float = 0.01
  c2: float = 0.03
  window_size: int = 11
  sigma: float = 1.5
  scales: int = 3

  def window(self) -> np.ndarray:
    offsets = np.arange(self.window_size) - (self.window_size - 1) / 2.0
    g = np.exp(-(offsets ** 2) / (2.0 * self.sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


@dataclass
class LossWeights:
  lam: float
  mu: float
  epoch: int
  w_density: float = 1.0


@dataclass
class LossTargets:
  """Full-resolution supervision for one batch.

  ``density`` is already multiplied by the expansion factor; ``fam`` holds class indices.
  """

  density: np.ndarray
  cam: np.ndarray
  fam: np.ndarray

  def __post_init__(self):
    self.density = _as_nchw(self.density)
    self.cam = _as_nchw(self.cam)
    self.fam = _as_nchw(self.fam).astype(np.int64)

  @property
  def bg_mask(self) -> np.ndarray:
    return (self.cam == 0).astype(np.float64)


def _as_nchw(array) -> np.ndarray:
  array = np.asarray(array)
  if array.ndim == 2:
    return array[None, None]
  if array.ndim == 3:
    return array[:, None]
  return array


def weight_schedule(epoch: int, total_epochs: int) -> LossWeights:
  """lambda = mu = 1 - 0.9 * min(1, epoch / (0.6 * total_epochs))."""
  if total_epochs < 1 or epoch < 0:
    raise ValueError(f"weight_schedule needs epoch >= 0 and total_epochs >= 1, got {epoch}, {total_epochs}")
  value = 1.0 - 0.9 * min(1.0, epoch / (0.6 * total_epochs))
  return LossWeights(lam=value, mu=value, epoch=epoch)


def _window_conv(x: Tensor, window: np.ndarray) -> Tensor:
  weight = ag.constant(window[None, None], like=x)
  return ag.conv2d(x, weight, None, ag.ConvSpec(1, window.shape[0], padding=0))


def ssim(x: Tensor, y: Tensor, consts: SsimConstants = SsimConstants()) -> Tensor:
  """Mean SSIM index over the valid (unpadded) window positions."""
  if x.shape != y.shape:
    raise ValueError(f"ssim inputs differ in shape: {x.shape} vs {y.shape}")
  if x.shape[1] != 1:
    raise ValueError(f"ssim expects single-channel maps, got {x.shape[1]} channels")
  if min(x.shape[2:]) < consts.window_size:
    raise ValueError(f"ssim needs maps of at least {consts.window_size}x{consts.window_size}, got {x.shape[2:]}")
  window = consts.window()
  mu_x = _window_conv(x, window)
  mu_y = _window_conv(y, window)
  mu_xx = ag.mul(mu_x, mu_x)
  mu_yy = ag.mul(mu_y, mu_y)
  mu_xy = ag.mul(mu_x, mu_y)
  var_x = ag.sub(_window_conv(ag.mul(x, x), window), mu_xx)
  var_y = ag.sub(_window_conv(ag.mul(y, y), window), mu_yy)
  cov = ag.sub(_window_conv(ag.mul(x, y), window), mu_xy)

  numerator = ag.mul(ag.add(ag.scale(mu_xy, 2.0), consts.c1), ag.add(ag.scale(cov, 2.0), consts.c2))
  denominator = ag.mul(ag.add(ag.add(mu_xx, mu_yy), consts.c1), ag.add(ag.add(var_x, var_y), consts.c2))
  return ag.mean_all(ag.div(numerator, denominator))


@functools.lru_cache(maxsize=None)
def _warn_dropped_scales(size: Tuple[int, ...], scale_index: int, scales: int, window: int) -> None:
  logger.warning(
      f"structural_loss: dropping scales {scale_index + 1}..{scales} for input {size}, "
      f"smaller than the {window}x{window} window")


def structural_loss(dm_est: Tensor, dm_gt: Tensor, consts: SsimConstants = SsimConstants()) -> Tensor:
  """Average of 1 - SSIM over ``consts.scales`` average-pooled resolutions.

  Scales smaller than the SSIM window are dropped and the average is taken over the remaining ones.
  """
  est, gt = dm_est, dm_gt
  total = None
  valid = 0
  for scale_index in range(consts.scales):
    if scale_index > 0:
      est, gt = ag.avgpool2(est), ag.avgpool2(gt)
    if min(est.shape[2:]) < consts.window_size:
      _warn_dropped_scales(tuple(dm_est.shape[2:]), scale_index, consts.scales, consts.window_size)
      break
    term = ssim(est, gt, consts)
    total = term if total is None else ag.add(total, term)
    valid += 1
  if valid == 0:
    raise ValueError(f"structural_loss needs maps of at least {consts.window_size}x{consts.window_size}")
  return ag.add(ag.scale(total, -1.0 / valid), 1.0)


def background_loss(dm_est: Tensor, gt_bg_mask) -> Tensor:
  """Share of predicted mass on groundtruth background, per sample, averaged over the batch."""
  mask = np.broadcast_to(_as_nchw(gt_bg_mask), dm_est.shape)
  background = ag.sum_per_sample(ag.mul(dm_est, ag.constant(mask, like=dm_est)))
  total = ag.sum_per_sample(dm_est)
  empty = total.data < MASS_GUARD
  keep = ag.constant((~empty).astype(np.float64), like=total)
  guard = ag.constant(empty.astype(np.float64), like=total)
  ratio = ag.div(ag.mul(background, keep), ag.add(total, guard))
  return ag.mean_all(ratio)


def cam_cross_entropy(cam_logits: Tensor, cam_target) -> Tensor:
  """Mean binary cross-entropy of sigmoid(logits), as softplus(z) - t * z."""
  target = np.broadcast_to(_as_nchw(cam_target), cam_logits.shape)
  t = ag.constant(target.astype(np.float64), like=cam_logits)
  return ag.mean_all(ag.sub(ag.softplus(cam_logits), ag.mul(cam_logits, t)))


def fam_cross_entropy(fam_logits: Tensor, fam_target) -> Tensor:
  """Mean k-class cross-entropy over pixels."""
  n, k, h, w = fam_logits.shape
  target = _as_nchw(fam_target).reshape(n, h, w)
  if target.min(initial=0) < 0 or target.max(initial=0) >= k:
    raise ValueError(f"fam target classes must lie in [0, {k}), got range [{target.min()}, {target.max()}]")
  onehot = (np.arange(k)[None, :, None, None] == target[:, None]).astype(np.float64)
  picked = ag.sum_all(ag.mul(ag.log_channel_softmax(fam_logits), ag.constant(onehot, like=fam_logits)))
  return ag.scale(picked, -1.0 / (n * h * w))


def attention_ce(logits: Tensor, target) -> Tensor:
  if logits.shape[1] == 1:
    return cam_cross_entropy(logits, target)
  return fam_cross_entropy(logits, target)


def baseline_losses(kind: str, dm_est: Tensor, dm_gt: Tensor, consts: SsimConstants = SsimConstants()) -> Tensor:
  if dm_est.shape != dm_gt.shape:
    raise ValueError(f"baseline_losses inputs differ in shape: {dm_est.shape} vs {dm_gt.shape}")
  if kind == "mse":
    return ag.mean_all(ag.square(ag.sub(dm_est, dm_gt)))
  if kind == "ssim_only":
    return ag.add(ag.scale(ssim(dm_est, dm_gt, consts), -1.0), 1.0)
  raise ValueError(f"Unknown baseline loss {kind!r}, expected 'mse' or 'ssim_only'")


def density_term(kind: str, dm_est: Tensor, dm_gt: Tensor, consts: SsimConstants) -> Tuple[Tensor, str]:
  if kind in ("bsl", "sl_only"):
    return structural_loss(dm_est, dm_gt, consts), "sl"
  if kind in ("mse", "ssim_only"):
    return baseline_losses(kind, dm_est, dm_gt, consts), kind
  raise ValueError(f"Unknown loss kind {kind!r}, expected one of {LOSS_KINDS}")


def total_loss(
    outputs: ModelOutputs,
    targets: LossTargets,
    weights: LossWeights,
    consts: SsimConstants = SsimConstants(),
    supervision: Sequence[int] = (1, 2, 3, 4),
    enable_bl: bool = True,
    loss_kind: str = "bsl",
) -> Tuple[Tensor, Dict[str, float]]:
  """Sum over supervised stages of density term (+ BL) + lambda * CE_cam + mu * CE_fam.

  Returns the scalar loss and the unweighted per-term sums for logging.
  """
  if loss_kind not in LOSS_KINDS:
    raise ValueError(f"Unknown loss kind {loss_kind!r}, expected one of {LOSS_KINDS}")
  if not supervision:
    raise ValueError("At least one supervision stage is required")
  gt = ag.constant(targets.density, like=outputs.final)
  use_bl = enable_bl and loss_kind == "bsl"

  loss: Optional[Tensor] = None
  breakdown: Dict[str, float] = {}

  def accumulate(term: Tensor, key: str, weight: float):
    nonlocal loss
    breakdown[key] = breakdown.get(key, 0.0) + term.item()
    weighted = term if weight == 1.0 else ag.scale(term, weight)
    loss = weighted if loss is None else ag.add(loss, weighted)

  for stage in supervision:
    if not 1 <= stage <= len(outputs.density):
      raise ValueError(f"Supervision stage {stage} out of range 1..{len(outputs.density)}")
    i = stage - 1
    term, key = density_term(loss_kind, outputs.density[i], gt, consts)
    accumulate(term, key, weights.w_density)
    if use_bl:
      accumulate(background_loss(outputs.density[i], targets.bg_mask), "bl", weights.w_density)
    if outputs.cam_logits:
      accumulate(cam_cross_entropy(outputs.cam_logits[i], targets.cam), "cam", weights.lam)
    if outputs.fam_logits:
      accumulate(fam_cross_entropy(outputs.fam_logits[i], targets.fam), "fam", weights.mu)

  breakdown["loss"] = loss.item()
  return loss, breakdown
