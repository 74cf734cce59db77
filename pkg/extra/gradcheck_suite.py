# coding=utf-8
"""Registered finite-difference checks for every differentiable op and the full training loss."""

import logging
from collections import OrderedDict
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from models import autograd as ag
from models import loss_cfanet as losses
from models.autograd import ConvSpec, GradcheckReport, Tensor
from models.modeling_cfanet import ModelConfig, Parameters, build, forward, fuse, refine_attention


logger = logging.getLogger(__name__)

# checked tensors of the tiny model, from the first encoder convolution to the last heads
MODEL_CHECKED_PARAMS = (
    "encoder.block1.conv1.weight",
    "encoder.block4.conv3.weight",
    "dme.stage1.weight",
    "crr.stage2.weight",
    "dle.stage3.weight",
    "dme.head2.weight",
    "dme.head4.bias",
    "crr.head4.weight",
)


def _away_from_zero(rng, shape, margin=0.1):
  values = rng.normal(size=shape)
  return np.sign(values) * (margin + np.abs(values))


def _unary(op: Callable, shape=(2, 3, 5, 4), positive=False, away=False):
  def make(rng):
    if away:
      x = _away_from_zero(rng, shape)
    elif positive:
      x = rng.uniform(0.5, 1.5, size=shape)
    else:
      x = rng.normal(size=shape)
    projection = np.random.default_rng(rng.integers(2 ** 31))
    weights = projection.normal(size=op(Tensor(x)).shape)
    return (lambda t: ag.sum_all(ag.mul(op(t), ag.constant(weights, like=t)))), [Tensor(x)]
  return make


def _binary(op: Callable, b_shape=(2, 3, 4, 4), positive_b=False):
  def make(rng):
    a = rng.normal(size=(2, 3, 4, 4))
    b = rng.uniform(0.5, 1.5, size=b_shape) if positive_b else rng.normal(size=b_shape)
    weights = rng.normal(size=a.shape)
    return (lambda x, y: ag.sum_all(ag.mul(op(x, y), ag.constant(weights, like=x)))), [Tensor(a), Tensor(b)]
  return make


def _conv(kernel: int, dilation: int):
  def make(rng):
    spec = ConvSpec(4, kernel, dilation)
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, kernel, kernel))
    b = rng.normal(size=(1, 4, 1, 1))
    weights = rng.normal(size=(2, 4, 7, 6))
    def build_fn(x_, w_, b_):
      return ag.sum_all(ag.mul(ag.conv2d(x_, w_, b_, spec), ag.constant(weights, like=x_)))
    return build_fn, [Tensor(x), Tensor(w), Tensor(b)]
  return make


def _maps(rng, shape=(2, 1, 16, 16)):
  return rng.uniform(0.0, 1.0, size=shape), rng.uniform(0.0, 1.0, size=shape)


def _ssim_check(rng):
  x, y = _maps(rng)
  return (lambda a, b: losses.ssim(a, b)), [Tensor(x), Tensor(y)]


def _structural_check(rng):
  x, y = _maps(rng, (1, 1, 24, 24))
  return (lambda a, b: losses.structural_loss(a, b)), [Tensor(x), Tensor(y)]


def _background_check(rng):
  x, _ = _maps(rng)
  mask = rng.uniform(size=x.shape) < 0.4
  return (lambda a: losses.background_loss(a, mask)), [Tensor(x + 0.1)]


def _cam_ce_check(rng):
  z = rng.normal(size=(2, 1, 6, 6))
  target = rng.uniform(size=z.shape) < 0.5
  return (lambda a: losses.cam_cross_entropy(a, target)), [Tensor(z)]


def _fam_ce_check(rng):
  z = rng.normal(size=(2, 6, 5, 5))
  target = rng.integers(0, 6, size=(2, 1, 5, 5))
  return (lambda a: losses.fam_cross_entropy(a, target)), [Tensor(z)]


def _attention_check(rng):
  fam = rng.normal(size=(1, 6, 5, 5))
  cam = rng.normal(size=(1, 1, 5, 5))
  weights = rng.normal(size=(1, 1, 5, 5))
  def build_fn(f, c):
    return ag.sum_all(ag.mul(refine_attention(f, c, 6), ag.constant(weights, like=f)))
  return build_fn, [Tensor(fam), Tensor(cam)]


def _fuse_check(rng):
  fm = rng.normal(size=(1, 4, 5, 5))
  attention = rng.uniform(0, 2, size=(1, 1, 5, 5))
  weights = rng.normal(size=fm.shape)
  return (lambda f, a: ag.sum_all(ag.mul(fuse(f, a), ag.constant(weights, like=f)))), [Tensor(fm), Tensor(attention)]


def tiny_model_check(rng, size: int = 16, checked: Sequence[str] = MODEL_CHECKED_PARAMS):
  """Total BSL loss of a width-0.125 model on a ``size`` x ``size`` image, w.r.t. a few parameters."""
  config = ModelConfig(k=6, width_mult=0.125, init_std=0.1)
  params = build(config, seed=int(rng.integers(2 ** 31)), dtype=ag.DOUBLE)
  image = rng.uniform(size=(1, 3, size, size))
  density = np.zeros((1, 1, size, size))
  density[0, 0, size // 4:size // 2, size // 4:3 * size // 4] = rng.uniform(0.5, 2.0, size=(size // 4, size // 2))
  targets = losses.LossTargets(
      density=density,
      cam=(density > 0).astype(np.uint8),
      fam=np.where(density > 0, rng.integers(1, 6, size=density.shape), 0),
  )
  weights = losses.LossWeights(lam=0.7, mu=0.4, epoch=0)
  frozen = OrderedDict((name, t.data) for name, t in params.items() if name not in checked)

  def build_fn(*tensors):
    arrays = OrderedDict(frozen)
    named = dict(zip(checked, tensors))
    merged = OrderedDict()
    for name in params:
      merged[name] = named[name] if name in named else Tensor(arrays[name])
    model = Parameters(config, merged)
    outputs = forward(model, Tensor(image))
    loss, _ = losses.total_loss(outputs, targets, weights)
    return loss

  return build_fn, [Tensor(params[name].data) for name in checked]


GRADCHECKS: "OrderedDict[str, Tuple[Callable, Optional[int]]]" = OrderedDict([
    ("conv2d", (_conv(3, 1), None)),
    ("conv2d_dilated", (_conv(3, 2), None)),
    ("conv2d_1x1", (_conv(1, 1), None)),
    ("upsample_bilinear2x", (_unary(ag.upsample_bilinear2x, (1, 2, 3, 4)), None)),
    ("avgpool2", (_unary(ag.avgpool2, (1, 2, 4, 6)), None)),
    ("avgpool2_odd", (_unary(ag.avgpool2, (1, 2, 5, 3)), None)),
    ("relu", (_unary(ag.relu, away=True), None)),
    ("sigmoid", (_unary(ag.sigmoid), None)),
    ("softplus", (_unary(ag.softplus), None)),
    ("square", (_unary(ag.square), None)),
    ("scale", (_unary(lambda t: ag.scale(t, -2.5)), None)),
    ("add", (_binary(ag.add), None)),
    ("add_broadcast", (_binary(ag.add, (2, 1, 4, 4)), None)),
    ("sub", (_binary(ag.sub), None)),
    ("mul", (_binary(ag.mul), None)),
    ("mul_broadcast", (_binary(ag.mul, (2, 1, 4, 4)), None)),
    ("div", (_binary(ag.div, positive_b=True), None)),
    ("channel_softmax", (_unary(ag.channel_softmax), None)),
    ("log_channel_softmax", (_unary(ag.log_channel_softmax), None)),
    ("weighted_channel_sum", (_unary(lambda t: ag.weighted_channel_sum(t, [0.0, 0.5, 1.0])), None)),
    ("sum_per_sample", (_unary(ag.sum_per_sample), None)),
    ("mean_all", (_unary(ag.mean_all), None)),
    ("ssim", (_ssim_check, None)),
    ("structural_loss", (_structural_check, 64)),
    ("background_loss", (_background_check, None)),
    ("cam_cross_entropy", (_cam_ce_check, None)),
    ("fam_cross_entropy", (_fam_ce_check, None)),
    ("refine_attention", (_attention_check, None)),
    ("fuse", (_fuse_check, None)),
    ("total_loss_tiny_model", (tiny_model_check, 8)),
])


def run_gradchecks(
    tol: float = 1e-4,
    eps: float = 1e-5,
    seed: int = 0,
    num_seeds: int = 1,
    names: Optional[Sequence[str]] = None,
) -> List[Tuple[str, int, GradcheckReport]]:
  """Run the registered checks over ``num_seeds`` seeds; returns ``(name, seed, report)`` triples."""
  selected = list(names) if names else list(GRADCHECKS)
  unknown = [n for n in selected if n not in GRADCHECKS]
  if unknown:
    raise ValueError(f"Unknown gradchecks {unknown}, available: {list(GRADCHECKS)}")
  results = []
  for name in selected:
    make, max_checks = GRADCHECKS[name]
    for offset in range(num_seeds):
      rng = np.random.default_rng(seed + offset)
      build_fn, inputs = make(rng)
      report = ag.gradcheck(build_fn, inputs, tol=tol, eps=eps, max_checks=max_checks, seed=seed + offset)
      status = "ok" if report.passed else "FAILED"
      logger.info(f"  {name:<24} seed={seed + offset} max_rel_err={report.max_error:.3e} {status}"
                  + (f" ({report.failure})" if report.failure else ""))
      results.append((name, seed + offset, report))
  return results
