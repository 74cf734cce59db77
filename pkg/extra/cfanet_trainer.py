# coding=utf-8
"""Training protocol for CFANet: augmentation, Adam, step learning rate, checkpointing."""

import logging
import os
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm.auto import tqdm

from extra.errors import NonFiniteError
from extra.groundtruth import PointAnnotation, density_from_points, make_targets
from extra.synthetic_crowd import Sample
from models import autograd as ag
from models.loss_cfanet import LOSS_KINDS, LossTargets, SsimConstants, total_loss, weight_schedule
from models.modeling_cfanet import Parameters, forward, manifest_of, read_checkpoint, write_checkpoint


logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.cfck"
TRAIN_LOG_NAME = "train_log.txt"
ADAM_MOMENT_PREFIXES = ("adam.m/", "adam.v/")


@dataclass
class TrainConfig:
  """
  Arguments pertaining to the training protocol.
  """

  epochs: int = field(default=500, metadata={"help": "Number of training epochs."})
  learning_rate: float = field(default=2e-5, metadata={"help": "Initial Adam learning rate (lr0)."})
  lr_halving_period: int = field(default=100, metadata={"help": "The learning rate halves every this many epochs."})
  expansion: float = field(default=50.0, metadata={"help": "Factor applied to density targets during training."})
  crop_fraction: float = field(default=0.5, metadata={"help": "Random crop size as a fraction of each side."})
  flip_prob: float = field(default=0.5, metadata={"help": "Probability of a horizontal flip."})
  batch_size: int = field(default=1, metadata={"help": "Images per optimization step (equal sizes required)."})
  seed: int = field(default=42, metadata={"help": "Random seed for initialization, shuffling and augmentation."})
  supervision: str = field(
      default="1,2,3,4", metadata={"help": "Comma-separated decoder stages (1..4) whose outputs are supervised."}
  )
  enable_bl: bool = field(default=True, metadata={"help": "Add the background-aware term to the structural loss."})
  loss_kind: str = field(default="bsl", metadata={"help": f"Density loss, one of {LOSS_KINDS}."})
  augment: bool = field(default=True, metadata={"help": "Apply random crop and flip to training images."})
  report_to_tensorboard: bool = field(default=False, metadata={"help": "Log per-epoch scalars with tensorboardX."})
  disable_tqdm: bool = field(default=False, metadata={"help": "Disable progress bars."})

  def __post_init__(self):
    if self.epochs < 0:
      raise ValueError(f"epochs must be non-negative, got {self.epochs}")
    if self.learning_rate <= 0 or self.lr_halving_period < 1 or self.expansion <= 0:
      raise ValueError("learning_rate, lr_halving_period and expansion must be positive")
    if not 0 < self.crop_fraction <= 1 or not 0 <= self.flip_prob <= 1:
      raise ValueError(f"crop_fraction must be in (0, 1] and flip_prob in [0, 1]")
    if self.batch_size < 1:
      raise ValueError(f"batch_size must be positive, got {self.batch_size}")
    if self.loss_kind not in LOSS_KINDS:
      raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
    stages = self.supervision_stages
    if not stages or any(s not in (1, 2, 3, 4) for s in stages):
      raise ValueError(f"supervision must list stages from 1..4, got {self.supervision!r}")

  @property
  def supervision_stages(self) -> Tuple[int, ...]:
    try:
      return tuple(sorted({int(s) for s in str(self.supervision).split(",") if s.strip()}))
    except ValueError:
      raise ValueError(f"supervision must be comma-separated integers, got {self.supervision!r}")


@dataclass
class AdamState:
  m: Dict[str, np.ndarray] = field(default_factory=OrderedDict)
  v: Dict[str, np.ndarray] = field(default_factory=OrderedDict)
  step: int = 0
  beta1: float = 0.9
  beta2: float = 0.999
  eps: float = 1e-8

  @classmethod
  def zeros_like(cls, params: Parameters) -> "AdamState":
    state = cls()
    for name, tensor in params.items():
      state.m[name] = np.zeros_like(tensor.data)
      state.v[name] = np.zeros_like(tensor.data)
    return state


@dataclass
class EpochReport:
  epoch: int
  lr: float
  loss: float
  terms: Dict[str, float]
  mae: float

  def to_log_line(self) -> str:
    terms = " ".join(f"{k}={round(v, 6)}" for k, v in self.terms.items() if k != "loss")
    return f"epoch={self.epoch} lr={self.lr:.6g} loss={round(self.loss, 6)} {terms} mae={round(self.mae, 4)}"


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
  return config.learning_rate * 0.5 ** (epoch // config.lr_halving_period)


def crop_size(height: int, width: int, fraction: float) -> Tuple[int, int]:
  return int(height * fraction) // 8 * 8, int(width * fraction) // 8 * 8


def hflip(sample: Sample) -> Sample:
  ann = sample.annotation
  points = ann.points.copy()
  if len(points):
    # W - x leaves [0, W) only at x == 0; that point and the last float below W swap exactly
    top = np.nextafter(float(ann.width), 0.0)
    x = points[:, 0]
    flipped_x = np.where(x == top, 0.0, ann.width - x)
    points[:, 0] = np.where(flipped_x >= ann.width, top, flipped_x)
  flipped = PointAnnotation(ann.image_id, ann.width, ann.height, points, ann.image_path)
  return Sample(image=np.ascontiguousarray(sample.image[..., ::-1]), annotation=flipped)


def augment(sample: Sample, rng: np.random.Generator, config: TrainConfig) -> Sample:
  """Random crop to ``crop_fraction`` (sides rounded down to multiples of 8), then a random flip.

  Points outside the crop are dropped; targets are regenerated from the surviving points.
  """
  ann = sample.annotation
  h, w = ann.height, ann.width
  ch, cw = crop_size(h, w, config.crop_fraction)
  if ch < 8 or cw < 8:
    raise ValueError(f"Image {ann.image_id!r} of {w}x{h} is too small for a {config.crop_fraction} crop")
  top = int(rng.integers(0, h - ch + 1))
  left = int(rng.integers(0, w - cw + 1))
  points = ann.points - np.array([left, top], dtype=np.float64)
  keep = (points[:, 0] >= 0) & (points[:, 0] < cw) & (points[:, 1] >= 0) & (points[:, 1] < ch)
  cropped = Sample(
      image=np.ascontiguousarray(sample.image[:, top:top + ch, left:left + cw]),
      annotation=PointAnnotation(ann.image_id, cw, ch, points[keep], ann.image_path),
  )
  if rng.uniform() < config.flip_prob:
    cropped = hflip(cropped)
  return cropped


def sample_targets(annotation: PointAnnotation, thresholds, k: int, expansion: float):
  dm = density_from_points(annotation)
  attention = make_targets(dm, thresholds, k)
  return dm.raster * expansion, attention.cam, attention.fam


def collate(samples: Sequence[Sample], thresholds, k: int, expansion: float) -> Tuple[np.ndarray, LossTargets]:
  shapes = {s.image.shape for s in samples}
  if len(shapes) != 1:
    raise ValueError(f"A batch needs equal image sizes, got {sorted(shapes)}")
  images = np.stack([s.image for s in samples])
  parts = [sample_targets(s.annotation, thresholds, k, expansion) for s in samples]
  targets = LossTargets(
      density=np.stack([p[0] for p in parts])[:, None],
      cam=np.stack([p[1] for p in parts])[:, None],
      fam=np.stack([p[2] for p in parts])[:, None],
  )
  return images, targets


def adam_step(params: Parameters, state: AdamState, lr: float) -> None:
  """Bias-corrected Adam update in place; a missing gradient counts as zero."""
  for name, tensor in params.items():
    if tensor.grad is not None and not np.all(np.isfinite(tensor.grad)):
      raise NonFiniteError("non-finite gradient", name)
  state.step += 1
  t = state.step
  for name, tensor in params.items():
    grad = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
    m = state.m.setdefault(name, np.zeros_like(tensor.data))
    v = state.v.setdefault(name, np.zeros_like(tensor.data))
    m *= state.beta1
    m += (1 - state.beta1) * grad
    v *= state.beta2
    v += (1 - state.beta2) * grad * grad
    m_hat = m / (1 - state.beta1 ** t)
    v_hat = v / (1 - state.beta2 ** t)
    tensor.data -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(tensor.dtype)


def train_epoch(
    params: Parameters,
    samples: Sequence[Sample],
    config: TrainConfig,
    epoch: int,
    state: AdamState,
    thresholds,
    rng: np.random.Generator,
    consts: SsimConstants = SsimConstants(),
) -> EpochReport:
  if not samples:
    raise ValueError("train_epoch needs at least one sample")
  k = params.config.k
  lr = lr_at_epoch(config, epoch)
  weights = weight_schedule(epoch, max(config.epochs, epoch + 1))
  order = rng.permutation(len(samples))

  losses, abs_errors = [], []
  terms: Dict[str, List[float]] = {}
  for start in range(0, len(order), config.batch_size):
    batch = [samples[i] for i in order[start:start + config.batch_size]]
    if config.augment:
      batch = [augment(s, rng, config) for s in batch]
    images, targets = collate(batch, thresholds, k, config.expansion)

    with ag.Tape() as tape:
      outputs = forward(params, ag.Tensor(images, dtype=params.dtype))
      loss, breakdown = total_loss(
          outputs, targets, weights, consts,
          supervision=config.supervision_stages, enable_bl=config.enable_bl, loss_kind=config.loss_kind)
    ag.assert_finite(loss, f"loss at epoch {epoch}, images {[s.image_id for s in batch]}")
    params.zero_grad()
    ag.backward(loss, tape)
    adam_step(params, state, lr)

    losses.append(breakdown["loss"])
    for key, value in breakdown.items():
      if key != "loss":
        terms.setdefault(key, []).append(value)
    predicted = outputs.final.data.sum(axis=(1, 2, 3)) / config.expansion
    actual = np.array([len(s.annotation) for s in batch], dtype=np.float64)
    abs_errors.extend(np.abs(predicted - actual).tolist())

  params.zero_grad()
  return EpochReport(
      epoch=epoch,
      lr=lr,
      loss=float(np.mean(losses)),
      terms={key: float(np.mean(values)) for key, values in terms.items()},
      mae=float(np.mean(abs_errors)),
  )


def save_checkpoint(params: Parameters, state: Optional[AdamState], path: str) -> None:
  entries = OrderedDict(params.arrays())
  step = 0
  if state is not None:
    step = state.step
    for name in params:
      entries[f"adam.m/{name}"] = state.m.get(name, np.zeros_like(params[name].data))
    for name in params:
      entries[f"adam.v/{name}"] = state.v.get(name, np.zeros_like(params[name].data))
  write_checkpoint(path, entries, step)
  logger.info(f"Saved checkpoint ({len(entries)} entries, step {step}) to {path}")


def load_checkpoint(path: str, model_config) -> Tuple[Parameters, AdamState]:
  entries, step = read_checkpoint(path)
  expected = Parameters.expected_shapes(model_config)
  unexpected = [
      n for n in entries
      if n not in expected and not (n.startswith(ADAM_MOMENT_PREFIXES) and n.split("/", 1)[1] in expected)
  ]
  if unexpected:
    raise ValueError(
        f"{path}: entries {unexpected} do not belong to the model config; checkpoint holds {dict(manifest_of(entries))}")
  arrays = OrderedDict((n, a) for n, a in entries.items() if not n.startswith(ADAM_MOMENT_PREFIXES))
  params = Parameters.from_arrays(model_config, arrays)
  state = AdamState.zeros_like(params)
  state.step = step
  for name in params:
    if f"adam.m/{name}" in entries:
      state.m[name] = entries[f"adam.m/{name}"].copy()
      state.v[name] = entries[f"adam.v/{name}"].copy()
  return params, state


class CFANetTrainer:
  """Runs the epoch loop, writes ``train_log.txt`` and the final checkpoint into ``output_dir``."""

  def __init__(
      self,
      params: Parameters,
      config: TrainConfig,
      train_samples: Sequence[Sample],
      thresholds,
      output_dir: str,
      state: Optional[AdamState] = None,
  ):
    self.params = params
    self.config = config
    self.train_samples = list(train_samples)
    self.thresholds = np.asarray(thresholds)
    self.output_dir = output_dir
    self.state = state or AdamState.zeros_like(params)
    self.rng = np.random.default_rng(config.seed)
    self.history: List[EpochReport] = []

  def _tensorboard(self):
    if not self.config.report_to_tensorboard:
      return None
    from tensorboardX import SummaryWriter

    return SummaryWriter(logdir=os.path.join(self.output_dir, "runs"))

  def train(self) -> List[EpochReport]:
    config = self.config
    os.makedirs(self.output_dir, exist_ok=True)
    logger.info("***** Running training *****")
    logger.info(f"  Num examples = {len(self.train_samples)}")
    logger.info(f"  Num Epochs = {config.epochs}")
    logger.info(f"  Batch size = {config.batch_size}")
    logger.info(f"  Supervised stages = {config.supervision_stages}")
    logger.info(f"  Loss = {config.loss_kind}{' + bl' if config.enable_bl and config.loss_kind == 'bsl' else ''}")
    logger.info(f"  Num parameters = {self.params.num_parameters()}")

    writer = self._tensorboard()
    log_path = os.path.join(self.output_dir, TRAIN_LOG_NAME)
    with open(log_path, "w") as log_file:
      for epoch in tqdm(range(config.epochs), desc="Epoch", disable=config.disable_tqdm):
        report = train_epoch(
            self.params, self.train_samples, config, epoch, self.state, self.thresholds, self.rng)
        self.history.append(report)
        log_file.write(report.to_log_line() + "\n")
        log_file.flush()
        logger.debug(report.to_log_line())
        if writer is not None:
          writer.add_scalar("train/loss", report.loss, epoch)
          writer.add_scalar("train/mae", report.mae, epoch)
          writer.add_scalar("train/lr", report.lr, epoch)
          for key, value in report.terms.items():
            writer.add_scalar(f"train/{key}", value, epoch)
    if writer is not None:
      writer.close()

    if self.history:
      last = self.history[-1]
      logger.info(f"  Final loss = {round(last.loss, 4)}, training MAE = {round(last.mae, 4)}")
    logger.info("\n\nTraining completed.\n\n")
    save_checkpoint(self.params, self.state, os.path.join(self.output_dir, CHECKPOINT_NAME))
    return self.history
