# coding=utf-8
"""Crowd counting and density map quality metrics."""

import json
import logging
import math
import os
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import datasets
import numpy as np
from sklearn.metrics import mean_absolute_error, mean_squared_error

from extra.errors import UndefinedMetricError
from extra.groundtruth import CROWD_THRESHOLD, density_from_points
from extra.raster_io import preview, to_uint8, write_dmap, write_gray
from models import autograd as ag
from models.loss_cfanet import SsimConstants, ssim
from models.modeling_cfanet import DOWNSAMPLE, Parameters, forward


logger = logging.getLogger(__name__)


_DESCRIPTION = """
Counting accuracy and density map quality of a crowd density estimator.
MAE and RMSE compare estimated and annotated counts:
MAE = mean |C_est - C_gt|, RMSE = sqrt(mean (C_est - C_gt)^2)
SSIM and PSNR compare the estimated map with the groundtruth map, and r_bg is the share of estimated
mass falling on groundtruth background (pixels below 1e-5).
"""

_KWARGS_DESCRIPTION = """
Args:
    predictions: estimated count per image.
    references: annotated count per image.
    ssim_scores: optional full-resolution SSIM per image, NaN when undefined.
    psnr_scores: optional PSNR in dB per image, NaN when the groundtruth map is empty.
    bg_ratios: optional background false-recognition ratio per image.
Returns:
    mae: mean absolute count error.
    rmse: root mean squared count error.
    mean_ssim: mean SSIM over images, NaN entries skipped.
    mean_psnr: mean PSNR in dB over images with a non-empty groundtruth.
    mean_bg_ratio: mean background false-recognition ratio.
    n_images: number of images.
Examples:

    >>> metric = datasets.load_metric("metrics/crowd_density", keep_in_memory=True)
    >>> metric.compute(predictions=[10.0], references=[12.0])["mae"]
    2.0
"""

PSNR_SENTINEL = 99.0
MASS_GUARD = 1e-8


@dataclass
class EvalRecord:
  image_id: str
  count_est: float
  count_gt: float
  ssim: float
  psnr: float
  bg_mass: float
  total_mass: float

  @property
  def bg_ratio(self) -> float:
    return self.bg_mass / self.total_mass if self.total_mass >= MASS_GUARD else 0.0

  def to_json(self) -> Dict:
    record = asdict(self)
    record["bg_ratio"] = self.bg_ratio
    return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in record.items()}


def _counts(records: Sequence[EvalRecord]) -> Tuple[List[float], List[float]]:
  if not records:
    raise ValueError("Metrics need at least one record")
  return [r.count_gt for r in records], [r.count_est for r in records]


def mae(records: Sequence[EvalRecord]) -> float:
  gt, est = _counts(records)
  return float(mean_absolute_error(gt, est))


def rmse(records: Sequence[EvalRecord]) -> float:
  gt, est = _counts(records)
  return float(np.sqrt(mean_squared_error(gt, est)))


def psnr(dm_est, dm_gt) -> float:
  """PSNR in dB after scaling both maps by max(dm_gt); identical maps give the 99 dB sentinel."""
  est = np.asarray(dm_est, dtype=np.float64)
  gt = np.asarray(dm_gt, dtype=np.float64)
  if est.shape != gt.shape:
    raise ValueError(f"psnr inputs differ in shape: {est.shape} vs {gt.shape}")
  peak = gt.max(initial=0.0)
  if peak <= 0:
    raise UndefinedMetricError("psnr is undefined for an all-zero groundtruth map")
  mse = float(np.mean((est / peak - gt / peak) ** 2))
  if mse == 0:
    return PSNR_SENTINEL
  return min(PSNR_SENTINEL, -10.0 * math.log10(mse))


def bg_ratio(dm_est, gt_bg_mask) -> float:
  est = np.asarray(dm_est, dtype=np.float64)
  total = est.sum()
  if total < MASS_GUARD:
    return 0.0
  return float((est * np.asarray(gt_bg_mask, dtype=np.float64)).sum() / total)


def ssim_index(dm_est, dm_gt, consts: SsimConstants = SsimConstants()) -> float:
  """Full-resolution SSIM with the training window; NaN when the map is smaller than the window."""
  est = np.asarray(dm_est, dtype=np.float64)
  gt = np.asarray(dm_gt, dtype=np.float64)
  if min(est.shape) < consts.window_size:
    return float("nan")
  return ssim(ag.Tensor(est[None, None]), ag.Tensor(gt[None, None]), consts).item()


def _nanmean(values: Optional[Sequence[float]]) -> Optional[float]:
  if values is None:
    return None
  array = np.asarray(values, dtype=np.float64)
  finite = array[~np.isnan(array)]
  return float(finite.mean()) if finite.size else None


@datasets.utils.file_utils.add_start_docstrings(_DESCRIPTION, _KWARGS_DESCRIPTION)
class CrowdDensity(datasets.Metric):
  def _info(self):
    return datasets.MetricInfo(
        description=_DESCRIPTION,
        citation="",
        inputs_description=_KWARGS_DESCRIPTION,
        features=datasets.Features(
            {
                "predictions": datasets.Value("float64"),
                "references": datasets.Value("float64"),
            }
        ),
    )

  def _compute(self, predictions, references, ssim_scores=None, psnr_scores=None, bg_ratios=None):
    if len(predictions) == 0:
      raise ValueError("Metrics need at least one image")
    return {
        "mae": float(mean_absolute_error(references, predictions)),
        "rmse": float(np.sqrt(mean_squared_error(references, predictions))),
        "mean_ssim": _nanmean(ssim_scores),
        "mean_psnr": _nanmean(psnr_scores),
        "mean_bg_ratio": float(np.mean(bg_ratios)) if bg_ratios is not None else None,
        "n_images": len(predictions),
    }


def metric_inputs(records: Sequence[EvalRecord]) -> Dict[str, List[float]]:
  """Keyword arguments of :meth:`CrowdDensity.compute` for per-image records."""
  return {
      "predictions": [r.count_est for r in records],
      "references": [r.count_gt for r in records],
      "ssim_scores": [r.ssim for r in records],
      "psnr_scores": [r.psnr for r in records],
      "bg_ratios": [r.bg_ratio for r in records],
  }


def summarize(records: Sequence[EvalRecord]) -> Dict:
  if not records:
    raise ValueError("Metrics need at least one record")
  return CrowdDensity(keep_in_memory=True).compute(**metric_inputs(records))


def _pad_to_multiple(image: np.ndarray, multiple: int = DOWNSAMPLE) -> np.ndarray:
  _, h, w = image.shape
  ph, pw = (-h) % multiple, (-w) % multiple
  if ph == 0 and pw == 0:
    return image
  mode = "reflect" if ph < h and pw < w else "symmetric"
  return np.pad(image, ((0, 0), (0, ph), (0, pw)), mode=mode)


def evaluate_sample(
    params: Parameters,
    sample,
    expansion: float,
    forward_fn: Callable = forward,
    dump_dir: Optional[str] = None,
) -> EvalRecord:
  """Forward one uncropped image and score it against its groundtruth."""
  ann = sample.annotation
  h, w = ann.height, ann.width
  padded = _pad_to_multiple(sample.image)
  outputs = forward_fn(params, ag.Tensor(padded[None], dtype=params.dtype))
  estimate = outputs.final.data[0, 0, :h, :w].astype(np.float64) / expansion
  gt = density_from_points(ann).raster
  bg_mask = gt < CROWD_THRESHOLD

  try:
    psnr_value = psnr(estimate, gt)
  except UndefinedMetricError:
    psnr_value = float("nan")
  record = EvalRecord(
      image_id=ann.image_id,
      count_est=float(estimate.sum()),
      count_gt=float(len(ann)),
      ssim=ssim_index(estimate, gt),
      psnr=psnr_value,
      bg_mass=float((estimate * bg_mask).sum()),
      total_mass=float(estimate.sum()),
  )

  if dump_dir is not None:
    write_dmap(os.path.join(dump_dir, f"{ann.image_id}_density.dmap"), estimate)
    write_gray(os.path.join(dump_dir, f"{ann.image_id}_density.pgm"), preview(estimate))
    attention = outputs.attention[-1] if outputs.attention else None
    if attention is not None:
      # attention lies in [0, 2]
      write_gray(os.path.join(dump_dir, f"{ann.image_id}_attention.pgm"),
                 to_uint8(attention.data[0, 0, :h, :w] / 2.0))
  return record


def evaluate(
    params: Parameters,
    samples: Sequence,
    expansion: float = 50.0,
    forward_fn: Callable = forward,
    dump_dir: Optional[str] = None,
    executor=None,
) -> Tuple[List[EvalRecord], Dict]:
  """Score ``params`` on uncropped samples; returns per-image records and the summary."""
  if dump_dir is not None:
    os.makedirs(dump_dir, exist_ok=True)

  def run(sample):
    return evaluate_sample(params, sample, expansion, forward_fn, dump_dir)

  records = list(executor.map(run, samples)) if executor is not None else [run(s) for s in samples]
  summary = summarize(records)
  logger.info(f"***** Eval results on {summary['n_images']} images *****")
  for key, value in summary.items():
    logger.info(f"  {key} = {value}")
  return records, summary


def write_results(records: Sequence[EvalRecord], summary: Dict, output_dir: str,
                  prefix: str = "eval") -> Tuple[str, str]:
  os.makedirs(output_dir, exist_ok=True)
  summary_path = os.path.join(output_dir, f"{prefix}_summary.json")
  records_path = os.path.join(output_dir, f"{prefix}_records.jsonl")
  with open(summary_path, "w") as f:
    json.dump(summary, f, indent=2)
  with open(records_path, "w") as f:
    for record in records:
      f.write(json.dumps(record.to_json()) + "\n")
  return summary_path, records_path
