# coding=utf-8
"""Ablation driver: train and evaluate one arm per setting of an axis, averaged over seeds."""

import dataclasses
import json
import logging
import os
from collections import OrderedDict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from extra.cfanet_trainer import CFANetTrainer, TrainConfig
from extra.groundtruth import thresholds_for
from metrics.crowd_density import evaluate
from models.modeling_cfanet import ModelConfig, build


logger = logging.getLogger(__name__)

# arm name -> (model overrides, train overrides)
AXES: Dict[str, "OrderedDict[str, Tuple[Dict, Dict]]"] = {
    "branches": OrderedDict([
        ("baseline", ({"use_crr": False, "use_dle": False}, {})),
        ("+CRR", ({"use_crr": True, "use_dle": False}, {})),
        ("+DLE", ({"use_crr": False, "use_dle": True}, {})),
        ("+CRR+DLE", ({"use_crr": True, "use_dle": True}, {})),
    ]),
    "supervision": OrderedDict([
        ("4", ({}, {"supervision": "4"})),
        ("3-4", ({}, {"supervision": "3,4"})),
        ("2-4", ({}, {"supervision": "2,3,4"})),
        ("1-4", ({}, {"supervision": "1,2,3,4"})),
    ]),
    "k": OrderedDict([(f"k={k}", ({"k": k}, {})) for k in (4, 6, 8, 10)]),
    "loss": OrderedDict([
        ("mse", ({}, {"loss_kind": "mse"})),
        ("ssim_only", ({}, {"loss_kind": "ssim_only"})),
        ("sl_only", ({}, {"loss_kind": "sl_only"})),
        ("bsl", ({}, {"loss_kind": "bsl", "enable_bl": True})),
    ]),
    "bl": OrderedDict([
        ("w/o bg-aware loss", ({}, {"loss_kind": "bsl", "enable_bl": False})),
        ("w. bg-aware loss", ({}, {"loss_kind": "bsl", "enable_bl": True})),
    ]),
}

COLUMNS = ("train_mae", "mae", "rmse", "mean_ssim", "mean_psnr", "mean_bg_ratio")


def run_arm(
    model_config: ModelConfig,
    train_config: TrainConfig,
    train_samples,
    eval_samples,
    output_dir: str,
    executor=None,
) -> Dict:
  """Train one configuration from scratch and score it on ``eval_samples``."""
  params = build(model_config, seed=train_config.seed)
  thresholds = thresholds_for([s.annotation for s in train_samples], model_config.k)
  trainer = CFANetTrainer(params, train_config, train_samples, thresholds, output_dir)
  history = trainer.train()
  _, summary = evaluate(params, eval_samples, train_config.expansion, executor=executor)
  summary["train_mae"] = history[-1].mae if history else None
  summary["train_loss"] = history[-1].loss if history else None
  return summary


def _mean(values: Sequence[Optional[float]]) -> Optional[float]:
  finite = [v for v in values if v is not None and not np.isnan(v)]
  return float(np.mean(finite)) if finite else None


def run_ablation(
    axis: str,
    model_config: ModelConfig,
    train_config: TrainConfig,
    train_samples,
    eval_samples,
    seeds: Sequence[int],
    output_dir: str,
    executor=None,
) -> List[Dict]:
  """One row per arm of ``axis`` with metrics averaged over ``seeds``."""
  if axis not in AXES:
    raise ValueError(f"Unknown ablation axis {axis!r}, expected one of {sorted(AXES)}")
  rows = []
  for arm, (model_overrides, train_overrides) in AXES[axis].items():
    per_seed = []
    for seed in seeds:
      arm_model = dataclasses.replace(model_config, **model_overrides)
      arm_train = dataclasses.replace(train_config, seed=seed, disable_tqdm=True, **train_overrides)
      arm_dir = os.path.join(output_dir, _slug(arm), f"seed{seed}")
      logger.info(f"***** Ablation {axis}: {arm}, seed {seed} *****")
      per_seed.append(run_arm(arm_model, arm_train, train_samples, eval_samples, arm_dir, executor))
    row = OrderedDict([("arm", arm), ("n_seeds", len(per_seed))])
    for column in COLUMNS:
      row[column] = _mean([s.get(column) for s in per_seed])
    row["per_seed"] = per_seed
    rows.append(row)
  return rows


def _slug(arm: str) -> str:
  return "".join(ch if ch.isalnum() else "_" for ch in arm).strip("_") or "arm"


def format_table(rows: Sequence[Dict], columns: Sequence[str] = COLUMNS) -> str:
  header = ["arm"] + list(columns)
  body = []
  for row in rows:
    cells = [str(row["arm"])]
    for column in columns:
      value = row.get(column)
      cells.append("-" if value is None else f"{value:.4f}")
    body.append(cells)
  widths = [max(len(line[i]) for line in [header] + body) for i in range(len(header))]
  lines = ["  ".join(cell.ljust(width) for cell, width in zip(header, widths))]
  lines.append("  ".join("-" * width for width in widths))
  for cells in body:
    lines.append("  ".join(cell.ljust(width) for cell, width in zip(cells, widths)))
  return "\n".join(lines)


def write_ablation(rows: Sequence[Dict], output_dir: str, name: str) -> Tuple[str, str]:
  os.makedirs(output_dir, exist_ok=True)
  json_path = os.path.join(output_dir, f"{name}.json")
  table_path = os.path.join(output_dir, f"{name}.txt")
  with open(json_path, "w") as f:
    json.dump(list(rows), f, indent=2)
  table = format_table(rows)
  with open(table_path, "w") as f:
    f.write(table + "\n")
  logger.info(f"{name}:\n{table}")
  return json_path, table_path
