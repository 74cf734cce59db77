#!/usr/bin/env python
# coding=utf-8
""" Command-line entry point of the CFANet crowd density pipeline.

Usage: python run_cfanet.py <subcommand> [--config run.json] [--flag value ...]

Subcommands: synth, gengt, train, eval, gradcheck, ablate, compare-losses.
Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical failure.
"""

import argparse
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from typing import Dict, List, Optional, Sequence

import numpy as np
from transformers import HfArgumentParser, set_seed

from extra.ablation import AXES, run_ablation, write_ablation
from extra.cfanet_trainer import CHECKPOINT_NAME, CFANetTrainer, TrainConfig, load_checkpoint
from extra.errors import DataError, FormatError, NonFiniteError
from extra.gradcheck_suite import GRADCHECKS, run_gradchecks
from extra.groundtruth import density_from_points, make_targets, thresholds_for
from extra.raster_io import write_dmap, write_gray
from extra.synthetic_crowd import BACKGROUNDS, LAYOUTS, load_dataset, scene_specs, synthesize, write_dataset
from metrics.crowd_density import evaluate, write_results
from models.modeling_cfanet import ModelConfig, build


logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
THREADS_ENV = "CFANET_THREADS"


@dataclass
class RunArguments:
  """
  Arguments shared by every subcommand.
  """

  config: Optional[str] = field(
      default=None, metadata={"help": "Flat JSON file of flag values; explicit flags override it."}
  )
  out: str = field(default="out", metadata={"help": "Root directory for run directories."})
  run_name: Optional[str] = field(
      default=None, metadata={"help": "Run directory name under --out (default: <subcommand>_<timestamp>)."}
  )
  log_level: str = field(default="info", metadata={"help": "Logging level: debug, info, warning or error."})


@dataclass
class DataArguments:
  """
  Arguments pertaining to what data we are going to train and evaluate on.
  """

  manifest: Optional[str] = field(
      default=None, metadata={"help": "Training dataset manifest; a synthetic set is generated when omitted."}
  )
  eval_manifest: Optional[str] = field(
      default=None, metadata={"help": "Held-out manifest; a cluttered synthetic set is generated when omitted."}
  )
  image_size: int = field(default=96, metadata={"help": "Side of synthesized scenes."})
  n_train: int = field(default=8, metadata={"help": "Number of synthesized training scenes."})
  n_eval: int = field(default=32, metadata={"help": "Number of synthesized held-out scenes."})

  def __post_init__(self):
    if self.image_size < 16 or self.n_train < 1 or self.n_eval < 1:
      raise ValueError("image_size must be at least 16 and n_train, n_eval positive")


@dataclass
class SynthArguments:
  """
  Arguments of the synthetic dataset generator.
  """

  n_scenes: int = field(default=8, metadata={"help": "Number of scenes to generate."})
  width: int = field(default=96, metadata={"help": "Scene width."})
  height: int = field(default=96, metadata={"help": "Scene height."})
  layouts: str = field(default=",".join(LAYOUTS), metadata={"help": f"Comma-separated layouts from {LAYOUTS}."})
  backgrounds: str = field(
      default="flat,textured-noise", metadata={"help": f"Comma-separated backgrounds from {BACKGROUNDS}."}
  )
  min_people: int = field(default=20, metadata={"help": "Minimum heads per scene."})
  max_people: int = field(default=80, metadata={"help": "Maximum heads per scene."})
  seed: int = field(default=42, metadata={"help": "Generator seed."})

  def __post_init__(self):
    if not 0 <= self.min_people <= self.max_people:
      raise ValueError(f"Need 0 <= min_people <= max_people, got {self.min_people}, {self.max_people}")


@dataclass
class GengtArguments:
  k: int = field(default=6, metadata={"help": "Number of density-level classes for the FAM targets."})
  seed: int = field(default=42, metadata={"help": "Seed of the synthesized set when no --manifest is given."})


@dataclass
class EvalArguments:
  checkpoint: Optional[str] = field(default=None, metadata={"help": "CFCK checkpoint to evaluate."})
  dump_maps: bool = field(
      default=False, metadata={"help": "Write predicted density (DMAP + PGM preview) and attention PGMs."}
  )


@dataclass
class GradcheckArguments:
  tol: float = field(default=1e-4, metadata={"help": "Maximum relative error."})
  eps: float = field(default=1e-5, metadata={"help": "Central difference step."})
  seed: int = field(default=0, metadata={"help": "First seed of the randomized inputs."})
  num_seeds: int = field(default=1, metadata={"help": "Number of randomized inputs per check."})
  checks: Optional[str] = field(
      default=None, metadata={"help": f"Comma-separated subset of checks (default all): {', '.join(GRADCHECKS)}."}
  )


@dataclass
class AblateArguments:
  axis: str = field(default="branches", metadata={"help": f"Ablation axis, one of {sorted(AXES)}."})
  num_seeds: int = field(default=5, metadata={"help": "Seeds per arm, starting at --seed."})

  def __post_init__(self):
    if self.axis not in AXES:
      raise ValueError(f"axis must be one of {sorted(AXES)}, got {self.axis!r}")
    if self.num_seeds < 1:
      raise ValueError(f"num_seeds must be positive, got {self.num_seeds}")


SUBCOMMANDS = {
    "synth": (RunArguments, SynthArguments),
    "gengt": (RunArguments, DataArguments, GengtArguments),
    "train": (RunArguments, DataArguments, ModelConfig, TrainConfig),
    "eval": (RunArguments, DataArguments, ModelConfig, TrainConfig, EvalArguments),
    "gradcheck": (RunArguments, GradcheckArguments),
    "ablate": (RunArguments, DataArguments, ModelConfig, TrainConfig, AblateArguments),
    "compare-losses": (RunArguments, DataArguments, ModelConfig, TrainConfig, AblateArguments),
}

MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}


def all_config_keys() -> set:
  return {f.name for types in SUBCOMMANDS.values() for t in types for f in dataclasses.fields(t)}


def load_config_file(path: str) -> Dict:
  with open(path) as f:
    try:
      values = json.load(f)
    except json.JSONDecodeError as e:
      raise ValueError(f"Config file {path} is not valid JSON ({e})")
  if not isinstance(values, dict):
    raise ValueError(f"Config file {path} must hold a flat JSON object")
  unknown = sorted(set(values) - all_config_keys())
  if unknown:
    raise ValueError(f"Unknown keys in config file {path}: {unknown}")
  return values


def build_parser(subcommand: str) -> HfArgumentParser:
  return HfArgumentParser(
      SUBCOMMANDS[subcommand],
      prog=f"run_cfanet.py {subcommand}",
      formatter_class=argparse.ArgumentDefaultsHelpFormatter,
  )


def parse_subcommand(subcommand: str, args: Sequence[str]):
  """Parse ``args`` into the subcommand's dataclasses, layering defaults < checkpoint config < --config < flags."""
  pre = argparse.ArgumentParser(add_help=False)
  pre.add_argument("--config", default=None)
  pre.add_argument("--checkpoint", default=None)
  known, _ = pre.parse_known_args(args)

  defaults = {}
  if subcommand == "eval" and known.checkpoint:
    saved = os.path.join(os.path.dirname(os.path.abspath(known.checkpoint)), "config.json")
    if os.path.exists(saved):
      with open(saved) as f:
        defaults.update({k: v for k, v in json.load(f).items() if k in MODEL_KEYS})
  if known.config:
    defaults.update(load_config_file(known.config))

  parser = build_parser(subcommand)
  accepted = {action.dest for action in parser._actions}
  parser.set_defaults(**{k: v for k, v in defaults.items() if k in accepted})
  return parser.parse_args_into_dataclasses(args=list(args))


def make_run_dir(subcommand: str, run: RunArguments) -> str:
  name = run.run_name or f"{subcommand}_{datetime.now().strftime('%Y%m%d%H%M%S')}"
  run_dir = os.path.join(run.out, name)
  os.makedirs(run_dir, exist_ok=True)
  return run_dir


def echo_config(run_dir: str, parsed) -> None:
  resolved = {}
  for obj in parsed:
    resolved.update(dataclasses.asdict(obj))
  with open(os.path.join(run_dir, "config.json"), "w") as f:
    json.dump(resolved, f, indent=2, sort_keys=True)


def make_executor() -> Optional[ThreadPoolExecutor]:
  raw = os.environ.get(THREADS_ENV, "1")
  try:
    threads = int(raw)
  except ValueError:
    raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}")
  if threads < 1:
    raise ValueError(f"{THREADS_ENV} must be at least 1, got {threads}")
  return ThreadPoolExecutor(max_workers=threads) if threads > 1 else None


def _split(values: str) -> List[str]:
  return [v.strip() for v in values.split(",") if v.strip()]


def training_samples(data: DataArguments, seed: int, executor=None):
  if data.manifest:
    return load_dataset(data.manifest)
  specs = scene_specs(data.n_train, data.image_size, data.image_size, seed)
  logger.info(f"No --manifest given, synthesizing {len(specs)} training scenes of {data.image_size}px")
  return synthesize(specs, prefix="train", executor=executor)


def held_out_samples(data: DataArguments, seed: int, executor=None):
  if data.eval_manifest:
    return load_dataset(data.eval_manifest)
  specs = scene_specs(
      data.n_eval, data.image_size, data.image_size, seed + 1000, backgrounds=("geometric-clutter",))
  logger.info(f"No --eval_manifest given, synthesizing {len(specs)} cluttered held-out scenes")
  return synthesize(specs, prefix="heldout", executor=executor)


def cmd_synth(run_dir, run: RunArguments, synth: SynthArguments, executor=None) -> int:
  specs = scene_specs(
      synth.n_scenes, synth.width, synth.height, synth.seed,
      backgrounds=_split(synth.backgrounds), layouts=_split(synth.layouts),
      people_range=(synth.min_people, synth.max_people))
  samples = synthesize(specs, prefix="scene", executor=executor)
  manifest = write_dataset(samples, os.path.join(run_dir, "data"))
  logger.info(f"Manifest written to {manifest}")
  return EXIT_OK


def cmd_gengt(run_dir, run: RunArguments, data: DataArguments, gengt: GengtArguments, executor=None) -> int:
  samples = training_samples(data, gengt.seed, executor)
  annotations = [s.annotation for s in samples]
  thresholds = thresholds_for(annotations, gengt.k)
  out_dir = os.path.join(run_dir, "groundtruth")
  os.makedirs(out_dir, exist_ok=True)

  def render(annotation):
    dm = density_from_points(annotation)
    targets = make_targets(dm, thresholds, gengt.k)
    write_dmap(os.path.join(out_dir, f"{annotation.image_id}.dmap"), dm.raster)
    write_gray(os.path.join(out_dir, f"{annotation.image_id}_cam.pgm"), targets.cam * 255)
    write_gray(os.path.join(out_dir, f"{annotation.image_id}_fam.pgm"), targets.fam)
    return annotation.image_id, dm.count, len(annotation)

  rows = list(executor.map(render, annotations)) if executor is not None else [render(a) for a in annotations]
  with open(os.path.join(out_dir, "thresholds.json"), "w") as f:
    json.dump({"k": gengt.k, "thresholds": [float(t) for t in thresholds]}, f, indent=2)
  for image_id, count, n_points in rows:
    logger.debug(f"  {image_id}: density sum {count:.4f} for {n_points} points")
  logger.info(f"Wrote groundtruth for {len(rows)} images to {out_dir}")
  return EXIT_OK


def cmd_train(run_dir, run, data: DataArguments, model: ModelConfig, train: TrainConfig, executor=None) -> int:
  samples = training_samples(data, train.seed, executor)
  thresholds = thresholds_for([s.annotation for s in samples], model.k)
  with open(os.path.join(run_dir, "thresholds.json"), "w") as f:
    json.dump({"k": model.k, "thresholds": [float(t) for t in thresholds]}, f, indent=2)
  params = build(model, seed=train.seed)
  CFANetTrainer(params, train, samples, thresholds, run_dir).train()
  return EXIT_OK


def cmd_eval(run_dir, run, data: DataArguments, model: ModelConfig, train: TrainConfig, evaluation: EvalArguments,
             executor=None) -> int:
  if not evaluation.checkpoint:
    raise ValueError("eval needs --checkpoint")
  params, _ = load_checkpoint(evaluation.checkpoint, model)
  samples = held_out_samples(data, train.seed, executor)
  dump_dir = os.path.join(run_dir, "maps") if evaluation.dump_maps else None
  records, summary = evaluate(params, samples, train.expansion, dump_dir=dump_dir, executor=executor)
  summary_path, _ = write_results(records, summary, run_dir)
  print(json.dumps(summary))
  logger.info(f"Summary written to {summary_path}")
  return EXIT_OK


def cmd_gradcheck(run_dir, run, args: GradcheckArguments, executor=None) -> int:
  logger.info("***** Running gradient checks *****")
  results = run_gradchecks(
      tol=args.tol, eps=args.eps, seed=args.seed, num_seeds=args.num_seeds,
      names=_split(args.checks) if args.checks else None)
  payload = [
      {"check": name, "seed": seed, "max_rel_err": report.max_error, "passed": report.passed,
       "failure": report.failure}
      for name, seed, report in results
  ]
  with open(os.path.join(run_dir, "gradcheck.json"), "w") as f:
    json.dump(payload, f, indent=2)
  failed = [p for p in payload if not p["passed"]]
  logger.info(f"  {len(payload) - len(failed)}/{len(payload)} checks passed")
  return EXIT_NUMERIC if failed else EXIT_OK


def cmd_ablate(run_dir, run, data, model, train, ablate: AblateArguments, executor=None, axis=None,
               name=None) -> int:
  axis = axis or ablate.axis
  seeds = [train.seed + i for i in range(ablate.num_seeds)]
  train_samples = training_samples(data, train.seed, executor)
  eval_samples = held_out_samples(data, train.seed, executor)
  rows = run_ablation(axis, model, train, train_samples, eval_samples, seeds, run_dir, executor)
  write_ablation(rows, run_dir, name or f"ablate_{axis}")
  return EXIT_OK


def cmd_compare_losses(run_dir, run, data, model, train, ablate, executor=None) -> int:
  return cmd_ablate(run_dir, run, data, model, train, ablate, executor, axis="loss", name="compare_losses")


COMMANDS = {
    "synth": cmd_synth,
    "gengt": cmd_gengt,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "compare-losses": cmd_compare_losses,
}


def usage() -> str:
  return f"usage: run_cfanet.py {{{','.join(SUBCOMMANDS)}}} [--config PATH] [flags]  (see <subcommand> --help)"


def run(argv: Sequence[str]) -> int:
  if not argv or argv[0] in ("-h", "--help"):
    print(usage())
    return EXIT_OK if argv else EXIT_USAGE
  subcommand, args = argv[0], list(argv[1:])
  if subcommand not in SUBCOMMANDS:
    print(f"Unknown subcommand {subcommand!r}\n{usage()}", file=sys.stderr)
    return EXIT_USAGE

  parsed = parse_subcommand(subcommand, args)
  run_args = parsed[0]

  # Setup logging
  logging.basicConfig(
      format="%(asctime)s - %(levelname)s - %(name)s -   %(message)s",
      datefmt="%m/%d/%Y %H:%M:%S",
      handlers=[logging.StreamHandler(sys.stdout)],
  )
  level = getattr(logging, run_args.log_level.upper(), None)
  if not isinstance(level, int):
    raise ValueError(f"Unknown log level {run_args.log_level!r}")
  logging.getLogger().setLevel(level)

  seed = next((getattr(p, "seed") for p in parsed if hasattr(p, "seed")), 0)
  set_seed(seed)

  run_dir = make_run_dir(subcommand, run_args)
  echo_config(run_dir, parsed)
  logger.info(f"Running {subcommand} into {run_dir}")
  executor = make_executor()
  try:
    return COMMANDS[subcommand](run_dir, *parsed, executor=executor)
  finally:
    if executor is not None:
      executor.shutdown()


def main(argv: Optional[Sequence[str]] = None) -> int:
  argv = list(sys.argv[1:] if argv is None else argv)
  try:
    return run(argv)
  except SystemExit as e:
    # argparse exits with 2 on bad flags and 0 after --help
    return EXIT_OK if not e.code else EXIT_USAGE
  except NonFiniteError as e:
    logger.error(f"Numerical failure: {e}")
    return EXIT_NUMERIC
  except (DataError, FormatError, OSError) as e:
    logger.error(f"Data error: {e}")
    return EXIT_DATA
  except ValueError as e:
    logger.error(f"Usage error: {e}")
    return EXIT_USAGE


if __name__ == "__main__":
  sys.exit(main())
