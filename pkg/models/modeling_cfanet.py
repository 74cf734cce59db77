# coding=utf-8
"""CFANet: coarse/fine attention network for crowd density estimation.

A VGG-style encoder (10 convolutions, 3 pools) feeds three decoders that run in lockstep over the
scales 1/8, 1/4, 1/2 and 1:

  * CRR (crowd region recognizer) predicts a binary crowd map (CAM logits),
  * DLE (density level estimator) predicts k density-level classes (FAM logits),
  * DME (density map estimator, dilation 2) predicts the density map.

At every stage the CAM and FAM heads are combined into a single attention map that gates the DME
features as ``fm + A * fm``. Every stage has its own CAM/FAM/density head whose output is
bilinearly upsampled to the input resolution for multi-level supervision.
"""

import io
import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np

from extra.errors import FormatError, UnsupportedVersionError
from models import autograd as ag
from models.autograd import ConvSpec, Tensor


logger = logging.getLogger(__name__)

ENCODER_CHANNELS = ((64, 64), (128, 128), (256, 256, 256), (512, 512, 512))
CRR_CHANNELS = (256, 128, 128, 64)
DLE_CHANNELS = (256, 256, 128, 64)
DME_CHANNELS = (512, 256, 256, 64)
NUM_STAGES = 4
DOWNSAMPLE = 8
INIT_SCHEMES = ("gaussian", "kaiming")


@dataclass
class ModelConfig:
  """
  Arguments describing the CFANet architecture.
  """

  k: int = field(default=6, metadata={"help": "Number of density-level classes predicted by the DLE branch."})
  width_mult: float = field(
      default=1.0, metadata={"help": "Channel scale factor in (0, 1]; 0.125 gives the desk-scale tiny model."}
  )
  input_channels: int = field(default=3, metadata={"help": "Number of image channels."})
  dilation: int = field(default=2, metadata={"help": "Dilation rate of the DME convolutions."})
  init_std: float = field(default=0.01, metadata={"help": "Std of the Gaussian weight initialization (every weight, or heads only under kaiming)."})
  init_scheme: str = field(
      default="gaussian",
      metadata={"help": "Weight init: gaussian (N(0, init_std^2) everywhere) or kaiming (He std for hidden convolutions)."},
  )
  use_crr: bool = field(default=True, metadata={"help": "Build the crowd region recognizer (CAM) branch."})
  use_dle: bool = field(default=True, metadata={"help": "Build the density level estimator (FAM) branch."})

  def __post_init__(self):
    if self.k < 2:
      raise ValueError(f"k must be at least 2, got {self.k}")
    if not 0 < self.width_mult <= 1:
      raise ValueError(f"width_mult must be in (0, 1], got {self.width_mult}")
    if round(self.width_mult * 64) < 1:
      raise ValueError(f"width_mult {self.width_mult} leaves the first encoder stage without channels")
    if self.input_channels < 1 or self.dilation < 1:
      raise ValueError(f"input_channels and dilation must be positive, got {self.input_channels}, {self.dilation}")
    if self.init_std <= 0:
      raise ValueError(f"init_std must be positive, got {self.init_std}")
    if self.init_scheme not in INIT_SCHEMES:
      raise ValueError(f"init_scheme must be one of {INIT_SCHEMES}, got {self.init_scheme!r}")

  def channels(self, n: int) -> int:
    return max(1, int(round(n * self.width_mult)))


@dataclass(frozen=True)
class LayerSpec:
  name: str
  in_channels: int
  conv: ConvSpec


def layer_specs(config: ModelConfig) -> List[LayerSpec]:
  """All convolutions of the network in execution order."""
  c = config.channels
  layers = []
  in_ch = config.input_channels
  for block, widths in enumerate(ENCODER_CHANNELS, start=1):
    for j, width in enumerate(widths, start=1):
      layers.append(LayerSpec(f"encoder.block{block}.conv{j}", in_ch, ConvSpec(c(width), 3)))
      in_ch = c(width)
  bottleneck = in_ch

  branches = []
  if config.use_crr:
    branches.append(("crr", CRR_CHANNELS, 1, 1, 3))
  if config.use_dle:
    branches.append(("dle", DLE_CHANNELS, config.k, 1, 3))
  branches.append(("dme", DME_CHANNELS, 1, config.dilation, 1))
  for prefix, widths, out_channels, dilation, last_kernel in branches:
    in_ch = bottleneck
    for stage, width in enumerate(widths, start=1):
      layers.append(LayerSpec(f"{prefix}.stage{stage}", in_ch, ConvSpec(c(width), 3, dilation)))
      in_ch = c(width)
      kernel = last_kernel if stage == NUM_STAGES else 3
      layers.append(LayerSpec(f"{prefix}.head{stage}", in_ch, ConvSpec(out_channels, kernel, dilation)))
  return layers


class Parameters:
  """Named weights and biases of one CFANet instance, bundled with its config."""

  def __init__(self, config: ModelConfig, tensors: "OrderedDict[str, Tensor]"):
    self.config = config
    self.tensors = tensors
    self._specs = {spec.name: spec for spec in layer_specs(config)}
    expected = self.expected_shapes(config)
    if list(expected) != list(tensors):
      missing = sorted(set(expected) - set(tensors))
      extra = sorted(set(tensors) - set(expected))
      raise ValueError(f"Parameter names do not match the config (missing {missing}, unexpected {extra})")
    for name, shape in expected.items():
      if tensors[name].shape != shape:
        raise ValueError(f"Parameter {name} has shape {tensors[name].shape}, expected {shape}")

  @staticmethod
  def expected_shapes(config: ModelConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    shapes = OrderedDict()
    for spec in layer_specs(config):
      conv = spec.conv
      shapes[f"{spec.name}.weight"] = (conv.out_channels, spec.in_channels, conv.kernel, conv.kernel)
      shapes[f"{spec.name}.bias"] = (1, conv.out_channels, 1, 1)
    return shapes

  def __getitem__(self, name: str) -> Tensor:
    return self.tensors[name]

  def __len__(self):
    return len(self.tensors)

  def __iter__(self) -> Iterator[str]:
    return iter(self.tensors)

  def items(self):
    return self.tensors.items()

  @property
  def dtype(self):
    return next(iter(self.tensors.values())).dtype

  def num_parameters(self) -> int:
    return int(sum(t.data.size for t in self.tensors.values()))

  def zero_grad(self):
    for tensor in self.tensors.values():
      tensor.zero_grad()

  def conv(self, x: Tensor, name: str) -> Tensor:
    spec = self._specs[name]
    return ag.conv2d(x, self.tensors[f"{name}.weight"], self.tensors[f"{name}.bias"], spec.conv)

  def arrays(self) -> "OrderedDict[str, np.ndarray]":
    return OrderedDict((name, t.data) for name, t in self.tensors.items())

  @classmethod
  def from_arrays(cls, config: ModelConfig, arrays: Mapping[str, np.ndarray], dtype=ag.SINGLE) -> "Parameters":
    expected = cls.expected_shapes(config)
    unexpected = [name for name in arrays if name not in expected]
    if unexpected:
      raise ValueError(f"Parameters {unexpected} do not belong to the given model config")
    tensors = OrderedDict()
    for name in expected:
      if name not in arrays:
        raise ValueError(f"Parameter {name} missing for the given model config")
      tensors[name] = Tensor(np.array(arrays[name], dtype=dtype), requires_grad=True)
    return cls(config, tensors)


def init_std_for(config: ModelConfig, name: str, shape: Tuple[int, ...]) -> float:
  """Std of the weight ``name``: init_std, or sqrt(2 / fan_in) for hidden convolutions under kaiming."""
  if config.init_scheme == "kaiming" and ".head" not in name:
    _, in_channels, kh, kw = shape
    return float(np.sqrt(2.0 / (in_channels * kh * kw)))
  return config.init_std


def build(config: ModelConfig, seed: int, dtype=ag.SINGLE) -> Parameters:
  """Zero-mean Gaussian weights (see :func:`init_std_for`), zero biases; deterministic for a fixed seed.

  The default gaussian scheme draws every weight from N(0, init_std^2); at init_std 0.01 activations and
  gradients shrink ~0.06x per plain convolution. Kaiming keeps hidden convolutions at unit gain.
  """
  rng = np.random.default_rng(seed)
  tensors = OrderedDict()
  for name, shape in Parameters.expected_shapes(config).items():
    if name.endswith(".weight"):
      data = rng.normal(0.0, init_std_for(config, name, shape), size=shape)
    else:
      data = np.zeros(shape)
    tensors[name] = Tensor(data.astype(dtype), requires_grad=True)
  params = Parameters(config, tensors)
  logger.info(f"Built CFANet with {len(params)} tensors, {params.num_parameters()} parameters")
  return params


@dataclass
class ModelOutputs:
  """
  Per-stage outputs of :func:`forward`, all at input resolution.

  ``cam_logits`` / ``fam_logits`` are empty when the corresponding branch is disabled.
  ``attention`` holds the fused attention maps at their stage resolution (None when no branch is built).
  """

  cam_logits: List[Tensor] = field(default_factory=list)
  fam_logits: List[Tensor] = field(default_factory=list)
  density: List[Tensor] = field(default_factory=list)
  attention: List[Optional[Tensor]] = field(default_factory=list)

  @property
  def final(self) -> Tensor:
    return self.density[-1]


def class_weights(k: int) -> np.ndarray:
  """Attention weight of each density-level class: 0 for background, c/(k-1) otherwise."""
  return np.arange(k) / (k - 1)


def refine_attention(fam_logits: Tensor, cam_logits: Tensor, k: int) -> Tensor:
  """A = sum_c softmax(fam)_c * w(c) + sigmoid(cam), in [0, 2]."""
  if fam_logits.shape[2:] != cam_logits.shape[2:] or fam_logits.shape[0] != cam_logits.shape[0]:
    raise ValueError(f"refine_attention: fam {fam_logits.shape} and cam {cam_logits.shape} do not align")
  if fam_logits.shape[1] != k or cam_logits.shape[1] != 1:
    raise ValueError(f"refine_attention expects {k} fam channels and 1 cam channel")
  level = ag.weighted_channel_sum(ag.channel_softmax(fam_logits), class_weights(k))
  return ag.add(level, ag.sigmoid(cam_logits))


def fuse(fm: Tensor, attention: Tensor) -> Tensor:
  if attention.shape != (fm.shape[0], 1) + fm.shape[2:]:
    raise ValueError(f"fuse: attention {attention.shape} does not match features {fm.shape}")
  return ag.add(fm, ag.mul(fm, attention))


def _upsample(x: Tensor, times: int) -> Tensor:
  for _ in range(times):
    x = ag.upsample_bilinear2x(x)
  return x


def encode(params: Parameters, image: Tensor) -> Tensor:
  x = image
  for block, widths in enumerate(ENCODER_CHANNELS, start=1):
    if block > 1:
      x = ag.avgpool2(x)
    for j in range(1, len(widths) + 1):
      x = ag.relu(params.conv(x, f"encoder.block{block}.conv{j}"))
  return x


def forward(params: Parameters, image: Tensor, zero_attention: bool = False) -> ModelOutputs:
  """Run CFANet on a (n, c, h, w) image batch with h and w divisible by 8.

  ``zero_attention`` replaces every attention map by zeros (diagnostic hook); the fused features
  then equal the unfused ones exactly.
  """
  config = params.config
  n, c, h, w = image.shape
  if c != config.input_channels:
    raise ValueError(f"Model expects {config.input_channels} input channels, got {c}")
  if h % DOWNSAMPLE or w % DOWNSAMPLE or h == 0 or w == 0:
    raise ValueError(f"Input size {h}x{w} must be a positive multiple of {DOWNSAMPLE}")

  bottleneck = encode(params, image)
  outputs = ModelOutputs()
  crr = dle = dme = bottleneck
  for stage in range(1, NUM_STAGES + 1):
    if stage > 1:
      crr = ag.upsample_bilinear2x(crr) if config.use_crr else crr
      dle = ag.upsample_bilinear2x(dle) if config.use_dle else dle
      dme = ag.upsample_bilinear2x(dme)
    remaining = NUM_STAGES - stage

    cam = fam = None
    if config.use_crr:
      crr = ag.relu(params.conv(crr, f"crr.stage{stage}"))
      cam = params.conv(crr, f"crr.head{stage}")
      outputs.cam_logits.append(_upsample(cam, remaining))
    if config.use_dle:
      dle = ag.relu(params.conv(dle, f"dle.stage{stage}"))
      fam = params.conv(dle, f"dle.head{stage}")
      outputs.fam_logits.append(_upsample(fam, remaining))

    dme = ag.relu(params.conv(dme, f"dme.stage{stage}"))
    if cam is not None and fam is not None:
      attention = refine_attention(fam, cam, config.k)
    elif cam is not None:
      attention = ag.sigmoid(cam)
    elif fam is not None:
      attention = ag.weighted_channel_sum(ag.channel_softmax(fam), class_weights(config.k))
    else:
      attention = None
    if attention is not None:
      if zero_attention:
        attention = ag.constant(np.zeros(attention.shape), like=dme)
      dme = fuse(dme, attention)
    outputs.attention.append(attention)

    density = ag.relu(params.conv(dme, f"dme.head{stage}"))
    outputs.density.append(_upsample(density, remaining))
  return outputs


# ---------------------------------------------------------------------------------------------
# Checkpoint codec
# ---------------------------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"CFCK"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIQI")


def write_checkpoint(path, entries: Mapping[str, np.ndarray], step: int = 0) -> None:
  """Serialize named float32 arrays.

  Layout: magic "CFCK", u32 version, u64 step, u32 count; per entry u16 name length, UTF-8 name,
  u8 ndim, u32 dims; then the little-endian float32 payloads in manifest order.
  """
  buffer = io.BytesIO()
  buffer.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, step, len(entries)))
  for name, array in entries.items():
    encoded = name.encode("utf-8")
    shape = np.shape(array)
    buffer.write(struct.pack("<H", len(encoded)))
    buffer.write(encoded)
    buffer.write(struct.pack(f"<B{len(shape)}I", len(shape), *shape))
  for array in entries.values():
    buffer.write(np.ascontiguousarray(array, dtype="<f4").tobytes())
  with open(path, "wb") as f:
    f.write(buffer.getvalue())


def read_checkpoint(path) -> Tuple["OrderedDict[str, np.ndarray]", int]:
  """Inverse of :func:`write_checkpoint`; returns ``(entries, step)``."""
  with open(path, "rb") as f:
    blob = f.read()

  def take(fmt: str, offset: int):
    size = struct.calcsize(fmt)
    if offset + size > len(blob):
      raise FormatError(f"{path}: truncated checkpoint at byte {offset}")
    return struct.unpack_from(fmt, blob, offset), offset + size

  if len(blob) < 4 or blob[:4] != CHECKPOINT_MAGIC:
    raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
  (_, version, step, count), offset = take(_HEADER.format, 0)
  if version != CHECKPOINT_VERSION:
    raise UnsupportedVersionError(f"{path}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")

  manifest = []
  for _ in range(count):
    (name_len,), offset = take("<H", offset)
    if offset + name_len > len(blob):
      raise FormatError(f"{path}: truncated checkpoint manifest")
    name = blob[offset:offset + name_len].decode("utf-8")
    offset += name_len
    (ndim,), offset = take("<B", offset)
    dims, offset = take(f"<{ndim}I", offset)
    manifest.append((name, dims))

  entries = OrderedDict()
  for name, dims in manifest:
    nbytes = 4 * int(np.prod(dims, dtype=np.int64))
    if offset + nbytes > len(blob):
      raise FormatError(f"{path}: truncated payload for {name}")
    entries[name] = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=offset).reshape(dims).copy()
    offset += nbytes
  if offset != len(blob):
    raise FormatError(f"{path}: {len(blob) - offset} trailing bytes after the last payload")
  return entries, step


def manifest_of(entries: Mapping[str, np.ndarray]) -> Dict[str, Tuple[int, ...]]:
  return OrderedDict((name, tuple(np.shape(a))) for name, a in entries.items())
