# coding=utf-8
"""Raster file formats: DMAP density rasters and 8-bit PGM/PPM images."""

import logging
import os
import struct

import numpy as np
from PIL import Image

from extra.errors import FormatError


logger = logging.getLogger(__name__)

DMAP_MAGIC = b"DMAP"
_DMAP_HEADER = struct.Struct("<4sII")


def write_dmap(path, raster) -> None:
  """magic "DMAP", u32 LE height, u32 LE width, then row-major float32 LE values."""
  raster = np.asarray(raster)
  if raster.ndim != 2:
    raise ValueError(f"DMAP rasters are 2-D, got shape {raster.shape}")
  h, w = raster.shape
  with open(path, "wb") as f:
    f.write(_DMAP_HEADER.pack(DMAP_MAGIC, h, w))
    f.write(np.ascontiguousarray(raster, dtype="<f4").tobytes())


def read_dmap(path) -> np.ndarray:
  with open(path, "rb") as f:
    blob = f.read()
  if len(blob) < _DMAP_HEADER.size:
    raise FormatError(f"{path}: truncated DMAP header ({len(blob)} bytes)")
  magic, h, w = _DMAP_HEADER.unpack_from(blob)
  if magic != DMAP_MAGIC:
    raise FormatError(f"{path}: bad magic {magic!r}, expected {DMAP_MAGIC!r}")
  expected = _DMAP_HEADER.size + 4 * h * w
  if len(blob) != expected:
    raise FormatError(f"{path}: DMAP payload has {len(blob)} bytes, expected {expected} for {h}x{w}")
  return np.frombuffer(blob, dtype="<f4", offset=_DMAP_HEADER.size).reshape(h, w).astype(np.float32)


def to_uint8(values) -> np.ndarray:
  return np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_image(path, image) -> None:
  """Write a (c, h, w) float image in [0, 1]; one channel gives PGM, three give PPM."""
  image = np.asarray(image)
  if image.ndim != 3 or image.shape[0] not in (1, 3):
    raise ValueError(f"write_image expects a (1|3, h, w) array, got {image.shape}")
  pixels = to_uint8(image)
  if image.shape[0] == 1:
    Image.fromarray(pixels[0]).save(path, format="PPM")
  else:
    Image.fromarray(np.ascontiguousarray(pixels.transpose(1, 2, 0))).save(path, format="PPM")


def write_gray(path, values) -> None:
  """Write a 2-D uint8 array as a binary PGM."""
  values = np.asarray(values)
  if values.ndim != 2:
    raise ValueError(f"write_gray expects a 2-D array, got {values.shape}")
  Image.fromarray(values.astype(np.uint8)).save(path, format="PPM")


def read_image(path, channels: int = 3) -> np.ndarray:
  """Decode a PGM/PPM (or any Pillow-readable image) to a float32 (channels, h, w) array in [0, 1]."""
  if not os.path.exists(path):
    raise FileNotFoundError(f"Image file {path} not found")
  with Image.open(path) as img:
    mode = "L" if channels == 1 else "RGB"
    pixels = np.asarray(img.convert(mode), dtype=np.float32) / 255.0
  if pixels.ndim == 2:
    pixels = pixels[None]
  else:
    pixels = pixels.transpose(2, 0, 1)
  return np.ascontiguousarray(pixels)


def preview(raster) -> np.ndarray:
  """Min-max scale a float raster to uint8 for eyeballing."""
  raster = np.asarray(raster, dtype=np.float64)
  lo, hi = raster.min(initial=0.0), raster.max(initial=0.0)
  if hi - lo <= 0:
    return np.zeros(raster.shape, dtype=np.uint8)
  return to_uint8((raster - lo) / (hi - lo))
