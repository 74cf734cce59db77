# coding=utf-8
"""Exception types shared by the CFANet pipeline.

Invalid arguments (shape mismatches, bad configuration values) are plain ``ValueError``;
the classes below mark the failures the command line maps to distinct exit codes.
"""


class DataError(ValueError):
  """Annotation or manifest content that cannot be used (e.g. a point outside its image)."""


class FormatError(ValueError):
  """A binary file (DMAP raster, CFCK checkpoint) with bad magic, truncated payload or bad header."""


class UnsupportedVersionError(FormatError):
  pass


class UndefinedMetricError(ValueError):
  pass


class NonFiniteError(FloatingPointError):
  """A NaN or infinity reached a loss, a gradient or a gradient check.

  ``location`` names where it was found (parameter name, op, element index).
  """

  def __init__(self, message, location=None):
    super().__init__(message if location is None else f"{message} (at {location})")
    self.location = location
