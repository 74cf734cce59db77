# coding=utf-8
"""Minimal reverse-mode differentiable tensor engine used by CFANet.

Every value is a dense 4-D array (batch, channel, height, width). Operations executed while a
:class:`Tape` is active are recorded define-by-run; :func:`backward` walks the tape in reverse and
accumulates gradients into the ``grad`` of every ``requires_grad`` leaf reachable from the loss.

Only the operations the network and its losses need are provided. Stride is fixed to 1 for all
convolutions; resolution changes go through :func:`avgpool2` and :func:`upsample_bilinear2x`.
"""

import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from extra.errors import NonFiniteError


logger = logging.getLogger(__name__)

SINGLE = np.float32
DOUBLE = np.float64

_state = threading.local()


class Tensor:
  """Dense (n, c, h, w) array with an optional gradient.

  ``tape_id`` is the index of the node that produced this tensor on the active tape, or ``None``
  for leaves and for tensors created outside any tape.
  """

  def __init__(self, data, requires_grad: bool = False, dtype=None):
    array = np.asarray(data)
    if dtype is None:
      dtype = array.dtype if array.dtype in (SINGLE, DOUBLE) else SINGLE
    array = np.ascontiguousarray(array, dtype=dtype)
    if array.ndim != 4:
      raise ValueError(f"Tensor expects a 4-D (n, c, h, w) array, got shape {array.shape}")
    self.data = array
    self.requires_grad = requires_grad
    self.grad: Optional[np.ndarray] = None
    self.tape_id: Optional[int] = None

  @property
  def shape(self) -> Tuple[int, int, int, int]:
    return self.data.shape

  @property
  def dtype(self):
    return self.data.dtype

  def item(self) -> float:
    if self.data.size != 1:
      raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
    return float(self.data.reshape(-1)[0])

  def numpy(self) -> np.ndarray:
    return self.data

  def detach(self) -> "Tensor":
    return Tensor(self.data.copy(), dtype=self.dtype)

  def zero_grad(self):
    self.grad = None

  def __repr__(self):
    return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

  def __add__(self, other):
    return add(self, other)

  def __sub__(self, other):
    return sub(self, other)

  def __mul__(self, other):
    if isinstance(other, Tensor):
      return mul(self, other)
    return scale(self, other)

  def __truediv__(self, other):
    return div(self, other)


def constant(array, like: Tensor) -> Tensor:
  """Wrap ``array`` as a non-differentiable tensor with the dtype of ``like``."""
  return Tensor(np.asarray(array), dtype=like.dtype)


@dataclass
class _Node:
  output: Tensor
  parents: Tuple[Tensor, ...]
  backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
  """Define-by-run record of differentiable operations.

  Use as a context manager; ops run inside the ``with`` block are recorded in execution order,
  so every node's parents precede it. Tapes are per thread and never share state.
  """

  def __init__(self):
    self.nodes: List[_Node] = []

  def __enter__(self):
    stack = getattr(_state, "tapes", None)
    if stack is None:
      stack = _state.tapes = []
    stack.append(self)
    return self

  def __exit__(self, *exc):
    _state.tapes.pop()
    return False

  def record(self, output: Tensor, parents: Tuple[Tensor, ...], backward_fn) -> None:
    output.tape_id = len(self.nodes)
    self.nodes.append(_Node(output, parents, backward_fn))

  def owns(self, tensor: Tensor) -> bool:
    return (
        tensor.tape_id is not None
        and tensor.tape_id < len(self.nodes)
        and self.nodes[tensor.tape_id].output is tensor
    )


def active_tape() -> Optional[Tape]:
  stack = getattr(_state, "tapes", None)
  return stack[-1] if stack else None


def _result(data: np.ndarray, parents: Tuple[Tensor, ...], backward_fn) -> Tensor:
  out = Tensor(data, dtype=parents[0].dtype)
  tape = active_tape()
  if tape is not None and any(p.requires_grad for p in parents):
    out.requires_grad = True
    tape.record(out, parents, backward_fn)
  return out


def backward(loss: Tensor, tape: Tape) -> None:
  """Populate ``grad`` of every requires_grad leaf reachable from ``loss``.

  Gradients accumulate across calls; zero them explicitly between optimisation steps.
  """
  if loss.shape != (1, 1, 1, 1):
    raise ValueError(f"backward() needs a scalar loss of shape (1, 1, 1, 1), got {loss.shape}")
  if not tape.owns(loss):
    raise ValueError("backward() loss was not recorded on the given tape")

  grads = {loss.tape_id: np.ones_like(loss.data)}
  for node_id in range(loss.tape_id, -1, -1):
    grad = grads.pop(node_id, None)
    if grad is None:
      continue
    node = tape.nodes[node_id]
    parent_grads = node.backward(grad)
    for parent, parent_grad in zip(node.parents, parent_grads):
      if parent_grad is None or not parent.requires_grad:
        continue
      if tape.owns(parent):
        if parent.tape_id in grads:
          grads[parent.tape_id] = grads[parent.tape_id] + parent_grad
        else:
          grads[parent.tape_id] = parent_grad
      else:
        parent_grad = parent_grad.astype(parent.dtype, copy=False)
        parent.grad = parent_grad.copy() if parent.grad is None else parent.grad + parent_grad


# ---------------------------------------------------------------------------------------------
# Convolution, resampling, pooling
# ---------------------------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
  out_channels: int
  kernel: int
  dilation: int = 1
  padding: Optional[int] = None

  def __post_init__(self):
    if self.kernel < 1 or self.dilation < 1 or self.out_channels < 1:
      raise ValueError(f"Invalid ConvSpec {self}")
    if self.padding is None:
      object.__setattr__(self, "padding", self.dilation * (self.kernel - 1) // 2)
    if self.padding < 0:
      raise ValueError(f"Invalid ConvSpec padding {self.padding}")

  @property
  def stride(self) -> int:
    return 1


def conv2d(input: Tensor, weight: Tensor, bias: Optional[Tensor], spec: ConvSpec) -> Tensor:
  n, c, h, w = input.shape
  oc, ic, kh, kw = weight.shape
  if ic != c:
    raise ValueError(f"conv2d input has {c} channels but weight expects {ic}")
  if kh != kw or kh != spec.kernel or oc != spec.out_channels:
    raise ValueError(f"conv2d weight shape {weight.shape} inconsistent with {spec}")
  if bias is not None and bias.shape != (1, oc, 1, 1):
    raise ValueError(f"conv2d bias shape {bias.shape}, expected (1, {oc}, 1, 1)")
  k, d, p = spec.kernel, spec.dilation, spec.padding
  ho, wo = h + 2 * p - d * (k - 1), w + 2 * p - d * (k - 1)
  if ho <= 0 or wo <= 0:
    raise ValueError(f"conv2d on {h}x{w} with kernel {k}, dilation {d}, padding {p} gives empty output")

  xp = np.pad(input.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else input.data
  span = d * (k - 1) + 1
  windows = sliding_window_view(xp, (span, span), axis=(2, 3))[..., ::d, ::d]
  out = np.tensordot(windows, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
  if bias is not None:
    out = out + bias.data

  def _backward(grad):
    grad_w = np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3]))
    # transposed convolution: full-pad the output gradient and correlate with the flipped kernel
    q = span - 1
    gpad = np.pad(grad, ((0, 0), (0, 0), (q, q), (q, q)))
    gwin = sliding_window_view(gpad, (span, span), axis=(2, 3))[..., ::d, ::d]
    grad_xp = np.tensordot(gwin, weight.data[:, :, ::-1, ::-1], axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
    grad_x = grad_xp[:, :, p:p + h, p:p + w] if p else grad_xp
    grad_b = grad.sum(axis=(0, 2, 3)).reshape(1, oc, 1, 1) if bias is not None else None
    return grad_x, grad_w, grad_b

  parents = (input, weight) if bias is None else (input, weight, bias)
  return _result(out, parents, _backward)


def _half_pixel_taps(size: int, dtype):
  # source coordinate (dst + 0.5) / 2 - 0.5, clamped to the valid range
  dst = np.arange(2 * size)
  src = np.clip((dst + 0.5) / 2.0 - 0.5, 0.0, size - 1)
  lo = np.floor(src).astype(np.intp)
  hi = np.minimum(lo + 1, size - 1)
  frac = (src - lo).astype(dtype)
  return lo, hi, frac


def _interpolation_matrix(size: int, dtype) -> np.ndarray:
  lo, hi, frac = _half_pixel_taps(size, dtype)
  rows = np.arange(2 * size)
  matrix = np.zeros((2 * size, size), dtype=dtype)
  np.add.at(matrix, (rows, lo), 1 - frac)
  np.add.at(matrix, (rows, hi), frac)
  return matrix


def upsample_bilinear2x(input: Tensor) -> Tensor:
  """Bilinear 2x upsampling with half-pixel centres (the ``align_corners=False`` rule)."""
  n, c, h, w = input.shape
  if h < 1 or w < 1:
    raise ValueError(f"upsample_bilinear2x needs a non-empty map, got {input.shape}")
  dtype = input.dtype

  lo, hi, frac = _half_pixel_taps(h, dtype)
  x = input.data
  # lerp form keeps constant maps exactly constant
  rows = x[:, :, lo, :] + frac[None, None, :, None] * (x[:, :, hi, :] - x[:, :, lo, :])
  lo, hi, frac = _half_pixel_taps(w, dtype)
  out = rows[:, :, :, lo] + frac[None, None, None, :] * (rows[:, :, :, hi] - rows[:, :, :, lo])

  def _backward(grad):
    mh = _interpolation_matrix(h, grad.dtype)
    mw = _interpolation_matrix(w, grad.dtype)
    return (np.matmul(np.matmul(mh.T, grad), mw),)

  return _result(out, (input,), _backward)


def avgpool2(input: Tensor) -> Tensor:
  """2x2 average pooling; an odd last row/column is replicated before pooling."""
  n, c, h, w = input.shape
  pad_h, pad_w = h % 2, w % 2
  x = input.data
  if pad_h or pad_w:
    x = np.pad(x, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)), mode="edge")
  hp, wp = x.shape[2], x.shape[3]
  out = x.reshape(n, c, hp // 2, 2, wp // 2, 2).mean(axis=(3, 5))

  def _backward(grad):
    g = np.repeat(np.repeat(grad, 2, axis=2), 2, axis=3) / 4.0
    if pad_h:
      g[:, :, -2, :] += g[:, :, -1, :]
      g = g[:, :, :-1, :]
    if pad_w:
      g[:, :, :, -2] += g[:, :, :, -1]
      g = g[:, :, :, :-1]
    return (g,)

  return _result(out, (input,), _backward)


# ---------------------------------------------------------------------------------------------
# Pointwise operations
# ---------------------------------------------------------------------------------------------

def _channel_broadcast(a: Tensor, b: Tensor) -> bool:
  if a.shape == b.shape:
    return False
  n, _, h, w = a.shape
  if b.shape == (n, 1, h, w):
    return True
  raise ValueError(f"Incompatible shapes {a.shape} and {b.shape}: need equal shapes or b with c=1")


def _reduce_to(grad: np.ndarray, broadcast: bool) -> np.ndarray:
  return grad.sum(axis=1, keepdims=True) if broadcast else grad


def relu(a: Tensor) -> Tensor:
  mask = a.data > 0
  return _result(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
  s = expit(a.data)
  return _result(s, (a,), lambda g: (g * s * (1 - s),))


def softplus(a: Tensor) -> Tensor:
  """log(1 + exp(a)), evaluated without overflow."""
  out = np.logaddexp(0, a.data)
  return _result(out, (a,), lambda g: (g * expit(a.data),))


def square(a: Tensor) -> Tensor:
  return _result(a.data * a.data, (a,), lambda g: (2 * g * a.data,))


def scale(a: Tensor, factor: float) -> Tensor:
  return _result(a.data * a.dtype.type(factor), (a,), lambda g: (g * a.dtype.type(factor),))


def add(a: Tensor, b: Union[Tensor, float]) -> Tensor:
  if not isinstance(b, Tensor):
    return _result(a.data + a.dtype.type(b), (a,), lambda g: (g,))
  broadcast = _channel_broadcast(a, b)
  return _result(a.data + b.data, (a, b), lambda g: (g, _reduce_to(g, broadcast)))


def sub(a: Tensor, b: Union[Tensor, float]) -> Tensor:
  if not isinstance(b, Tensor):
    return add(a, -b)
  broadcast = _channel_broadcast(a, b)
  return _result(a.data - b.data, (a, b), lambda g: (g, -_reduce_to(g, broadcast)))


def mul(a: Tensor, b: Union[Tensor, float]) -> Tensor:
  if not isinstance(b, Tensor):
    return scale(a, b)
  broadcast = _channel_broadcast(a, b)
  return _result(a.data * b.data, (a, b), lambda g: (g * b.data, _reduce_to(g * a.data, broadcast)))


def div(a: Tensor, b: Tensor) -> Tensor:
  broadcast = _channel_broadcast(a, b)
  out = a.data / b.data
  return _result(out, (a, b), lambda g: (g / b.data, -_reduce_to(g * out / b.data, broadcast)))


_ELEMENTWISE = {
    "relu": relu,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "square": square,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "scale": scale,
}


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
  """Dispatch a pointwise op by name; binary kinds take ``b`` (tensor or scalar)."""
  try:
    op = _ELEMENTWISE[kind]
  except KeyError:
    raise ValueError(f"Unknown elementwise kind {kind!r}, expected one of {sorted(_ELEMENTWISE)}")
  if kind in ("relu", "sigmoid", "softplus", "square"):
    return op(a)
  if b is None:
    raise ValueError(f"elementwise {kind!r} needs a second operand")
  return op(a, b)


# ---------------------------------------------------------------------------------------------
# Channel operations and reductions
# ---------------------------------------------------------------------------------------------

def channel_softmax(input: Tensor) -> Tensor:
  if input.shape[1] < 2:
    raise ValueError(f"channel_softmax needs at least 2 channels, got {input.shape[1]}")
  shifted = input.data - input.data.max(axis=1, keepdims=True)
  e = np.exp(shifted)
  s = e / e.sum(axis=1, keepdims=True)
  return _result(s, (input,), lambda g: (s * (g - (g * s).sum(axis=1, keepdims=True)),))


def log_channel_softmax(input: Tensor) -> Tensor:
  shifted = input.data - input.data.max(axis=1, keepdims=True)
  out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
  soft = np.exp(out)
  return _result(out, (input,), lambda g: (g - soft * g.sum(axis=1, keepdims=True),))


def weighted_channel_sum(input: Tensor, weights: Sequence[float]) -> Tensor:
  """Per-pixel sum over channels of ``input[c] * weights[c]``; output has one channel."""
  w = np.asarray(weights, dtype=input.dtype).reshape(1, -1, 1, 1)
  if w.shape[1] != input.shape[1]:
    raise ValueError(f"weighted_channel_sum got {w.shape[1]} weights for {input.shape[1]} channels")
  out = (input.data * w).sum(axis=1, keepdims=True)
  return _result(out, (input,), lambda g: (g * w,))


def sum_all(input: Tensor) -> Tensor:
  out = input.data.sum(dtype=input.dtype).reshape(1, 1, 1, 1)
  return _result(out, (input,), lambda g: (np.broadcast_to(g, input.shape).copy(),))


def mean_all(input: Tensor) -> Tensor:
  return scale(sum_all(input), 1.0 / input.data.size)


def sum_per_sample(input: Tensor) -> Tensor:
  """Sum over (c, h, w) giving shape (n, 1, 1, 1)."""
  out = input.data.sum(axis=(1, 2, 3), keepdims=True)
  return _result(out, (input,), lambda g: (np.broadcast_to(g, input.shape).copy(),))


# ---------------------------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------------------------

@dataclass
class GradcheckReport:
  errors: List[float]
  tol: float
  failure: Optional[str] = None
  checked: List[int] = field(default_factory=list)

  @property
  def max_error(self) -> float:
    return max(self.errors) if self.errors else 0.0

  @property
  def passed(self) -> bool:
    return self.failure is None and self.max_error <= self.tol


def gradcheck(
    build_fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    tol: float = 1e-4,
    eps: float = 1e-5,
    max_checks: Optional[int] = None,
    seed: int = 0,
) -> GradcheckReport:
  """Compare analytic gradients of ``build_fn(*inputs)`` with central finite differences.

  Inputs are promoted to double precision. The reported error per input is
  ``max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-12)``. ``max_checks`` limits the
  number of perturbed elements per input (sampled with ``seed``).
  """
  inputs = [Tensor(t.data.astype(DOUBLE), requires_grad=True) for t in inputs]
  with Tape() as tape:
    loss = build_fn(*inputs)
  backward(loss, tape)

  rng = np.random.default_rng(seed)
  report = GradcheckReport(errors=[], tol=tol)
  for position, tensor in enumerate(inputs):
    analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
    if not np.all(np.isfinite(analytic)):
      bad = tuple(int(i) for i in np.argwhere(~np.isfinite(analytic))[0])
      report.failure = f"non-finite analytic gradient at input {position} index {bad}"
      return report

    flat = tensor.data.reshape(-1)
    indices = np.arange(flat.size)
    if max_checks is not None and flat.size > max_checks:
      indices = np.sort(rng.choice(flat.size, size=max_checks, replace=False))
    numeric = np.zeros(indices.size)
    for slot, index in enumerate(indices):
      original = flat[index]
      flat[index] = original + eps
      plus = build_fn(*inputs).item()
      flat[index] = original - eps
      minus = build_fn(*inputs).item()
      flat[index] = original
      numeric[slot] = (plus - minus) / (2 * eps)
      if not np.isfinite(numeric[slot]):
        location = tuple(int(i) for i in np.unravel_index(index, tensor.shape))
        report.failure = f"non-finite numeric gradient at input {position} index {location}"
        return report

    picked = analytic.reshape(-1)[indices]
    scale_ = max(np.abs(picked).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    report.errors.append(float(np.abs(picked - numeric).max(initial=0.0) / scale_))
    report.checked.append(int(indices.size))
    logger.debug(f"gradcheck input {position}: {indices.size} entries, rel err {report.errors[-1]:.3e}")
  return report


def assert_finite(tensor: Tensor, location: str) -> None:
  if not np.all(np.isfinite(tensor.data)):
    raise NonFiniteError("non-finite values", location)
