"""Dense 4-D tensor substrate and direct dilated convolution.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 laid out as
(batch, channels, height, width). Convolution is cross-correlation: output
location ``i`` reads input locations ``i + r * s`` for kernel taps ``s``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Callable, Optional, Tuple, Union

import numpy as np

DTYPE = np.float64
PADDING_MODES = ("none", "same")
_T4_HEADER = struct.Struct("<4I")


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


def as_tensor(x, name: str = "input") -> np.ndarray:
    arr = np.asarray(x, dtype=DTYPE)
    if arr.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (N, C, H, W), got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ShapeError(f"{name} has an empty dimension: {arr.shape}")
    return arr


def uniform(shape, rng: np.random.Generator, bound: float = 0.5) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


@dataclass(frozen=True)
class DilatedConvSpec:
    """Geometry of one dilated convolution."""

    kernel: int
    dilation: int
    in_channels: int
    out_channels: int
    padding: str = "none"
    bias: bool = False

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel size must be odd and >= 1, got {self.kernel}")
        if self.dilation < 1:
            raise ValueError(f"dilation rate must be >= 1, got {self.dilation}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if self.padding not in PADDING_MODES:
            raise ValueError(f"padding must be one of {PADDING_MODES}, got {self.padding!r}")

    @property
    def receptive_field(self) -> int:
        return (self.kernel - 1) * self.dilation + 1

    @property
    def pad(self) -> int:
        """Zero padding applied on each side of both spatial axes."""
        if self.padding == "same":
            return (self.kernel - 1) * self.dilation // 2
        return 0

    def output_size(self, height: int, width: int) -> Tuple[int, int]:
        extent = (self.kernel - 1) * self.dilation
        return height + 2 * self.pad - extent, width + 2 * self.pad - extent

    def num_params(self) -> int:
        n = self.out_channels * self.in_channels * self.kernel * self.kernel
        return n + (self.out_channels if self.bias else 0)


@dataclass
class ConvWeights:
    filters: np.ndarray
    bias: Optional[np.ndarray] = None

    @classmethod
    def uniform(cls, spec: DilatedConvSpec, rng: np.random.Generator, bound: float = 0.5):
        shape = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
        bias = uniform((spec.out_channels,), rng, bound) if spec.bias else None
        return cls(uniform(shape, rng, bound), bias)

    @classmethod
    def constant(cls, spec: DilatedConvSpec, value: float = 1.0):
        shape = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
        bias = np.zeros(spec.out_channels) if spec.bias else None
        return cls(np.full(shape, value, dtype=DTYPE), bias)

    def num_params(self) -> int:
        return self.filters.size + (0 if self.bias is None else self.bias.size)

    def check(self, spec: DilatedConvSpec) -> None:
        expected = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
        if self.filters.shape != expected:
            raise ShapeError(f"filters have shape {self.filters.shape}, spec expects {expected}")
        if spec.bias != (self.bias is not None):
            raise ShapeError("bias presence does not match spec.bias")
        if self.bias is not None and self.bias.shape != (spec.out_channels,):
            raise ShapeError(f"bias has shape {self.bias.shape}, expected ({spec.out_channels},)")


def prepare_input(x, weights: ConvWeights, spec: DilatedConvSpec):
    x = as_tensor(x)
    weights.check(spec)
    if x.shape[1] != spec.in_channels:
        raise ShapeError(
            f"input has {x.shape[1]} channels but spec.in_channels={spec.in_channels}"
        )
    out_h, out_w = spec.output_size(x.shape[2], x.shape[3])
    if out_h < 1 or out_w < 1:
        raise ShapeError(
            f"input {x.shape[2]}x{x.shape[3]} too small for receptive field "
            f"{spec.receptive_field} (output would be {out_h}x{out_w})"
        )
    p = spec.pad
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    return x, out_h, out_w


def dilated_conv_direct(x, weights: ConvWeights, spec: DilatedConvSpec) -> np.ndarray:
    """Dilated cross-correlation, summing over kernel taps sampled at stride ``r``."""
    xp, out_h, out_w = prepare_input(x, weights, spec)
    r = spec.dilation
    acc = np.zeros((xp.shape[0], out_h, out_w, spec.out_channels), dtype=DTYPE)
    for a in range(spec.kernel):
        for b in range(spec.kernel):
            window = xp[:, :, a * r : a * r + out_h, b * r : b * r + out_w]
            acc += np.tensordot(window, weights.filters[:, :, a, b], axes=([1], [1]))
    out = np.ascontiguousarray(acc.transpose(0, 3, 1, 2))
    if weights.bias is not None:
        out += weights.bias[None, :, None, None]
    return out


def dilated_conv_backward(
    x, weights: ConvWeights, spec: DilatedConvSpec, grad_out
) -> Tuple[np.ndarray, ConvWeights]:
    """Gradients of :func:`dilated_conv_direct` w.r.t. its input and weights."""
    xp, out_h, out_w = prepare_input(x, weights, spec)
    grad_out = as_tensor(grad_out, "grad_out")
    expected = (xp.shape[0], spec.out_channels, out_h, out_w)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out has shape {grad_out.shape}, forward output is {expected}")

    r = spec.dilation
    grad_xp = np.zeros_like(xp)
    grad_f = np.zeros_like(weights.filters)
    for a in range(spec.kernel):
        for b in range(spec.kernel):
            rows = slice(a * r, a * r + out_h)
            cols = slice(b * r, b * r + out_w)
            grad_f[:, :, a, b] = np.tensordot(
                grad_out, xp[:, :, rows, cols], axes=([0, 2, 3], [0, 2, 3])
            )
            contrib = np.tensordot(grad_out, weights.filters[:, :, a, b], axes=([1], [0]))
            grad_xp[:, :, rows, cols] += contrib.transpose(0, 3, 1, 2)
    p = spec.pad
    grad_x = grad_xp[:, :, p : xp.shape[2] - p, p : xp.shape[3] - p] if p else grad_xp
    grad_b = grad_out.sum(axis=(0, 2, 3)) if weights.bias is not None else None
    return np.ascontiguousarray(grad_x), ConvWeights(grad_f, grad_b)


def finite_difference_check(
    fn: Callable[[np.ndarray], np.ndarray],
    grad_fn: Callable[[np.ndarray, np.ndarray], np.ndarray],
    point,
    step: float = 1e-5,
    seed: int = 0,
) -> float:
    """Compare an analytic vector-Jacobian product against central differences.

    ``fn`` maps an array to an array, ``grad_fn(point, cotangent)`` returns the
    gradient of ``sum(cotangent * fn(point))`` w.r.t. ``point``. A fixed random
    cotangent reduces the map to a scalar. Returns the max over coordinates of
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    point = np.array(point, dtype=DTYPE)
    rng = np.random.default_rng(seed)
    cotangent = rng.standard_normal(np.shape(fn(point)))
    analytic = np.asarray(grad_fn(point.copy(), cotangent), dtype=DTYPE)
    if analytic.shape != point.shape:
        raise ShapeError(f"gradient shape {analytic.shape} != point shape {point.shape}")

    numeric = np.empty_like(point)
    flat = point.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = float(np.sum(cotangent * fn(point)))
        flat[i] = orig - step
        down = float(np.sum(cotangent * fn(point)))
        flat[i] = orig
        numeric.reshape(-1)[i] = (up - down) / (2 * step)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0


def write_t4(fh: BinaryIO, x) -> int:
    """Write one tensor in ``.t4`` layout; returns the number of bytes written."""
    x = as_tensor(x)
    fh.write(_T4_HEADER.pack(*x.shape))
    payload = np.ascontiguousarray(x, dtype="<f8").tobytes()
    fh.write(payload)
    return _T4_HEADER.size + len(payload)


def read_t4(fh: BinaryIO) -> np.ndarray:
    header = fh.read(_T4_HEADER.size)
    if len(header) != _T4_HEADER.size:
        raise ValueError("truncated .t4 header")
    shape = _T4_HEADER.unpack(header)
    count = int(np.prod(shape))
    payload = fh.read(8 * count)
    if len(payload) != 8 * count:
        raise ValueError(f"truncated .t4 payload for shape {shape}")
    return np.frombuffer(payload, dtype="<f8").astype(DTYPE).reshape(shape)


def save_t4(path: Union[str, Path], x) -> Path:
    path = Path(path)
    with open(path, "wb") as fh:
        write_t4(fh, x)
    return path


def load_t4(path: Union[str, Path]) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_t4(fh)
