"""Degridding operators for dilated convolutions.

Two smoothing routes, both channel-independent in their parameter count:

* group interaction: an ``r^2 x r^2`` linear map mixing the deinterlaced
  groups after the shared convolution (equivalently, a stride-``r`` block-wise
  fully-connected map applied to the dilated conv output);
* SS convolution: one ``(2r-1) x (2r-1)`` filter shared by every channel,
  applied before the dilated convolution.

Neither operator carries a bias.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Tuple

import numpy as np

from sdconv.decomposition import (
    GroupStack,
    crop_padding,
    deinterlace_input,
    reinterlace,
    shared_conv,
    shared_conv_backward,
    subsample,
)
from sdconv.tensor import (
    DTYPE,
    ConvWeights,
    DilatedConvSpec,
    ShapeError,
    as_tensor,
    dilated_conv_backward,
    dilated_conv_direct,
)

METHODS = ("none", "GI", "SS")


@dataclass
class GroupInteractionWeights:
    """Mixing matrix; entry ``[i, j]`` weights group ``j``'s contribution to new group ``i``."""

    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=DTYPE)
        n = self.matrix.shape[0]
        r = int(round(np.sqrt(n)))
        if self.matrix.shape != (n, n) or r * r != n:
            raise ShapeError(f"group interaction matrix must be (r^2, r^2), got {self.matrix.shape}")

    @property
    def rate(self) -> int:
        return int(round(np.sqrt(self.matrix.shape[0])))

    @classmethod
    def identity(cls, rate: int) -> "GroupInteractionWeights":
        return cls(np.eye(rate * rate))

    @classmethod
    def uniform(cls, rate: int, rng: np.random.Generator, bound: float = 0.5):
        return cls(rng.uniform(-bound, bound, size=(rate * rate, rate * rate)))

    def num_params(self) -> int:
        return self.matrix.size


@dataclass
class SSKernel:
    """One odd-sided spatial filter shared by all channels."""

    k: np.ndarray

    def __post_init__(self):
        self.k = np.asarray(self.k, dtype=DTYPE)
        if self.k.ndim != 2 or self.k.shape[0] != self.k.shape[1]:
            raise ShapeError(f"SS kernel must be square, got shape {self.k.shape}")
        if self.k.shape[0] % 2 == 0:
            raise ShapeError(f"SS kernel side must be odd, got {self.k.shape[0]}")

    @property
    def side(self) -> int:
        return self.k.shape[0]

    @property
    def rate(self) -> int:
        return (self.side + 1) // 2

    @classmethod
    def identity(cls, rate: int) -> "SSKernel":
        side = 2 * rate - 1
        k = np.zeros((side, side))
        k[rate - 1, rate - 1] = 1.0
        return cls(k)

    @classmethod
    def box(cls, rate: int) -> "SSKernel":
        side = 2 * rate - 1
        return cls(np.full((side, side), 1.0 / side**2))

    @classmethod
    def uniform(cls, rate: int, rng: np.random.Generator, bound: float = 0.5):
        side = 2 * rate - 1
        return cls(rng.uniform(-bound, bound, size=(side, side)))

    def num_params(self) -> int:
        return self.k.size


def _check_interaction(stack: GroupStack, W: GroupInteractionWeights) -> None:
    if W.matrix.shape[0] != len(stack):
        raise ShapeError(
            f"interaction matrix is {W.matrix.shape[0]}x{W.matrix.shape[0]} "
            f"but the stack holds {len(stack)} groups"
        )


def group_interact(stack: GroupStack, W: GroupInteractionWeights) -> GroupStack:
    """New group ``i`` is ``sum_j W[i, j] * group_j`` at every channel and location."""
    _check_interaction(stack, W)
    return stack.with_groups(np.tensordot(W.matrix, stack.groups, axes=(1, 0)))


def group_interact_backward(stack: GroupStack, W: GroupInteractionWeights,
                            grad: GroupStack) -> Tuple[GroupStack, GroupInteractionWeights]:
    _check_interaction(stack, W)
    grad_groups = np.tensordot(W.matrix.T, grad.groups, axes=(1, 0))
    axes = list(range(1, stack.groups.ndim))
    grad_w = np.tensordot(grad.groups, stack.groups, axes=(axes, axes))
    return stack.with_groups(grad_groups), GroupInteractionWeights(grad_w)


def _gi_check(W: GroupInteractionWeights, spec: DilatedConvSpec) -> None:
    if W.rate != spec.dilation:
        raise ShapeError(f"interaction matrix is for rate {W.rate}, conv has rate {spec.dilation}")


def smoothed_dilated_conv_GI(x, weights: ConvWeights, W: GroupInteractionWeights,
                             spec: DilatedConvSpec) -> np.ndarray:
    """Decomposed dilated conv with a group interaction layer before reinterlacing.

    Group positions that fall on reinterlace padding are zeroed before mixing,
    so the result matches the block-wise FC applied to the cropped output.
    """
    _gi_check(W, spec)
    stack, out_size = deinterlace_input(x, weights, spec)
    conv = shared_conv(stack, weights, spec, out_size)
    conv = conv.with_groups(conv.groups * conv.valid_mask())
    return reinterlace(group_interact(conv, W))


def smoothed_dilated_conv_GI_backward(x, weights: ConvWeights, W: GroupInteractionWeights,
                                      spec: DilatedConvSpec, grad_out):
    """Returns ``(grad_input, grad_weights, grad_interaction)``."""
    _gi_check(W, spec)
    stack, out_size = deinterlace_input(x, weights, spec)
    conv = shared_conv(stack, weights, spec, out_size)
    mask = conv.valid_mask()
    masked = conv.with_groups(conv.groups * mask)
    grad_out = as_tensor(grad_out, "grad_out")
    if grad_out.shape != (x.shape[0], spec.out_channels, *out_size):
        raise ShapeError(f"grad_out has shape {grad_out.shape}, forward output is "
                         f"{(x.shape[0], spec.out_channels, *out_size)}")
    grad_masked, grad_W = group_interact_backward(masked, W, subsample(grad_out, spec.dilation))
    grad_conv = conv.with_groups(grad_masked.groups * mask)
    grad_stack, grad_w = shared_conv_backward(stack, weights, spec, grad_conv)
    return crop_padding(reinterlace(grad_stack), spec.pad), grad_w, grad_W


def ss_conv(x, kernel: SSKernel) -> np.ndarray:
    """Same-padded convolution of every channel with the one shared kernel."""
    x = as_tensor(x)
    side = kernel.side
    p = (side - 1) // 2
    h, w = x.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.zeros_like(x)
    for a in range(side):
        for b in range(side):
            out += kernel.k[a, b] * xp[:, :, a : a + h, b : b + w]
    return out


def ss_conv_backward(x, kernel: SSKernel, grad_out) -> Tuple[np.ndarray, SSKernel]:
    x = as_tensor(x)
    grad_out = as_tensor(grad_out, "grad_out")
    if grad_out.shape != x.shape:
        raise ShapeError(f"grad_out has shape {grad_out.shape}, expected {x.shape}")
    side = kernel.side
    p = (side - 1) // 2
    h, w = x.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    grad_xp = np.zeros_like(xp)
    grad_k = np.zeros_like(kernel.k)
    for a in range(side):
        for b in range(side):
            grad_k[a, b] = np.sum(grad_out * xp[:, :, a : a + h, b : b + w])
            grad_xp[:, :, a : a + h, b : b + w] += kernel.k[a, b] * grad_out
    return crop_padding(grad_xp, p), SSKernel(grad_k)


def _ss_check(kernel: SSKernel, spec: DilatedConvSpec) -> None:
    if kernel.side != 2 * spec.dilation - 1:
        raise ShapeError(
            f"SS kernel side {kernel.side} does not match 2r-1={2 * spec.dilation - 1}"
        )


def smoothed_dilated_conv_SS(x, kernel: SSKernel, weights: ConvWeights,
                             spec: DilatedConvSpec) -> np.ndarray:
    _ss_check(kernel, spec)
    return dilated_conv_direct(ss_conv(x, kernel), weights, spec)


def smoothed_dilated_conv_SS_backward(x, kernel: SSKernel, weights: ConvWeights,
                                      spec: DilatedConvSpec, grad_out):
    """Returns ``(grad_input, grad_kernel, grad_weights)``."""
    _ss_check(kernel, spec)
    smoothed = ss_conv(x, kernel)
    grad_smoothed, grad_w = dilated_conv_backward(smoothed, weights, spec, grad_out)
    grad_x, grad_k = ss_conv_backward(x, kernel, grad_smoothed)
    return grad_x, grad_k, grad_w


def _blocks(x: np.ndarray, rate: int) -> np.ndarray:
    n, c, h, w = x.shape
    hb, wb = -(-h // rate), -(-w // rate)
    if (hb * rate, wb * rate) != (h, w):
        x = np.pad(x, ((0, 0), (0, 0), (0, hb * rate - h), (0, wb * rate - w)))
    return x.reshape(n, c, hb, rate, wb, rate)


def _blockwise_check(W: GroupInteractionWeights, rate: int) -> None:
    if W.rate != rate:
        raise ShapeError(f"block-wise matrix is for rate {W.rate}, requested rate {rate}")


def ss_blockwise_fc(x, W: GroupInteractionWeights, rate: int) -> np.ndarray:
    """Apply one ``r^2 x r^2`` map to every non-overlapping ``r x r`` block, shared over channels.

    Within a block, positions are ordered row-major. Spatial sizes that are not
    a multiple of ``rate`` are zero-padded and the result is cropped back.
    """
    _blockwise_check(W, rate)
    x = as_tensor(x)
    r = rate
    kernel = W.matrix.reshape(r, r, r, r)
    out = np.einsum("pqst,ncisjt->ncipjq", kernel, _blocks(x, r), optimize=True)
    n, c, hb, _, wb, _ = out.shape
    out = out.reshape(n, c, hb * r, wb * r)
    return np.ascontiguousarray(out[:, :, : x.shape[2], : x.shape[3]])


def ss_blockwise_fc_backward(x, W: GroupInteractionWeights, rate: int,
                             grad_out) -> Tuple[np.ndarray, GroupInteractionWeights]:
    _blockwise_check(W, rate)
    x = as_tensor(x)
    grad_out = as_tensor(grad_out, "grad_out")
    if grad_out.shape != x.shape:
        raise ShapeError(f"grad_out has shape {grad_out.shape}, expected {x.shape}")
    r = rate
    kernel = W.matrix.reshape(r, r, r, r)
    xb, gb = _blocks(x, r), _blocks(grad_out, r)
    grad_x = np.einsum("pqst,ncipjq->ncisjt", kernel, gb, optimize=True)
    n, c, hb, _, wb, _ = grad_x.shape
    grad_x = grad_x.reshape(n, c, hb * r, wb * r)[:, :, : x.shape[2], : x.shape[3]]
    grad_w = np.einsum("ncipjq,ncisjt->pqst", gb, xb, optimize=True).reshape(r * r, r * r)
    return np.ascontiguousarray(grad_x), GroupInteractionWeights(grad_w)


def extra_params(method: str, rate: int) -> int:
    """Smoothing parameters added to one dilated conv of the given rate (d = 2)."""
    if method == "none":
        return 0
    if method not in METHODS:
        raise ValueError(f"unknown smoothing method {method!r}; expected one of {METHODS}")
    if rate < 2:
        raise ValueError(f"smoothing needs a dilation rate >= 2, got {rate}")
    return rate**4 if method == "GI" else (2 * rate - 1) ** 2


def count_extra_params(layers: Iterable[Tuple[str, int]]) -> int:
    return sum(extra_params(method, rate) for method, rate in layers)
