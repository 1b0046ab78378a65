"""Dilated convolution as subsample -> shared standard conv -> reinterlace.

Groups are phase-ordered row-major over (row offset, column offset) in
``[0, r)^2``: group ``g`` holds the elements at ``(r*i + g // r, r*j + g % r)``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Tuple

import numpy as np

from sdconv.tensor import (
    ConvWeights,
    DilatedConvSpec,
    ShapeError,
    as_tensor,
    dilated_conv_backward,
    dilated_conv_direct,
    prepare_input,
)


@dataclass(frozen=True)
class GroupStack:
    """``r*r`` deinterlaced groups stored as one array of shape (r*r, N, C, h, w).

    ``size`` is the full-resolution (H, W) the groups came from. When H or W
    is not a multiple of ``rate`` the trailing positions of the interlaced
    grid are zero padding; :meth:`valid_mask` flags the real ones.
    """

    groups: np.ndarray
    rate: int
    size: Tuple[int, int]

    def __post_init__(self):
        r = self.rate
        if self.groups.ndim != 5 or self.groups.shape[0] != r * r:
            raise ShapeError(
                f"expected {r * r} groups of 4-D tensors, got array of shape {self.groups.shape}"
            )
        h, w = self.groups.shape[3:]
        if not (r * (h - 1) < self.size[0] <= r * h and r * (w - 1) < self.size[1] <= r * w):
            raise ShapeError(f"group size {h}x{w} inconsistent with size {self.size} at rate {r}")

    def __len__(self) -> int:
        return self.groups.shape[0]

    def __getitem__(self, g: int) -> np.ndarray:
        return self.groups[g]

    def phase(self, g: int) -> Tuple[int, int]:
        return divmod(g, self.rate)

    def with_groups(self, groups: np.ndarray) -> "GroupStack":
        return GroupStack(groups, self.rate, self.size)

    def valid_mask(self) -> np.ndarray:
        """1.0 where a group element maps inside ``size``, 0.0 on padding; broadcastable."""
        r = self.rate
        h, w = self.groups.shape[3:]
        rows = (np.arange(r)[:, None] + r * np.arange(h)[None, :]) < self.size[0]
        cols = (np.arange(r)[:, None] + r * np.arange(w)[None, :]) < self.size[1]
        mask = rows[:, None, :, None] & cols[None, :, None, :]
        return mask.reshape(r * r, 1, 1, h, w).astype(np.float64)


def subsample(x, rate: int) -> GroupStack:
    """Periodically subsample ``x`` into ``rate**2`` phase groups (zero-padding to a multiple)."""
    if rate < 1:
        raise ValueError(f"rate must be >= 1, got {rate}")
    x = as_tensor(x)
    n, c, height, width = x.shape
    r = rate
    h, w = -(-height // r), -(-width // r)
    if (h * r, w * r) != (height, width):
        x = np.pad(x, ((0, 0), (0, 0), (0, h * r - height), (0, w * r - width)))
    groups = x.reshape(n, c, h, r, w, r).transpose(3, 5, 0, 1, 2, 4).reshape(r * r, n, c, h, w)
    return GroupStack(np.ascontiguousarray(groups), r, (height, width))


def reinterlace(stack: GroupStack) -> np.ndarray:
    """Inverse of :func:`subsample`: interleave the groups and crop to ``stack.size``."""
    r = stack.rate
    _, n, c, h, w = stack.groups.shape
    full = stack.groups.reshape(r, r, n, c, h, w).transpose(2, 3, 4, 0, 5, 1)
    full = full.reshape(n, c, h * r, w * r)
    height, width = stack.size
    return np.ascontiguousarray(full[:, :, :height, :width])


def _standard(spec: DilatedConvSpec) -> DilatedConvSpec:
    return replace(spec, dilation=1, padding="none")


def deinterlace_input(x, weights: ConvWeights, spec: DilatedConvSpec) -> Tuple[GroupStack, Tuple[int, int]]:
    """Validate, apply the spec's padding and subsample; also returns the output size."""
    xp, out_h, out_w = prepare_input(x, weights, spec)
    return subsample(xp, spec.dilation), (out_h, out_w)


def shared_conv(stack: GroupStack, weights: ConvWeights, spec: DilatedConvSpec,
                out_size: Tuple[int, int]) -> GroupStack:
    """Run one standard (dilation-1) convolution over every group with the same weights."""
    r2, n, c, h, w = stack.groups.shape
    out = dilated_conv_direct(stack.groups.reshape(r2 * n, c, h, w), weights, _standard(spec))
    return GroupStack(out.reshape(r2, n, *out.shape[1:]), stack.rate, out_size)


def shared_conv_backward(stack: GroupStack, weights: ConvWeights, spec: DilatedConvSpec,
                         grad: GroupStack) -> Tuple[GroupStack, ConvWeights]:
    r2, n, c, h, w = stack.groups.shape
    g = grad.groups
    gx, gw = dilated_conv_backward(
        stack.groups.reshape(r2 * n, c, h, w), weights, _standard(spec),
        g.reshape(r2 * n, *g.shape[2:]),
    )
    return stack.with_groups(gx.reshape(stack.groups.shape)), gw


def dilated_conv_decomposed(x, weights: ConvWeights, spec: DilatedConvSpec) -> np.ndarray:
    """Dilated convolution computed through the three-step decomposition."""
    stack, out_size = deinterlace_input(x, weights, spec)
    return reinterlace(shared_conv(stack, weights, spec, out_size))


def dilated_conv_decomposed_backward(x, weights: ConvWeights, spec: DilatedConvSpec, grad_out):
    stack, out_size = deinterlace_input(x, weights, spec)
    grad_out = as_tensor(grad_out, "grad_out")
    expected = (stack.groups.shape[1], spec.out_channels, *out_size)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out has shape {grad_out.shape}, forward output is {expected}")
    grad_stack, grad_w = shared_conv_backward(stack, weights, spec, subsample(grad_out, spec.dilation))
    return crop_padding(reinterlace(grad_stack), spec.pad), grad_w


def crop_padding(x: np.ndarray, pad: int) -> np.ndarray:
    if not pad:
        return x
    return np.ascontiguousarray(x[:, :, pad:-pad, pad:-pad])
