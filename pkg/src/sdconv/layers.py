"""Stateful layer wrappers around the functional operators.

Each layer caches its last input on ``forward`` and fills ``self.grads`` on
``backward``. Parameters are exposed by name so the optimizer and the model
file can address them.
"""
from __future__ import annotations

from typing import Dict, List, Optional, Tuple

import numpy as np

from sdconv.attention import AttentionParams, attention_backward, attention_forward
from sdconv.smoothing import (
    GroupInteractionWeights,
    SSKernel,
    smoothed_dilated_conv_GI,
    smoothed_dilated_conv_GI_backward,
    ss_blockwise_fc,
    ss_blockwise_fc_backward,
    ss_conv,
    ss_conv_backward,
)
from sdconv.tensor import ConvWeights, DilatedConvSpec, dilated_conv_backward, dilated_conv_direct

# (top, left, bottom, right), inclusive, in spatial coordinates
Box = Tuple[int, int, int, int]


def _grow(box: Box, before: int, after: int) -> Box:
    top, left, bottom, right = box
    return top - before, left - before, bottom + after, right + after


class Layer:
    name = "layer"

    def __init__(self):
        self.grads: Dict[str, np.ndarray] = {}
        self._x: Optional[np.ndarray] = None

    def params(self) -> Dict[str, np.ndarray]:
        return {}

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def rf_box(self, box: Box) -> Box:
        """Input-side box of locations that can influence ``box`` of the output."""
        return box


class Identity(Layer):
    name = "identity"

    def forward(self, x):
        return np.array(x, dtype=np.float64)

    def backward(self, grad):
        return grad


class ReLU(Layer):
    name = "relu"

    def forward(self, x):
        self._x = x
        return np.maximum(x, 0.0)

    def backward(self, grad):
        return grad * (self._x > 0)


class DilatedConv(Layer):
    """Dilated conv, optionally smoothed by a group interaction layer or an SS conv."""

    name = "conv"

    def __init__(self, spec: DilatedConvSpec, weights: ConvWeights, smoothing: str = "none",
                 interaction: Optional[GroupInteractionWeights] = None,
                 kernel: Optional[SSKernel] = None):
        super().__init__()
        if smoothing not in ("none", "GI", "SS"):
            raise ValueError(f"unknown smoothing {smoothing!r}")
        if smoothing != "none" and spec.dilation < 2:
            raise ValueError("smoothing requires a dilation rate >= 2")
        weights.check(spec)
        self.spec = spec
        self.weights = weights
        self.smoothing = smoothing
        if smoothing == "GI":
            self.interaction = interaction or GroupInteractionWeights.identity(spec.dilation)
        if smoothing == "SS":
            self.kernel = kernel or SSKernel.identity(spec.dilation)

    def params(self):
        p = {"filters": self.weights.filters}
        if self.weights.bias is not None:
            p["bias"] = self.weights.bias
        if self.smoothing == "GI":
            p["interaction"] = self.interaction.matrix
        if self.smoothing == "SS":
            p["ss_kernel"] = self.kernel.k
        return p

    def forward(self, x):
        self._x = x
        if self.smoothing == "GI":
            return smoothed_dilated_conv_GI(x, self.weights, self.interaction, self.spec)
        if self.smoothing == "SS":
            # same as smoothed_dilated_conv_SS, keeping the smoothed input for backward
            self._smoothed = ss_conv(x, self.kernel)
            return dilated_conv_direct(self._smoothed, self.weights, self.spec)
        return dilated_conv_direct(x, self.weights, self.spec)

    def backward(self, grad):
        x = self._x
        if self.smoothing == "GI":
            gx, gw, gW = smoothed_dilated_conv_GI_backward(x, self.weights, self.interaction, self.spec, grad)
            self.grads = {"interaction": gW.matrix}
        elif self.smoothing == "SS":
            gs, gw = dilated_conv_backward(self._smoothed, self.weights, self.spec, grad)
            gx, gk = ss_conv_backward(x, self.kernel, gs)
            self.grads = {"ss_kernel": gk.k}
        else:
            gx, gw = dilated_conv_backward(x, self.weights, self.spec, grad)
            self.grads = {}
        self.grads["filters"] = gw.filters
        if gw.bias is not None:
            self.grads["bias"] = gw.bias
        return gx

    def rf_box(self, box):
        r = self.spec.dilation
        half = (self.spec.kernel - 1) * r // 2
        if self.smoothing == "GI":
            box = _block_cover(box, r)
        if self.spec.padding == "none":
            top, left, bottom, right = box
            box = (top + half, left + half, bottom + half, right + half)
        box = _grow(box, half, half)
        if self.smoothing == "SS":
            box = _grow(box, r - 1, r - 1)
        return box


def _block_cover(box: Box, rate: int) -> Box:
    top, left, bottom, right = box
    return (top - top % rate, left - left % rate,
            bottom - bottom % rate + rate - 1, right - right % rate + rate - 1)


class SSConv(Layer):
    name = "ss_conv"

    def __init__(self, kernel: SSKernel):
        super().__init__()
        self.kernel = kernel

    def params(self):
        return {"ss_kernel": self.kernel.k}

    def forward(self, x):
        self._x = x
        return ss_conv(x, self.kernel)

    def backward(self, grad):
        gx, gk = ss_conv_backward(self._x, self.kernel, grad)
        self.grads = {"ss_kernel": gk.k}
        return gx

    def rf_box(self, box):
        half = (self.kernel.side - 1) // 2
        return _grow(box, half, half)


class BlockwiseFC(Layer):
    name = "blockwise_fc"

    def __init__(self, interaction: GroupInteractionWeights):
        super().__init__()
        self.interaction = interaction

    def params(self):
        return {"interaction": self.interaction.matrix}

    def forward(self, x):
        self._x = x
        return ss_blockwise_fc(x, self.interaction, self.interaction.rate)

    def backward(self, grad):
        gx, gW = ss_blockwise_fc_backward(self._x, self.interaction, self.interaction.rate, grad)
        self.grads = {"interaction": gW.matrix}
        return gx

    def rf_box(self, box):
        return _block_cover(box, self.interaction.rate)


class SSAttention(Layer):
    name = "ss_attention"

    def __init__(self, params: AttentionParams):
        super().__init__()
        self.attention = params

    def params(self):
        return {"w_q": self.attention.w_q, "w_k": self.attention.w_k, "w_v": self.attention.w_v}

    def forward(self, x):
        self._x = x
        out, self._cache = attention_forward(x, self.attention)
        return out

    def backward(self, grad):
        gx, g = attention_backward(self._x, self.attention, grad, self._cache)
        self.grads = {"w_q": g.w_q, "w_k": g.w_k, "w_v": g.w_v}
        return gx

    def rf_box(self, box):
        half = (self.attention.window - 1) // 2
        return _grow(box, half, half)


class Sequential(Layer):
    name = "sequential"

    def __init__(self, layers: List[Layer], names: Optional[List[str]] = None):
        self.layers = list(layers)
        self.names = names or [f"{i}.{layer.name}" for i, layer in enumerate(self.layers)]

    def params(self):
        return {f"{n}.{k}": v for n, layer in zip(self.names, self.layers)
                for k, v in layer.params().items()}

    @property
    def grads(self):
        return {f"{n}.{k}": v for n, layer in zip(self.names, self.layers)
                for k, v in layer.grads.items()}

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def rf_box(self, box):
        for layer in reversed(self.layers):
            box = layer.rf_box(box)
        return box
