"""Windowed graph-attention SS operation and the SS output layer.

Every spatial location is a node; a ``s x s`` window scans the grid with
stride 1 and updates its center node from all nodes in the window (the center
included). Edge weights are scaled dot-product attention coefficients,
normalized over the nodes that lie inside the image. Window positions that
fall on padding get exactly zero weight.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from sdconv.tensor import (
    DTYPE,
    ConvWeights,
    DilatedConvSpec,
    ShapeError,
    as_tensor,
    dilated_conv_backward,
    dilated_conv_direct,
)


@dataclass
class AttentionParams:
    """Per-head query/key/value projections and the scanning window side.

    ``w_q`` and ``w_k`` have shape (heads, d_k, d), ``w_v`` has shape
    (heads, d_o, d). None of them carries a bias.
    """

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    window: int

    def __post_init__(self):
        self.w_q = np.asarray(self.w_q, dtype=DTYPE)
        self.w_k = np.asarray(self.w_k, dtype=DTYPE)
        self.w_v = np.asarray(self.w_v, dtype=DTYPE)
        if self.w_q.ndim != 3 or self.w_q.shape != self.w_k.shape:
            raise ShapeError(f"w_q {self.w_q.shape} and w_k {self.w_k.shape} must match (heads, d_k, d)")
        if self.w_v.ndim != 3 or self.w_v.shape[0] != self.heads or self.w_v.shape[2] != self.d:
            raise ShapeError(f"w_v has shape {self.w_v.shape}, expected (heads, d_o, {self.d})")
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError(f"window side must be odd and >= 1, got {self.window}")

    @property
    def heads(self) -> int:
        return self.w_q.shape[0]

    @property
    def d(self) -> int:
        return self.w_q.shape[2]

    @property
    def d_k(self) -> int:
        return self.w_q.shape[1]

    @property
    def d_o(self) -> int:
        return self.w_v.shape[1]

    @property
    def out_channels(self) -> int:
        return self.heads * self.d_o

    @classmethod
    def init(cls, d: int, d_k: int, d_o: int, heads: int, window: int,
             rng: np.random.Generator, bound: Optional[float] = None) -> "AttentionParams":
        b = 1.0 / np.sqrt(d) if bound is None else bound
        return cls(
            rng.uniform(-b, b, size=(heads, d_k, d)),
            rng.uniform(-b, b, size=(heads, d_k, d)),
            rng.uniform(-b, b, size=(heads, d_o, d)),
            window,
        )

    def num_params(self) -> int:
        return self.w_q.size + self.w_k.size + self.w_v.size


def count_attention_params(d: int, d_k: int, d_o: int, heads: int = 1) -> int:
    """Independent of the window side: the projections are shared by every edge."""
    return heads * (2 * d_k * d + d_o * d)


def dilated_output_params(d_in: int, d_out: int, branches: int = 1, kernel: int = 3,
                          bias: bool = True) -> int:
    """Parameters of ``branches`` parallel dilated convs (1 = LargeFOV, 4 = ASPP)."""
    return branches * (kernel * kernel * d_in * d_out + (d_out if bias else 0))


def _masked_softmax(logits: np.ndarray, valid: np.ndarray, axis: int) -> np.ndarray:
    logits = np.where(valid, logits, -np.inf)
    top = np.max(logits, axis=axis, keepdims=True)
    ex = np.where(valid, np.exp(logits - top), 0.0)
    return ex / ex.sum(axis=axis, keepdims=True)


def attention_window(center, neighbors, valid, params: AttentionParams,
                     head: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Update one center node from its window; returns ``(output, alpha)``.

    ``neighbors`` is (s*s, d) and includes the center node; ``valid`` flags
    the neighbors that are real nodes rather than padding.
    """
    center = np.asarray(center, dtype=DTYPE)
    neighbors = np.asarray(neighbors, dtype=DTYPE)
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        raise ValueError("attention window has no valid neighbors")
    w_q, w_k, w_v = params.w_q[head], params.w_k[head], params.w_v[head]
    logits = (neighbors @ w_k.T) @ (w_q @ center) / np.sqrt(params.d_k)
    alpha = _masked_softmax(logits, valid, axis=0)
    return alpha @ (neighbors @ w_v.T), alpha


def _offsets(window: int, size: int) -> np.ndarray:
    # offsets beyond the image extent never hit a real node
    half = (window - 1) // 2
    reach = min(half, size - 1)
    return np.arange(-reach, reach + 1)


def _project(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.einsum("hkd,ndyx->nhkyx", w, x, optimize=True)


def attention_forward(x, params: AttentionParams):
    """Layer output plus the intermediates :func:`attention_backward` can reuse."""
    x = as_tensor(x)
    if x.shape[1] != params.d:
        raise ShapeError(f"input has {x.shape[1]} channels, attention expects d={params.d}")
    h, w = x.shape[2:]
    oy, ox = _offsets(params.window, h), _offsets(params.window, w)
    py, px = -oy[0], -ox[0]
    pad = ((0, 0), (0, 0), (0, 0), (py, py), (px, px))
    q = _project(params.w_q, x)
    kp = np.pad(_project(params.w_k, x), pad)
    vp = np.pad(_project(params.w_v, x), pad)
    validp = np.pad(np.ones((h, w), dtype=bool), ((py, py), (px, px)))

    offsets = [(a, b) for a in range(len(oy)) for b in range(len(ox))]
    scale = 1.0 / np.sqrt(params.d_k)
    logits = np.empty((x.shape[0], params.heads, len(offsets), h, w))
    valid = np.empty((len(offsets), h, w), dtype=bool)
    for o, (a, b) in enumerate(offsets):
        logits[:, :, o] = np.einsum("nhkyx,nhkyx->nhyx", q, kp[..., a : a + h, b : b + w]) * scale
        valid[o] = validp[a : a + h, b : b + w]
    alpha = _masked_softmax(logits, valid[None, None], axis=2)

    out = np.zeros((x.shape[0], params.heads, params.d_o, h, w))
    for o, (a, b) in enumerate(offsets):
        out += alpha[:, :, o, None] * vp[..., a : a + h, b : b + w]
    cache = dict(q=q, kp=kp, vp=vp, alpha=alpha, offsets=offsets, grid=(oy, ox))
    return out.reshape(x.shape[0], params.out_channels, h, w), cache


def ss_attention_layer(x, params: AttentionParams, return_alpha: bool = False):
    """Attention SS operation over every location; heads are concatenated channelwise.

    With ``return_alpha`` also returns the coefficients as an array of shape
    (N, heads, s, s, H, W), zero at padding positions.
    """
    out, cache = attention_forward(x, params)
    if not return_alpha:
        return out
    s = params.window
    half = (s - 1) // 2
    oy, ox = cache["grid"]
    n, heads, _, h, w = cache["alpha"].shape
    full = np.zeros((n, heads, s, s, h, w))
    inner = cache["alpha"].reshape(n, heads, len(oy), len(ox), h, w)
    full[:, :, oy[0] + half : oy[-1] + half + 1, ox[0] + half : ox[-1] + half + 1] = inner
    return out, full


def attention_backward(x, params: AttentionParams, grad_out,
                       cache: Optional[dict] = None) -> Tuple[np.ndarray, AttentionParams]:
    """Gradients w.r.t. the input and the projections, through the masked softmax."""
    x = as_tensor(x)
    if cache is None:
        _, cache = attention_forward(x, params)
    n, _, h, w = x.shape
    grad_out = as_tensor(grad_out, "grad_out")
    if grad_out.shape != (n, params.out_channels, h, w):
        raise ShapeError(f"grad_out has shape {grad_out.shape}, expected {(n, params.out_channels, h, w)}")
    g = grad_out.reshape(n, params.heads, params.d_o, h, w)
    q, kp, vp, alpha = cache["q"], cache["kp"], cache["vp"], cache["alpha"]
    offsets = cache["offsets"]

    grad_alpha = np.empty_like(alpha)
    grad_vp = np.zeros_like(vp)
    for o, (a, b) in enumerate(offsets):
        grad_alpha[:, :, o] = np.einsum("nhkyx,nhkyx->nhyx", g, vp[..., a : a + h, b : b + w])
        grad_vp[..., a : a + h, b : b + w] += alpha[:, :, o, None] * g
    # softmax Jacobian; alpha is exactly 0 on padding so those logits get no gradient
    grad_logits = alpha * (grad_alpha - np.sum(alpha * grad_alpha, axis=2, keepdims=True))
    grad_logits /= np.sqrt(params.d_k)

    grad_q = np.zeros_like(q)
    grad_kp = np.zeros_like(kp)
    for o, (a, b) in enumerate(offsets):
        grad_q += grad_logits[:, :, o, None] * kp[..., a : a + h, b : b + w]
        grad_kp[..., a : a + h, b : b + w] += grad_logits[:, :, o, None] * q
    py, px = (kp.shape[3] - h) // 2, (kp.shape[4] - w) // 2
    grad_k = grad_kp[..., py : py + h, px : px + w]
    grad_v = grad_vp[..., py : py + h, px : px + w]

    grad_x = np.zeros_like(x)
    grads = []
    for weight, gproj in ((params.w_q, grad_q), (params.w_k, grad_k), (params.w_v, grad_v)):
        grad_x += np.einsum("hkd,nhkyx->ndyx", weight, gproj, optimize=True)
        grads.append(np.einsum("nhkyx,ndyx->hkd", gproj, x, optimize=True))
    return grad_x, AttentionParams(*grads, window=params.window)


def _proj_spec(params: AttentionParams, proj: ConvWeights, classes: int) -> DilatedConvSpec:
    spec = DilatedConvSpec(1, 1, params.out_channels, classes, bias=proj.bias is not None)
    proj.check(spec)
    return spec


def ss_output_layer(x, params: AttentionParams, proj: ConvWeights, classes: int) -> np.ndarray:
    """Attention SS operation followed by a 1x1 convolution to per-pixel class logits."""
    spec = _proj_spec(params, proj, classes)
    return dilated_conv_direct(ss_attention_layer(x, params), proj, spec)


def ss_output_backward(x, params: AttentionParams, proj: ConvWeights, classes: int, grad_out):
    """Returns ``(grad_input, grad_attention, grad_proj)``."""
    spec = _proj_spec(params, proj, classes)
    hidden = ss_attention_layer(x, params)
    grad_hidden, grad_proj = dilated_conv_backward(hidden, proj, spec, grad_out)
    grad_x, grad_params = attention_backward(x, params, grad_hidden)
    return grad_x, grad_params, grad_proj
