"""Effective receptive field analysis of a block.

A unit gradient is injected at the spatial center of the block output and
backpropagated to the input; absolute input gradients are averaged over a
dataset and summed over channels.
"""
from __future__ import annotations

import copy
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from sdconv.layers import Box, DilatedConv, Layer, Sequential
from sdconv.smoothing import GroupInteractionWeights, SSKernel
from sdconv.tensor import ConvWeights, DilatedConvSpec, as_tensor, save_t4

UPSCALE = 10


@dataclass
class ERFMap:
    values: np.ndarray  # (H, W), nonnegative
    description: str = ""
    samples: int = 1


def cascade_block(rates: Sequence[int], method: str = "none", kernel: int = 3,
                  channels: int = 1) -> Sequential:
    """Linear stack of unpadded dilated convs with all-ones weights.

    Smoothing operators are set to plain averages: an all-ones/(2r-1)^2 SS
    kernel, or a group interaction matrix with every entry 1/r^2. All weights
    are nonnegative, so a zero in the ERF is a true hole of the support.
    """
    layers = []
    for r in rates:
        spec = DilatedConvSpec(kernel, r, channels, channels)
        smoothing = method if r >= 2 else "none"
        layers.append(DilatedConv(
            spec, ConvWeights.constant(spec, 1.0), smoothing,
            interaction=GroupInteractionWeights(np.full((r * r, r * r), 1.0 / (r * r))) if smoothing == "GI" else None,
            kernel=SSKernel.box(r) if smoothing == "SS" else None,
        ))
    return Sequential(layers)


def analysis_input_size(block: Sequential, margin: Optional[int] = None) -> int:
    """Input side giving a stack of dilated convs an odd (2*margin+1) output side.

    The default margin leaves room for the growth of the receptive field
    caused by smoothing, so the whole theoretical box lies inside the input.
    """
    convs = [l for l in block.layers if isinstance(l, DilatedConv)]
    shrink = sum((l.spec.kernel - 1) * l.spec.dilation for l in convs if l.spec.padding == "none")
    if margin is None:
        margin = 2 + sum(l.spec.dilation - 1 for l in convs if l.smoothing != "none")
    return shrink + 2 * margin + 1


def erf_single(block: Layer, x) -> np.ndarray:
    """d y[center] / d x for all input locations and channels (summed over output channels)."""
    x = as_tensor(x)
    y = block.forward(x)
    h, w = y.shape[2:]
    if h % 2 == 0 or w % 2 == 0:
        raise ValueError(
            f"block output is {h}x{w}; the center is only defined for odd sizes, "
            "pad or crop the input so both output sides are odd"
        )
    seed = np.zeros_like(y)
    seed[:, :, h // 2, w // 2] = 1.0
    return block.backward(seed)


def _threads(threads: Optional[int]) -> int:
    if threads is not None:
        return max(1, threads)
    return max(1, int(os.environ.get("SD_THREADS", "1")))


def erf_aggregate(block: Layer, dataset: Sequence, description: str = "",
                  threads: Optional[int] = None) -> ERFMap:
    """Mean over samples of ``|erf_single|``, then summed over channels.

    Samples may be processed concurrently; each worker gets its own copy of
    the block and the reduction runs in dataset order.
    """
    if len(dataset) == 0:
        raise ValueError("erf_aggregate needs at least one sample")
    shape = np.shape(dataset[0])
    if any(np.shape(s) != shape for s in dataset):
        raise ValueError("all samples must share one shape")

    workers = min(_threads(threads), len(dataset))
    if workers == 1:
        grads = [np.abs(erf_single(block, s)) for s in dataset]
    else:
        def run(sample):
            return np.abs(erf_single(copy.deepcopy(block), sample))

        with ThreadPoolExecutor(max_workers=workers) as pool:
            grads = list(pool.map(run, dataset))

    total = np.zeros_like(grads[0])
    for g in grads:
        total += g
    values = (total / len(dataset)).sum(axis=(0, 1))
    return ERFMap(values, description, len(dataset))


def theoretical_rf(block: Layer, input_hw: Tuple[int, int], output_hw: Tuple[int, int]) -> Box:
    """Receptive field box of the block's center output, clipped to the input."""
    ch, cw = output_hw[0] // 2, output_hw[1] // 2
    top, left, bottom, right = block.rf_box((ch, cw, ch, cw))
    return max(top, 0), max(left, 0), min(bottom, input_hw[0] - 1), min(right, input_hw[1] - 1)


def holes(erf: ERFMap, box: Box) -> int:
    """Exact-zero entries inside ``box`` (inclusive)."""
    top, left, bottom, right = box
    return int(np.count_nonzero(erf.values[top : bottom + 1, left : right + 1] == 0.0))


def support_outside(erf: ERFMap, box: Box) -> int:
    top, left, bottom, right = box
    inside = np.zeros(erf.values.shape, dtype=bool)
    inside[top : bottom + 1, left : right + 1] = True
    return int(np.count_nonzero((erf.values != 0.0) & ~inside))


def to_gray(values: np.ndarray, upscale: int = UPSCALE) -> np.ndarray:
    """Max-normalized 8-bit image, nearest-neighbour upscaled."""
    values = np.asarray(values, dtype=np.float64)
    peak = values.max() if values.size else 0.0
    if peak > 0:
        img = np.rint(np.clip(values, 0, None) / peak * 255.0).astype(np.uint8)
    else:
        img = np.zeros(values.shape, dtype=np.uint8)
    return np.kron(img, np.ones((upscale, upscale), dtype=np.uint8))


def write_pgm(path: Union[str, Path], img: np.ndarray) -> Path:
    path = Path(path)
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
    return path


def read_pgm(path: Union[str, Path]) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError("not a binary PGM file")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError("only 8-bit PGM is supported")
    return np.frombuffer(data[pos + 1 : pos + 1 + w * h], dtype=np.uint8).reshape(h, w)


def erf_render(erf: ERFMap, path: Union[str, Path]) -> Tuple[Path, Path]:
    """Write ``<path>.pgm`` (upscaled grayscale) and ``<path>.t4`` (raw values)."""
    base = Path(path)
    if base.suffix in (".pgm", ".t4"):
        base = base.with_suffix("")
    raw = save_t4(base.with_suffix(".t4"), erf.values[None, None])
    pgm = write_pgm(base.with_suffix(".pgm"), to_gray(erf.values))
    return pgm, raw
