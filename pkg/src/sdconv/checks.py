"""Executable equivalence and gradient suites behind ``sdconv verify`` / ``gradcheck``."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import List

import numpy as np

from sdconv.attention import (
    AttentionParams,
    attention_backward,
    ss_attention_layer,
    ss_output_backward,
    ss_output_layer,
)
from sdconv.decomposition import (
    dilated_conv_decomposed,
    dilated_conv_decomposed_backward,
    reinterlace,
    subsample,
)
from sdconv.harness.model import softmax_cross_entropy
from sdconv.smoothing import (
    GroupInteractionWeights,
    SSKernel,
    group_interact,
    group_interact_backward,
    smoothed_dilated_conv_GI,
    smoothed_dilated_conv_GI_backward,
    smoothed_dilated_conv_SS,
    smoothed_dilated_conv_SS_backward,
    ss_blockwise_fc,
    ss_blockwise_fc_backward,
    ss_conv,
    ss_conv_backward,
)
from sdconv.tensor import (
    ConvWeights,
    DilatedConvSpec,
    dilated_conv_backward,
    dilated_conv_direct,
    finite_difference_check,
)

EQUIV_TOL = 1e-12
LINEAR_GRAD_TOL = 1e-6
SOFTMAX_GRAD_TOL = 1e-4
FD_STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    value: float
    bound: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.value) and self.value < self.bound)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<48} {self.value:.3e}  (< {self.bound:.0e})"


def relative_deviation(a, b) -> float:
    """``max|a - b| / max|b|`` (absolute when ``b`` is all zero)."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        return float("inf")
    scale = np.abs(b).max() if b.size else 0.0
    diff = np.abs(a - b).max() if a.size else 0.0
    return float(diff / scale) if scale > 0 else float(diff)


def random_case(rng: np.random.Generator, rate: int, kernel: int, cin: int, cout: int,
                padding: str = None, bias: bool = None):
    """A random (input, weights, spec) triple with a valid, possibly non-divisible, size."""
    padding = padding or str(rng.choice(["none", "same"]))
    bias = bool(rng.integers(0, 2)) if bias is None else bias
    spec = DilatedConvSpec(kernel, rate, cin, cout, padding=padding, bias=bias)
    low = 1 if padding == "same" else spec.receptive_field
    h, w = rng.integers(low, low + 2 * rate + 3, size=2)
    x = rng.uniform(-1, 1, size=(int(rng.integers(1, 3)), cin, h, w))
    return x, ConvWeights.uniform(spec, rng), spec


def _grid(trials: int):
    combos = list(itertools.product((2, 3, 4), (3, 5), (1, 3, 8)))
    for i in range(trials):
        yield combos[i % len(combos)]


def verify_suite(seed: int = 0, trials: int = 108) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    decomp = round_trip = gi_equiv = blockwise_id = order = gi_ident = ss_ident = 0.0
    for rate, kernel, channels in _grid(trials):
        cout = int(rng.choice((1, 3, 8)))
        x, w, spec = random_case(rng, rate, kernel, channels, cout)
        direct = dilated_conv_direct(x, w, spec)
        decomp = max(decomp, relative_deviation(dilated_conv_decomposed(x, w, spec), direct))

        round_trip = max(round_trip, relative_deviation(reinterlace(subsample(x, rate)), x))

        W = GroupInteractionWeights.uniform(rate, rng)
        gi = smoothed_dilated_conv_GI(x, w, W, spec)
        gi_equiv = max(gi_equiv, relative_deviation(gi, ss_blockwise_fc(direct, W, rate)))

        stack = subsample(x, rate)
        blockwise_id = max(blockwise_id, relative_deviation(
            ss_blockwise_fc(reinterlace(stack), W, rate), reinterlace(group_interact(stack, W))))

        k = SSKernel.uniform(rate, rng)
        smoothed = ss_conv(x, k)
        order = max(order, relative_deviation(
            dilated_conv_decomposed(smoothed, w, spec), smoothed_dilated_conv_SS(x, k, w, spec)))

        gi_ident = max(gi_ident, relative_deviation(
            smoothed_dilated_conv_GI(x, w, GroupInteractionWeights.identity(rate), spec), direct))
        ss_ident = max(ss_ident, relative_deviation(
            smoothed_dilated_conv_SS(x, SSKernel.identity(rate), w, spec), direct))

    return [
        CheckResult(f"decomposed == direct ({trials} trials)", decomp, EQUIV_TOL),
        CheckResult("reinterlace(subsample(x)) == x", round_trip, EQUIV_TOL),
        CheckResult("GI identity init == dilated conv", gi_ident, EQUIV_TOL),
        CheckResult("SS identity init == dilated conv", ss_ident, EQUIV_TOL),
        CheckResult("GI == block-wise FC after dilated conv", gi_equiv, EQUIV_TOL),
        CheckResult("block-wise FC == reinterlaced group interaction", blockwise_id, EQUIV_TOL),
        CheckResult("SS before deinterlace == SS before dilated conv", order, EQUIV_TOL),
    ]


def gradcheck_suite(seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []

    def check(name, fn, grad_fn, point, bound=LINEAR_GRAD_TOL):
        err = finite_difference_check(fn, grad_fn, point, FD_STEP, seed=seed)
        results.append(CheckResult(name, err, bound))

    # dilated conv, direct and decomposed
    spec = DilatedConvSpec(3, 2, 2, 3, padding="none", bias=True)
    x = rng.uniform(-1, 1, (1, 2, 7, 8))
    w = ConvWeights.uniform(spec, rng)
    check("dilated conv: input",
          lambda p: dilated_conv_direct(p, w, spec),
          lambda p, g: dilated_conv_backward(p, w, spec, g)[0], x)
    check("dilated conv: filters",
          lambda p: dilated_conv_direct(x, ConvWeights(p, w.bias), spec),
          lambda p, g: dilated_conv_backward(x, ConvWeights(p, w.bias), spec, g)[1].filters, w.filters)
    check("dilated conv: bias",
          lambda p: dilated_conv_direct(x, ConvWeights(w.filters, p), spec),
          lambda p, g: dilated_conv_backward(x, ConvWeights(w.filters, p), spec, g)[1].bias, w.bias)
    same = DilatedConvSpec(3, 3, 2, 2, padding="same")
    ws = ConvWeights.uniform(same, rng)
    check("decomposed conv (same padding): input",
          lambda p: dilated_conv_decomposed(p, ws, same),
          lambda p, g: dilated_conv_decomposed_backward(p, ws, same, g)[0], x)

    # group interaction and the GI-smoothed conv
    W = GroupInteractionWeights.uniform(2, rng)
    stack = subsample(rng.uniform(-1, 1, (1, 2, 5, 6)), 2)
    check("group interaction: groups",
          lambda p: group_interact(stack.with_groups(p), W).groups,
          lambda p, g: group_interact_backward(stack.with_groups(p), W, stack.with_groups(g))[0].groups,
          stack.groups)
    check("group interaction: W",
          lambda p: group_interact(stack, GroupInteractionWeights(p)).groups,
          lambda p, g: group_interact_backward(stack, GroupInteractionWeights(p), stack.with_groups(g))[1].matrix,
          W.matrix)
    gspec = DilatedConvSpec(3, 2, 2, 2, padding="none", bias=True)
    gw = ConvWeights.uniform(gspec, rng)
    check("GI-smoothed conv: input",
          lambda p: smoothed_dilated_conv_GI(p, gw, W, gspec),
          lambda p, g: smoothed_dilated_conv_GI_backward(p, gw, W, gspec, g)[0], x)
    check("GI-smoothed conv: filters",
          lambda p: smoothed_dilated_conv_GI(x, ConvWeights(p, gw.bias), W, gspec),
          lambda p, g: smoothed_dilated_conv_GI_backward(x, ConvWeights(p, gw.bias), W, gspec, g)[1].filters,
          gw.filters)
    check("GI-smoothed conv: W",
          lambda p: smoothed_dilated_conv_GI(x, gw, GroupInteractionWeights(p), gspec),
          lambda p, g: smoothed_dilated_conv_GI_backward(x, gw, GroupInteractionWeights(p), gspec, g)[2].matrix,
          W.matrix)

    # SS convolution and the SS-smoothed conv
    k = SSKernel.uniform(2, rng)
    check("SS conv: input",
          lambda p: ss_conv(p, k), lambda p, g: ss_conv_backward(p, k, g)[0], x)
    check("SS conv: kernel",
          lambda p: ss_conv(x, SSKernel(p)), lambda p, g: ss_conv_backward(x, SSKernel(p), g)[1].k, k.k)
    check("SS-smoothed conv: input",
          lambda p: smoothed_dilated_conv_SS(p, k, gw, gspec),
          lambda p, g: smoothed_dilated_conv_SS_backward(p, k, gw, gspec, g)[0], x)
    check("SS-smoothed conv: kernel",
          lambda p: smoothed_dilated_conv_SS(x, SSKernel(p), gw, gspec),
          lambda p, g: smoothed_dilated_conv_SS_backward(x, SSKernel(p), gw, gspec, g)[1].k, k.k)

    # block-wise FC
    check("block-wise FC: input",
          lambda p: ss_blockwise_fc(p, W, 2), lambda p, g: ss_blockwise_fc_backward(p, W, 2, g)[0], x)
    check("block-wise FC: W",
          lambda p: ss_blockwise_fc(x, GroupInteractionWeights(p), 2),
          lambda p, g: ss_blockwise_fc_backward(x, GroupInteractionWeights(p), 2, g)[1].matrix, W.matrix)

    # attention through the masked softmax
    params = AttentionParams.init(3, 4, 2, 2, 3, rng, bound=0.8)
    xa = rng.uniform(-1, 1, (1, 3, 4, 5))

    def with_param(name, value):
        fields = dict(w_q=params.w_q, w_k=params.w_k, w_v=params.w_v)
        fields[name] = value
        return AttentionParams(**fields, window=params.window)

    check("SS attention: input",
          lambda p: ss_attention_layer(p, params),
          lambda p, g: attention_backward(p, params, g)[0], xa, SOFTMAX_GRAD_TOL)
    for name in ("w_q", "w_k", "w_v"):
        check(f"SS attention: {name}",
              lambda p, n=name: ss_attention_layer(xa, with_param(n, p)),
              lambda p, g, n=name: getattr(attention_backward(xa, with_param(n, p), g)[1], n),
              getattr(params, name), SOFTMAX_GRAD_TOL)
    proj = ConvWeights.uniform(DilatedConvSpec(1, 1, params.out_channels, 3, bias=True), rng)
    check("SS output layer: input",
          lambda p: ss_output_layer(p, params, proj, 3),
          lambda p, g: ss_output_backward(p, params, proj, 3, g)[0], xa, SOFTMAX_GRAD_TOL)

    labels = rng.integers(0, 3, size=(1, 4, 5))
    check("softmax cross-entropy: logits",
          lambda p: np.array(softmax_cross_entropy(p, labels)[0]),
          lambda p, g: g * softmax_cross_entropy(p, labels)[1],
          rng.standard_normal((1, 3, 4, 5)), SOFTMAX_GRAD_TOL)
    return results
