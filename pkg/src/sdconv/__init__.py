"""Smoothed dilated convolutions: decomposition, degridding operators and tooling."""

from sdconv.tensor import (
    ConvWeights,
    DilatedConvSpec,
    ShapeError,
    as_tensor,
    dilated_conv_backward,
    dilated_conv_direct,
    finite_difference_check,
    load_t4,
    save_t4,
)
from sdconv.decomposition import (
    GroupStack,
    dilated_conv_decomposed,
    reinterlace,
    subsample,
)
from sdconv.smoothing import (
    GroupInteractionWeights,
    SSKernel,
    count_extra_params,
    group_interact,
    smoothed_dilated_conv_GI,
    smoothed_dilated_conv_SS,
    ss_blockwise_fc,
    ss_conv,
)
from sdconv.attention import (
    AttentionParams,
    attention_backward,
    attention_window,
    ss_attention_layer,
    ss_output_layer,
)

__version__ = "0.1.0"
