"""
Large Kernel Attention
Project-activate, then gate features with a decomposed large-kernel
attention map: 1×1 conv of a dilated depthwise conv of a depthwise conv.
"""

from dataclasses import dataclass

import numpy as np

import tensor_core as tc
from tensor_core import ConvSpec, ShapeError, Tensor


@dataclass
class LkaParams:
    proj_in_weight: Tensor
    proj_in_bias: Tensor
    dw_weight: Tensor
    dwd_weight: Tensor
    proj_attn_weight: Tensor
    proj_attn_bias: Tensor
    kernel_size: int = 3
    dilation: int = 2

    def __post_init__(self):
        # validates k and d
        self.dw_spec
        self.dwd_spec

    @property
    def channels(self):
        return self.proj_in_weight.shape[0]

    @property
    def dw_spec(self):
        return ConvSpec(kernel_size=self.kernel_size, dilation=1)

    @property
    def dwd_spec(self):
        return ConvSpec(kernel_size=self.kernel_size, dilation=self.dilation)

    @property
    def receptive_field(self):
        return self.kernel_size + (self.kernel_size - 1) * self.dilation

    def named_tensors(self, prefix):
        return {
            f"{prefix}.proj_in.weight": self.proj_in_weight,
            f"{prefix}.proj_in.bias": self.proj_in_bias,
            f"{prefix}.dw.weight": self.dw_weight,
            f"{prefix}.dwd.weight": self.dwd_weight,
            f"{prefix}.proj_attn.weight": self.proj_attn_weight,
            f"{prefix}.proj_attn.bias": self.proj_attn_bias,
        }

    @classmethod
    def from_named(cls, table, prefix, kernel_size, dilation):
        return cls(
            proj_in_weight=table[f"{prefix}.proj_in.weight"],
            proj_in_bias=table[f"{prefix}.proj_in.bias"],
            dw_weight=table[f"{prefix}.dw.weight"],
            dwd_weight=table[f"{prefix}.dwd.weight"],
            proj_attn_weight=table[f"{prefix}.proj_attn.weight"],
            proj_attn_bias=table[f"{prefix}.proj_attn.bias"],
            kernel_size=kernel_size,
            dilation=dilation,
        )


def init_lka_params(channels, rng, kernel_size=3, dilation=2, dtype=np.float32):
    """Fan-in scaled normal weights, zero biases"""
    def _param(shape, fan_in):
        values = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        return Tensor(values.astype(dtype), requires_grad=True)

    def _zeros(shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    k = kernel_size
    return LkaParams(
        proj_in_weight=_param((channels, channels), channels),
        proj_in_bias=_zeros((channels,)),
        dw_weight=_param((channels, k, k), k * k),
        dwd_weight=_param((channels, k, k), k * k),
        proj_attn_weight=_param((channels, channels), channels),
        proj_attn_bias=_zeros((channels,)),
        kernel_size=kernel_size,
        dilation=dilation,
    )


def _check_channels(features, params):
    if features.ndim != 3 or features.shape[0] != params.channels:
        raise ShapeError(f"features {features.shape} do not match {params.channels} attention channels")


def lka_map(features, params):
    """Attention map Conv1×1(DW-D-Conv(DW-Conv(F))), linear throughout"""
    _check_channels(features, params)
    local = tc.conv2d_depthwise(features, params.dw_weight, params.dw_spec)
    distant = tc.conv2d_depthwise(local, params.dwd_weight, params.dwd_spec)
    return tc.conv2d_pointwise(distant, params.proj_attn_weight, params.proj_attn_bias)


def attend(raw_features, params):
    """Gate gelu(proj_in(F_raw)) elementwise with its own attention map"""
    _check_channels(raw_features, params)
    features = tc.gelu(tc.conv2d_pointwise(raw_features, params.proj_in_weight, params.proj_in_bias))
    return tc.mul(lka_map(features, params), features)
