"""
Dual-Path Encoder
A small strided CNN standing in for a pretrained backbone. Every block is
pointwise mix -> depthwise 3×3 conv (optionally stride 2) -> gelu, and two
taps are read out at 1/4 and 1/8 of the input resolution.
"""

from dataclasses import dataclass, field

import numpy as np

import tensor_core as tc
from tensor_core import ConvSpec, ShapeError, Tensor

BLOCK_NAMES = ("stem", "stage1", "stage2", "stage3")
QUARTER_TAP = "stage2"
EIGHTH_TAP = "stage3"


@dataclass
class EncoderBlock:
    pw_weight: Tensor
    pw_bias: Tensor
    dw_weight: Tensor
    stride: int = 1

    @property
    def out_channels(self):
        return self.pw_weight.shape[0]

    def forward(self, x):
        mixed = tc.conv2d_pointwise(x, self.pw_weight, self.pw_bias)
        spec = ConvSpec(kernel_size=self.dw_weight.shape[-1], stride=self.stride)
        return tc.gelu(tc.conv2d_depthwise(mixed, self.dw_weight, spec))


@dataclass
class EncoderParams:
    blocks: dict = field(default_factory=dict)

    @property
    def tap_quarter(self):
        return self.blocks[QUARTER_TAP].out_channels

    @property
    def tap_eighth(self):
        return self.blocks[EIGHTH_TAP].out_channels

    def named_tensors(self, prefix="enc"):
        table = {}
        for name, block in self.blocks.items():
            table[f"{prefix}.{name}.pw.weight"] = block.pw_weight
            table[f"{prefix}.{name}.pw.bias"] = block.pw_bias
            table[f"{prefix}.{name}.dw.weight"] = block.dw_weight
        return table

    @classmethod
    def from_named(cls, table, prefix="enc"):
        blocks = {}
        for name in BLOCK_NAMES:
            blocks[name] = EncoderBlock(
                pw_weight=table[f"{prefix}.{name}.pw.weight"],
                pw_bias=table[f"{prefix}.{name}.pw.bias"],
                dw_weight=table[f"{prefix}.{name}.dw.weight"],
                stride=1 if name == "stem" else 2,
            )
        return cls(blocks=blocks)


@dataclass
class FeaturePair:
    f64: Tensor
    f32: Tensor

    def paths(self):
        return {"64": self.f64, "32": self.f32}


def init_encoder_params(rng, channels=32, stem_channels=8, in_channels=3, dtype=np.float32):
    """std = sqrt(2 / fan_in) normal weights, zero biases"""
    widths = {
        "stem": stem_channels,
        "stage1": max(stem_channels, channels // 2),
        "stage2": channels,
        "stage3": channels,
    }
    blocks = {}
    previous = in_channels
    for name in BLOCK_NAMES:
        width = widths[name]
        pw = rng.normal(0.0, np.sqrt(2.0 / previous), size=(width, previous))
        dw = rng.normal(0.0, np.sqrt(2.0 / 9), size=(width, 3, 3))
        blocks[name] = EncoderBlock(
            pw_weight=Tensor(pw.astype(dtype), requires_grad=True),
            pw_bias=Tensor(np.zeros(width, dtype=dtype), requires_grad=True),
            dw_weight=Tensor(dw.astype(dtype), requires_grad=True),
            stride=1 if name == "stem" else 2,
        )
        previous = width
    return EncoderParams(blocks=blocks)


def extract(image, params):
    """Run the shared encoder and return the 1/4 and 1/8 scale taps"""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"expected a 3×H×W image, got {image.shape}")
    if image.shape[1] % 8 or image.shape[2] % 8:
        raise ShapeError(f"image extents must be multiples of 8, got {image.shape[1:]}")

    taps = {}
    x = image
    for name in BLOCK_NAMES:
        x = params.blocks[name].forward(x)
        taps[name] = x
    return FeaturePair(f64=taps[QUARTER_TAP], f32=taps[EIGHTH_TAP])
