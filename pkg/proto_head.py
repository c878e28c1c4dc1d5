"""
Adaptive Prototype Head
Masked-average-pool a foreground prototype, score query pixels by scaled
negative cosine similarity, and turn scores into soft masks with a learned
threshold.
"""

import logging
from dataclasses import dataclass

import numpy as np

import tensor_core as tc
from tensor_core import ShapeError, Tensor

logger = logging.getLogger(__name__)

SCORE_SCALE = 20.0
COSINE_EPS = 1e-8


class EmptyMaskError(ValueError):
    """Raised when a prototype is requested from a mask with no foreground"""


@dataclass
class Prototype:
    p: Tensor

    @property
    def dim(self):
        return self.p.shape[0]


@dataclass
class ThresholdHead:
    weights: Tensor
    bias: Tensor

    def named_tensors(self, prefix):
        return {f"{prefix}.weight": self.weights, f"{prefix}.bias": self.bias}

    @classmethod
    def from_named(cls, table, prefix):
        return cls(weights=table[f"{prefix}.weight"], bias=table[f"{prefix}.bias"])


@dataclass
class MaskPrediction:
    fg: Tensor
    bg: Tensor

    @property
    def shape(self):
        return self.fg.shape

    def resized(self, height, width):
        """Bilinearly resample both maps"""
        if self.fg.shape == (height, width):
            return self
        fg = tc.bilinear_resize(self.fg.reshape(1, *self.fg.shape), height, width)
        bg = tc.bilinear_resize(self.bg.reshape(1, *self.bg.shape), height, width)
        return MaskPrediction(fg=fg.reshape(height, width), bg=bg.reshape(height, width))


def init_threshold_head(channels, rng, dtype=np.float32):
    weights = rng.normal(0.0, np.sqrt(1.0 / channels), size=(1, channels))
    return ThresholdHead(
        weights=Tensor(weights.astype(dtype), requires_grad=True),
        bias=Tensor(np.zeros(1, dtype=dtype), requires_grad=True),
    )


def _mask_tensor(mask, like):
    if isinstance(mask, Tensor):
        return mask
    return Tensor(np.asarray(mask, dtype=like.dtype))


def masked_avg_pool(features, mask):
    """Average feature vectors under a (binary or soft) mask at the mask's resolution

    Features are bilinearly resized to the mask size first. A Tensor mask
    that requires grad lets gradients flow into the weights too.
    """
    mask = _mask_tensor(mask, features)
    if mask.ndim != 2:
        raise ShapeError(f"expected an H×W mask, got {mask.shape}")
    total = float(mask.data.sum())
    if total <= 0.0:
        raise EmptyMaskError("mask has no foreground pixels")

    height, width = mask.shape
    resized = tc.bilinear_resize(features, height, width)
    weighted = tc.mul(resized, mask.reshape(1, height, width))
    pooled = tc.div(tc.tensor_sum(weighted, axis=(1, 2)), tc.tensor_sum(mask))
    return Prototype(p=pooled)


def anomaly_score(query, prototype, scale=SCORE_SCALE, eps=COSINE_EPS):
    """S(x, y) = -scale * cos(F_q(x, y), p), denominator floored at eps"""
    p = prototype.p
    if query.ndim != 3 or query.shape[0] != p.shape[0]:
        raise ShapeError(f"query {query.shape} does not match prototype of dim {p.shape[0]}")
    p_norm = float(np.linalg.norm(p.data))
    if p_norm == 0.0:
        raise ShapeError("prototype has zero norm")

    column = p.reshape(p.shape[0], 1, 1)
    dots = tc.tensor_sum(tc.mul(query, column), axis=0)
    query_norms = tc.sqrt(tc.tensor_sum(tc.mul(query, query), axis=0))
    proto_norm = tc.sqrt(tc.tensor_sum(tc.mul(p, p)))
    denominator = tc.maximum(tc.mul(query_norms, proto_norm), eps)
    return tc.mul(tc.div(dots, denominator), -scale)


def adaptive_threshold(query, head):
    """T = linear(global_average_pool(F_q))"""
    return tc.linear(tc.global_avg_pool(query), head.weights, head.bias)


def segment_with_prototype(features, prototype, head, height, width,
                           scale=SCORE_SCALE, steepness=1.0, resolution="image", upsampled=None):
    """One scale path's prediction for `features`, delivered at height×width

    resolution="image" upsamples the features before scoring (pass `upsampled`
    to reuse an existing height×width copy); resolution="feature" scores at
    feature scale and upsamples the masks. The threshold always comes from
    the feature-scale map.
    """
    threshold = adaptive_threshold(features, head)
    if resolution == "image":
        if upsampled is None:
            upsampled = tc.bilinear_resize(features, height, width)
        scores = anomaly_score(upsampled, prototype, scale)
        return predict_masks(scores, threshold, steepness)
    if resolution == "feature":
        scores = anomaly_score(features, prototype, scale)
        return predict_masks(scores, threshold, steepness).resized(height, width)
    raise ValueError(f"unknown score resolution {resolution!r}")


def predict_masks(scores, threshold, steepness=1.0):
    """fg = 1 - sigmoid(steepness * (S - T)) and bg = sigmoid(steepness * (S - T))

    Both maps come straight from a sigmoid so neither loses precision in the
    tails; fg is evaluated as sigmoid(steepness * (T - S)).
    """
    threshold = tc.as_tensor(threshold, like=scores)
    if threshold.ndim:
        threshold = threshold.reshape(())
    shifted = tc.sub(scores, threshold)
    if steepness != 1.0:
        shifted = tc.mul(shifted, steepness)
    return MaskPrediction(fg=tc.sigmoid(tc.neg(shifted)), bg=tc.sigmoid(shifted))
