"""
Fusion, Losses and Metrics
Convex fusion of the two scale paths, cross-entropy segmentation loss,
prototype alignment regularization and the Dice score.
"""

import logging
from dataclasses import dataclass

import numpy as np

import tensor_core as tc
from proto_head import MaskPrediction, masked_avg_pool, segment_with_prototype
from tensor_core import ShapeError, Tensor

logger = logging.getLogger(__name__)

LOSS_EPS = 1e-7
DEGENERATE_WEIGHT = 1e-6
BINARIZE_AT = 0.5


class FusionConfigError(ValueError):
    """Raised for a fusion factor outside (0, 1)"""


@dataclass(frozen=True)
class FusionConfig:
    alpha: float = 0.8

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise FusionConfigError(f"fusion alpha must lie in (0, 1), got {self.alpha}")


@dataclass
class LossBreakdown:
    seg: Tensor
    reg: Tensor
    total: Tensor

    def as_floats(self):
        return {"seg": self.seg.item(), "reg": self.reg.item(), "total": self.total.item()}


def fuse(m64, m32, cfg):
    """alpha * m64 + (1 - alpha) * m32 for both foreground and background"""
    if m64.shape != m32.shape:
        raise ShapeError(f"cannot fuse masks of shapes {m64.shape} and {m32.shape}")
    if not isinstance(cfg, FusionConfig):
        cfg = FusionConfig(alpha=cfg)
    a = cfg.alpha
    fg = tc.add(tc.mul(m64.fg, a), tc.mul(m32.fg, 1.0 - a))
    bg = tc.add(tc.mul(m64.bg, a), tc.mul(m32.bg, 1.0 - a))
    return MaskPrediction(fg=fg, bg=bg)


def fuse_paths(predictions, cfg):
    """Fuse the "64" and "32" predictions; a single-path model passes its one prediction through"""
    if len(predictions) == 1:
        return next(iter(predictions.values()))
    return fuse(predictions["64"], predictions["32"], cfg)


def seg_loss(pred, truth_fg, eps=LOSS_EPS):
    """Pixel-mean binary cross entropy over the foreground and background maps"""
    truth = np.asarray(truth_fg.data if isinstance(truth_fg, Tensor) else truth_fg)
    if truth.shape != pred.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    truth_fg = Tensor(truth, dtype=pred.fg.dtype)
    truth_bg = Tensor(1.0 - truth_fg.data, dtype=pred.fg.dtype)

    log_fg = tc.log(tc.clamp(pred.fg, eps, 1.0 - eps))
    log_bg = tc.log(tc.clamp(pred.bg, eps, 1.0 - eps))
    per_pixel = tc.add(tc.mul(truth_fg, log_fg), tc.mul(truth_bg, log_bg))
    return tc.neg(tc.tensor_mean(per_pixel))


def _at_size(upsampled, path, height, width):
    if upsampled is None or path not in upsampled:
        return None
    candidate = upsampled[path]
    return candidate if candidate.shape[1:] == (height, width) else None


def align_loss(support_features, query_features, query_predictions, support_mask, heads,
               fusion, score_scale=20.0, steepness=1.0, resolution="image", counters=None,
               support_upsampled=None, query_upsampled=None):
    """Segment the support image with a prototype pooled under the predicted query mask

    Each argument except the mask, fusion and scalars is keyed by scale path
    ("64", "32", or just one of them). A path whose soft weights all fall
    below 1e-6 makes the whole term zero. The optional `*_upsampled` maps
    hold features already resized to the mask size and are reused when given.
    """
    height, width = np.shape(support_mask)
    support_predictions = {}
    for path, features in query_features.items():
        weights = query_predictions[path].fg
        if float(np.max(weights.data)) < DEGENERATE_WEIGHT:
            logger.warning("degenerate soft query mask on path %s, alignment term skipped", path)
            if counters is not None:
                counters["degenerate_align"] += 1
            return Tensor(0.0, dtype=weights.dtype)
        pooled_from = _at_size(query_upsampled, path, *weights.shape)
        prototype = masked_avg_pool(features if pooled_from is None else pooled_from, weights)
        support_predictions[path] = segment_with_prototype(
            support_features[path], prototype, heads[path], height, width,
            scale=score_scale, steepness=steepness, resolution=resolution,
            upsampled=_at_size(support_upsampled, path, height, width))

    return seg_loss(fuse_paths(support_predictions, fusion), support_mask)


def total_loss(seg, reg):
    seg = tc.as_tensor(seg)
    reg = tc.as_tensor(reg, like=seg)
    return LossBreakdown(seg=seg, reg=reg, total=tc.add(seg, reg))


def binarize(fg, threshold=BINARIZE_AT):
    data = fg.data if isinstance(fg, Tensor) else np.asarray(fg)
    return (data > threshold).astype(np.uint8)


def dice(pred_fg, truth_fg):
    """2|A∩B| / (|A| + |B|) as a percentage; 100 when both are empty"""
    a = np.asarray(pred_fg.data if isinstance(pred_fg, Tensor) else pred_fg) > 0
    b = np.asarray(truth_fg.data if isinstance(truth_fg, Tensor) else truth_fg) > 0
    denominator = int(a.sum()) + int(b.sum())
    if denominator == 0:
        return 100.0
    return 200.0 * int(np.logical_and(a, b).sum()) / denominator
