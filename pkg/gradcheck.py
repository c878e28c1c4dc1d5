"""
Gradient Check
Central finite differences in float64 against the reverse pass, over
random instances of every differentiable operation in the pipeline.
"""

import logging
import time
from dataclasses import dataclass, field

import numpy as np

import tensor_core as tc
from config import RunConfig
from encoder import EncoderParams, extract, init_encoder_params
from episodes import Episode
from fusion_metrics import FusionConfig, align_loss, fuse, seg_loss, total_loss
from lka_attention import attend, init_lka_params, lka_map
from model import FewShotSegmenter
from proto_head import (MaskPrediction, Prototype, ThresholdHead, adaptive_threshold, anomaly_score,
                        masked_avg_pool, predict_masks)
from tensor_core import ConvSpec, Tensor

logger = logging.getLogger(__name__)

STEP = 1e-5
TOLERANCE = 1e-5
ROUNDOFF_MARGIN = 64
DTYPE = np.float64


@dataclass
class CheckResult:
    op: str
    instances: int
    max_error: float
    passed: bool


@dataclass
class GradcheckReport:
    results: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self):
        return all(r.passed for r in self.results)

    def table(self):
        lines = [f"  {'operation':<22}{'cases':>7}{'max rel err':>14}  status", "─" * 52]
        for r in self.results:
            status = "✅ pass" if r.passed else "❌ FAIL"
            lines.append(f"  {r.op:<22}{r.instances:>7}{r.max_error:>14.2e}  {status}")
        lines.append("─" * 52)
        lines.append(f"  {len(self.results)} operations in {self.seconds:.1f}s")
        return "\n".join(lines)


def _param(rng, *shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, size=shape).astype(DTYPE), requires_grad=True)


def _away_from(rng, shape, edges, margin=0.05):
    """Uniform values in (-2, 2) nudged off kinks so x ± h never crosses them"""
    values = rng.uniform(-2.0, 2.0, size=shape)
    for edge in edges:
        close = np.abs(values - edge) < margin
        values[close] = edge + np.sign(values[close] - edge + 1e-12) * margin * 2
    return Tensor(values.astype(DTYPE), requires_grad=True)


def _smooth_image(rng, size):
    """Low-frequency sinusoid in [0.1, 0.9]: keeps the pipeline away from near-zero feature norms"""
    yy, xx = np.mgrid[0:size, 0:size] / size
    fy, fx, phase = rng.uniform(0.5, 1.5), rng.uniform(0.5, 1.5), rng.uniform(0, 2 * np.pi)
    return 0.5 + 0.4 * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)


def _blob_mask(rng, height, width):
    mask = np.zeros((height, width), np.uint8)
    y, x = rng.integers(0, height - 2), rng.integers(0, width - 2)
    mask[y:y + rng.integers(2, height - y + 1), x:x + rng.integers(2, width - x + 1)] = 1
    return mask


# ---------------------------------------------------------------------------
# Case builders: rng -> (fn, differentiable inputs)
# ---------------------------------------------------------------------------

def _case_elementwise(op):
    def build(rng):
        shape = (2, 3, int(rng.integers(2, 5)))
        a, b = _param(rng, *shape), _param(rng, *shape[1:])
        if op is tc.div:
            b = _param(rng, *shape[1:], low=0.5, high=2.0)
        return (lambda x, y: op(x, y)), [a, b]
    return build


def _case_unary(op, low=-2.0, high=2.0):
    def build(rng):
        return (lambda x: op(x)), [_param(rng, 3, 4, int(rng.integers(2, 5)), low=low, high=high)]
    return build


def _case_sum(rng):
    axis = [None, 0, (1, 2)][int(rng.integers(3))]
    return (lambda x: tc.tensor_sum(x, axis=axis)), [_param(rng, 2, 3, 4)]


def _case_mean(rng):
    axis = [None, 1, (0, 2)][int(rng.integers(3))]
    return (lambda x: tc.tensor_mean(x, axis=axis)), [_param(rng, 2, 3, 4)]


def _case_clamp(rng):
    return (lambda x: tc.clamp(x, -1.0, 1.0)), [_away_from(rng, (3, 5), (-1.0, 1.0))]


def _case_maximum(rng):
    return (lambda x: tc.maximum(x, 0.25)), [_away_from(rng, (3, 5), (0.25,))]


def _case_reshape(rng):
    return (lambda x: tc.mul(tc.reshape(x, (6, 4)), tc.reshape(x, (6, 4)))), [_param(rng, 2, 3, 4)]


def _case_depthwise(rng):
    k = int(rng.choice([1, 3, 5]))
    spec = ConvSpec(kernel_size=k, dilation=int(rng.integers(1, 3)), stride=int(rng.integers(1, 3)))
    channels = int(rng.integers(1, 4))
    x = _param(rng, channels, int(rng.integers(5, 9)), int(rng.integers(5, 9)))
    return (lambda a, w: tc.conv2d_depthwise(a, w, spec)), [x, _param(rng, channels, k, k)]


def _case_pointwise(rng):
    c_in, c_out = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    return tc.conv2d_pointwise, [_param(rng, c_in, 4, 5), _param(rng, c_out, c_in), _param(rng, c_out)]


def _case_resize(rng):
    out_h, out_w = int(rng.integers(1, 9)), int(rng.integers(1, 9))
    return (lambda x: tc.bilinear_resize(x, out_h, out_w)), [_param(rng, 2, int(rng.integers(2, 6)), 4)]


def _case_linear(rng):
    d = int(rng.integers(1, 8))
    return tc.linear, [_param(rng, d), _param(rng, 1, d), _param(rng, 1)]


def _case_gap(rng):
    return tc.global_avg_pool, [_param(rng, 3, int(rng.integers(2, 6)), 4)]


def _lka_inputs(rng, channels=3):
    params = init_lka_params(channels, rng, kernel_size=3, dilation=2, dtype=DTYPE)
    tensors = list(params.named_tensors("p").values())

    def rebuild(tensors):
        named = dict(zip(params.named_tensors("p").keys(), tensors))
        return type(params).from_named(named, "p", params.kernel_size, params.dilation)
    return tensors, rebuild


def _case_lka_map(rng):
    tensors, rebuild = _lka_inputs(rng)
    return (lambda f, *p: lka_map(f, rebuild(p))), [_param(rng, 3, 6, 7)] + tensors


def _case_attend(rng):
    tensors, rebuild = _lka_inputs(rng)
    return (lambda f, *p: attend(f, rebuild(p))), [_param(rng, 3, 6, 7)] + tensors


def _case_extract(rng):
    params = init_encoder_params(rng, channels=4, stem_channels=2, dtype=DTYPE)
    names = list(params.named_tensors().keys())

    def fn(image, *tensors):
        pair = extract(image, EncoderParams.from_named(dict(zip(names, tensors))))
        return [pair.f64, pair.f32]
    return fn, [_param(rng, 3, 16, 16, low=0.0, high=1.0)] + list(params.named_tensors().values())


def _case_masked_pool(rng):
    features = _param(rng, 3, 4, 4)
    weights = _param(rng, 8, 8, low=0.1, high=1.0)
    return (lambda f, m: masked_avg_pool(f, m).p), [features, weights]


def _case_anomaly(rng):
    return (lambda q, p: anomaly_score(q, Prototype(p))), [_param(rng, 3, 5, 5), _param(rng, 3, low=0.2)]


def _case_threshold(rng):
    return (lambda q, w, b: adaptive_threshold(q, ThresholdHead(w, b))), \
        [_param(rng, 3, 4, 4), _param(rng, 1, 3), _param(rng, 1)]


def _case_predict(rng):
    def fn(s, t):
        m = predict_masks(s, t)
        return [m.fg, m.bg]
    return fn, [_param(rng, 5, 5, low=-3, high=3), _param(rng, 1)]


def _case_fuse(rng):
    def fn(a, b):
        m = fuse(MaskPrediction(a, tc.sub(1.0, a)), MaskPrediction(b, tc.sub(1.0, b)), FusionConfig(0.8))
        return [m.fg, m.bg]
    return fn, [_param(rng, 4, 4, low=0.1, high=0.9), _param(rng, 4, 4, low=0.1, high=0.9)]


def _case_seg_loss(rng):
    truth = rng.integers(0, 2, size=(5, 5))
    return (lambda fg: seg_loss(MaskPrediction(fg, tc.sub(1.0, fg)), truth)), \
        [_param(rng, 5, 5, low=0.05, high=0.95)]


def _case_align_loss(rng):
    size = 8
    support_mask = _blob_mask(rng, size, size)

    def fn(fs64, fs32, fq64, fq32, w64, b64, w32, b32, l64, l32):
        heads = {"64": ThresholdHead(w64, b64), "32": ThresholdHead(w32, b32)}
        preds = {}
        for path, logits in (("64", l64), ("32", l32)):
            fg = tc.sigmoid(logits)
            preds[path] = MaskPrediction(fg, tc.sub(1.0, fg))
        return align_loss({"64": fs64, "32": fs32}, {"64": fq64, "32": fq32}, preds, support_mask,
                          heads, FusionConfig(0.8))
    inputs = [_param(rng, 3, 4, 4), _param(rng, 3, 2, 2), _param(rng, 3, 4, 4), _param(rng, 3, 2, 2),
              _param(rng, 1, 3), _param(rng, 1), _param(rng, 1, 3), _param(rng, 1),
              _param(rng, size, size, low=-2, high=2), _param(rng, size, size, low=-2, high=2)]
    return fn, inputs


def _case_total_loss(rng):
    return (lambda s, r: total_loss(s, r).total), [_param(rng, 1), _param(rng, 1)]


def _case_pipeline(rng):
    config = RunConfig(seed=int(rng.integers(1000)), channels=4, stem_channels=2, image_size=16)
    model = FewShotSegmenter.initialize(config, dtype=DTYPE)
    names = list(model.named_parameters().keys())
    episode = Episode(
        support_image=_smooth_image(rng, 16), support_mask=_blob_mask(rng, 16, 16),
        query_image=_smooth_image(rng, 16), query_mask=_blob_mask(rng, 16, 16),
        class_id="synthetic", mode="real")

    def fn(*tensors):
        rebuilt = FewShotSegmenter.from_named(dict(zip(names, tensors)), config)
        return rebuilt.loss(episode)[0].total
    return fn, list(model.named_parameters().values())


CASES = {
    "add": _case_elementwise(tc.add),
    "sub": _case_elementwise(tc.sub),
    "mul": _case_elementwise(tc.mul),
    "div": _case_elementwise(tc.div),
    "neg": _case_unary(tc.neg),
    "log": _case_unary(tc.log, 0.2, 3.0),
    "exp": _case_unary(tc.exp),
    "sqrt": _case_unary(tc.sqrt, 0.2, 3.0),
    "sum": _case_sum,
    "mean": _case_mean,
    "clamp": _case_clamp,
    "maximum": _case_maximum,
    "reshape": _case_reshape,
    "gelu": _case_unary(tc.gelu, -4.0, 4.0),
    "sigmoid": _case_unary(tc.sigmoid, -6.0, 6.0),
    "conv2d_depthwise": _case_depthwise,
    "conv2d_pointwise": _case_pointwise,
    "bilinear_resize": _case_resize,
    "linear": _case_linear,
    "global_avg_pool": _case_gap,
    "lka_map": _case_lka_map,
    "attend": _case_attend,
    "extract": _case_extract,
    "masked_avg_pool": _case_masked_pool,
    "anomaly_score": _case_anomaly,
    "adaptive_threshold": _case_threshold,
    "predict_masks": _case_predict,
    "fuse": _case_fuse,
    "seg_loss": _case_seg_loss,
    "align_loss": _case_align_loss,
    "total_loss": _case_total_loss,
    "pipeline": _case_pipeline,
}


# ---------------------------------------------------------------------------
# Harness
# ---------------------------------------------------------------------------

def _as_outputs(result):
    return list(result) if isinstance(result, (list, tuple)) else [result]


def _objective(fn, arrays, weights):
    outputs = _as_outputs(fn(*[Tensor(a, dtype=DTYPE) for a in arrays]))
    return sum(float(np.sum(out.data * w)) for out, w in zip(outputs, weights))


def _central(fn, base, index, direction, weights, step):
    plus = [a if i != index else a + step * direction for i, a in enumerate(base)]
    minus = [a if i != index else a - step * direction for i, a in enumerate(base)]
    return (_objective(fn, plus, weights) - _objective(fn, minus, weights)) / (2 * step)


def _direction(rng, grad):
    """Unit direction halfway between a random one and the analytic gradient"""
    direction = rng.normal(size=np.shape(grad))
    direction /= np.linalg.norm(direction) or 1.0
    norm = np.linalg.norm(grad)
    if norm > 0:
        direction = direction + grad / norm
    return direction / (np.linalg.norm(direction) or 1.0)


def relative_error(analytic, numeric, floor=0.0):
    """|a - n| / max(|a|, |n|); zero when both sit below the roundoff floor"""
    largest = max(abs(analytic), abs(numeric))
    if largest <= floor:
        return 0.0
    return abs(analytic - numeric) / largest


def check_instance(fn, inputs, rng, step=STEP):
    """Largest relative error between analytic and numeric directional derivatives

    The numeric side is Richardson-extrapolated from steps h and h/2, which
    cancels the h^2 truncation term of plain central differences.
    """
    outputs = _as_outputs(fn(*inputs))
    weights = [rng.normal(size=out.shape) for out in outputs]
    loss = None
    for out, w in zip(outputs, weights):
        term = tc.tensor_sum(tc.mul(out, Tensor(w, dtype=DTYPE)))
        loss = term if loss is None else tc.add(loss, term)
    for t in inputs:
        t.zero_grad()
    loss.backward()

    # roundoff of the difference quotient, scaled with the objective itself
    scale = sum(float(np.sum(np.abs(out.data * w))) for out, w in zip(outputs, weights))
    floor = ROUNDOFF_MARGIN * np.finfo(DTYPE).eps * scale / step

    base = [t.data.astype(DTYPE) for t in inputs]
    worst = 0.0
    for index, tensor in enumerate(inputs):
        grad = tensor.grad if tensor.grad is not None else np.zeros(tensor.shape)
        direction = _direction(rng, grad)
        analytic = float(np.sum(grad * direction))
        coarse = _central(fn, base, index, direction, weights, step)
        fine = _central(fn, base, index, direction, weights, step / 2)
        numeric = (4.0 * fine - coarse) / 3.0
        worst = max(worst, relative_error(analytic, numeric, floor))
    return worst


def run_gradcheck(ops=None, instances=20, seed=0, tolerance=TOLERANCE):
    started = time.perf_counter()
    report = GradcheckReport()
    for name in ops or CASES:
        rng = np.random.default_rng([seed, sum(map(ord, name))])
        worst = 0.0
        for _ in range(instances):
            fn, inputs = CASES[name](rng)
            worst = max(worst, check_instance(fn, inputs, rng))
        passed = worst < tolerance
        if not passed:
            logger.error("gradient check failed for %s (max relative error %.3e)", name, worst)
        report.results.append(CheckResult(op=name, instances=instances, max_error=worst, passed=passed))
    report.seconds = time.perf_counter() - started
    return report
