"""
Training and Evaluation
Episodic SGD with momentum over self-supervised pseudo-episodes, Dice
evaluation on real-mask episodes, and the fusion-factor and module
ablation harnesses.
"""

import json
import logging
import os
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from tqdm import tqdm

import tensor_core as tc
from checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from episodes import CLASS_ROSTER, LOWER_ORGANS, UPPER_ORGANS, EpisodeSampler, MissingClassError, prefetch
from fusion_metrics import binarize, dice
from model import FewShotSegmenter
from proto_head import EmptyMaskError

logger = logging.getLogger(__name__)

ALPHA_SWEEP = (0.2, 0.4, 0.6, 0.8, 0.9)
PREFETCH_PER_WORKER = 4


class TrainingDiverged(ArithmeticError):
    """Raised when a step produces a non-finite loss"""

    def __init__(self, episode_id, detail=""):
        super().__init__(f"non-finite loss on episode {episode_id}{': ' + detail if detail else ''}")
        self.episode_id = episode_id


class MomentumSGD:
    def __init__(self, params, learning_rate=1e-3, momentum=0.9):
        """Heavy-ball SGD keeping one velocity buffer per named parameter"""
        self.params = params
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(t.data) for name, t in params.items()}

    def zero_grad(self):
        for tensor in self.params.values():
            tensor.zero_grad()

    def step(self):
        for name, tensor in self.params.items():
            if tensor.grad is None:
                continue
            velocity = self.momentum * self.velocity[name] + tensor.grad
            self.velocity[name] = velocity.astype(tensor.dtype)
            updated = tensor.data - self.learning_rate * self.velocity[name]
            tensor.data = updated.astype(tensor.dtype)
            tensor.data.flags.writeable = False

    def state_tensors(self):
        return {name: tc.Tensor(v) for name, v in self.velocity.items()}

    def load_state(self, tensors):
        for name, tensor in tensors.items():
            if name in self.velocity:
                self.velocity[name] = np.array(tensor.data, dtype=self.velocity[name].dtype)


@dataclass
class ClassReport:
    class_id: str
    repeat_means: list
    held_out: bool = False
    empty_empty: int = 0

    @property
    def mean(self):
        return float(np.mean(self.repeat_means))

    @property
    def std(self):
        return float(np.std(self.repeat_means))


@dataclass
class EvalReport:
    classes: dict = field(default_factory=dict)
    split_mode: str = "setting2"
    alpha: float = 0.8

    def group_mean(self, names):
        present = [self.classes[n].mean for n in names if n in self.classes]
        return float(np.mean(present)) if present else float("nan")

    @property
    def overall_mean(self):
        return self.group_mean(list(self.classes))

    @property
    def held_out_mean(self):
        return self.group_mean([n for n, c in self.classes.items() if c.held_out])

    def to_dict(self):
        return {
            "split_mode": self.split_mode,
            "alpha": self.alpha,
            "classes": {
                name: {
                    "mean": c.mean, "std": c.std, "repeat_means": c.repeat_means,
                    "held_out": c.held_out, "empty_empty": c.empty_empty,
                }
                for name, c in self.classes.items()
            },
            "upper_mean": self.group_mean(UPPER_ORGANS),
            "lower_mean": self.group_mean(LOWER_ORGANS),
            "overall_mean": self.overall_mean,
            "held_out_mean": self.held_out_mean,
        }

    def table(self):
        """Human-readable per-class Dice table"""
        lines = [
            "═" * 52,
            f"  Dice (%)  split={self.split_mode}  alpha={self.alpha:.2f}",
            "═" * 52,
            f"  {'class':<14}{'mean':>9}{'std':>9}{'empty/empty':>14}",
            "─" * 52,
        ]
        for name, c in self.classes.items():
            mark = " *" if c.held_out else ""
            lines.append(f"  {name + mark:<14}{c.mean:>9.2f}{c.std:>9.2f}{c.empty_empty:>14d}")
        lines.append("─" * 52)
        lines.append(f"  {'upper':<14}{self.group_mean(UPPER_ORGANS):>9.2f}")
        lines.append(f"  {'lower':<14}{self.group_mean(LOWER_ORGANS):>9.2f}")
        lines.append(f"  {'overall':<14}{self.overall_mean:>9.2f}")
        lines.append("═" * 52)
        lines.append("  * held out of training")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# Prediction backends
# ---------------------------------------------------------------------------

class ModelBackend:
    def __init__(self, model):
        self.model = model

    def __call__(self, episode):
        return binarize(self.model.predict(episode).fused.fg)


class OracleBackend:
    """Returns the true query mask"""

    def __call__(self, episode):
        return (np.asarray(episode.query_mask) > 0).astype(np.uint8)


class ZeroBackend:
    """Predicts background everywhere"""

    def __call__(self, episode):
        return np.zeros_like(np.asarray(episode.query_mask), dtype=np.uint8)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

class Trainer:
    def __init__(self, config, out_dir=None, model=None, show_progress=True):
        self.config = config
        self.out_dir = out_dir or config.out_dir
        self.model = model or FewShotSegmenter.initialize(config)
        self.sampler = EpisodeSampler.from_config(config)
        self.optimizer = MomentumSGD(self.model.trainable_parameters(), config.learning_rate, config.momentum)
        self.counters = Counter()
        self.step = 0
        self.show_progress = show_progress

        # Output files
        self.metrics_path = os.path.join(self.out_dir, "metrics.jsonl")
        self.checkpoint_path = os.path.join(self.out_dir, "checkpoint.plkc")

    @classmethod
    def resume(cls, path, out_dir=None, steps=None, show_progress=True):
        """Trainer restored from a checkpoint: parameters, momentum buffers and step counter"""
        model, ckpt = model_from_checkpoint(path)
        config = ckpt.config if steps is None else ckpt.config.replace(steps=steps)
        trainer = cls(config, out_dir=out_dir or os.path.dirname(os.path.abspath(path)), model=model,
                      show_progress=show_progress)
        missing = sorted(set(trainer.optimizer.velocity) - set(ckpt.optimizer))
        if missing:
            logger.warning("checkpoint has no momentum for %d parameters, starting them at zero", len(missing))
        trainer.optimizer.load_state(ckpt.optimizer)
        trainer.step = ckpt.step
        logger.info("resumed from %s at step %d", path, trainer.step)
        return trainer

    def snapshot(self):
        return Checkpoint(config=self.config, step=self.step,
                          tensors=self.model.named_parameters(),
                          optimizer=self.optimizer.state_tensors())

    def save(self, path=None):
        save_checkpoint(path or self.checkpoint_path, self.snapshot())

    def train_step(self, episode):
        self.optimizer.zero_grad()
        try:
            breakdown, _ = self.model.loss(episode, counters=self.counters)
        except tc.NonFiniteError as exc:
            raise TrainingDiverged(episode.episode_id, str(exc)) from exc
        values = breakdown.as_floats()
        if not np.isfinite(values["total"]):
            raise TrainingDiverged(episode.episode_id)
        try:
            breakdown.total.backward()
        except tc.NonFiniteError as exc:
            raise TrainingDiverged(episode.episode_id, str(exc)) from exc
        self.optimizer.step()
        return values

    def episode_stream(self, start, stop):
        """(index, episode) pairs, built a window ahead on the worker pool"""
        window = max(1, self.config.workers * PREFETCH_PER_WORKER)
        for first in range(start, stop, window):
            indices = range(first, min(first + window, stop))
            yield from zip(indices, prefetch(self.sampler, indices, self.config.workers))

    def train(self):
        """Run episodes up to config.steps, logging each LossBreakdown as one JSON line"""
        os.makedirs(self.out_dir, exist_ok=True)
        self.config.save(os.path.join(self.out_dir, "config.json"))
        stream = self.episode_stream(self.step, self.config.steps)
        if self.show_progress:
            stream = tqdm(stream, desc="train", unit="ep", initial=self.step, total=self.config.steps)

        # a resumed run appends to the metrics of the run it continues
        mode = "a" if self.step > 0 else "w"
        with open(self.metrics_path, mode, encoding="utf-8") as log_file:
            for index, episode in stream:
                try:
                    values = self.train_step(episode)
                except EmptyMaskError:
                    self.counters["skipped_empty"] += 1
                    logger.warning("episode train-%06d has an empty support mask, skipped", index)
                    continue
                self.step = index + 1
                record = {"step": self.step, "episode_id": episode.episode_id, **values}
                log_file.write(json.dumps(record, sort_keys=True) + "\n")

                if self.step % self.config.eval_every == 0:
                    report = evaluate(ModelBackend(self.model), self.sampler, repeats=1,
                                      split_mode=self.config.split_mode, alpha=self.model.fusion.alpha)
                    eval_record = {"step": self.step, "eval_overall": report.overall_mean,
                                   "eval_held_out": report.held_out_mean}
                    log_file.write(json.dumps(eval_record, sort_keys=True) + "\n")
                if self.step % self.config.checkpoint_every == 0:
                    self.save()

        self.save()
        if self.counters:
            logger.info("training counters: %s", dict(self.counters))
        return self.checkpoint_path


def model_from_checkpoint(path):
    ckpt = load_checkpoint(path)
    return FewShotSegmenter.from_named(ckpt.tensors, ckpt.config), ckpt


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def evaluate(backend, sampler, repeats=3, classes=None, split_mode=None, alpha=0.8):
    """Per-class mean ± std of the per-repetition mean Dice"""
    classes = tuple(classes or CLASS_ROSTER)
    missing = [c for c in classes if c not in CLASS_ROSTER]
    if missing:
        raise MissingClassError(f"classes not in the evaluation set: {missing}")

    per_class = {c: [] for c in classes}
    empty_empty = Counter()
    for repeat in range(repeats):
        scores = {c: [] for c in classes}
        for episode in sampler.eval_episodes(repeat, classes):
            predicted = backend(episode)
            if not predicted.any() and not np.asarray(episode.query_mask).any():
                empty_empty[episode.class_id] += 1
            scores[episode.class_id].append(dice(predicted, episode.query_mask))
        for c in classes:
            per_class[c].append(float(np.mean(scores[c])))

    report = EvalReport(split_mode=split_mode or sampler.split_mode, alpha=alpha)
    for c in classes:
        report.classes[c] = ClassReport(class_id=c, repeat_means=per_class[c],
                                        held_out=c in sampler.excluded_from_training,
                                        empty_empty=empty_empty[c])
    return report


def sweep_alpha(model, sampler, alphas=ALPHA_SWEEP, repeats=3):
    """Evaluate one set of weights under each fusion factor"""
    return {alpha: evaluate(ModelBackend(model.with_alpha(alpha)), sampler, repeats=repeats, alpha=alpha)
            for alpha in alphas}


def sweep_table(reports):
    names = list(next(iter(reports.values())).classes)
    header = f"  {'alpha':>6}" + "".join(f"{n:>14}" for n in names) + f"{'mean':>9}"
    lines = ["═" * len(header), header, "─" * len(header)]
    for alpha, report in reports.items():
        row = f"  {alpha:>6.2f}" + "".join(f"{report.classes[n].mean:>14.2f}" for n in names)
        lines.append(row + f"{report.overall_mean:>9.2f}")
    lines.append("═" * len(header))
    return "\n".join(lines)


def ablation_variants(kernel_size=3):
    """Variant name -> config overrides, from single-scale up to dual-path with attention"""
    return {
        "32-only": dict(scale_paths=("32",), use_attention=False),
        "64-only": dict(scale_paths=("64",), use_attention=False),
        "dual": dict(scale_paths=("64", "32"), use_attention=False),
        f"dual+attention-k{kernel_size}": dict(scale_paths=("64", "32"), use_attention=True,
                                               lka_kernel=kernel_size),
    }


def select_variants(variants=None, kernel_sizes=(3,)):
    """Named overrides for the requested variants; attention variants repeat per kernel size"""
    table = {}
    for kernel_size in kernel_sizes:
        table.update(ablation_variants(kernel_size))
    chosen = {name: overrides for name, overrides in table.items()
              if variants is None or name in variants or name.split("-k")[0] in variants}
    if not chosen:
        raise ValueError(f"no ablation variant matches {variants}; known: {sorted(table)}")
    return chosen


def run_ablation(config, seeds, out_dir, variants=None, kernel_sizes=(3,), show_progress=True):
    """Train every variant for every seed and keep the held-out Dice of each run"""
    chosen = select_variants(variants, kernel_sizes)

    results = {name: {} for name in chosen}
    for seed in seeds:
        for name, overrides in chosen.items():
            run_config = config.replace(seed=seed, **overrides)
            run_dir = os.path.join(out_dir, f"{name}-seed{seed}")
            trainer = Trainer(run_config, out_dir=run_dir, show_progress=show_progress)
            trainer.train()
            report = evaluate(ModelBackend(trainer.model), trainer.sampler, repeats=run_config.eval_repeats,
                              alpha=run_config.fusion_alpha)
            results[name][seed] = report.held_out_mean
            logger.info("ablation %s seed %d: held-out Dice %.2f", name, seed, report.held_out_mean)
    return results
