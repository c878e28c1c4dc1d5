"""
Trainer Tests
Optimizer arithmetic, whole-model gradients, deterministic training runs,
evaluation harness bounds, resumption, and the fusion and module ablations.
"""

import json

import numpy as np
import pytest

import tensor_core as tc
import trainer as trainer_module
from checkpoint import load_checkpoint
from episodes import CLASS_ROSTER, EpisodeSampler, MissingClassError
from model import FewShotSegmenter
from tensor_core import Tensor
from trainer import (ALPHA_SWEEP, ModelBackend, MomentumSGD, OracleBackend, Trainer, TrainingDiverged,
                     ZeroBackend, evaluate, model_from_checkpoint, run_ablation, select_variants, sweep_alpha,
                     sweep_table)


def test_momentum_sgd_updates():
    param = Tensor(np.array([1.0], np.float32), requires_grad=True)
    optimizer = MomentumSGD({"p": param}, learning_rate=0.1, momentum=0.9)
    for _ in range(2):
        param.grad = np.array([1.0], np.float32)
        optimizer.step()
    assert param.data[0] == pytest.approx(1.0 - 0.1 - 0.19)
    assert not param.data.flags.writeable


def test_momentum_sgd_skips_parameters_without_gradient():
    param = Tensor(np.array([2.0], np.float32), requires_grad=True)
    MomentumSGD({"p": param}).step()
    assert param.data[0] == 2.0


def test_every_parameter_group_receives_gradient(tiny_config):
    model = FewShotSegmenter.initialize(tiny_config)
    episode = EpisodeSampler.from_config(tiny_config).pseudo_episode(0)
    breakdown, _ = model.loss(episode)
    breakdown.total.backward()

    groups = {"enc": 0.0, "lka64": 0.0, "lka32": 0.0, "thr64": 0.0, "thr32": 0.0}
    for name, tensor in model.named_parameters().items():
        assert tensor.grad is not None, name
        groups[name.split(".")[0]] += float(np.linalg.norm(tensor.grad))
    assert all(norm > 0 for norm in groups.values()), groups


def test_identity_attention_freezes_attention_weights(tiny_config):
    model = FewShotSegmenter.initialize(tiny_config.replace(use_attention=False))
    assert not any(name.startswith("lka") for name in model.trainable_parameters())
    pair = model.features(tc.Tensor(np.zeros((3, 64, 64), np.float32)))
    assert set(pair) == {"64", "32"}


def test_zero_steps_saves_the_initialization(tmp_path, tiny_config):
    config = tiny_config.replace(steps=0)
    path = Trainer(config, out_dir=str(tmp_path), show_progress=False).train()
    loaded = load_checkpoint(path)
    fresh = FewShotSegmenter.initialize(config).named_parameters()
    assert loaded.step == 0
    for name, tensor in fresh.items():
        np.testing.assert_array_equal(loaded.tensors[name].data, tensor.data)


def test_identical_runs_are_bit_identical(tmp_path, tiny_config):
    outputs = []
    for run in ("a", "b"):
        trainer = Trainer(tiny_config, out_dir=str(tmp_path / run), show_progress=False)
        checkpoint = trainer.train()
        with open(trainer.metrics_path, "rb") as metrics, open(checkpoint, "rb") as ckpt:
            outputs.append((metrics.read(), ckpt.read()))
    assert outputs[0] == outputs[1]

    lines = [json.loads(line) for line in outputs[0][0].decode().splitlines()]
    steps = [line for line in lines if "total" in line]
    assert [line["step"] for line in steps] == [1, 2, 3, 4]
    assert all(np.isfinite(line["total"]) for line in steps)
    assert any("eval_overall" in line for line in lines)
    assert (tmp_path / "a" / "config.json").exists()


def test_non_finite_loss_becomes_training_diverged(tmp_path, tiny_config, monkeypatch):
    trainer = Trainer(tiny_config, out_dir=str(tmp_path), show_progress=False)

    def explode(*args, **kwargs):
        raise tc.NonFiniteError("non-finite values produced by log")

    monkeypatch.setattr(trainer.model, "loss", explode)
    with pytest.raises(TrainingDiverged) as info:
        trainer.train_step(trainer.sampler.pseudo_episode(0))
    assert info.value.episode_id == "train-000000"


def test_model_from_checkpoint(tmp_path, tiny_config):
    trainer = Trainer(tiny_config.replace(steps=0), out_dir=str(tmp_path), show_progress=False)
    model, ckpt = model_from_checkpoint(trainer.train())
    assert ckpt.config.steps == 0
    assert sorted(model.named_parameters()) == sorted(trainer.model.named_parameters())


# Evaluation harness

def test_oracle_backend_scores_one_hundred(tiny_config):
    sampler = EpisodeSampler.from_config(tiny_config)
    report = evaluate(OracleBackend(), sampler, repeats=2)
    assert list(report.classes) == list(CLASS_ROSTER)
    for name, result in report.classes.items():
        assert result.mean == 100.0
        assert result.std == 0.0
    assert report.classes["spleen"].held_out
    assert report.overall_mean == 100.0


def test_zero_backend_scores_zero(tiny_config):
    report = evaluate(ZeroBackend(), EpisodeSampler.from_config(tiny_config), repeats=1)
    assert all(result.mean == 0.0 for result in report.classes.values())


def test_unknown_class_is_missing(tiny_config):
    with pytest.raises(MissingClassError):
        evaluate(OracleBackend(), EpisodeSampler.from_config(tiny_config), classes=("liver", "heart"))


def test_report_shapes(tiny_config):
    report = evaluate(OracleBackend(), EpisodeSampler.from_config(tiny_config), repeats=1,
                      classes=("liver", "left_kidney"))
    data = report.to_dict()
    assert set(data["classes"]) == {"liver", "left_kidney"}
    assert data["lower_mean"] == 100.0
    assert np.isnan(data["held_out_mean"])
    table = report.table()
    assert "liver" in table and "left_kidney" in table


def test_alpha_sweep_is_deterministic(tiny_config):
    model = FewShotSegmenter.initialize(tiny_config)
    sampler = EpisodeSampler.from_config(tiny_config)
    first = sweep_alpha(model, sampler, repeats=1)
    second = sweep_alpha(model, sampler, repeats=1)
    assert list(first) == list(ALPHA_SWEEP)
    assert [r.to_dict() for r in first.values()] == [r.to_dict() for r in second.values()]
    assert "0.90" in sweep_table(first)


def test_model_backend_outputs_binary_masks(tiny_config):
    sampler = EpisodeSampler.from_config(tiny_config)
    episode = sampler.eval_episodes(0, classes=("liver",))[0]
    predicted = ModelBackend(FewShotSegmenter.initialize(tiny_config))(episode)
    assert predicted.shape == episode.query_mask.shape
    assert set(np.unique(predicted)) <= {0, 1}


def test_ablation_covers_single_and_dual_paths(tmp_path, tiny_config):
    results = run_ablation(tiny_config.replace(steps=1), [0], str(tmp_path),
                           variants=["64-only", "32-only", "dual+attention"], kernel_sizes=(3, 5),
                           show_progress=False)
    assert set(results) == {"64-only", "32-only", "dual+attention-k3", "dual+attention-k5"}
    assert set(results["64-only"]) == {0}
    assert load_checkpoint(str(tmp_path / "dual+attention-k5-seed0" / "checkpoint.plkc")).config.lka_kernel == 5
    assert load_checkpoint(str(tmp_path / "32-only-seed0" / "checkpoint.plkc")).config.scale_paths == ("32",)


def test_default_ablation_lists_the_four_module_variants():
    assert list(select_variants()) == ["32-only", "64-only", "dual", "dual+attention-k3"]
    with pytest.raises(ValueError):
        select_variants(["triple"])


def test_single_path_model_trains_only_its_own_head(tiny_config):
    model = FewShotSegmenter.initialize(tiny_config.replace(scale_paths=("64",)))
    trainable = model.trainable_parameters()
    assert not any(name.startswith(("thr32", "lka32")) for name in trainable)
    assert any(name.startswith("thr64") for name in trainable)

    episode = EpisodeSampler.from_config(tiny_config).pseudo_episode(0)
    prediction = model.predict(episode)
    assert set(prediction.paths) == {"64"}
    assert prediction.fused is prediction.paths["64"]


def test_held_out_flag_follows_the_split_mode(tiny_config):
    setting1 = evaluate(OracleBackend(), EpisodeSampler.from_config(tiny_config.replace(split_mode="setting1")),
                        repeats=1)
    assert not any(result.held_out for result in setting1.classes.values())
    assert np.isnan(setting1.held_out_mean)
    setting2 = evaluate(OracleBackend(), EpisodeSampler.from_config(tiny_config), repeats=1)
    assert [n for n, r in setting2.classes.items() if r.held_out] == ["spleen"]


def test_episode_stream_prefetches_a_window(tmp_path, tiny_config, monkeypatch):
    calls = []

    def recording_prefetch(sampler, indices, workers=1):
        calls.append((list(indices), workers))
        return [sampler.pseudo_episode(i) for i in indices]

    monkeypatch.setattr(trainer_module, "prefetch", recording_prefetch)
    trainer = Trainer(tiny_config.replace(workers=2), out_dir=str(tmp_path), show_progress=False)
    pairs = list(trainer.episode_stream(0, 11))
    assert [index for index, _ in pairs] == list(range(11))
    assert [episode.episode_id for _, episode in pairs] == [f"train-{i:06d}" for i in range(11)]
    assert calls == [(list(range(0, 8)), 2), (list(range(8, 11)), 2)]


def test_threaded_training_matches_serial(tmp_path, tiny_config):
    metrics = []
    for workers in (1, 3):
        trainer = Trainer(tiny_config.replace(workers=workers), out_dir=str(tmp_path / str(workers)),
                          show_progress=False)
        trainer.train()
        with open(trainer.metrics_path, "rb") as handle:
            metrics.append(handle.read())
    assert metrics[0] == metrics[1]


def test_resumed_training_continues_the_run(tmp_path, tiny_config):
    straight = Trainer(tiny_config, out_dir=str(tmp_path / "straight"), show_progress=False)
    straight_ckpt = straight.train()

    first_half = Trainer(tiny_config.replace(steps=2), out_dir=str(tmp_path / "split"), show_progress=False)
    halfway = first_half.train()
    resumed = Trainer.resume(halfway, steps=4, show_progress=False)
    assert resumed.step == 2
    assert any(np.any(v != 0) for v in resumed.optimizer.velocity.values())
    resumed_ckpt = resumed.train()

    with open(straight.metrics_path, "rb") as a, open(resumed.metrics_path, "rb") as b:
        assert a.read() == b.read()
    with open(straight_ckpt, "rb") as a, open(resumed_ckpt, "rb") as b:
        assert a.read() == b.read()


def test_training_learns_a_nonempty_foreground(tmp_path, tiny_config):
    config = tiny_config.replace(steps=300, eval_every=1000, checkpoint_every=1000)
    trainer = Trainer(config, out_dir=str(tmp_path), show_progress=False)
    trainer.train()
    report = evaluate(ModelBackend(trainer.model), trainer.sampler, repeats=1)
    assert report.overall_mean > 0.0
    episode = trainer.sampler.eval_episodes(0, classes=("liver",))[0]
    assert ModelBackend(trainer.model)(episode).any()
