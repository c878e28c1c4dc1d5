"""
Episode Tests
Synthetic scenes, superpixel audits, warp statistics, split auditing,
preprocessing and PGM persistence.
"""

import cv2
import numpy as np
import pytest

from episodes import (CLASS_ROSTER, EpisodeSampler, MissingClassError, PerturbConfig, SceneConfig,
                      SuperpixelMap, SyntheticScene, UnknownEpisodeError, generate_scene, make_eval_episode,
                      make_pseudo_episode, preprocess, prefetch, random_affine, read_manifest, read_pgm,
                      segment_contrast, superpixels, warp_pair, write_manifest, write_pgm)
from fusion_metrics import dice


def small_sampler(**overrides):
    settings = dict(seed=5, image_size=64, train_scenes=3, k_segments=8, min_size=20, eval_scenes=3)
    settings.update(overrides)
    return EpisodeSampler(**settings)


# Scenes

def test_same_seed_same_scene():
    a, b = generate_scene([1, 0, 4]), generate_scene([1, 0, 4])
    np.testing.assert_array_equal(a.image, b.image)
    for name in CLASS_ROSTER:
        np.testing.assert_array_equal(a.organ_masks[name], b.organ_masks[name])


def test_organ_areas_stay_within_bounds():
    config = SceneConfig()
    for seed in range(100):
        scene = generate_scene(seed, config)
        assert scene.classes == CLASS_ROSTER
        for name, mask in scene.organ_masks.items():
            low, high = config.pixel_bounds(name)
            assert mask.any()
            assert low <= int(mask.sum()) <= high, (seed, name)


def test_organs_do_not_overlap():
    scene = generate_scene(11)
    stacked = np.sum([m.astype(int) for m in scene.organ_masks.values()], axis=0)
    assert stacked.max() == 1


def test_excluded_organ_is_absent():
    scene = generate_scene(2, exclude=("spleen",))
    assert "spleen" not in scene.organ_masks
    assert scene.classes == ("liver", "left_kidney", "right_kidney")


# Superpixels

def test_superpixel_partition_audit():
    rng = np.random.default_rng(0)
    for _ in range(50):
        image = cv2.GaussianBlur(rng.uniform(size=(48, 48)).astype(np.float32), (7, 7), 2.0)
        result = superpixels(image, k_segments=16, min_size=20)
        labels = result.labels

        assert labels.shape == image.shape
        assert set(np.unique(labels)) == set(range(result.segment_count))
        assert result.sizes().min() >= 20
        for segment in range(result.segment_count):
            count, _ = cv2.connectedComponents(result.segment_mask(segment), connectivity=4)
            assert count == 2


def test_constant_image_splits_into_grid_quadrants():
    labels = superpixels(np.full((32, 32), 0.4), k_segments=4, min_size=50).labels
    assert len(np.unique(labels)) == 4
    layout = np.zeros((2, 2), int)
    for row, col in np.ndindex(2, 2):
        core = labels[4 + 16 * row:12 + 16 * row, 4 + 16 * col:12 + 16 * col]
        assert len(np.unique(core)) == 1
        layout[row, col] = core[0, 0]
    np.testing.assert_array_equal(layout, [[0, 1], [2, 3]])


def test_segment_contrast_against_neighbors():
    labels = np.zeros((8, 8), np.int32)
    labels[:, 4:] = 1
    flat = np.full((8, 8), 0.5)
    np.testing.assert_allclose(segment_contrast(flat, labels, 2), [0.0, 0.0])
    two_tone = np.where(labels == 0, 0.2, 0.7)
    np.testing.assert_allclose(segment_contrast(two_tone, labels, 2), [0.5, 0.5])


def test_contrasting_segments_are_drawn_more_often():
    image = np.full((32, 32), 0.3, np.float32)
    image[12:20, 12:20] = 0.8
    labels = np.where(np.arange(32)[None, :] < 16, 0, 2) * np.ones((32, 1), np.int32)
    labels[12:20, 12:20] = 1
    scene = SyntheticScene(image=image)
    segments = SuperpixelMap(labels=labels.astype(np.int32), segment_count=3, min_size=1)

    picks = [make_pseudo_episode(scene, segments, seed=s, perturb=PerturbConfig.identity()).class_id
             for s in range(300)]
    # weights 0.22 / 0.52 / 0.22 against a uniform 1/3
    assert picks.count("superpixel:1") > 130
    assert {"superpixel:0", "superpixel:2"} <= set(picks)


def test_superpixels_are_deterministic():
    image = generate_scene(3, SceneConfig(size=64)).image
    a = superpixels(image, 8, 20)
    b = superpixels(image, 8, 20)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_superpixels_reject_impossible_sizes():
    with pytest.raises(ValueError):
        superpixels(np.zeros((10, 10)), k_segments=5, min_size=30)


# Pseudo episodes

def test_identity_perturbation_copies_the_support():
    scene = generate_scene(4, SceneConfig(size=64))
    labels = superpixels(scene.image, 8, 20)
    episode = make_pseudo_episode(scene, labels, seed=9, perturb=PerturbConfig.identity())
    np.testing.assert_array_equal(episode.query_image, episode.support_image)
    np.testing.assert_array_equal(episode.query_mask, episode.support_mask)
    assert episode.mode == "pseudo"
    assert episode.class_id.startswith("superpixel:")


def test_warped_masks_stay_binary_and_nonempty():
    sampler = small_sampler()
    for index in range(10):
        episode = sampler.pseudo_episode(index)
        assert set(np.unique(episode.query_mask)) <= {0, 1}
        assert episode.query_mask.any()


def test_warp_keeps_area_within_thirty_percent():
    size = 256
    image = np.zeros((size, size), np.float32)
    mask = np.zeros((size, size), np.uint8)
    cv2.circle(mask, (size // 2, size // 2), 40, 1, thickness=-1)
    original = int(mask.sum())
    rng = np.random.default_rng(21)
    for _ in range(100):
        matrix, gamma = random_affine(rng, PerturbConfig(), mask.shape)
        _, warped = warp_pair(image, mask, matrix, gamma)
        assert 0.7 * original <= int(warped.sum()) <= 1.3 * original


def test_gamma_stays_in_range():
    rng = np.random.default_rng(8)
    cfg = PerturbConfig()
    for _ in range(200):
        _, gamma = random_affine(rng, cfg, (16, 16))
        assert cfg.gamma_range[0] <= gamma <= cfg.gamma_range[1]


# Real-mask episodes and splits

def test_support_equal_to_query_gives_perfect_copy_oracle():
    scene = generate_scene(6)
    for name in CLASS_ROSTER:
        episode = make_eval_episode(scene, scene, name)
        assert dice(episode.support_mask, episode.query_mask) == 100.0


def test_missing_class_is_an_error():
    scene = generate_scene(6, exclude=("spleen",))
    with pytest.raises(MissingClassError):
        make_eval_episode(scene, scene, "spleen")


def test_held_out_organ_never_reaches_training():
    sampler = small_sampler(split_mode="setting2", held_out=("spleen",))
    for index in range(12):
        sampler.pseudo_episode(index)
    log = sampler.emission_log()
    assert [r["episode_id"] for r in log] == [f"train-{i:06d}" for i in range(12)]
    for record in log:
        assert "spleen" not in record["organs"]
        assert record["class"].startswith("superpixel:")


def test_setting_one_trains_on_every_organ():
    sampler = small_sampler(split_mode="setting1")
    sampler.pseudo_episode(0)
    assert sampler.emission_log()[0]["organs"] == list(CLASS_ROSTER)


def test_eval_episodes_use_scene_zero_as_support():
    sampler = small_sampler()
    episodes = sampler.eval_episodes(0, classes=("liver",))
    assert [e.episode_id for e in episodes] == ["eval-r0-liver-1", "eval-r0-liver-2"]
    np.testing.assert_array_equal(episodes[0].support_image, episodes[1].support_image)
    assert episodes[0].mode == "real"


def test_eval_scenes_include_held_out_organ():
    sampler = small_sampler(split_mode="setting2", held_out=("spleen",))
    assert all("spleen" in s.organ_masks for s in sampler.eval_scene_set(0))


def test_episode_lookup_by_id():
    sampler = small_sampler()
    by_id = sampler.episode_by_id("eval-r1-left_kidney-2")
    direct = sampler.eval_episodes(1, classes=("left_kidney",))[1]
    np.testing.assert_array_equal(by_id.query_mask, direct.query_mask)
    assert sampler.episode_by_id("train-000002").episode_id == "train-000002"
    for bad in ("train-x", "eval-r0-heart-1", "eval-r0-liver-9", "query-3"):
        with pytest.raises(UnknownEpisodeError):
            sampler.episode_by_id(bad)


def test_sampler_is_deterministic():
    a = small_sampler().pseudo_episode(7)
    b = small_sampler().pseudo_episode(7)
    np.testing.assert_array_equal(a.query_image, b.query_image)
    np.testing.assert_array_equal(a.support_mask, b.support_mask)
    assert a.class_id == b.class_id


def test_prefetch_matches_serial_order():
    serial = prefetch(small_sampler(), range(4), workers=1)
    threaded = prefetch(small_sampler(), range(4), workers=3)
    for a, b in zip(serial, threaded):
        assert a.episode_id == b.episode_id
        np.testing.assert_array_equal(a.query_image, b.query_image)


def test_unknown_held_out_class():
    with pytest.raises(MissingClassError):
        small_sampler(held_out=("pancreas",))


# Preprocessing and persistence

def test_constant_image_passes_through():
    out = preprocess(np.full((8, 8), 0.5))
    assert out.shape == (3, 8, 8)
    np.testing.assert_array_equal(out.data, 0.5)


def test_preprocess_clips_outliers_and_replicates(rng):
    image = rng.uniform(size=(100, 100)).astype(np.float32)
    image[rng.integers(0, 100, 10), rng.integers(0, 100, 10)] = 50.0
    out = preprocess(image).data
    assert out.max() == 1.0
    assert out.min() == 0.0
    np.testing.assert_array_equal(out[0], out[1])
    np.testing.assert_array_equal(out[1], out[2])


def test_pgm_round_trip(tmp_path, rng):
    pixels = rng.integers(0, 256, size=(12, 17), dtype=np.uint8)
    path = tmp_path / "slice.pgm"
    write_pgm(path, pixels)
    assert path.read_bytes()[:2] == b"P5"
    np.testing.assert_array_equal(read_pgm(path), pixels)


def test_pgm_needs_eight_bit_pixels(tmp_path):
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "bad.pgm", np.zeros((2, 2), np.float32))


def test_manifest_round_trip(tmp_path):
    records = [{"episode_id": "eval-r0-liver-1", "class": "liver", "support_path": "", "query_path": "q.pgm",
                "mode": "real", "seed": 0}]
    path = tmp_path / "manifest.jsonl"
    write_manifest(path, records)
    assert read_manifest(path) == records
