"""
Synthetic Scenes and Episodes
Parametric abdominal-style scenes, SLIC superpixel pseudo-labels,
preprocessing, PGM persistence and deterministic 1-way 1-shot episode
sampling for self-supervised training and real-mask evaluation.
"""

import json
import logging
import math
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import cv2
import numpy as np
from PIL import Image
from skimage import segmentation

from tensor_core import ShapeError, Tensor

logger = logging.getLogger(__name__)

CLASS_ROSTER = ("liver", "left_kidney", "right_kidney", "spleen")
UPPER_ORGANS = ("liver", "spleen")
LOWER_ORGANS = ("left_kidney", "right_kidney")
SPLIT_MODES = ("setting1", "setting2")

# Stream tags mixed into every seed so streams never collide
TRAIN_SCENE_STREAM = 0
EVAL_SCENE_STREAM = 1
PSEUDO_EPISODE_STREAM = 2

# Selection weight every superpixel keeps regardless of its contrast
CONTRAST_FLOOR = 0.02


class EpisodeError(RuntimeError):
    """Raised when an episode cannot be built"""


class MissingClassError(KeyError):
    """Raised when a requested organ class is absent"""


class UnknownEpisodeError(KeyError):
    """Raised for an episode id the sampler cannot produce"""


@dataclass(frozen=True)
class SceneConfig:
    size: int = 256
    position_jitter: float = 0.03
    scale_range: tuple = (0.85, 1.15)
    intensity_jitter: float = 0.05
    noise_std: float = 0.02
    # organ area bounds as fractions of the image area
    area_bounds: tuple = (
        ("liver", 0.03, 0.13),
        ("left_kidney", 0.004, 0.03),
        ("right_kidney", 0.004, 0.03),
        ("spleen", 0.008, 0.045),
    )
    max_attempts: int = 20

    def pixel_bounds(self, organ):
        for name, low, high in self.area_bounds:
            if name == organ:
                area = self.size * self.size
                return low * area, high * area
        raise MissingClassError(organ)


@dataclass
class SyntheticScene:
    image: np.ndarray
    organ_masks: dict = field(default_factory=dict)

    @property
    def classes(self):
        return tuple(name for name in CLASS_ROSTER if name in self.organ_masks)


@dataclass
class SuperpixelMap:
    labels: np.ndarray
    segment_count: int
    min_size: int

    def segment_mask(self, segment):
        return (self.labels == segment).astype(np.uint8)

    def sizes(self):
        return np.bincount(self.labels.ravel(), minlength=self.segment_count)


@dataclass(frozen=True)
class PerturbConfig:
    max_rotation: float = 10.0
    max_translation: float = 8.0
    scale_range: tuple = (0.9, 1.1)
    gamma_range: tuple = (0.8, 1.25)
    max_retries: int = 10

    @classmethod
    def identity(cls):
        return cls(max_rotation=0.0, max_translation=0.0, scale_range=(1.0, 1.0), gamma_range=(1.0, 1.0))


@dataclass
class Episode:
    support_image: np.ndarray
    support_mask: np.ndarray
    query_image: np.ndarray
    query_mask: np.ndarray
    class_id: str
    mode: str
    episode_id: str = ""
    seed: int = 0


# ---------------------------------------------------------------------------
# Scene generation
# ---------------------------------------------------------------------------

def _draw_ellipse(canvas, center, axes, angle):
    center = (int(round(center[0])), int(round(center[1])))
    axes = (max(1, int(round(axes[0]))), max(1, int(round(axes[1]))))
    cv2.ellipse(canvas, center, axes, angle, 0, 360, 1, thickness=-1)


def _organ_shapes(rng, size, cfg):
    """Rasterize the organ roster with one jitter draw"""
    def jitter():
        return rng.uniform(-cfg.position_jitter, cfg.position_jitter, size=2) * size

    def scale():
        return rng.uniform(*cfg.scale_range)

    shapes = {}

    # Liver: one large tilted ellipse
    canvas = np.zeros((size, size), np.uint8)
    s = scale()
    center = np.array([0.32, 0.35]) * size + jitter()
    _draw_ellipse(canvas, center, (0.17 * size * s, 0.14 * size * s), rng.uniform(-15, 15))
    shapes["liver"] = canvas

    # Kidneys: crescents, an ellipse with a medial bite taken out
    for name, cx, medial in (("left_kidney", 0.36, 1.0), ("right_kidney", 0.64, -1.0)):
        canvas = np.zeros((size, size), np.uint8)
        bite = np.zeros((size, size), np.uint8)
        s = scale()
        center = np.array([cx, 0.68]) * size + jitter()
        angle = rng.uniform(-10, 10)
        _draw_ellipse(canvas, center, (0.065 * size * s, 0.095 * size * s), angle)
        bite_center = center + np.array([medial * 0.05 * size * s, 0.0])
        _draw_ellipse(bite, bite_center, (0.04 * size * s, 0.065 * size * s), angle)
        canvas[bite > 0] = 0
        shapes[name] = canvas

    # Spleen: union of three overlapping discs
    canvas = np.zeros((size, size), np.uint8)
    s = scale()
    center = np.array([0.72, 0.33]) * size + jitter()
    for _ in range(3):
        offset = rng.uniform(-0.04, 0.04, size=2) * size
        blob = center + offset
        radius = max(1, int(round(0.055 * size * s)))
        cv2.circle(canvas, (int(round(blob[0])), int(round(blob[1]))), radius, 1, thickness=-1)
    shapes["spleen"] = canvas
    return shapes


def generate_scene(seed, config=None, exclude=()):
    """Deterministic synthetic slice; organs in `exclude` are left out entirely"""
    cfg = config or SceneConfig()
    size = cfg.size
    rng = np.random.default_rng(seed)

    shapes = None
    for attempt in range(cfg.max_attempts):
        shapes = _organ_shapes(rng, size, cfg)
        # later organs claim contested pixels
        claimed = np.zeros((size, size), bool)
        for name in reversed(CLASS_ROSTER):
            shapes[name][claimed] = 0
            claimed |= shapes[name] > 0
        areas = {name: int(shapes[name].sum()) for name in CLASS_ROSTER}
        in_bounds = all(
            cfg.pixel_bounds(name)[0] <= areas[name] <= cfg.pixel_bounds(name)[1]
            for name in CLASS_ROSTER
        )
        if in_bounds:
            break
        logger.debug("scene %s attempt %d out of area bounds: %s", seed, attempt, areas)
    else:
        if not all(shapes[name].any() for name in CLASS_ROSTER):
            raise EpisodeError(f"scene {seed} could not place every organ")
        logger.warning("scene %s kept after %d attempts outside area bounds", seed, cfg.max_attempts)

    # Body, then organs, each with its own intensity
    image = np.zeros((size, size), np.float32)
    body = np.zeros((size, size), np.uint8)
    _draw_ellipse(body, (size / 2, size / 2), (0.45 * size, 0.40 * size), 0)
    image[body > 0] = 0.3 + rng.uniform(-cfg.intensity_jitter, cfg.intensity_jitter)

    base_intensity = {"liver": 0.55, "left_kidney": 0.8, "right_kidney": 0.8, "spleen": 0.68}
    masks = {}
    for name in CLASS_ROSTER:
        level = base_intensity[name] + rng.uniform(-cfg.intensity_jitter, cfg.intensity_jitter)
        if name in exclude:
            continue
        image[shapes[name] > 0] = level
        masks[name] = shapes[name].astype(np.uint8)

    image = cv2.GaussianBlur(image, (5, 5), 1.0)
    image = image + rng.normal(0.0, cfg.noise_std, size=image.shape).astype(np.float32)
    return SyntheticScene(image=np.clip(image, 0.0, 1.0).astype(np.float32), organ_masks=masks)


# ---------------------------------------------------------------------------
# Superpixels
# ---------------------------------------------------------------------------

def _neighbor_sets(labels, count):
    neighbors = [set() for _ in range(count)]
    for a, b in ((labels[:, :-1], labels[:, 1:]), (labels[:-1, :], labels[1:, :])):
        differ = a != b
        pairs = np.unique(np.stack([a[differ], b[differ]], axis=1), axis=0)
        for i, j in pairs:
            neighbors[i].add(int(j))
            neighbors[j].add(int(i))
    return neighbors


def _merge_small(image, labels, count, min_size):
    """Fold every segment under min_size into its most similar 4-neighbor"""
    sizes = np.bincount(labels.ravel(), minlength=count).astype(np.int64)
    sums = np.bincount(labels.ravel(), weights=image.ravel(), minlength=count)
    neighbors = _neighbor_sets(labels, count)
    owner = np.arange(count)
    alive = set(range(count))

    while True:
        small = [s for s in alive if sizes[s] < min_size]
        if not small:
            break
        segment = min(small, key=lambda s: (sizes[s], s))
        if not neighbors[segment]:
            break
        mean = sums[segment] / sizes[segment]
        target = min(neighbors[segment], key=lambda n: (abs(sums[n] / sizes[n] - mean), n))

        owner[owner == segment] = target
        sizes[target] += sizes[segment]
        sums[target] += sums[segment]
        for n in neighbors[segment]:
            neighbors[n].discard(segment)
            if n != target:
                neighbors[n].add(target)
                neighbors[target].add(n)
        neighbors[segment] = set()
        alive.discard(segment)
    return owner[labels]


def _sequential(labels):
    """Labels renumbered 0..n-1 with their relative order kept"""
    relabeled, _, _ = segmentation.relabel_sequential(np.asarray(labels, dtype=np.int64) + 1)
    return (relabeled - 1).astype(np.int32)


def superpixels(image, k_segments, min_size, compactness=0.1, iterations=10):
    """SLIC clustering on intensity and position, then a minimum-size merge pass"""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ShapeError(f"superpixels need a grayscale H×W image, got {image.shape}")
    if k_segments < 1 or min_size < 1:
        raise ValueError("k_segments and min_size must be at least 1")
    if min_size * k_segments > image.size:
        raise ValueError(f"min_size {min_size} × k_segments {k_segments} exceeds {image.size} pixels")

    labels = segmentation.slic(image, n_segments=k_segments, compactness=compactness,
                               max_num_iter=iterations, channel_axis=None, start_label=0,
                               enforce_connectivity=True)
    labels = _sequential(labels)
    count = int(labels.max()) + 1
    labels = _sequential(_merge_small(image, labels, count, min_size))
    return SuperpixelMap(labels=labels, segment_count=int(labels.max()) + 1, min_size=min_size)


def segment_contrast(image, labels, count):
    """|segment mean - mean of the pixels just across its border| for every segment"""
    image = np.asarray(image, dtype=np.float64)
    flat_labels = labels.ravel()
    inside = np.bincount(flat_labels, weights=image.ravel(), minlength=count)
    inside /= np.maximum(np.bincount(flat_labels, minlength=count), 1)

    border_sum = np.zeros(count)
    border_count = np.zeros(count)
    for a, b, va, vb in ((labels[:, :-1], labels[:, 1:], image[:, :-1], image[:, 1:]),
                         (labels[:-1, :], labels[1:, :], image[:-1, :], image[1:, :])):
        differ = a != b
        for own, across in ((a[differ], vb[differ]), (b[differ], va[differ])):
            border_sum += np.bincount(own, weights=across, minlength=count)
            border_count += np.bincount(own, minlength=count)

    outside = np.divide(border_sum, border_count, out=inside.copy(), where=border_count > 0)
    return np.abs(inside - outside)


# ---------------------------------------------------------------------------
# Episodes
# ---------------------------------------------------------------------------

def random_affine(rng, cfg, shape):
    """Draw a rotation/scale/translation matrix and a gamma exponent"""
    height, width = shape
    angle = rng.uniform(-cfg.max_rotation, cfg.max_rotation)
    scale = rng.uniform(*cfg.scale_range)
    shift = rng.uniform(-cfg.max_translation, cfg.max_translation, size=2)
    gamma = math.exp(rng.uniform(math.log(cfg.gamma_range[0]), math.log(cfg.gamma_range[1])))
    matrix = cv2.getRotationMatrix2D(((width - 1) / 2.0, (height - 1) / 2.0), angle, scale)
    matrix[:, 2] += shift
    return matrix, gamma


def warp_pair(image, mask, matrix, gamma):
    """Warp image bilinearly and mask by nearest neighbor, then gamma the image"""
    height, width = image.shape
    if np.array_equal(matrix, np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])):
        warped_image, warped_mask = image.copy(), mask.copy()
    else:
        warped_image = cv2.warpAffine(image.astype(np.float32), matrix, (width, height),
                                      flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT, borderValue=0)
        warped_mask = cv2.warpAffine(mask.astype(np.uint8), matrix, (width, height),
                                     flags=cv2.INTER_NEAREST, borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    if gamma != 1.0:
        warped_image = np.power(np.clip(warped_image, 0.0, 1.0), gamma)
    return warped_image.astype(np.float32), (warped_mask > 0).astype(np.uint8)


def make_pseudo_episode(scene, superpixel_map, seed, perturb=None):
    """Support = one superpixel on the scene, query = a perturbed copy

    Segments are drawn with probability growing with their contrast against
    the surrounding pixels, so flat patches of one tissue are picked rarely.
    """
    cfg = perturb or PerturbConfig()
    rng = np.random.default_rng(seed)
    count = superpixel_map.segment_count
    weights = segment_contrast(scene.image, superpixel_map.labels, count) + CONTRAST_FLOOR
    segment = int(rng.choice(count, p=weights / weights.sum()))
    mask = superpixel_map.segment_mask(segment)

    for _ in range(cfg.max_retries):
        matrix, gamma = random_affine(rng, cfg, mask.shape)
        query_image, query_mask = warp_pair(scene.image, mask, matrix, gamma)
        if query_mask.any():
            return Episode(
                support_image=scene.image.astype(np.float32),
                support_mask=mask,
                query_image=query_image,
                query_mask=query_mask,
                class_id=f"superpixel:{segment}",
                mode="pseudo",
                seed=int(seed) if np.isscalar(seed) else 0,
            )
        logger.warning("superpixel %d vanished under the query warp, redrawing", segment)
    raise EpisodeError(f"superpixel {segment} stayed empty after {cfg.max_retries} warps")


def make_eval_episode(scene_a, scene_b, class_id):
    """Support from scene_a, query from scene_b, both with real organ masks"""
    for name, scene in (("support", scene_a), ("query", scene_b)):
        if class_id not in scene.organ_masks:
            raise MissingClassError(f"class {class_id!r} missing from the {name} scene")
    if not scene_a.organ_masks[class_id].any():
        raise MissingClassError(f"class {class_id!r} is empty in the support scene")
    return Episode(
        support_image=scene_a.image,
        support_mask=scene_a.organ_masks[class_id].astype(np.uint8),
        query_image=scene_b.image,
        query_mask=scene_b.organ_masks[class_id].astype(np.uint8),
        class_id=class_id,
        mode="real",
    )


def preprocess(gray):
    """Clip the bright tail at the 99.5th percentile, rescale, replicate to 3 channels"""
    image = np.asarray(gray, dtype=np.float64)
    if image.ndim != 2:
        raise ShapeError(f"expected a grayscale H×W slice, got {image.shape}")
    low = float(image.min())
    high = float(np.percentile(image, 99.5))
    if high - low > 0:
        image = (np.clip(image, low, high) - low) / (high - low)
    return Tensor(np.repeat(image[None, :, :], 3, axis=0).astype(np.float32))


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def to_uint8(image):
    return np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def mask_to_uint8(mask):
    return np.where(np.asarray(mask) > 0, 255, 0).astype(np.uint8)


def write_pgm(path, pixels):
    """Binary P5 PGM from an 8-bit array"""
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        raise ShapeError(f"PGM output expects uint8 pixels, got {pixels.dtype}")
    Image.fromarray(pixels).save(str(path), format="PPM")


def read_pgm(path):
    with Image.open(str(path)) as img:
        return np.array(img.convert("L"), dtype=np.uint8)


def write_manifest(path, records):
    """One JSON object per line: episode_id, class, support_path, query_path, mode, seed"""
    with open(path, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record, sort_keys=True) + "\n")


def read_manifest(path):
    with open(path, encoding="utf-8") as handle:
        return [json.loads(line) for line in handle if line.strip()]


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

class EpisodeSampler:
    def __init__(self, seed, image_size=256, train_scenes=64, k_segments=100, min_size=200,
                 compactness=0.1, perturb=None, split_mode="setting2", held_out=("spleen",),
                 eval_scenes=5):
        """Every episode is a pure function of (settings, seed, index)"""
        if split_mode not in SPLIT_MODES:
            raise ValueError(f"split mode must be one of {SPLIT_MODES}, got {split_mode!r}")
        unknown = set(held_out) - set(CLASS_ROSTER)
        if unknown:
            raise MissingClassError(f"unknown held-out classes {sorted(unknown)}")

        self.seed = seed
        self.scene_config = SceneConfig(size=image_size)
        self.train_scenes = train_scenes
        self.k_segments = k_segments
        self.min_size = min_size
        self.compactness = compactness
        self.perturb = perturb or PerturbConfig()
        self.split_mode = split_mode
        self.held_out = tuple(held_out)
        self.eval_scenes = eval_scenes

        # Caches and the emission log are filled from prefetch workers
        self._lock = threading.Lock()
        self._train_cache = {}
        self._emissions = {}

    @classmethod
    def from_config(cls, cfg):
        perturb = PerturbConfig(
            max_rotation=cfg.max_rotation,
            max_translation=cfg.max_translation,
            scale_range=tuple(cfg.scale_range),
            gamma_range=tuple(cfg.gamma_range),
        )
        return cls(
            seed=cfg.seed, image_size=cfg.image_size, train_scenes=cfg.train_scenes,
            k_segments=cfg.k_segments, min_size=cfg.min_size, compactness=cfg.compactness,
            perturb=perturb, split_mode=cfg.split_mode, held_out=cfg.held_out,
            eval_scenes=cfg.eval_scenes,
        )

    @property
    def excluded_from_training(self):
        return self.held_out if self.split_mode == "setting2" else ()

    def train_scene(self, index):
        """Scene and its superpixels for one slot of the training pool"""
        with self._lock:
            cached = self._train_cache.get(index)
        if cached is not None:
            return cached
        scene = generate_scene([self.seed, TRAIN_SCENE_STREAM, index], self.scene_config,
                               exclude=self.excluded_from_training)
        labels = superpixels(scene.image, self.k_segments, self.min_size, self.compactness)
        with self._lock:
            self._train_cache.setdefault(index, (scene, labels))
            return self._train_cache[index]

    def pseudo_episode(self, index):
        rng = np.random.default_rng([self.seed, PSEUDO_EPISODE_STREAM, index])
        scene_index = int(rng.integers(self.train_scenes))
        episode_seed = int(rng.integers(2 ** 31 - 1))
        scene, labels = self.train_scene(scene_index)
        episode = make_pseudo_episode(scene, labels, episode_seed, self.perturb)
        episode.episode_id = f"train-{index:06d}"
        with self._lock:
            self._emissions[index] = {
                "episode_id": episode.episode_id,
                "scene": scene_index,
                "class": episode.class_id,
                "organs": list(scene.classes),
                "seed": episode_seed,
            }
        return episode

    def emission_log(self):
        with self._lock:
            return [self._emissions[i] for i in sorted(self._emissions)]

    def eval_scene_set(self, repeat):
        return [generate_scene([self.seed, EVAL_SCENE_STREAM, repeat, j], self.scene_config)
                for j in range(self.eval_scenes)]

    def eval_episodes(self, repeat, classes=CLASS_ROSTER, scenes=None):
        """Scene 0 supports, every other scene is a query"""
        scenes = scenes or self.eval_scene_set(repeat)
        episodes = []
        for class_id in classes:
            if class_id not in CLASS_ROSTER:
                raise MissingClassError(f"class {class_id!r} is not in the evaluation roster")
            for j in range(1, len(scenes)):
                episode = make_eval_episode(scenes[0], scenes[j], class_id)
                episode.episode_id = f"eval-r{repeat}-{class_id}-{j}"
                episode.seed = repeat
                episodes.append(episode)
        return episodes

    def episode_by_id(self, episode_id):
        train = re.fullmatch(r"train-(\d+)", episode_id)
        if train:
            return self.pseudo_episode(int(train.group(1)))
        evaluation = re.fullmatch(r"eval-r(\d+)-([a-z_]+)-(\d+)", episode_id)
        if evaluation:
            repeat, class_id, j = int(evaluation.group(1)), evaluation.group(2), int(evaluation.group(3))
            if class_id in CLASS_ROSTER and 1 <= j < self.eval_scenes:
                scenes = self.eval_scene_set(repeat)
                episode = make_eval_episode(scenes[0], scenes[j], class_id)
                episode.episode_id = episode_id
                episode.seed = repeat
                return episode
        raise UnknownEpisodeError(f"unknown episode id {episode_id!r}")


def prefetch(sampler, indices, workers=1):
    """Materialize pseudo-episodes in index order on a thread pool"""
    indices = list(indices)
    if workers <= 1:
        return [sampler.pseudo_episode(i) for i in indices]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(sampler.pseudo_episode, indices))
