"""
Run Configuration
All experiment knobs in one JSON-serializable dataclass.
"""

import json
from dataclasses import asdict, dataclass, fields

from episodes import CLASS_ROSTER, SPLIT_MODES

SCORE_RESOLUTIONS = ("image", "feature")
SCALE_PATHS = ("64", "32")


class ConfigError(ValueError):
    """Raised for malformed or out-of-range configuration"""


@dataclass
class RunConfig:
    # Reproducibility and schedule
    seed: int = 0
    steps: int = 2000
    learning_rate: float = 1e-3
    momentum: float = 0.9
    checkpoint_every: int = 500
    eval_every: int = 500

    # Model
    channels: int = 32
    stem_channels: int = 8
    lka_kernel: int = 3
    lka_dilation: int = 2
    use_attention: bool = True
    score_scale: float = 20.0
    sigmoid_steepness: float = 1.0
    fusion_alpha: float = 0.8
    score_resolution: str = "image"
    scale_paths: tuple = SCALE_PATHS

    # Data and episodes
    image_size: int = 256
    train_scenes: int = 64
    k_segments: int = 32
    min_size: int = 200
    compactness: float = 0.1
    max_rotation: float = 10.0
    max_translation: float = 8.0
    scale_range: tuple = (0.9, 1.1)
    gamma_range: tuple = (0.8, 1.25)
    workers: int = 1

    # Evaluation
    split_mode: str = "setting2"
    held_out: tuple = ("spleen",)
    eval_scenes: int = 5
    eval_repeats: int = 3

    # Output
    out_dir: str = "runs/default"

    def __post_init__(self):
        self.scale_range = tuple(self.scale_range)
        self.gamma_range = tuple(self.gamma_range)
        self.held_out = tuple(self.held_out)
        self.scale_paths = tuple(self.scale_paths)

    def validate(self):
        """Raise ConfigError naming the first field outside its documented range"""
        checks = [
            ("seed", self.seed >= 0),
            ("steps", self.steps >= 0),
            ("learning_rate", self.learning_rate > 0),
            ("momentum", 0.0 <= self.momentum < 1.0),
            ("checkpoint_every", self.checkpoint_every >= 1),
            ("eval_every", self.eval_every >= 1),
            ("channels", self.channels >= 1),
            ("stem_channels", self.stem_channels >= 1),
            ("lka_kernel", self.lka_kernel >= 1 and self.lka_kernel % 2 == 1),
            ("lka_dilation", self.lka_dilation >= 1),
            ("score_scale", self.score_scale > 0),
            ("sigmoid_steepness", self.sigmoid_steepness > 0),
            ("fusion_alpha", 0.0 < self.fusion_alpha < 1.0),
            ("score_resolution", self.score_resolution in SCORE_RESOLUTIONS),
            ("scale_paths", _path_subset(self.scale_paths)),
            ("image_size", self.image_size >= 16 and self.image_size % 8 == 0),
            ("train_scenes", self.train_scenes >= 1),
            ("k_segments", self.k_segments >= 1),
            ("min_size", self.min_size >= 1 and self.min_size * self.k_segments <= self.image_size ** 2),
            ("compactness", self.compactness > 0),
            ("max_rotation", self.max_rotation >= 0),
            ("max_translation", self.max_translation >= 0),
            ("scale_range", _ordered_positive(self.scale_range)),
            ("gamma_range", _ordered_positive(self.gamma_range)),
            ("workers", self.workers >= 1),
            ("split_mode", self.split_mode in SPLIT_MODES),
            ("held_out", set(self.held_out) <= set(CLASS_ROSTER)),
            ("eval_scenes", self.eval_scenes >= 2),
            ("eval_repeats", self.eval_repeats >= 1),
        ]
        for name, ok in checks:
            if not ok:
                raise ConfigError(f"{name} out of range: {getattr(self, name)!r}")
        return self

    def to_dict(self):
        data = asdict(self)
        for key in ("scale_range", "gamma_range", "held_out", "scale_paths"):
            data[key] = list(data[key])
        return data

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**data).validate()
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as handle:
            return cls.from_json(handle.read())

    def save(self, path):
        with open(path, "w", encoding="utf-8") as handle:
            handle.write(self.to_json() + "\n")

    def replace(self, **changes):
        data = self.to_dict()
        data.update(changes)
        return RunConfig.from_dict(data)


def _ordered_positive(pair):
    return len(pair) == 2 and 0 < pair[0] <= pair[1]


def _path_subset(paths):
    return 0 < len(paths) == len(set(paths)) and set(paths) <= set(SCALE_PATHS)
