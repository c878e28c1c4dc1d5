"""
Few-Shot Segmenter
Shared encoder, one attention block and one threshold head per scale path,
prototype scoring and multi-scale mask fusion, wired into one model.
"""

from dataclasses import dataclass, field

import numpy as np

import tensor_core as tc
from encoder import EncoderParams, extract, init_encoder_params
from episodes import preprocess
from fusion_metrics import FusionConfig, align_loss, fuse_paths, seg_loss, total_loss
from lka_attention import LkaParams, attend, init_lka_params
from proto_head import ThresholdHead, init_threshold_head, masked_avg_pool, segment_with_prototype

PATHS = ("64", "32")
INPUT_STD_FLOOR = 1e-6


@dataclass
class EpisodePrediction:
    paths: dict
    fused: object
    support_features: dict
    query_features: dict
    support_upsampled: dict = field(default_factory=dict)
    query_upsampled: dict = field(default_factory=dict)


class FewShotSegmenter:
    def __init__(self, encoder, lka, heads, config):
        """Parameters plus the knobs that shape the forward pass"""
        self.encoder = encoder
        self.lka = lka          # path -> LkaParams
        self.heads = heads      # path -> ThresholdHead
        self.config = config

        # Forward-pass settings
        self.score_scale = config.score_scale
        self.steepness = config.sigmoid_steepness
        self.resolution = config.score_resolution
        self.use_attention = config.use_attention
        self.fusion = FusionConfig(alpha=config.fusion_alpha)
        self.paths = tuple(p for p in PATHS if p in config.scale_paths)

    @classmethod
    def initialize(cls, config, dtype=np.float32):
        """Fresh parameters drawn from the config seed"""
        rng = np.random.default_rng([config.seed, 99])
        encoder = init_encoder_params(rng, channels=config.channels, stem_channels=config.stem_channels,
                                      dtype=dtype)
        lka = {path: init_lka_params(config.channels, rng, config.lka_kernel, config.lka_dilation, dtype)
               for path in PATHS}
        heads = {path: init_threshold_head(config.channels, rng, dtype) for path in PATHS}
        return cls(encoder, lka, heads, config)

    @classmethod
    def from_named(cls, table, config):
        encoder = EncoderParams.from_named(table)
        lka = {path: LkaParams.from_named(table, f"lka{path}", config.lka_kernel, config.lka_dilation)
               for path in PATHS}
        heads = {path: ThresholdHead.from_named(table, f"thr{path}") for path in PATHS}
        return cls(encoder, lka, heads, config)

    def named_parameters(self):
        """Checkpoint names: enc.*, lka64.*, lka32.*, thr64.*, thr32.*"""
        table = dict(self.encoder.named_tensors("enc"))
        for path in PATHS:
            table.update(self.lka[path].named_tensors(f"lka{path}"))
        for path in PATHS:
            table.update(self.heads[path].named_tensors(f"thr{path}"))
        return table

    def trainable_parameters(self):
        """Parameters the optimizer updates: identity attention and unused paths stay frozen"""
        table = self.named_parameters()
        frozen = [f"thr{path}." for path in PATHS if path not in self.paths]
        frozen += [f"lka{path}." for path in PATHS if path not in self.paths or not self.use_attention]
        return {name: t for name, t in table.items() if not name.startswith(tuple(frozen))}

    def with_alpha(self, alpha):
        clone = FewShotSegmenter(self.encoder, self.lka, self.heads, self.config)
        clone.fusion = FusionConfig(alpha=alpha)
        return clone

    def features(self, image):
        """Post-attention features per active path for one preprocessed image"""
        pair = extract(standardize(image), self.encoder).paths()
        if not self.use_attention:
            return {path: pair[path] for path in self.paths}
        return {path: attend(pair[path], self.lka[path]) for path in self.paths}

    def predict(self, episode):
        support = self.features(preprocess(episode.support_image))
        query = self.features(preprocess(episode.query_image))
        height, width = np.shape(episode.query_mask)

        support_up, query_up = {}, {}
        if self.resolution == "image":
            support_up = {path: tc.bilinear_resize(f, height, width) for path, f in support.items()}
            query_up = {path: tc.bilinear_resize(f, height, width) for path, f in query.items()}

        predictions = {}
        for path in self.paths:
            prototype = masked_avg_pool(support_up.get(path, support[path]), episode.support_mask)
            predictions[path] = segment_with_prototype(
                query[path], prototype, self.heads[path], height, width,
                scale=self.score_scale, steepness=self.steepness, resolution=self.resolution,
                upsampled=query_up.get(path))
        fused = fuse_paths(predictions, self.fusion)
        return EpisodePrediction(paths=predictions, fused=fused, support_features=support,
                                 query_features=query, support_upsampled=support_up,
                                 query_upsampled=query_up)

    def loss(self, episode, counters=None, with_alignment=True):
        """Segmentation loss on the fused query mask plus the alignment term"""
        prediction = self.predict(episode)
        seg = seg_loss(prediction.fused, episode.query_mask)
        reg = tc.Tensor(0.0, dtype=seg.dtype)
        if with_alignment:
            reg = align_loss(prediction.support_features, prediction.query_features, prediction.paths,
                             episode.support_mask, self.heads, self.fusion,
                             score_scale=self.score_scale, steepness=self.steepness,
                             resolution=self.resolution, counters=counters,
                             support_upsampled=prediction.support_upsampled,
                             query_upsampled=prediction.query_upsampled)
        return total_loss(seg, reg), prediction


def standardize(image):
    """Zero-mean, unit-variance copy of a preprocessed image; constant images map to zeros"""
    data = image.data.astype(np.float64)
    spread = float(data.std())
    centered = data - data.mean()
    if spread > INPUT_STD_FLOOR:
        centered = centered / spread
    return tc.Tensor(centered, dtype=image.dtype)
