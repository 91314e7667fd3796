"""Shared builders for small models and random samples."""

import numpy as np

from hatfusion.data import Sample
from hatfusion.model import ModelConfig


def minimal_config(**overrides) -> ModelConfig:
    base = dict(d=8, n_latents=2, n_latent_layers=1, n_stroke_layers=1, n_heads=2, vocab_size=3,
                dropout_p=0.0, patch_grid=2, backbone_channels=4, image_side=8)
    base.update(overrides)
    return ModelConfig(**base)


def random_strokes(rng, t):
    pts = np.column_stack([rng.random((t, 2)), (rng.random(t) < 0.8).astype(float)])
    pts[0, 2] = 1.0
    if t >= 3:
        pts[t // 2, 2] = 0.0  # both pen rows take part in every gradient check
    return pts


def random_sample(rng, cfg: ModelConfig, t=5, label=0) -> Sample:
    return Sample(label, random_strokes(rng, t), rng.random((cfg.image_side, cfg.image_side)))
