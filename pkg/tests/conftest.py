from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from dsr import profile_config
from dsr.networks import build_model
from dsr.synthesis import perlin_field


def make_texture_corpus(count: int, size: int, seed: int) -> torch.Tensor:
    """Synthetic striped-texture corpus forming one coherent object class.

    Each image mixes oriented stripes with a smooth noise field under a
    shared two-color palette; per-image angle, frequency, phase, and color
    jitter provide within-class variation.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    base_a = np.array([0.15, 0.25, 0.55])
    base_b = np.array([0.85, 0.75, 0.35])
    images = []
    for _ in range(count):
        angle = math.radians(35.0 + rng.uniform(-15.0, 15.0))
        freq = rng.uniform(3.0, 5.0)
        phase = rng.uniform(0.0, 1.0)
        coord = math.cos(angle) * xx + math.sin(angle) * yy
        stripes = 0.5 + 0.5 * np.sin(2 * math.pi * (freq * coord + phase))
        blob = perlin_field(size, size, 2, rng)
        lo, hi = blob.min(), blob.max()
        blob = (blob - lo) / max(hi - lo, 1e-9)
        mix = np.clip(0.65 * stripes + 0.35 * blob, 0.0, 1.0)
        color_a = np.clip(base_a + rng.uniform(-0.08, 0.08, 3), 0.0, 1.0)
        color_b = np.clip(base_b + rng.uniform(-0.08, 0.08, 3), 0.0, 1.0)
        img = color_a[:, None, None] + mix[None] * (color_b - color_a)[:, None, None]
        images.append(img.astype(np.float32))
    return torch.from_numpy(np.stack(images))


@pytest.fixture(scope="session")
def tiny_config():
    return profile_config("tiny")


@pytest.fixture(scope="session")
def tiny_model(tiny_config):
    return build_model(tiny_config.model, seed=0)


@pytest.fixture(scope="session")
def small_corpus():
    return make_texture_corpus(12, 64, seed=41)
