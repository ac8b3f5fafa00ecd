"""Training-time anomaly generators.

Three generators, all pure functions of an explicit seed:

* gradient-noise (Perlin) binary masks that shape anomalous regions,
* codebook resampling that corrupts quantized grids inside a mask while a
  similarity bound keeps replacements near-in-distribution,
* copy-paste smudges used to train the mask upsampler.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from .codebook import Codebook, Quantized
from .config import SynthesisConfig


def _fade(t: np.ndarray) -> np.ndarray:
    return 6 * t**5 - 15 * t**4 + 10 * t**3


def _lerp(a: np.ndarray, b: np.ndarray, w: np.ndarray) -> np.ndarray:
    return a + w * (b - a)


def perlin_field(height: int, width: int, octave: int, rng: np.random.Generator) -> np.ndarray:
    """Classic 2D lattice gradient noise with ``2**octave`` cells per axis.

    Generated on a power-of-two canvas and cropped, so arbitrary sizes are
    supported.  Deterministic given (shape, octave, generator state).
    """
    if height < 1 or width < 1:
        raise ValueError("field dimensions must be positive")
    canvas = 1 << max(int(math.ceil(math.log2(max(height, width)))), 0)
    res = min(1 << octave, canvas)
    d = canvas // res

    grid = np.mgrid[0:res:1.0 / d, 0:res:1.0 / d].transpose(1, 2, 0) % 1
    angles = 2 * math.pi * rng.random((res + 1, res + 1))
    gradients = np.stack((np.cos(angles), np.sin(angles)), axis=-1)

    def tile(sl0, sl1):
        return gradients[sl0, sl1].repeat(d, 0).repeat(d, 1)

    def dot(grad, shift):
        shifted = np.stack((grid[..., 0] + shift[0], grid[..., 1] + shift[1]), axis=-1)
        return (shifted * grad).sum(axis=-1)

    n00 = dot(tile(slice(0, -1), slice(0, -1)), (0, 0))
    n10 = dot(tile(slice(1, None), slice(0, -1)), (-1, 0))
    n01 = dot(tile(slice(0, -1), slice(1, None)), (0, -1))
    n11 = dot(tile(slice(1, None), slice(1, None)), (-1, -1))
    t = _fade(grid)
    field = math.sqrt(2) * _lerp(_lerp(n00, n10, t[..., 0]), _lerp(n01, n11, t[..., 0]), t[..., 1])
    return field[:height, :width]


def _normalize(field: np.ndarray) -> np.ndarray:
    lo, hi = float(field.min()), float(field.max())
    if hi <= lo:
        return np.zeros_like(field)
    return (field - lo) / (hi - lo)


def _octave_bounds(height: int, width: int, config: SynthesisConfig) -> tuple[int, int]:
    # Keep at least 4 pixels per lattice cell so the blobs stay coherent.
    cap = max(int(math.log2(max(min(height, width) // 4, 1))), 0)
    high = min(config.max_octave, cap)
    low = min(config.min_octave, high)
    return low, high


def _perlin_mask(height: int, width: int, rng: np.random.Generator, config: SynthesisConfig,
                 min_area: float | None = None, max_area: float | None = None) -> tuple[np.ndarray, bool]:
    min_area = config.min_area if min_area is None else min_area
    max_area = config.max_area if max_area is None else max_area
    low, high = _octave_bounds(height, width, config)
    mask = np.zeros((height, width), dtype=bool)
    for _ in range(config.max_tries):
        octave = int(rng.integers(low, high + 1))
        field = _normalize(perlin_field(height, width, octave, rng))
        threshold = rng.uniform(config.threshold_low, config.threshold_high)
        mask = field >= threshold
        fraction = float(mask.mean())
        if min_area <= fraction <= max_area:
            return mask, True
    return mask, False


def perlin_mask(height: int, width: int, seed: int, config: SynthesisConfig | None = None) -> tuple[np.ndarray, bool]:
    """Binary anomaly mask from thresholded gradient noise.

    Resamples (new octave, gradients, and threshold) until the anomalous
    fraction lands inside ``[min_area, max_area]``, giving up after
    ``max_tries`` attempts; the second return value is False when the last
    mask was still outside the window.
    """
    if height < 8 or width < 8:
        raise ValueError(f"mask dimensions must be >= 8, got {height}x{width}")
    config = config or SynthesisConfig()
    rng = np.random.default_rng(seed)
    return _perlin_mask(height, width, rng, config)


@dataclass(frozen=True)
class SimilarityBound:
    """Exclusion band for replacement sampling.

    The ``floor_index`` nearest codebook neighbors of a feature are never
    used as its replacement.
    """

    lambda_s: float
    num_vectors: int

    def __post_init__(self):
        if not 0 < self.lambda_s < 1:
            raise ValueError(f"lambda_s must lie in (0, 1), got {self.lambda_s}")
        if self.floor_index < 1:
            raise ValueError(
                f"similarity bound excludes no neighbors: floor({self.lambda_s} * {self.num_vectors}) < 1"
            )
        if self.floor_index >= self.num_vectors:
            raise ValueError("similarity bound excludes the entire codebook")

    @property
    def floor_index(self) -> int:
        return int(math.floor(self.lambda_s * self.num_vectors))

    def draw_rank_upper(self, rng: np.random.Generator) -> int:
        """Per-image upper rank, uniform on [floor_index, num_vectors]."""
        return int(rng.integers(self.floor_index, self.num_vectors + 1))


def sample_replacement_index(
    sorted_neighbor_ranks: np.ndarray,
    bound: SimilarityBound,
    n_upper: int,
    rng: np.random.Generator,
) -> int:
    """Pick a replacement codebook index from a distance-sorted rank list.

    Draws a rank uniformly from [floor_index, n_upper] (clamped to the last
    valid rank) and returns the codebook index at that rank; ranks below the
    similarity floor are never returned.
    """
    floor = bound.floor_index
    if not floor <= n_upper <= bound.num_vectors:
        raise ValueError(f"n_upper must lie in [{floor}, {bound.num_vectors}], got {n_upper}")
    if len(sorted_neighbor_ranks) < bound.num_vectors:
        raise ValueError("rank list shorter than the codebook")
    hi = min(n_upper, bound.num_vectors - 1)
    k = int(rng.integers(floor, hi + 1))
    return int(sorted_neighbor_ranks[k])


def rank_neighbors(cells: Tensor, vectors: Tensor, upto: int | None = None) -> Tensor:
    """Codebook indices ordered by ascending distance, per cell.

    ``upto`` switches to a partial top-k selection covering ranks
    ``0..upto``; the full sort is the reference path and both must agree on
    any rank they both cover.
    """
    with torch.no_grad():
        dist = torch.cdist(
            cells.float().unsqueeze(0),
            vectors.float().unsqueeze(0),
            compute_mode="donot_use_mm_for_euclid_dist",
        ).squeeze(0)
        if upto is not None and upto + 1 < vectors.shape[0]:
            return dist.topk(upto + 1, dim=1, largest=False).indices
        return dist.argsort(dim=1, stable=True)


def _pool_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    h, w = mask.shape
    return mask.reshape(h // factor, factor, w // factor, factor).any(axis=(1, 3))


@dataclass
class AnomalyInjection:
    """Corrupted quantized grids plus the masks that were applied."""

    quantized_hi: Quantized
    quantized_lo: Quantized
    mask_hi: Tensor  # bool, grid resolution of the hi level
    mask_lo: Tensor  # bool, grid resolution of the lo level
    mask_full: Tensor  # bool, image resolution
    replaced_cells: int
    area_ok: bool


def _corrupt_level(
    quantized: Quantized,
    codebook: Codebook,
    mask: np.ndarray,
    bound: SimilarityBound,
    rng: np.random.Generator,
    config: SynthesisConfig,
    uniform: bool,
) -> tuple[Tensor, Tensor, int]:
    data = quantized.data.detach().clone()
    indices = quantized.indices.clone()
    cells = np.flatnonzero(mask.reshape(-1))
    if cells.size == 0:
        return data, indices, 0
    flat = data.movedim(0, -1).reshape(-1, codebook.dim)
    if uniform:
        new_idx = torch.from_numpy(rng.integers(0, codebook.num_vectors, size=cells.size))
    else:
        n_upper = bound.draw_rank_upper(rng)
        hi = min(n_upper, codebook.num_vectors - 1)
        upto = hi if config.partial_ranking else None
        ranks = rank_neighbors(flat[cells], codebook.vectors, upto=upto)
        ks = torch.from_numpy(rng.integers(bound.floor_index, hi + 1, size=cells.size))
        new_idx = ranks[torch.arange(cells.size), ks]
    cell_t = torch.from_numpy(cells)
    flat[cell_t] = codebook.vectors.detach()[new_idx].to(flat.dtype)
    indices.reshape(-1)[cell_t] = new_idx
    data = flat.reshape(*mask.shape, codebook.dim).movedim(-1, 0)
    return data, indices, int(cells.size)


def inject_anomalies(
    quantized_hi: Quantized,
    quantized_lo: Quantized,
    codebook_hi: Codebook,
    codebook_lo: Codebook,
    lambda_s: float,
    seed: int | np.random.SeedSequence,
    config: SynthesisConfig | None = None,
    uniform: bool = False,
    mask_full: np.ndarray | None = None,
) -> AnomalyInjection:
    """Corrupt both quantization levels of one image inside a noise mask.

    A full-resolution mask is generated (or taken from ``mask_full``) and
    max-pooled to each grid, so every altered cell is marked anomalous.  One
    rank upper bound is drawn per level; each masked cell is replaced by a
    neighbor sampled inside the similarity band of its own distance ranking.
    ``uniform=True`` ignores the band and draws codebook indices uniformly.
    """
    config = config or SynthesisConfig()
    if quantized_hi.data.dim() != 3 or quantized_lo.data.dim() != 3:
        raise ValueError("inject_anomalies expects unbatched (D, H, W) grids")
    h_hi, w_hi = quantized_hi.spatial_shape
    h_lo, w_lo = quantized_lo.spatial_shape
    if (h_hi, w_hi) != (2 * h_lo, 2 * w_lo):
        raise ValueError(f"hi grid {h_hi}x{w_hi} must be twice the lo grid {h_lo}x{w_lo}")
    height, width = 4 * h_hi, 4 * w_hi

    rng = np.random.default_rng(seed)
    if mask_full is None:
        mask_full, area_ok = _perlin_mask(height, width, rng, config)
    else:
        if mask_full.shape != (height, width):
            raise ValueError(f"mask_full must have shape {(height, width)}, got {mask_full.shape}")
        mask_full = mask_full.astype(bool)
        area_ok = True
    mask_hi = _pool_mask(mask_full, 4)
    mask_lo = _pool_mask(mask_full, 8)

    bound_hi = SimilarityBound(lambda_s, codebook_hi.num_vectors)
    bound_lo = SimilarityBound(lambda_s, codebook_lo.num_vectors)
    data_hi, idx_hi, n_hi = _corrupt_level(quantized_hi, codebook_hi, mask_hi, bound_hi, rng, config, uniform)
    data_lo, idx_lo, n_lo = _corrupt_level(quantized_lo, codebook_lo, mask_lo, bound_lo, rng, config, uniform)

    return AnomalyInjection(
        quantized_hi=Quantized(data_hi, idx_hi),
        quantized_lo=Quantized(data_lo, idx_lo),
        mask_hi=torch.from_numpy(mask_hi),
        mask_lo=torch.from_numpy(mask_lo),
        mask_full=torch.from_numpy(mask_full.astype(bool)),
        replaced_cells=n_hi + n_lo,
        area_ok=area_ok,
    )


def simulate_smudge(
    image: Tensor,
    seed: int | np.random.SeedSequence,
    config: SynthesisConfig | None = None,
) -> tuple[Tensor, Tensor]:
    """Copy-paste a noise-shaped patch of the image onto itself.

    The patch is taken from a random offset of the same image and alpha
    blended inside a gradient-noise blob; returns the smudged image and the
    full-resolution binary paste mask.
    """
    config = config or SynthesisConfig()
    if image.dim() != 3:
        raise ValueError(f"expected a (C, H, W) image, got shape {tuple(image.shape)}")
    _, height, width = image.shape
    rng = np.random.default_rng(seed)
    blob, _ = _perlin_mask(
        height, width, rng, config,
        min_area=config.smudge_min_area, max_area=config.smudge_max_area,
    )
    dy = int(rng.integers(height // 8, height - height // 8))
    dx = int(rng.integers(width // 8, width - width // 8))
    alpha = float(rng.uniform(config.smudge_alpha_low, config.smudge_alpha_high))

    mask = torch.from_numpy(blob).to(image.dtype)
    source = torch.roll(image, shifts=(dy, dx), dims=(1, 2))
    smudged = image * (1 - alpha * mask) + source * (alpha * mask)
    return smudged, torch.from_numpy(blob)


def spawn_seeds(seed: int, count: int) -> list[np.random.SeedSequence]:
    """Independent child seeds for per-image generator calls."""
    return np.random.SeedSequence(seed).spawn(count)
