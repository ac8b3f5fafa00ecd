"""Latent codebooks and nearest-neighbor vector quantization.

Quantization replaces each feature vector of a spatial grid with its closest
codebook entry (squared Euclidean distance, ties broken by lowest index).
The straight-through variant copies gradients from the quantized output to
the input features; the codebook itself is only updated through the
alignment loss term, never through the decoder path.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

# Distances are accumulated in at least float32 even for half-precision
# storage; float64 inputs keep float64.
_MIN_COMPUTE_DTYPE = torch.float32

# Rows processed per distance-matrix chunk, bounding peak memory at
# roughly chunk * num_vectors floats.
_CHUNK_CELLS = 16384


class Codebook(nn.Module):
    """An ordered set of learnable latent vectors used as quantization targets."""

    def __init__(self, num_vectors: int, dim: int, level_tag: str = "hi"):
        super().__init__()
        if num_vectors < 2:
            raise ValueError(f"codebook needs at least 2 vectors, got {num_vectors}")
        if dim < 1:
            raise ValueError(f"codebook dimension must be positive, got {dim}")
        if level_tag not in ("hi", "lo"):
            raise ValueError(f"level_tag must be 'hi' or 'lo', got {level_tag!r}")
        self.level_tag = level_tag
        self.vectors = nn.Parameter(torch.empty(num_vectors, dim))
        bound = 1.0 / num_vectors
        nn.init.uniform_(self.vectors, -bound, bound)

    @property
    def num_vectors(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def extra_repr(self) -> str:
        return f"num_vectors={self.num_vectors}, dim={self.dim}, level_tag={self.level_tag!r}"


@dataclass
class Quantized:
    """A spatial grid of exact codebook vectors plus the selecting indices.

    ``data`` has layout ``(..., D, H, W)`` and ``indices`` the matching
    ``(..., H, W)`` integer grid.
    """

    data: Tensor
    indices: Tensor

    @property
    def spatial_shape(self) -> tuple[int, int]:
        return tuple(self.data.shape[-2:])

    def detached(self) -> "Quantized":
        return Quantized(self.data.detach(), self.indices)


def nearest_indices(flat: Tensor, vectors: Tensor) -> Tensor:
    """Index of the nearest codebook row for each row of ``flat``.

    Exact pairwise differences (no matrix-multiply expansion), so a vector
    that already equals a codebook entry is at distance exactly zero. Ties
    resolve to the lowest index.
    """
    compute = torch.promote_types(flat.dtype, _MIN_COMPUTE_DTYPE)
    flat = flat.to(compute)
    vectors = vectors.to(compute)
    out = torch.empty(flat.shape[0], dtype=torch.long, device=flat.device)
    for start in range(0, flat.shape[0], _CHUNK_CELLS):
        chunk = flat[start : start + _CHUNK_CELLS]
        dist = torch.cdist(
            chunk.unsqueeze(0),
            vectors.unsqueeze(0),
            compute_mode="donot_use_mm_for_euclid_dist",
        ).squeeze(0)
        out[start : start + _CHUNK_CELLS] = dist.argmin(dim=1)
    return out


def _check_dim(features: Tensor, codebook: Codebook) -> None:
    if features.dim() < 3:
        raise ValueError(f"features must have a (D, H, W) layout, got shape {tuple(features.shape)}")
    if features.shape[-3] != codebook.dim:
        raise ValueError(
            f"feature dimension {features.shape[-3]} does not match codebook dimension {codebook.dim}"
        )


def _flatten_cells(features: Tensor) -> tuple[Tensor, tuple[int, ...]]:
    moved = features.movedim(-3, -1)
    lead = moved.shape[:-1]
    return moved.reshape(-1, moved.shape[-1]), lead


def quantize(features: Tensor, codebook: Codebook) -> Quantized:
    """Replace every grid cell by its nearest codebook vector.

    Pure lookup: the result carries no gradient history and every output
    vector is bitwise equal to a codebook row.
    """
    _check_dim(features, codebook)
    with torch.no_grad():
        flat, lead = _flatten_cells(features)
        idx = nearest_indices(flat, codebook.vectors)
        data = codebook.vectors[idx].to(features.dtype)
    return Quantized(
        data=data.reshape(*lead, codebook.dim).movedim(-1, -3),
        indices=idx.reshape(lead),
    )


class _StraightThroughLookup(torch.autograd.Function):
    """Exact codebook lookup whose gradient is copied onto the features.

    The codebook receives no gradient through this op; it is trained only
    via the alignment term of the quantization losses.
    """

    @staticmethod
    def forward(ctx, flat_features: Tensor, vectors: Tensor, indices: Tensor) -> Tensor:
        return vectors.detach()[indices].to(flat_features.dtype)

    @staticmethod
    def backward(ctx, grad_output: Tensor):
        return grad_output, None, None


def quantize_with_gradient(features: Tensor, codebook: Codebook) -> Quantized:
    """Quantize with the straight-through gradient contract.

    Forward values are identical to :func:`quantize`; in the backward pass
    the gradient with respect to ``features`` equals the gradient with
    respect to the quantized output.
    """
    _check_dim(features, codebook)
    flat, lead = _flatten_cells(features)
    with torch.no_grad():
        idx = nearest_indices(flat, codebook.vectors)
    data = _StraightThroughLookup.apply(flat, codebook.vectors, idx)
    return Quantized(
        data=data.reshape(*lead, codebook.dim).movedim(-1, -3),
        indices=idx.reshape(lead),
    )


def squared_distance_mean(a: Tensor, b: Tensor, channel_dim: int = -3) -> Tensor:
    """Mean over cells of the squared Euclidean distance between two grids.

    The distance is summed over the channel dimension and averaged over all
    remaining (batch and spatial) positions.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).pow(2).sum(dim=channel_dim).mean()


def vq_losses(features: Tensor, quantized: Quantized, codebook: Codebook) -> tuple[Tensor, Tensor]:
    """Codebook-alignment and commitment losses for one quantized grid.

    Both are the mean-over-cells squared distance between the features and
    their quantized values; they share the forward value and differ only in
    gradient routing.  The alignment term updates the codebook (features
    held constant), the commitment term updates the features (codebook held
    constant).  The caller weights the commitment term.
    """
    if features.shape != quantized.data.shape:
        raise ValueError(
            f"feature grid {tuple(features.shape)} does not match quantized grid {tuple(quantized.data.shape)}"
        )
    selected = codebook.vectors[quantized.indices.reshape(-1)]
    selected = selected.reshape(*quantized.indices.shape, codebook.dim).movedim(-1, -3)
    codebook_loss = squared_distance_mean(selected, features.detach())
    commitment_loss = squared_distance_mean(features, selected.detach())
    return codebook_loss, commitment_loss


def codebook_usage(indices: Tensor, num_vectors: int | None = None) -> Tensor:
    """Histogram of codebook-index frequencies over a batch of index grids."""
    flat = indices.reshape(-1)
    if num_vectors is None:
        num_vectors = int(flat.max().item()) + 1 if flat.numel() else 0
    return torch.bincount(flat, minlength=num_vectors)
