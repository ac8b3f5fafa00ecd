"""The five sub-networks and their composition into one anomaly detector.

Shape contract for an input image of size H x W (both divisible by 8,
minimum 64): the quantized grids live at H/4 (hi) and H/8 (lo), the
segmentation map at H/4, and the refined mask at full resolution.

Block recipe (the composition of "residual" and up/down blocks is an
implementation choice): 3x3 convolutions with group norm and a SiLU-family
activation; downsampling and upsampling use stride-2 4x4 (transposed)
convolutions.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .codebook import Codebook, Quantized, quantize_with_gradient
from .config import ModelConfig

COMPONENT_NAMES = (
    "encoder",
    "general_decoder",
    "codebook_hi",
    "codebook_lo",
    "subspace_hi",
    "subspace_lo",
    "object_decoder",
    "detector",
    "upsampler",
)

STAGE_TRAINABLE = {
    1: ("encoder", "general_decoder", "codebook_hi", "codebook_lo"),
    2: ("subspace_hi", "subspace_lo", "object_decoder", "detector"),
    3: ("upsampler",),
}


def _act(name: str) -> nn.Module:
    table = {"silu": nn.SiLU, "relu": nn.ReLU, "gelu": nn.GELU}
    if name not in table:
        raise ValueError(f"unknown activation {name!r} (expected one of {sorted(table)})")
    return table[name]()


def _norm(channels: int, groups: int) -> nn.Module:
    g = min(groups, channels)
    while channels % g:
        g -= 1
    return nn.GroupNorm(g, channels)


class ConvBlock(nn.Module):
    def __init__(self, cin: int, cout: int, groups: int, activation: str):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm = _norm(cout, groups)
        self.act = _act(activation)

    def forward(self, x: Tensor) -> Tensor:
        return self.act(self.norm(self.conv(x)))


class DownBlock(nn.Module):
    def __init__(self, cin: int, cout: int, groups: int, activation: str):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 4, stride=2, padding=1)
        self.norm = _norm(cout, groups)
        self.act = _act(activation)

    def forward(self, x: Tensor) -> Tensor:
        return self.act(self.norm(self.conv(x)))


class UpBlock(nn.Module):
    def __init__(self, cin: int, cout: int, groups: int, activation: str):
        super().__init__()
        self.conv = nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1)
        self.norm = _norm(cout, groups)
        self.act = _act(activation)

    def forward(self, x: Tensor) -> Tensor:
        return self.act(self.norm(self.conv(x)))


class ResidualBlock(nn.Module):
    def __init__(self, cin: int, cout: int, groups: int, activation: str):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm1 = _norm(cout, groups)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = _norm(cout, groups)
        self.act = _act(activation)
        self.skip = nn.Identity() if cin == cout else nn.Conv2d(cin, cout, 1)

    def forward(self, x: Tensor) -> Tensor:
        h = self.act(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return self.act(h + self.skip(x))


class LatentEncoder(nn.Module):
    """Projects an image into pre-quantization feature grids at H/4 and H/8.

    The H/8 branch is quantized first; its (upsampled) quantization is fused
    back into the H/4 branch before the hi-level projection.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        w, d = config.encoder_width, config.latent_dim
        g, a = config.norm_groups, config.activation
        self.stem = ConvBlock(3, w, g, a)
        self.down1 = DownBlock(w, w, g, a)
        self.res1 = ResidualBlock(w, w, g, a)
        self.down2 = DownBlock(w, 2 * w, g, a)
        self.res2 = ResidualBlock(2 * w, 2 * w, g, a)
        self.down3 = DownBlock(2 * w, 2 * w, g, a)
        self.res3 = ResidualBlock(2 * w, 2 * w, g, a)
        self.to_lo = nn.Conv2d(2 * w, d, 3, padding=1)
        self.up_lo = UpBlock(d, d, g, a)
        self.fuse = nn.Sequential(ConvBlock(2 * w + d, 2 * w, g, a), nn.Conv2d(2 * w, d, 3, padding=1))

    def backbone(self, image: Tensor) -> tuple[Tensor, Tensor]:
        h = self.res1(self.down1(self.stem(image)))
        feat4 = self.res2(self.down2(h))
        feat8 = self.res3(self.down3(feat4))
        return feat4, feat8

    def features_lo(self, feat8: Tensor) -> Tensor:
        return self.to_lo(feat8)

    def features_hi(self, feat4: Tensor, quantized_lo: Tensor) -> Tensor:
        return self.fuse(torch.cat([feat4, self.up_lo(quantized_lo)], dim=1))


class GeneralDecoder(nn.Module):
    """Reconstructs any image from the pair of quantized grids."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        w, d = config.encoder_width, config.latent_dim
        g, a = config.norm_groups, config.activation
        self.up_lo = UpBlock(d, d, g, a)
        self.merge = ConvBlock(2 * d, 2 * w, g, a)
        self.res1 = ResidualBlock(2 * w, 2 * w, g, a)
        self.res2 = ResidualBlock(2 * w, 2 * w, g, a)
        self.up1 = UpBlock(2 * w, w, g, a)
        self.up2 = UpBlock(w, w, g, a)
        self.out = nn.Conv2d(w, 3, 3, padding=1)

    def forward(self, quantized_hi: Tensor, quantized_lo: Tensor) -> Tensor:
        h = self.merge(torch.cat([quantized_hi, self.up_lo(quantized_lo)], dim=1))
        h = self.res2(self.res1(h))
        return self.out(self.up2(self.up1(h)))


class SubspaceRestriction(nn.Module):
    """Bottlenecked encoder-decoder that maps quantized grids back toward
    the normal-appearance configurations seen in training.

    Three downsampling and three upsampling blocks with no skip paths: the
    bottleneck is what discards anomalous configurations.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        w, d = config.encoder_width, config.latent_dim
        g, a = config.norm_groups, config.activation
        self.inc = ConvBlock(d, w, g, a)
        self.down1 = DownBlock(w, 2 * w, g, a)
        self.down2 = DownBlock(2 * w, 4 * w, g, a)
        self.down3 = DownBlock(4 * w, 4 * w, g, a)
        self.mid = ConvBlock(4 * w, 4 * w, g, a)
        self.up1 = UpBlock(4 * w, 4 * w, g, a)
        self.up2 = UpBlock(4 * w, 2 * w, g, a)
        self.up3 = UpBlock(2 * w, w, g, a)
        self.out = nn.Conv2d(w, d, 3, padding=1)

    def forward(self, quantized: Tensor) -> Tensor:
        h = self.down3(self.down2(self.down1(self.inc(quantized))))
        h = self.up3(self.up2(self.up1(self.mid(h))))
        return self.out(h)


class ObjectSpecificDecoder(nn.Module):
    """Image reconstruction net of the object-specific branch.

    Two downsampling blocks followed by four transposed-convolution
    upsampling blocks, mapping the fused H/4 grids to a full-resolution
    image.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        w, d = config.encoder_width, config.latent_dim
        g, a = config.norm_groups, config.activation
        self.up_lo = UpBlock(d, d, g, a)
        self.inc = ConvBlock(2 * d, 2 * w, g, a)
        self.down1 = DownBlock(2 * w, 2 * w, g, a)
        self.down2 = DownBlock(2 * w, 4 * w, g, a)
        self.up1 = UpBlock(4 * w, 2 * w, g, a)
        self.up2 = UpBlock(2 * w, 2 * w, g, a)
        self.up3 = UpBlock(2 * w, w, g, a)
        self.up4 = UpBlock(w, w, g, a)
        self.out = nn.Conv2d(w, 3, 3, padding=1)

    def forward(self, quantized_hi: Tensor, quantized_lo: Tensor) -> Tensor:
        h = self.inc(torch.cat([quantized_hi, self.up_lo(quantized_lo)], dim=1))
        h = self.down2(self.down1(h))
        return self.out(self.up4(self.up3(self.up2(self.up1(h)))))


class AnomalyDetector(nn.Module):
    """U-shaped segmentation head over the two reconstructions.

    Takes the depth-wise concatenation (6 channels) at image resolution and
    emits 2-class logits at H/4.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        w = config.detector_width
        g, a = config.norm_groups, config.activation
        self.down0 = DownBlock(6, w, g, a)
        self.down1 = DownBlock(w, 2 * w, g, a)
        self.down2 = DownBlock(2 * w, 4 * w, g, a)
        self.down3 = DownBlock(4 * w, 4 * w, g, a)
        self.mid = ConvBlock(4 * w, 4 * w, g, a)
        self.up2 = UpBlock(4 * w, 4 * w, g, a)
        self.merge2 = ConvBlock(8 * w, 2 * w, g, a)
        self.up1 = UpBlock(2 * w, 2 * w, g, a)
        self.merge1 = ConvBlock(4 * w, w, g, a)
        self.head = nn.Conv2d(w, 2, 3, padding=1)

    def forward(self, stacked: Tensor) -> Tensor:
        s1 = self.down1(self.down0(stacked))  # H/4
        s2 = self.down2(s1)  # H/8
        h = self.mid(self.down3(s2))  # H/16
        h = self.merge2(torch.cat([self.up2(h), s2], dim=1))
        h = self.merge1(torch.cat([self.up1(h), s1], dim=1))
        return self.head(h)


class MaskUpsampler(nn.Module):
    """Refines a bilinearly upsampled mask using the image as guidance."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        w = config.upsampler_width
        g, a = config.norm_groups, config.activation
        self.inc = ConvBlock(4, w, g, a)
        self.down1 = DownBlock(w, 2 * w, g, a)
        self.down2 = DownBlock(2 * w, 2 * w, g, a)
        self.mid = ConvBlock(2 * w, 2 * w, g, a)
        self.up1 = UpBlock(2 * w, 2 * w, g, a)
        self.merge1 = ConvBlock(4 * w, w, g, a)
        self.up2 = UpBlock(w, w, g, a)
        self.merge0 = ConvBlock(2 * w, w, g, a)
        self.head = nn.Conv2d(w, 2, 3, padding=1)

    def forward(self, stacked: Tensor) -> Tensor:
        s0 = self.inc(stacked)  # H
        s1 = self.down1(s0)  # H/2
        h = self.mid(self.down2(s1))  # H/4
        h = self.merge1(torch.cat([self.up1(h), s1], dim=1))
        h = self.merge0(torch.cat([self.up2(h), s0], dim=1))
        return self.head(h)


@dataclass
class EncodedLatents:
    features_hi: Tensor
    features_lo: Tensor
    quantized_hi: Quantized
    quantized_lo: Quantized


@dataclass
class ObjectReconstruction:
    image: Tensor
    restricted_hi: Tensor
    restricted_lo: Tensor
    requantized_hi: Quantized
    requantized_lo: Quantized


@dataclass
class InferenceMaps:
    mask_feature: Tensor  # (B, 1, H/4, W/4) anomaly probabilities
    mask_full: Tensor  # (B, 1, H, W) anomaly probabilities
    image_general: Tensor
    image_specific: Tensor


def _anomaly_probability(logits: Tensor) -> Tensor:
    return torch.softmax(logits, dim=1)[:, 1:2]


def _check_image(image: Tensor) -> None:
    if image.dim() != 4 or image.shape[1] != 3:
        raise ValueError(f"expected a (B, 3, H, W) image batch, got shape {tuple(image.shape)}")
    h, w = image.shape[-2:]
    if h % 8 or w % 8:
        raise ValueError(f"image dimensions must be divisible by 8, got {h}x{w}")
    if h < 64 or w < 64:
        raise ValueError(f"image dimensions must be at least 64, got {h}x{w}")


class DsrModel(nn.Module):
    """Dual-decoder anomaly detection model over a shared quantized latent space."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.encoder = LatentEncoder(config)
        self.general_decoder = GeneralDecoder(config)
        self.codebook_hi = Codebook(config.codebook_size, config.latent_dim, "hi")
        self.codebook_lo = Codebook(config.codebook_size, config.latent_dim, "lo")
        self.subspace_hi = SubspaceRestriction(config)
        self.subspace_lo = SubspaceRestriction(config)
        self.object_decoder = ObjectSpecificDecoder(config)
        self.detector = AnomalyDetector(config)
        self.upsampler = MaskUpsampler(config)
        self.stage_completed = 0

    # -- component bookkeeping -------------------------------------------

    def component(self, name: str) -> nn.Module:
        if name not in COMPONENT_NAMES:
            raise ValueError(f"unknown component {name!r}")
        return getattr(self, name)

    @property
    def stage_flags(self) -> dict[str, str]:
        flags = {}
        for name in COMPONENT_NAMES:
            params = list(self.component(name).parameters())
            trainable = any(p.requires_grad for p in params)
            flags[name] = "trainable" if trainable else "frozen"
        return flags

    def set_stage_trainable(self, stage: int) -> None:
        """Mark exactly the components trained in ``stage`` as trainable."""
        if stage not in STAGE_TRAINABLE:
            raise ValueError(f"stage must be 1, 2, or 3, got {stage}")
        active = set(STAGE_TRAINABLE[stage])
        for name in COMPONENT_NAMES:
            for p in self.component(name).parameters():
                p.requires_grad_(name in active)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    # -- forward paths ----------------------------------------------------

    def encode(self, image: Tensor) -> EncodedLatents:
        """Project an image to feature grids and their quantizations."""
        _check_image(image)
        feat4, feat8 = self.encoder.backbone(image)
        features_lo = self.encoder.features_lo(feat8)
        quantized_lo = quantize_with_gradient(features_lo, self.codebook_lo)
        features_hi = self.encoder.features_hi(feat4, quantized_lo.data)
        quantized_hi = quantize_with_gradient(features_hi, self.codebook_hi)
        return EncodedLatents(features_hi, features_lo, quantized_hi, quantized_lo)

    def _check_grids(self, quantized_hi: Tensor, quantized_lo: Tensor) -> None:
        if quantized_hi.shape[-2] != 2 * quantized_lo.shape[-2] or quantized_hi.shape[-1] != 2 * quantized_lo.shape[-1]:
            raise ValueError(
                f"hi grid {tuple(quantized_hi.shape[-2:])} must be twice the lo grid "
                f"{tuple(quantized_lo.shape[-2:])}"
            )

    def decode_general(self, quantized_hi: Tensor, quantized_lo: Tensor) -> Tensor:
        """General-appearance reconstruction at full resolution (unclamped)."""
        self._check_grids(quantized_hi, quantized_lo)
        return self.general_decoder(quantized_hi, quantized_lo)

    def decode_object_specific(self, quantized_hi: Tensor, quantized_lo: Tensor) -> ObjectReconstruction:
        """Subspace-restricted reconstruction plus the restricted grids."""
        self._check_grids(quantized_hi, quantized_lo)
        restricted_hi = self.subspace_hi(quantized_hi)
        restricted_lo = self.subspace_lo(quantized_lo)
        requantized_hi = quantize_with_gradient(restricted_hi, self.codebook_hi)
        requantized_lo = quantize_with_gradient(restricted_lo, self.codebook_lo)
        image = self.object_decoder(requantized_hi.data, requantized_lo.data)
        return ObjectReconstruction(image, restricted_hi, restricted_lo, requantized_hi, requantized_lo)

    def detect(self, image_general: Tensor, image_specific: Tensor) -> Tensor:
        """Anomaly probability map at H/4 from the two reconstructions."""
        if image_general.shape != image_specific.shape:
            raise ValueError(
                f"reconstruction shapes differ: {tuple(image_general.shape)} vs {tuple(image_specific.shape)}"
            )
        logits = self.detector(torch.cat([image_general, image_specific], dim=1))
        return _anomaly_probability(logits)

    def upsample_mask(self, image: Tensor, mask_feature: Tensor) -> Tensor:
        """Refine a feature-resolution mask to a full-resolution one."""
        _check_image(image)
        h, w = image.shape[-2:]
        if tuple(mask_feature.shape[-2:]) != (h // 4, w // 4):
            raise ValueError(
                f"mask resolution {tuple(mask_feature.shape[-2:])} does not match feature "
                f"resolution {(h // 4, w // 4)} of the image"
            )
        coarse = F.interpolate(mask_feature, size=(h, w), mode="bilinear", align_corners=False)
        logits = self.upsampler(torch.cat([image, coarse], dim=1))
        return _anomaly_probability(logits)

    def forward_maps(self, image: Tensor, use_upsampler: bool = True) -> InferenceMaps:
        """Full inference path from an image to both anomaly maps."""
        latents = self.encode(image)
        image_general = self.decode_general(latents.quantized_hi.data, latents.quantized_lo.data)
        reconstruction = self.decode_object_specific(latents.quantized_hi.data, latents.quantized_lo.data)
        mask_feature = self.detect(image_general, reconstruction.image)
        if use_upsampler:
            mask_full = self.upsample_mask(image, mask_feature)
        else:
            mask_full = F.interpolate(mask_feature, size=image.shape[-2:], mode="bilinear", align_corners=False)
        return InferenceMaps(mask_feature, mask_full, image_general, reconstruction.image)


def build_model(config: ModelConfig, seed: int = 0) -> DsrModel:
    """Deterministically initialized model; the seed covers all weights."""
    torch.manual_seed(seed)
    return DsrModel(config)
