"""Three-stage training pipeline.

Stage 1 fits the encoder, both codebooks, and the general decoder on an
image-reconstruction objective with quantization losses.  Stage 2 freezes
those and trains the subspace restrictions, object-specific decoder, and
detector on synthetically corrupted latents.  Stage 3 freezes everything
else and trains the mask upsampler on copy-paste smudges.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .checkpoint import save_checkpoint
from .codebook import Quantized, squared_distance_mean, vq_losses
from .config import RunConfig, StageConfig, write_config
from .networks import DsrModel, build_model
from .synthesis import inject_anomalies, simulate_smudge, spawn_seeds

_EPS = 1e-7


def _require_determinism() -> None:
    # Process-global: run-to-run bit reproducibility on the same device
    # requires deterministic kernels even on CPU (thread scheduling in the
    # default conv paths is not reproducible otherwise).
    torch.use_deterministic_algorithms(True)


def focal_loss(
    predicted: Tensor,
    target: Tensor,
    gamma: float = 2.0,
    alpha: float | None = 0.75,
) -> Tensor:
    """Focal modulation of per-pixel binary cross-entropy, mean reduced.

    ``predicted`` holds anomaly probabilities in [0, 1]; ``target`` is the
    binary mask.  ``alpha`` weights the anomaly class (1 - alpha the normal
    class); with ``alpha=None`` and ``gamma=0`` this is exactly the mean
    cross-entropy.
    """
    predicted = predicted.squeeze(-3) if predicted.dim() > target.dim() else predicted
    target = target.to(predicted.dtype)
    if predicted.shape != target.shape:
        raise ValueError(
            f"prediction shape {tuple(predicted.shape)} does not match target {tuple(target.shape)}"
        )
    p_t = torch.where(target > 0.5, predicted, 1.0 - predicted).clamp(_EPS, 1.0)
    loss = -(1.0 - p_t).pow(gamma) * torch.log(p_t)
    if alpha is not None:
        weight = torch.where(target > 0.5, torch.as_tensor(alpha), torch.as_tensor(1.0 - alpha))
        loss = weight.to(loss.dtype) * loss
    return loss.mean()


@dataclass
class TrainLogRecord:
    iteration: int
    learning_rate: float
    wall_time: float
    losses: dict[str, float]


@dataclass
class TrainResult:
    model: DsrModel
    records: list[TrainLogRecord]
    counters: dict[str, int] = field(default_factory=dict)

    @property
    def final_losses(self) -> dict[str, float]:
        return self.records[-1].losses if self.records else {}


def write_train_log(records: list[TrainLogRecord], path: str | Path) -> None:
    """One tab-separated record per line, with a header row."""
    path = Path(path)
    keys = sorted(records[0].losses) if records else []
    lines = ["\t".join(["iteration", "learning_rate", "wall_time", *keys])]
    for rec in records:
        values = [str(rec.iteration), repr(rec.learning_rate), repr(rec.wall_time)]
        values += [repr(rec.losses.get(k, float("nan"))) for k in keys]
        lines.append("\t".join(values))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _slice_quantized(quantized: Quantized, i: int) -> Quantized:
    return Quantized(quantized.data[i], quantized.indices[i])


def _check_corpus(images: Tensor, what: str) -> None:
    if images.dim() != 4 or images.shape[0] == 0:
        raise ValueError(f"{what} must be a non-empty (N, 3, H, W) tensor, got shape {tuple(images.shape)}")


def _check_finite(loss: Tensor, stage: int, iteration: int, terms: dict[str, float]) -> None:
    if not torch.isfinite(loss):
        raise RuntimeError(f"non-finite loss in stage {stage} at iteration {iteration}: {terms}")


def _maybe_decay(optimizer: torch.optim.Optimizer, config: StageConfig, iteration: int) -> None:
    if config.lr_decay_at and iteration == config.lr_decay_at:
        for group in optimizer.param_groups:
            group["lr"] *= config.lr_decay_factor


def _record(records, progress, iteration, optimizer, terms, config) -> None:
    if iteration % config.log_interval == 0 or iteration == config.iterations:
        rec = TrainLogRecord(
            iteration=iteration,
            learning_rate=optimizer.param_groups[0]["lr"],
            wall_time=time.time(),
            losses=terms,
        )
        records.append(rec)
        if progress is not None:
            progress(rec)


def _interval_save(model, config, stage_cfg, out_dir, iteration, rng, stem) -> None:
    interval = stage_cfg.checkpoint_interval
    if out_dir is not None and interval and iteration % interval == 0 and iteration != stage_cfg.iterations:
        save_checkpoint(model, Path(out_dir) / f"{stem}_iter{iteration:07d}.ckpt", config=config, rng=rng)


def _finish(model, config, records, rng, out_dir, stem, counters=None) -> TrainResult:
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_train_log(records, out_dir / f"{stem}_log.tsv")
        write_config(config, out_dir / f"{stem}_config.ini")
        save_checkpoint(model, out_dir / f"{stem}.ckpt", config=config, rng=rng)
    return TrainResult(model=model, records=records, counters=counters or {})


def train_stage1(
    images: Tensor,
    config: RunConfig,
    seed: int = 0,
    model: DsrModel | None = None,
    out_dir: str | Path | None = None,
    progress=None,
) -> TrainResult:
    """Fit encoder, codebooks, and general decoder for image reconstruction.

    On completion those components are marked frozen and the model is
    stamped as stage-1 complete.
    """
    _check_corpus(images, "stage-1 corpus")
    cfg = config.stage1
    cfg.validate()
    _require_determinism()
    if model is None:
        model = build_model(config.model, seed)
    model.set_stage_trainable(1)
    model.train()
    optimizer = torch.optim.Adam(model.trainable_parameters(), lr=cfg.learning_rate)
    rng = np.random.default_rng(seed)
    records: list[TrainLogRecord] = []

    for step in range(1, cfg.iterations + 1):
        _maybe_decay(optimizer, cfg, step)
        batch = images[rng.integers(0, images.shape[0], cfg.batch_size)]
        latents = model.encode(batch)
        recon = model.decode_general(latents.quantized_hi.data, latents.quantized_lo.data)
        recon_loss = squared_distance_mean(recon, batch)
        cb_hi, commit_hi = vq_losses(latents.features_hi, latents.quantized_hi, model.codebook_hi)
        cb_lo, commit_lo = vq_losses(latents.features_lo, latents.quantized_lo, model.codebook_lo)
        codebook_loss = (cb_hi + cb_lo) / 2
        commitment_loss = (commit_hi + commit_lo) / 2
        loss = recon_loss + codebook_loss + cfg.lambda1 * commitment_loss

        terms = {
            "loss_total": float(loss.detach()),
            "loss_reconstruction": float(recon_loss.detach()),
            "loss_codebook": float(codebook_loss.detach()),
            "loss_commitment": float(commitment_loss.detach()),
        }
        _check_finite(loss, 1, step, terms)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        _record(records, progress, step, optimizer, terms, cfg)
        _interval_save(model, config, cfg, out_dir, step, rng, "stage1")

    model.stage_completed = max(model.stage_completed, 1)
    model.set_stage_trainable(2)  # stage-1 components are frozen from here on
    return _finish(model, config, records, rng, out_dir, "stage1")


def _downsample_mask(mask_full: Tensor, factor: int) -> Tensor:
    # Max-pool so any anomalous pixel marks its grid cell.
    b, h, w = mask_full.shape
    return mask_full.reshape(b, h // factor, factor, w // factor, factor).amax(dim=(2, 4))


def train_stage2(
    images: Tensor,
    model: DsrModel,
    config: RunConfig,
    seed: int = 0,
    supervised: tuple[Tensor, Tensor] | None = None,
    out_dir: str | Path | None = None,
    progress=None,
) -> TrainResult:
    """Train the detection branch on synthetically corrupted latents.

    Each batch image is encoded with the frozen encoder, its quantized grids
    are corrupted by the latent-space sampler (or by image-space smudges /
    uniform draws under the ablation flags), and the detector, subspace
    restrictions, and object-specific decoder are optimized jointly.  When
    ``supervised`` provides real annotated anomalies, a configurable share
    of each batch uses them directly, skipping injection; those samples
    contribute only to the segmentation term since no anomaly-free target
    exists for them.
    """
    _check_corpus(images, "stage-2 corpus")
    if model.stage_completed < 1:
        raise RuntimeError("stage 2 requires a completed stage-1 model (load the stage-1 checkpoint first)")
    cfg = config.stage2
    cfg.validate()
    _require_determinism()
    sup_images = sup_masks = None
    if supervised is not None:
        sup_images, sup_masks = supervised
        _check_corpus(sup_images, "supervised anomaly corpus")
        if sup_masks.shape[0] != sup_images.shape[0] or sup_masks.shape[-2:] != sup_images.shape[-2:]:
            raise ValueError("supervised masks must pair one full-resolution mask per image")

    model.set_stage_trainable(2)
    model.train()
    optimizer = torch.optim.Adam(model.trainable_parameters(), lr=cfg.learning_rate)
    rng = np.random.default_rng(seed)
    records: list[TrainLogRecord] = []
    counters = {"bounded_draws": 0, "uniform_draws": 0, "image_space_samples": 0, "supervised_samples": 0}
    lambda2 = 0.0 if cfg.loss_img_only else cfg.lambda2
    lambda3 = 0.0 if cfg.loss_feat_only else cfg.lambda3

    for step in range(1, cfg.iterations + 1):
        _maybe_decay(optimizer, cfg, step)
        batch = images[rng.integers(0, images.shape[0], cfg.batch_size)]
        seeds = spawn_seeds(int(rng.integers(0, 2**31)), cfg.batch_size)
        n_sup = 0
        if sup_images is not None:
            n_sup = min(int((rng.random(cfg.batch_size) < cfg.supervised_mix_ratio).sum()), cfg.batch_size)
        n_syn = cfg.batch_size - n_sup

        focal_terms: list[Tensor] = []
        feat_terms: list[Tensor] = []
        img_terms: list[Tensor] = []

        if n_syn:
            syn_batch = batch[:n_syn]
            with torch.no_grad():
                clean = model.encode(syn_batch)
            if cfg.image_space_anomalies:
                # Ablation: corrupt in image space and re-encode.
                pairs = [simulate_smudge(syn_batch[i], seeds[i], config.synthesis) for i in range(n_syn)]
                counters["image_space_samples"] += n_syn
                with torch.no_grad():
                    corrupted = model.encode(torch.stack([p[0] for p in pairs]))
                q_hi, q_lo = corrupted.quantized_hi.data, corrupted.quantized_lo.data
                mask_hi = _downsample_mask(torch.stack([p[1] for p in pairs]).float(), 4)
            else:
                parts_hi, parts_lo, parts_mask = [], [], []
                for i in range(n_syn):
                    injected = inject_anomalies(
                        _slice_quantized(clean.quantized_hi, i),
                        _slice_quantized(clean.quantized_lo, i),
                        model.codebook_hi,
                        model.codebook_lo,
                        cfg.lambda_s,
                        seeds[i],
                        config.synthesis,
                        uniform=cfg.random_sampling,
                    )
                    counters["uniform_draws" if cfg.random_sampling else "bounded_draws"] += injected.replaced_cells
                    parts_hi.append(injected.quantized_hi.data)
                    parts_lo.append(injected.quantized_lo.data)
                    parts_mask.append(injected.mask_hi)
                q_hi, q_lo = torch.stack(parts_hi), torch.stack(parts_lo)
                mask_hi = torch.stack(parts_mask).float()

            with torch.no_grad():
                image_general = model.decode_general(q_hi, q_lo)
            recon = model.decode_object_specific(q_hi, q_lo)
            mask_pred = model.detect(image_general, recon.image)
            focal_terms.append(focal_loss(mask_pred, mask_hi, cfg.focal_gamma, cfg.focal_alpha))
            feat_terms.append(
                (
                    squared_distance_mean(recon.restricted_hi, clean.quantized_hi.data.detach())
                    + squared_distance_mean(recon.restricted_lo, clean.quantized_lo.data.detach())
                )
                / 2
            )
            img_terms.append(squared_distance_mean(recon.image, syn_batch))

        if n_sup:
            idx = rng.integers(0, sup_images.shape[0], n_sup)
            real = sup_images[idx]
            real_masks = sup_masks[idx].float()
            with torch.no_grad():
                latents = model.encode(real)
                image_general = model.decode_general(latents.quantized_hi.data, latents.quantized_lo.data)
            recon = model.decode_object_specific(latents.quantized_hi.data, latents.quantized_lo.data)
            mask_pred = model.detect(image_general, recon.image)
            focal_terms.append(focal_loss(mask_pred, _downsample_mask(real_masks, 4), cfg.focal_gamma, cfg.focal_alpha))
            counters["supervised_samples"] += n_sup

        focal_term = torch.stack(focal_terms).mean()
        feature_term = torch.stack(feat_terms).mean() if feat_terms else torch.zeros(())
        image_term = torch.stack(img_terms).mean() if img_terms else torch.zeros(())
        loss = focal_term + lambda2 * feature_term + lambda3 * image_term

        terms = {
            "loss_total": float(loss.detach()),
            "loss_focal": float(focal_term.detach()),
            "loss_feature": float(feature_term.detach()),
            "loss_image": float(image_term.detach()),
        }
        _check_finite(loss, 2, step, terms)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        _record(records, progress, step, optimizer, terms, cfg)
        _interval_save(model, config, cfg, out_dir, step, rng, "stage2")

    model.stage_completed = max(model.stage_completed, 2)
    model.set_stage_trainable(3)
    return _finish(model, config, records, rng, out_dir, "stage2", counters)


def train_stage3(
    images: Tensor,
    model: DsrModel,
    config: RunConfig,
    seed: int = 0,
    out_dir: str | Path | None = None,
    progress=None,
) -> TrainResult:
    """Train the mask upsampler on smudged images with known paste masks.

    The detection path runs frozen on the smudged image; the upsampler is
    supervised with focal loss against the full-resolution smudge mask.
    """
    _check_corpus(images, "stage-3 corpus")
    if model.stage_completed < 2:
        raise RuntimeError("stage 3 requires a completed stage-2 model (load the stage-2 checkpoint first)")
    cfg = config.stage3
    cfg.validate()
    _require_determinism()
    model.set_stage_trainable(3)
    model.train()
    optimizer = torch.optim.Adam(model.trainable_parameters(), lr=cfg.learning_rate)
    rng = np.random.default_rng(seed)
    records: list[TrainLogRecord] = []
    counters = {"smudged_samples": 0}

    for step in range(1, cfg.iterations + 1):
        _maybe_decay(optimizer, cfg, step)
        batch = images[rng.integers(0, images.shape[0], cfg.batch_size)]
        seeds = spawn_seeds(int(rng.integers(0, 2**31)), cfg.batch_size)
        pairs = [simulate_smudge(batch[i], seeds[i], config.synthesis) for i in range(cfg.batch_size)]
        smudged_batch = torch.stack([p[0] for p in pairs])
        mask_full = torch.stack([p[1] for p in pairs]).float()
        counters["smudged_samples"] += cfg.batch_size

        with torch.no_grad():
            latents = model.encode(smudged_batch)
            image_general = model.decode_general(latents.quantized_hi.data, latents.quantized_lo.data)
            recon = model.decode_object_specific(latents.quantized_hi.data, latents.quantized_lo.data)
            mask_feature = model.detect(image_general, recon.image)

        refined = model.upsample_mask(smudged_batch, mask_feature)
        loss = focal_loss(refined, mask_full, cfg.focal_gamma, cfg.focal_alpha)

        terms = {"loss_total": float(loss.detach()), "loss_focal": float(loss.detach())}
        _check_finite(loss, 3, step, terms)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        _record(records, progress, step, optimizer, terms, cfg)
        _interval_save(model, config, cfg, out_dir, step, rng, "stage3")

    model.stage_completed = max(model.stage_completed, 3)
    return _finish(model, config, records, rng, out_dir, "stage3", counters)
