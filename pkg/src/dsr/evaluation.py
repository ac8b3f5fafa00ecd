"""Score extraction, detection metrics, and report/overlay emission.

AUROC uses the midrank (Mann-Whitney) statistic; average precision is the
step-wise sum over descending unique scores with ties grouped.  Both are
checked against brute-force threshold sweeps in the test suite.  The
image-level score is the global maximum of the segmentation map after a
21x21 zero-padded mean filter.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import torch
from torch import Tensor

from .codebook import Quantized
from .data import DatasetManifest
from .networks import DsrModel
from .synthesis import SynthesisConfig, inject_anomalies, spawn_seeds

SMOOTHING_KERNEL = 21


def image_score(segmentation: Tensor | np.ndarray) -> float:
    """Global max of the map after a 21x21 zero-padded averaging filter."""
    arr = np.asarray(segmentation.detach().cpu() if isinstance(segmentation, Tensor) else segmentation)
    arr = np.squeeze(arr)
    if arr.ndim != 2:
        raise ValueError(f"expected a single 2D map, got shape {arr.shape}")
    k = SMOOTHING_KERNEL
    pad = k // 2
    padded = np.zeros((arr.shape[0] + 2 * pad, arr.shape[1] + 2 * pad), dtype=np.float64)
    padded[pad:-pad, pad:-pad] = arr
    # Integral image: window sums without forming k*k products.
    integral = np.zeros((padded.shape[0] + 1, padded.shape[1] + 1), dtype=np.float64)
    integral[1:, 1:] = padded.cumsum(axis=0).cumsum(axis=1)
    sums = (
        integral[k:, k:]
        - integral[:-k, k:]
        - integral[k:, :-k]
        + integral[:-k, :-k]
    )
    return float((sums / (k * k)).max())


def _validate_binary(labels: np.ndarray, name: str) -> None:
    if not np.isin(labels, (0, 1)).all():
        raise ValueError(f"{name} must be binary 0/1")


def auroc(scores, labels) -> float:
    """Area under the ROC curve via midranks; both classes must appear."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have equal length")
    _validate_binary(labels, "labels")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both classes present")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(scores.size, dtype=np.float64)
    # Midranks: tie groups share the average of their 1-based positions.
    boundaries = np.flatnonzero(np.diff(sorted_scores)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [scores.size]))
    for start, end in zip(starts, ends):
        ranks[order[start:end]] = (start + end + 1) / 2.0
    rank_sum = ranks[labels == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Step-interpolated area under the precision-recall curve, ties grouped."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have equal length")
    _validate_binary(labels, "labels")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("average precision needs at least one positive")
    order = np.argsort(-scores, kind="mergesort")
    sorted_labels = labels[order].astype(np.float64)
    sorted_scores = scores[order]
    tp = np.cumsum(sorted_labels)
    fp = np.cumsum(1.0 - sorted_labels)
    # Evaluate at the last element of every tie group.
    group_end = np.flatnonzero(np.diff(sorted_scores) != 0)
    group_end = np.concatenate((group_end, [scores.size - 1]))
    tp_g = tp[group_end]
    fp_g = fp[group_end]
    precision = tp_g / (tp_g + fp_g)
    recall = tp_g / n_pos
    return float(np.sum(np.diff(recall, prepend=0.0) * precision))


@dataclass
class ImageResult:
    image_id: str
    score: float
    label: int


@dataclass
class EvalReport:
    per_image: list[ImageResult] = field(default_factory=list)
    auroc_det: float | None = None
    ap_det: float | None = None
    ap_loc: float | None = None
    pixel_pooling: str = "dataset"
    notes: list[str] = field(default_factory=list)

    def scores(self) -> np.ndarray:
        return np.array([r.score for r in self.per_image], dtype=np.float64)

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.per_image], dtype=np.int64)


class MissingMaskError(ValueError):
    def __init__(self, image_ids: list[str]):
        self.image_ids = list(image_ids)
        super().__init__(
            "pixel metrics requested but ground-truth masks are missing for: " + ", ".join(self.image_ids)
        )


def _aggregate(report: EvalReport, pixel_scores, pixel_labels, per_image_pixels) -> None:
    labels = report.labels()
    if labels.size and 0 < labels.sum() < labels.size:
        report.auroc_det = auroc(report.scores(), labels)
        report.ap_det = average_precision(report.scores(), labels)
    else:
        report.notes.append("image-level metrics unavailable: need both normal and anomalous images")
    if report.pixel_pooling == "dataset":
        if pixel_scores is not None and pixel_labels.sum() > 0:
            report.ap_loc = average_precision(pixel_scores, pixel_labels)
        elif pixel_scores is not None:
            report.notes.append("pixel metrics unavailable: no anomalous pixels in the set")
    else:
        values = [average_precision(s, m) for s, m in per_image_pixels if m.sum() > 0]
        if values:
            report.ap_loc = float(np.mean(values))
        else:
            report.notes.append("pixel metrics unavailable: no anomalous pixels in the set")


def evaluate_dataset(
    model: DsrModel,
    manifest: DatasetManifest,
    no_upsampler: bool = False,
    pixel_pooling: str = "dataset",
    pixel_metrics: bool = True,
) -> EvalReport:
    """Run full inference over a test manifest and aggregate the metrics.

    Image scores come from the feature-resolution map; pixel scores from the
    refined full-resolution map (or a bilinear upsampling of the coarse map
    when ``no_upsampler`` is set).  Pixel average precision pools all test
    pixels by default; ``pixel_pooling='image'`` averages per-image values.
    """
    if pixel_pooling not in ("dataset", "image"):
        raise ValueError(f"pixel_pooling must be 'dataset' or 'image', got {pixel_pooling!r}")
    report = EvalReport(pixel_pooling=pixel_pooling)
    if pixel_metrics:
        missing = [e.image_id for e in manifest.entries if e.label == 1 and e.mask_path is None]
        if missing:
            raise MissingMaskError(missing)

    model.eval()
    pixel_scores: list[np.ndarray] = []
    pixel_labels: list[np.ndarray] = []
    per_image_pixels: list[tuple[np.ndarray, np.ndarray]] = []
    for entry in manifest.entries:
        image = manifest.load_image(entry).unsqueeze(0)
        with torch.no_grad():
            maps = model.forward_maps(image, use_upsampler=not no_upsampler)
        report.per_image.append(
            ImageResult(entry.image_id, image_score(maps.mask_feature[0, 0]), entry.label)
        )
        if pixel_metrics:
            mask = manifest.load_mask(entry)
            truth = (
                mask.numpy().astype(np.int64)
                if mask is not None
                else np.zeros(image.shape[-2:], dtype=np.int64)
            )
            scores = maps.mask_full[0, 0].numpy().astype(np.float64)
            pixel_scores.append(scores.reshape(-1))
            pixel_labels.append(truth.reshape(-1))
            per_image_pixels.append((scores.reshape(-1), truth.reshape(-1)))

    _aggregate(
        report,
        np.concatenate(pixel_scores) if pixel_scores else None,
        np.concatenate(pixel_labels) if pixel_labels else None,
        per_image_pixels,
    )
    return report


def evaluate_with_injections(
    model: DsrModel,
    images: Tensor,
    lambda_s: float = 0.05,
    seed: int = 0,
    synthesis: SynthesisConfig | None = None,
    pixel_pooling: str = "dataset",
) -> EvalReport:
    """Score held-out images clean and with fresh latent-space injections.

    Every image contributes a normal sample (clean inference) and an
    anomalous one (its quantized grids corrupted by the bounded sampler).
    Pixel metrics are computed at feature resolution against the injection
    masks, which serve as exact ground truth.
    """
    synthesis = synthesis or SynthesisConfig()
    report = EvalReport(pixel_pooling=pixel_pooling)
    model.eval()
    pixel_scores: list[np.ndarray] = []
    pixel_labels: list[np.ndarray] = []
    per_image_pixels: list[tuple[np.ndarray, np.ndarray]] = []
    seeds = spawn_seeds(seed, images.shape[0])

    for i in range(images.shape[0]):
        image = images[i : i + 1]
        with torch.no_grad():
            latents = model.encode(image)
            clean_general = model.decode_general(latents.quantized_hi.data, latents.quantized_lo.data)
            clean_recon = model.decode_object_specific(latents.quantized_hi.data, latents.quantized_lo.data)
            clean_map = model.detect(clean_general, clean_recon.image)[0, 0]

            injected = inject_anomalies(
                Quantized(latents.quantized_hi.data[0], latents.quantized_hi.indices[0]),
                Quantized(latents.quantized_lo.data[0], latents.quantized_lo.indices[0]),
                model.codebook_hi,
                model.codebook_lo,
                lambda_s,
                seeds[i],
                synthesis,
            )
            q_hi = injected.quantized_hi.data.unsqueeze(0)
            q_lo = injected.quantized_lo.data.unsqueeze(0)
            anom_general = model.decode_general(q_hi, q_lo)
            anom_recon = model.decode_object_specific(q_hi, q_lo)
            anom_map = model.detect(anom_general, anom_recon.image)[0, 0]

        report.per_image.append(ImageResult(f"image{i:04d}/clean", image_score(clean_map), 0))
        report.per_image.append(ImageResult(f"image{i:04d}/injected", image_score(anom_map), 1))

        clean_scores = clean_map.numpy().astype(np.float64).reshape(-1)
        anom_scores = anom_map.numpy().astype(np.float64).reshape(-1)
        zeros = np.zeros(clean_scores.size, dtype=np.int64)
        truth = injected.mask_hi.numpy().astype(np.int64).reshape(-1)
        pixel_scores += [clean_scores, anom_scores]
        pixel_labels += [zeros, truth]
        per_image_pixels += [(clean_scores, zeros), (anom_scores, truth)]

    _aggregate(report, np.concatenate(pixel_scores), np.concatenate(pixel_labels), per_image_pixels)
    return report


def write_report(report: EvalReport, out_dir: str | Path) -> dict[str, Path]:
    """Emit the delimited files, a human-readable table, and metric figures."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}

    per_image = out_dir / "per_image.tsv"
    lines = ["image_id\tlabel\tscore"]
    lines += [f"{r.image_id}\t{r.label}\t{r.score!r}" for r in report.per_image]
    per_image.write_text("\n".join(lines) + "\n", encoding="utf-8")
    paths["per_image"] = per_image

    metrics = out_dir / "metrics.tsv"
    rows = ["metric\tvalue"]
    for name, value in (("auroc_det", report.auroc_det), ("ap_det", report.ap_det), ("ap_loc", report.ap_loc)):
        rows.append(f"{name}\t{'' if value is None else repr(value)}")
    rows.append(f"pixel_pooling\t{report.pixel_pooling}")
    metrics.write_text("\n".join(rows) + "\n", encoding="utf-8")
    paths["metrics"] = metrics

    table = out_dir / "report.txt"
    fmt = "{:<40} {:>6} {:>12}"
    text = [fmt.format("image", "label", "score"), "-" * 60]
    text += [fmt.format(r.image_id[:40], r.label, f"{r.score:.6f}") for r in report.per_image]
    text.append("-" * 60)
    for name, value in (("image AUROC", report.auroc_det), ("image AP", report.ap_det), ("pixel AP", report.ap_loc)):
        text.append(f"{name}: {'n/a' if value is None else f'{value:.4f}'}")
    for note in report.notes:
        text.append(f"note: {note}")
    table.write_text("\n".join(text) + "\n", encoding="utf-8")
    paths["report"] = table

    labels = report.labels()
    if labels.size and 0 < labels.sum() < labels.size:
        paths["curves"] = _write_curves(report, out_dir / "curves.png")
    return paths


def _write_curves(report: EvalReport, path: Path) -> Path:
    scores, labels = report.scores(), report.labels()
    thresholds = np.unique(scores)[::-1]
    tpr = [(scores[labels == 1] >= t).mean() for t in thresholds]
    fpr = [(scores[labels == 0] >= t).mean() for t in thresholds]
    precision = [
        (labels[scores >= t].mean() if (scores >= t).any() else 1.0) for t in thresholds
    ]
    recall = tpr

    fig, (ax_roc, ax_pr) = plt.subplots(1, 2, figsize=(9, 4))
    ax_roc.plot([0, *fpr, 1], [0, *tpr, 1], marker=".")
    ax_roc.plot([0, 1], [0, 1], linestyle=":", color="gray")
    ax_roc.set_xlabel("false positive rate")
    ax_roc.set_ylabel("true positive rate")
    ax_roc.set_title(f"ROC (AUROC={report.auroc_det:.3f})" if report.auroc_det is not None else "ROC")
    ax_pr.plot(recall, precision, marker=".")
    ax_pr.set_xlabel("recall")
    ax_pr.set_ylabel("precision")
    ax_pr.set_title(f"PR (AP={report.ap_det:.3f})" if report.ap_det is not None else "PR")
    ax_pr.set_ylim(0, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def emit_overlays(
    image: Tensor | np.ndarray,
    mask_full: Tensor | np.ndarray,
    threshold: float,
    out_dir: str | Path,
    stem: str = "sample",
) -> dict[str, Path]:
    """Write the input, heatmap, and binarized overlay as lossless PNGs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    img = np.asarray(image.detach().cpu() if isinstance(image, Tensor) else image, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 3:
        img = img.transpose(1, 2, 0)
    img = np.clip(img, 0.0, 1.0)
    heat = np.squeeze(
        np.asarray(mask_full.detach().cpu() if isinstance(mask_full, Tensor) else mask_full, dtype=np.float64)
    )
    if heat.shape != img.shape[:2]:
        raise ValueError(f"mask shape {heat.shape} does not match image {img.shape[:2]}")

    binary = heat >= threshold
    overlay = img.copy()
    overlay[binary] = 0.55 * overlay[binary] + 0.45 * np.array([1.0, 0.0, 0.0])

    paths = {}
    for name, array, kwargs in (
        ("input", img, {}),
        ("heatmap", heat, {"cmap": "inferno", "vmin": 0.0, "vmax": 1.0}),
        ("overlay", overlay, {}),
    ):
        path = out_dir / f"{stem}_{name}.png"
        plt.imsave(path, array, **kwargs)
        paths[name] = path
    return paths
