"""Dataset ingestion for the supported directory layouts.

Three layouts are recognized:

* ``mvtec``: ``<category>/train/good``, ``<category>/test/<defect>`` with
  masks under ``<category>/ground_truth/<defect>/<stem>_mask.png``.  The
  root may be a single category directory or a directory of categories.
* ``ksdd2``: a ``train``/``test`` directory of paired files, image
  ``<stem>.png`` next to mask ``<stem>_GT.png``; the label comes from the
  mask content.
* ``flat``: an ``images`` directory (or the root itself) plus an optional
  ``masks`` directory matched by file stem.

Images are resized bilinearly to the configured square resolution and
scaled to [0, 1]; masks are resized with nearest neighbor and re-binarized.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")

LAYOUTS = ("mvtec", "ksdd2", "flat")


class DatasetError(ValueError):
    """Raised with an itemized list of dataset problems."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("dataset problems:\n" + "\n".join(f"  - {p}" for p in self.problems))


@dataclass(frozen=True)
class ManifestEntry:
    image_path: Path
    label: int
    mask_path: Path | None
    category: str

    @property
    def image_id(self) -> str:
        return f"{self.category}/{self.image_path.stem}" if self.category else self.image_path.stem


@dataclass
class DatasetManifest:
    root: Path
    split: str
    layout: str
    resolution: int
    entries: list[ManifestEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=np.int64)

    def load_image(self, entry: ManifestEntry) -> torch.Tensor:
        return torch.from_numpy(load_image(entry.image_path, self.resolution))

    def load_mask(self, entry: ManifestEntry) -> torch.Tensor | None:
        if entry.mask_path is None:
            return None
        return torch.from_numpy(load_mask(entry.mask_path, self.resolution))

    def load_images(self) -> torch.Tensor:
        """The whole split as one (N, 3, H, W) tensor in [0, 1]."""
        if not self.entries:
            raise DatasetError([f"{self.root}: no images to load for split '{self.split}'"])
        return torch.stack([self.load_image(e) for e in self.entries])


def load_image(path: str | Path, resolution: int) -> np.ndarray:
    """Read an image file as a float32 (3, H, W) array in [0, 1]."""
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB").resize((resolution, resolution), Image.BILINEAR)
    except OSError as exc:
        raise DatasetError([f"unreadable image {path}: {exc}"]) from exc
    arr = np.asarray(rgb, dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def load_mask(path: str | Path, resolution: int) -> np.ndarray:
    """Read a mask file as a boolean (H, W) array (nearest, re-binarized)."""
    try:
        with Image.open(path) as img:
            gray = img.convert("L").resize((resolution, resolution), Image.NEAREST)
    except OSError as exc:
        raise DatasetError([f"unreadable mask {path}: {exc}"]) from exc
    return np.asarray(gray) > 0


def _mask_nonzero(path: Path) -> bool:
    with Image.open(path) as img:
        return bool(np.any(np.asarray(img.convert("L")) > 0))


def _image_files(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())


def _load_mvtec(root: Path, split: str, problems: list[str]) -> list[ManifestEntry]:
    if (root / "train").is_dir():
        categories = [root]
    else:
        categories = sorted(d for d in root.iterdir() if d.is_dir() and (d / "train").is_dir())
        if not categories:
            problems.append(f"{root}: no category directories with a train/ split found")
            return []

    entries: list[ManifestEntry] = []
    for category in categories:
        name = category.name
        if split == "train":
            good = category / "train" / "good"
            if not good.is_dir():
                problems.append(f"{category}: missing train/good directory")
                continue
            images = _image_files(good)
            if not images:
                problems.append(f"{good}: no training images")
                continue
            entries += [ManifestEntry(p, 0, None, name) for p in images]
        else:
            test_dir = category / "test"
            if not test_dir.is_dir():
                problems.append(f"{category}: missing test directory")
                continue
            ground_truth = category / "ground_truth"
            seen_masks: set[Path] = set()
            for defect_dir in sorted(d for d in test_dir.iterdir() if d.is_dir()):
                defect = defect_dir.name
                for image in _image_files(defect_dir):
                    if defect == "good":
                        entries.append(ManifestEntry(image, 0, None, name))
                        continue
                    mask = ground_truth / defect / f"{image.stem}_mask.png"
                    if mask.is_file():
                        seen_masks.add(mask)
                        entries.append(ManifestEntry(image, 1, mask, name))
                    else:
                        entries.append(ManifestEntry(image, 1, None, name))
            if ground_truth.is_dir():
                for defect_dir in sorted(d for d in ground_truth.iterdir() if d.is_dir()):
                    for mask in _image_files(defect_dir):
                        if mask not in seen_masks:
                            problems.append(f"orphan mask without a test image: {mask}")
    return entries


def _load_ksdd2(root: Path, split: str, problems: list[str], unsupervised: bool) -> list[ManifestEntry]:
    split_dir = root / split
    if not split_dir.is_dir():
        problems.append(f"{root}: missing {split}/ directory")
        return []
    files = _image_files(split_dir)
    images = [p for p in files if not p.stem.endswith("_GT")]
    masks = {p.stem[: -len("_GT")]: p for p in files if p.stem.endswith("_GT")}
    if not images:
        problems.append(f"{split_dir}: no images")
        return []
    orphan = set(masks) - {p.stem for p in images}
    for stem in sorted(orphan):
        problems.append(f"orphan mask without an image: {masks[stem]}")

    entries = []
    for image in images:
        mask = masks.get(image.stem)
        label = 0
        if mask is not None:
            try:
                label = int(_mask_nonzero(mask))
            except OSError as exc:
                problems.append(f"unreadable mask {mask}: {exc}")
                continue
        if split == "train" and unsupervised and label == 1:
            continue
        entries.append(ManifestEntry(image, label, mask, root.name))
    return entries


def _load_flat(root: Path, split: str, problems: list[str]) -> list[ManifestEntry]:
    images_dir = root / "images" if (root / "images").is_dir() else root
    masks_dir = root / "masks"
    images = _image_files(images_dir)
    if not images:
        problems.append(f"{images_dir}: no images")
        return []
    mask_by_stem: dict[str, Path] = {}
    if masks_dir.is_dir():
        for mask in _image_files(masks_dir):
            mask_by_stem[mask.stem] = mask
        orphan = set(mask_by_stem) - {p.stem for p in images}
        for stem in sorted(orphan):
            problems.append(f"orphan mask without an image: {mask_by_stem[stem]}")

    entries = []
    for image in images:
        mask = mask_by_stem.get(image.stem)
        label = 0
        if mask is not None:
            try:
                label = int(_mask_nonzero(mask))
            except OSError as exc:
                problems.append(f"unreadable mask {mask}: {exc}")
                continue
        entries.append(ManifestEntry(image, label, mask, root.name))
    return entries


def load_dataset(
    root: str | Path,
    layout: str = "flat",
    split: str = "train",
    resolution: int = 256,
    unsupervised: bool = True,
) -> DatasetManifest:
    """Build a manifest for one split of a dataset directory.

    Entries are ordered lexicographically by path.  Problems (missing
    directories, empty splits, orphan masks, unreadable files) are collected
    and raised together as a :class:`DatasetError`.
    """
    root = Path(root)
    if layout not in LAYOUTS:
        raise ValueError(f"unknown layout {layout!r} (expected one of {LAYOUTS})")
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    problems: list[str] = []
    if not root.is_dir():
        raise DatasetError([f"dataset root does not exist: {root}"])

    if layout == "mvtec":
        entries = _load_mvtec(root, split, problems)
    elif layout == "ksdd2":
        entries = _load_ksdd2(root, split, problems, unsupervised)
    else:
        entries = _load_flat(root, split, problems)

    if not entries and not problems:
        problems.append(f"{root}: no {split} images found for layout {layout}")
    if problems:
        raise DatasetError(problems)

    entries.sort(key=lambda e: str(e.image_path))
    return DatasetManifest(root=root, split=split, layout=layout, resolution=resolution, entries=entries)


def supervised_pairs(dirs: tuple[str, ...], resolution: int) -> tuple[torch.Tensor, torch.Tensor] | None:
    """Load annotated anomalous images from flat directories for mixing.

    Every directory must follow the flat layout and every image must come
    with a nonzero mask.
    """
    if not dirs:
        return None
    images, masks = [], []
    problems: list[str] = []
    for directory in dirs:
        manifest = load_dataset(directory, layout="flat", split="train", resolution=resolution)
        for entry in manifest.entries:
            if entry.mask_path is None or entry.label != 1:
                problems.append(f"supervised image without a nonzero mask: {entry.image_path}")
                continue
            images.append(manifest.load_image(entry))
            masks.append(manifest.load_mask(entry))
    if problems:
        raise DatasetError(problems)
    if not images:
        return None
    return torch.stack(images), torch.stack(masks)
