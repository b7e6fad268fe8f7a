"""Dataset manifests, image ingestion and seeded data loaders.

A manifest is a YAML file::

    root: images/
    labels: [cat, dog]
    splits:
      train:
        - [train/cat_001.png, 0]
      val:
        - [val/dog_004.png, 1]
    adversarial:                 # optional, baseline mode only
        - [adv/dog_004.png, val/dog_004.png, 1]

Paths are relative to ``root``, which is itself relative to the manifest.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any

import torch
import torchvision.transforms.functional as TF
from PIL import Image
from ruamel.yaml import YAML
from torch.utils.data import DataLoader, TensorDataset

from .errors import ConfigurationError, InputContractError
from .models import AdversarialBatch, ImageBatch

if TYPE_CHECKING:
    from .config import RunConfig

logger = logging.getLogger(__name__)

SPLITS = ("train", "val")


@dataclass
class DatasetManifest:
    root: Path
    labels: list[str]
    splits: dict[str, list[tuple[str, int]]]
    adversarial: list[tuple[str, str, int]] = field(default_factory=list)
    name: str = ""

    def resolve(self, relative: str) -> Path:
        return self.root / relative


@dataclass
class DatasetSplits:
    """Clean train and val images of one dataset."""

    name: str
    class_names: list[str]
    train: ImageBatch
    val: ImageBatch

    def split(self, name: str) -> ImageBatch:
        if name not in SPLITS:
            raise ConfigurationError(f"unknown split '{name}'. Allowed: {', '.join(SPLITS)}")
        batch: ImageBatch = getattr(self, name)
        return batch


def _pair(entry: Any, where: str) -> tuple[str, int]:
    if not isinstance(entry, list) or len(entry) != 2:
        raise ConfigurationError(f"{where}: expected [path, label], got {entry!r}")
    return str(entry[0]), int(entry[1])


def load_manifest(path: str | Path) -> DatasetManifest:
    """Read a manifest and check that every file exists and every label is in range.

    Raises:
        FileNotFoundError: If the manifest or a listed image is missing.
        ConfigurationError: On a malformed manifest or an out-of-range label.
    """
    src = Path(path)
    if not src.is_file():
        raise FileNotFoundError(f"dataset manifest not found: {src}")
    data = YAML(typ="safe", pure=True).load(src.read_text(encoding="utf-8")) or {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{src}: expected a key-value mapping at the top level")
    unknown = set(data) - {"root", "labels", "splits", "adversarial", "name"}
    if unknown:
        raise ConfigurationError(f"{src}: unknown manifest key(s): {', '.join(sorted(unknown))}")

    labels = [str(x) for x in data.get("labels") or []]
    if len(labels) < 2:
        raise ConfigurationError(f"{src}: 'labels' needs at least two class names")
    raw_splits = data.get("splits") or {}
    missing = [s for s in SPLITS if not raw_splits.get(s)]
    if missing:
        raise ConfigurationError(f"{src}: missing or empty split(s): {', '.join(missing)}")

    manifest = DatasetManifest(
        root=(src.parent / str(data.get("root", "."))).resolve(),
        labels=labels,
        splits={
            s: [_pair(e, f"{src}: splits.{s}") for e in raw_splits[s]] for s in SPLITS
        },
        name=str(data.get("name") or src.stem),
    )
    for entry in data.get("adversarial") or []:
        if not isinstance(entry, list) or len(entry) != 3:
            raise ConfigurationError(f"{src}: adversarial entries are [adv, clean, label], got {entry!r}")
        manifest.adversarial.append((str(entry[0]), str(entry[1]), int(entry[2])))

    num_classes = len(labels)
    listed = [(p, y) for items in manifest.splits.values() for p, y in items]
    listed += [(a, y) for a, _, y in manifest.adversarial]
    listed += [(c, y) for _, c, y in manifest.adversarial]
    for rel, label in listed:
        if not 0 <= label < num_classes:
            raise ConfigurationError(f"{src}: label {label} of '{rel}' is outside [0, {num_classes})")
        if not manifest.resolve(rel).is_file():
            raise FileNotFoundError(f"{src}: listed image not found: {manifest.resolve(rel)}")
    return manifest


def load_image(path: Path, image_size: int, channels: int) -> torch.Tensor:
    """One image as a [C, H, W] float tensor in [0, 1]."""
    mode = "L" if channels == 1 else "RGB"
    with Image.open(path) as img:
        img = img.convert(mode)
        img = TF.resize(img, [image_size, image_size], antialias=True)
        tensor: torch.Tensor = TF.to_tensor(img)
    if tensor.shape[0] != channels:
        raise InputContractError(f"{path}: decoded {tensor.shape[0]} channels, expected {channels}")
    return tensor


def load_images(
    manifest: DatasetManifest, items: list[tuple[str, int]], image_size: int, channels: int
) -> ImageBatch:
    images = torch.stack([load_image(manifest.resolve(p), image_size, channels) for p, _ in items])
    labels = torch.tensor([y for _, y in items], dtype=torch.long)
    return ImageBatch(images, labels)


def load_manifest_dataset(path: str | Path, image_size: int, channels: int) -> DatasetSplits:
    manifest = load_manifest(path)
    return DatasetSplits(
        name=manifest.name,
        class_names=list(manifest.labels),
        train=load_images(manifest, manifest.splits["train"], image_size, channels),
        val=load_images(manifest, manifest.splits["val"], image_size, channels),
    )


def load_adversarial_pairs(path: str | Path, image_size: int, channels: int) -> AdversarialBatch:
    """Externally produced adversarial images next to their clean counterparts."""
    manifest = load_manifest(path)
    if not manifest.adversarial:
        raise ConfigurationError(f"{path}: manifest lists no 'adversarial' pairs")
    clean = load_images(manifest, [(c, y) for _, c, y in manifest.adversarial], image_size, channels)
    adversarial = torch.stack(
        [load_image(manifest.resolve(a), image_size, channels) for a, _, _ in manifest.adversarial]
    )
    return AdversarialBatch(clean=clean, adversarial=adversarial)


def load_dataset(cfg: RunConfig, manifest: str | None = None) -> DatasetSplits:
    """The configured dataset, or ``manifest`` when given; synthetic when neither is set."""
    source = manifest or cfg.dataset
    if source is None:
        from .desk import synthetic_dataset

        return synthetic_dataset(
            cfg.class_names,
            per_class=cfg.synthetic_per_class,
            image_size=cfg.image_size,
            channels=cfg.channels,
            val_fraction=cfg.val_fraction,
            seed=cfg.seed,
            name=cfg.dataset_name,
        )
    splits = load_manifest_dataset(source, cfg.image_size, cfg.channels)
    if splits.class_names != cfg.class_names:
        logger.info("using class names from %s: %s", source, splits.class_names)
    return splits


def make_loader(batch: ImageBatch, batch_size: int, seed: int, shuffle: bool = True) -> DataLoader:
    """A single-process loader whose order depends only on ``seed``."""
    generator = torch.Generator().manual_seed(seed)
    return DataLoader(
        TensorDataset(batch.images, batch.labels),
        batch_size=batch_size,
        shuffle=shuffle,
        generator=generator,
    )


def sample_batch(batch: ImageBatch, size: int, seed: int) -> ImageBatch:
    """``size`` distinct samples (all of them when fewer), drawn with a seeded generator."""
    if len(batch) == 0:
        raise InputContractError("cannot sample from an empty batch")
    generator = torch.Generator().manual_seed(seed)
    index = torch.randperm(len(batch), generator=generator)[: min(size, len(batch))]
    return batch.subset(index)
