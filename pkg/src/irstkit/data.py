"""Manifest-driven sample loading and batching."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .pgm import load_pgm
from .synth import DatasetManifest, ManifestEntry, load_manifest
from .tensor import Tensor


@dataclass
class Sample:
    image: np.ndarray       # (H, W) float in [0,1]
    mask: np.ndarray        # (H, W) uint8 in {0,1}
    domain_id: str


def load_sample(root: Path, entry: ManifestEntry) -> Sample:
    image = load_pgm(Path(root) / entry.image_path)
    mask_raw = load_pgm(Path(root) / entry.mask_path)
    mask = (mask_raw > 0.5).astype(np.uint8)
    if image.shape != mask.shape:
        raise ValueError(
            f"image/mask size mismatch for {entry.image_path}: "
            f"{image.shape} vs {mask.shape}"
        )
    return Sample(image=image, mask=mask, domain_id=entry.domain_id)


def load_split(manifests: list[DatasetManifest], split: str | None) -> list[Sample]:
    """Materialize samples of the given split ('train'/'val', None for all)."""
    samples = []
    for man in manifests:
        for entry in man.entries:
            if split is None or entry.split == split:
                samples.append(load_sample(man.root, entry))
    return samples


def load_manifests(paths) -> list[DatasetManifest]:
    return [load_manifest(p) for p in paths]


def domains_of(manifests: list[DatasetManifest]) -> list[str]:
    seen: list[str] = []
    for man in manifests:
        for entry in man.entries:
            if entry.domain_id not in seen:
                seen.append(entry.domain_id)
    return sorted(seen)


def batch_tensor(samples: list[Sample], dtype=np.float32) -> tuple[Tensor, Tensor, list[str]]:
    """Stack samples into (images, masks, domain ids) NCHW tensors."""
    imgs = np.stack([s.image for s in samples])[:, None].astype(dtype)
    masks = np.stack([s.mask for s in samples])[:, None].astype(dtype)
    return Tensor(imgs), Tensor(masks), [s.domain_id for s in samples]
