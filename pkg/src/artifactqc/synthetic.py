"""Synthetic stand-ins for stained tissue tiles with fold/bubble artifacts.

Real slides are not shipped; these generators give reproducible tiles with
exactly known masks and severity labels for tests and desk-scale runs.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import ArtifactKind, DatasetManifest, ManifestEntry, SEVERITY_ORDER
from .data import write_image, write_mask

TISSUE_RGB = np.array([0.93, 0.72, 0.82])
FOLD_RGB = np.array([0.35, 0.12, 0.40])
BUBBLE_RGB = np.array([0.97, 0.97, 0.99])

# fraction of tile area covered by the artifact, per severity class
SEVERITY_AREA = {"low": (0.02, 0.06), "mid": (0.10, 0.18), "high": (0.26, 0.40)}


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    noise = ndimage.gaussian_filter(rng.normal(size=(h, w)), sigma=2.0)
    noise /= np.abs(noise).max() + 1e-12
    return np.clip(TISSUE_RGB[None, None, :] + 0.05 * noise[..., None], 0.0, 1.0)


def ellipse_mask(h: int, w: int, centre, radii, angle: float = 0.0) -> np.ndarray:
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = rows - centre[0], cols - centre[1]
    c, s = np.cos(angle), np.sin(angle)
    u = (c * dx + s * dy) / radii[1]
    v = (-s * dx + c * dy) / radii[0]
    return (u * u + v * v <= 1.0).astype(np.uint8)


def blob_tile(
    rng: np.random.Generator,
    size: int = 64,
    kind: ArtifactKind = ArtifactKind.TISSUE_FOLD,
    area: float | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """One tile and its artifact mask; ``area`` fixes the target covered fraction."""
    h = w = size
    if area is None:
        area = rng.uniform(0.08, 0.35)
    aspect = rng.uniform(0.6, 1.0)
    ry = np.sqrt(area * h * w / np.pi / aspect)
    rx = ry * aspect
    margin = min(ry, rx)
    centre = (rng.uniform(margin, h - margin), rng.uniform(margin, w - margin))
    mask = ellipse_mask(h, w, centre, (ry, rx), rng.uniform(0, np.pi))
    image = _background(rng, h, w)
    colour = FOLD_RGB if ArtifactKind(kind) is ArtifactKind.TISSUE_FOLD else BUBBLE_RGB
    image = np.where(mask[..., None] == 1, colour[None, None, :], image)
    image = np.clip(image + rng.normal(scale=0.02, size=image.shape), 0.0, 1.0)
    return image, mask


def blob_dataset(n: int, size: int = 64, seed: int = 0, kind=ArtifactKind.TISSUE_FOLD):
    rng = np.random.default_rng(seed)
    pairs = [blob_tile(rng, size, kind) for _ in range(n)]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


def severity_dataset(n_per_class: int, size: int = 32, seed: int = 0):
    """Tiles whose artifact area grows with severity; labels low=0, mid=1, high=2."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for label, sev in enumerate(SEVERITY_ORDER):
        lo, hi = SEVERITY_AREA[sev.value]
        for _ in range(n_per_class):
            images.append(blob_tile(rng, size, ArtifactKind.TISSUE_FOLD, rng.uniform(lo, hi))[0])
            labels.append(label)
    order = rng.permutation(len(labels))
    return np.stack(images)[order], np.asarray(labels, dtype=np.int64)[order]


def write_segmentation_corpus(root: str | Path, n: int, size: int = 64, seed: int = 0, kind=ArtifactKind.TISSUE_FOLD) -> DatasetManifest:
    """Write PNG tiles and masks under ``root`` and return their manifest."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    images, masks = blob_dataset(n, size, seed, kind)
    entries = []
    for i, (img, mask) in enumerate(zip(images, masks)):
        tile_id = f"{ArtifactKind(kind).value}_{i:04d}"
        write_image(img, root / "images" / f"{tile_id}.png")
        write_mask(mask, root / "masks" / f"{tile_id}.png")
        entries.append(ManifestEntry(tile_id, f"images/{tile_id}.png", f"masks/{tile_id}.png", None, kind))
    return DatasetManifest(tuple(entries), root)


def write_severity_corpus(root: str | Path, n_per_class: int, size: int = 32, seed: int = 0) -> DatasetManifest:
    root = Path(root)
    (root / "severity").mkdir(parents=True, exist_ok=True)
    images, labels = severity_dataset(n_per_class, size, seed)
    entries = []
    for i, (img, label) in enumerate(zip(images, labels)):
        sev = SEVERITY_ORDER[label]
        tile_id = f"sev_{i:04d}"
        write_image(img, root / "severity" / f"{tile_id}.png")
        entries.append(ManifestEntry(tile_id, f"severity/{tile_id}.png", None, sev, ArtifactKind.TISSUE_FOLD))
    return DatasetManifest(tuple(entries), root)


def blank_tile(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    """Artifact-free tissue background."""
    return np.clip(_background(rng, size, size) + rng.normal(scale=0.02, size=(size, size, 3)), 0.0, 1.0)


def synthetic_slide(areas, tile_side: int = 256, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Image and mask assembled from a grid of tiles.

    ``areas`` is a 2-D nested list of artifact fractions, one per tile; ``None``
    leaves that tile artifact-free.
    """
    rng = np.random.default_rng(seed)
    rows = []
    mask_rows = []
    for row in areas:
        tiles, masks = [], []
        for area in row:
            if area is None:
                tiles.append(blank_tile(rng, tile_side))
                masks.append(np.zeros((tile_side, tile_side), dtype=np.uint8))
            else:
                img, mask = blob_tile(rng, tile_side, ArtifactKind.TISSUE_FOLD, area)
                tiles.append(img)
                masks.append(mask)
        rows.append(np.concatenate(tiles, axis=1))
        mask_rows.append(np.concatenate(masks, axis=1))
    return np.concatenate(rows, axis=0), np.concatenate(mask_rows, axis=0)
