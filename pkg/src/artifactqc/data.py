"""Manifest loading, image I/O, splitting, k-fold plans and augmentation."""

from __future__ import annotations

import hashlib
import math
import string
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .core import DatasetManifest, ManifestError, TileSample


class SplitError(ValueError):
    pass


def load_manifest(path: str | Path, check_files: bool = True) -> DatasetManifest:
    """Parse a manifest file; relative paths resolve against its directory."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {path}", path=path) from None
    manifest = DatasetManifest.from_text(text, root=path.parent)
    if check_files:
        for entry in manifest.entries:
            for ref in (entry.image_path, entry.mask_path):
                if ref is not None and not manifest.resolve(ref).exists():
                    raise ManifestError(f"missing file: {manifest.resolve(ref)}", path=manifest.resolve(ref))
    return manifest


def write_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(manifest.to_text(), encoding="utf-8")
    return path


def read_image(path: str | Path) -> np.ndarray:
    """Read a raster tile as an HxWx3 float array in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def read_mask(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr > 127).astype(np.uint8)


def write_image(image: np.ndarray, path: str | Path) -> Path:
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)
    return Path(path)


def write_mask(mask: np.ndarray, path: str | Path) -> Path:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path)
    return Path(path)


def load_tiles(manifest: DatasetManifest) -> list[TileSample]:
    return [TileSample(e.tile_id, read_image(manifest.resolve(e.image_path))) for e in manifest.entries]


def load_segmentation_arrays(manifest: DatasetManifest) -> tuple[np.ndarray, np.ndarray]:
    """Stack images (N,H,W,3) and masks (N,H,W); every entry needs a mask."""
    images, masks = [], []
    for e in manifest.entries:
        if e.mask_path is None:
            raise ManifestError(f"tile {e.tile_id!r} has no mask")
        img = read_image(manifest.resolve(e.image_path))
        mask = read_mask(manifest.resolve(e.mask_path))
        if mask.shape != img.shape[:2]:
            raise ManifestError(f"mask/image size mismatch for {e.tile_id!r}")
        images.append(img)
        masks.append(mask)
    if not images:
        return np.zeros((0, 0, 0, 3)), np.zeros((0, 0, 0), dtype=np.uint8)
    return np.stack(images), np.stack(masks)


def load_severity_arrays(manifest: DatasetManifest) -> tuple[np.ndarray, np.ndarray]:
    """Stack images and severity class indices (low=0, mid=1, high=2)."""
    images, labels = [], []
    for e in manifest.entries:
        if e.severity is None:
            raise ManifestError(f"tile {e.tile_id!r} has no severity label")
        images.append(read_image(manifest.resolve(e.image_path)))
        labels.append(e.severity.index)
    return np.stack(images), np.asarray(labels, dtype=np.int64)


def sample_seed(seed: int, tile_id: str) -> int:
    """Per-sample seed, stable across processes and platforms."""
    digest = hashlib.sha256(f"{seed}:{tile_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class SplitSpec:
    train_ids: tuple[str, ...]
    valid_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    seed: int = 0

    def __post_init__(self):
        for name in ("train_ids", "valid_ids", "test_ids"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        parts = [set(self.train_ids), set(self.valid_ids), set(self.test_ids)]
        if sum(map(len, parts)) != len(set().union(*parts)):
            raise SplitError("train/valid/test id lists overlap")

    def to_text(self) -> str:
        lines = [f"# seed={self.seed}"]
        for part in ("train", "valid", "test"):
            lines += [f"{part}\t{i}" for i in getattr(self, f"{part}_ids")]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SplitSpec":
        seed = 0
        parts: dict[str, list[str]] = {"train": [], "valid": [], "test": []}
        for lineno, line in enumerate(text.splitlines(), start=1):
            if line.startswith("# seed="):
                seed = int(line.split("=", 1)[1])
            elif line.strip():
                part, _, tile_id = line.partition("\t")
                if part not in parts or not tile_id:
                    raise ManifestError(f"bad split record {line!r}", line=lineno)
                parts[part].append(tile_id)
        return cls(parts["train"], parts["valid"], parts["test"], seed)


def split_dataset(manifest: DatasetManifest, counts: tuple[int, int, int], seed: int) -> SplitSpec:
    """Shuffle ids with ``seed`` and cut them into train/valid/test of the given sizes."""
    if any(c < 0 for c in counts) or sum(counts) != len(manifest):
        raise SplitError(f"split counts {tuple(counts)} do not sum to manifest size {len(manifest)}")
    ids = np.array(manifest.ids, dtype=object)
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train, n_valid, _ = counts
    shuffled = [str(i) for i in ids[order]]
    return SplitSpec(
        shuffled[:n_train],
        shuffled[n_train : n_train + n_valid],
        shuffled[n_train + n_valid :],
        seed,
    )


def _fold_label(i: int) -> str:
    letters = string.ascii_uppercase
    label = ""
    i += 1
    while i:
        i, rem = divmod(i - 1, 26)
        label = letters[rem] + label
    return label


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple[tuple[str, ...], ...]
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "folds", tuple(tuple(f) for f in self.folds))

    @property
    def k(self) -> int:
        return len(self.folds)

    @property
    def labels(self) -> list[str]:
        return [_fold_label(i) for i in range(self.k)]

    def rotation(self, i: int, n_valid: int = 0) -> SplitSpec:
        """Rotation ``i`` tests on fold ``i``; ``n_valid`` ids are carved from the training folds."""
        train = [t for j, fold in enumerate(self.folds) if j != i for t in fold]
        if n_valid > len(train):
            raise SplitError(f"cannot carve {n_valid} validation ids from {len(train)} training ids")
        rng = np.random.default_rng([self.seed, i])
        order = rng.permutation(len(train))
        valid_idx = set(order[:n_valid].tolist())
        return SplitSpec(
            [t for j, t in enumerate(train) if j not in valid_idx],
            [train[j] for j in sorted(valid_idx)],
            self.folds[i],
            self.seed,
        )

    def rotations(self, n_valid: int = 0) -> list[SplitSpec]:
        return [self.rotation(i, n_valid) for i in range(self.k)]


def make_kfold(manifest: DatasetManifest, k: int, seed: int) -> FoldPlan:
    """Shuffle ids and partition them into ``k`` folds whose sizes differ by at most one."""
    if k < 2:
        raise SplitError(f"k must be >= 2, got {k}")
    if k > len(manifest):
        raise SplitError(f"k={k} exceeds manifest size {len(manifest)}")
    ids = manifest.ids
    order = np.random.default_rng(seed).permutation(len(ids))
    folds = [tuple(ids[j] for j in part) for part in np.array_split(order, k)]
    return FoldPlan(tuple(folds), seed)


@dataclass(frozen=True)
class AugmentParams:
    rescale: float = 1.0 / 255.0
    zoom_range: float = 0.3
    rotation_range_degrees: float = 15.0
    horizontal_flip: bool = True

    def __post_init__(self):
        if not self.rescale > 0:
            raise ValueError("rescale must be > 0")
        if self.zoom_range < 0 or self.rotation_range_degrees < 0:
            raise ValueError("zoom_range and rotation_range_degrees must be >= 0")


@dataclass(frozen=True)
class AugmentTransform:
    """One drawn geometric transform. ``zoom`` > 1 samples a wider field (zoom out)."""

    zoom: float = 1.0
    angle_degrees: float = 0.0
    flip: bool = False

    @property
    def is_identity(self) -> bool:
        return self.zoom == 1.0 and self.angle_degrees == 0.0 and not self.flip


def draw_transform(params: AugmentParams, rng: np.random.Generator) -> AugmentTransform:
    zoom = rng.uniform(1 - params.zoom_range, 1 + params.zoom_range) if params.zoom_range else 1.0
    r = params.rotation_range_degrees
    angle = rng.uniform(-r, r) if r else 0.0
    flip = bool(rng.random() < 0.5) if params.horizontal_flip else False
    return AugmentTransform(float(zoom), float(angle), flip)


def apply_transform(array: np.ndarray, transform: AugmentTransform, order: int) -> np.ndarray:
    """Warp a 2-D or HxWxC array about its centre; outside pixels become 0."""
    if transform.is_identity:
        return np.array(array, copy=True)
    h, w = array.shape[:2]
    theta = math.radians(transform.angle_degrees)
    cos, sin = math.cos(theta), math.sin(theta)
    # output (row, col) -> input (row, col): rotate, scale, then optional mirror on cols
    matrix = transform.zoom * np.array([[cos, -sin], [sin, cos]])
    if transform.flip:
        matrix = matrix @ np.array([[1.0, 0.0], [0.0, -1.0]])
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = centre - matrix @ centre

    def warp(plane):
        return ndimage.affine_transform(
            plane, matrix, offset=offset, order=order, mode="constant", cval=0.0, prefilter=False
        )

    if array.ndim == 2:
        return warp(array)
    return np.stack([warp(array[..., c]) for c in range(array.shape[2])], axis=-1)


def augment(
    image: np.ndarray,
    mask: np.ndarray | None,
    params: AugmentParams,
    seed: int | np.random.Generator,
    return_transform: bool = False,
):
    """Rescale then randomly zoom/rotate/flip; the mask follows the same geometry.

    Images use bilinear resampling, masks nearest-neighbour so they stay binary.
    """
    image = np.asarray(image, dtype=np.float64)
    if mask is not None:
        mask = np.asarray(mask)
        if mask.shape != image.shape[:2]:
            raise ValueError(f"mask shape {mask.shape} does not match image shape {image.shape[:2]}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    transform = draw_transform(params, rng)
    out = np.clip(image * params.rescale, 0.0, 1.0)
    out = np.clip(apply_transform(out, transform, order=1), 0.0, 1.0)
    out_mask = None
    if mask is not None:
        out_mask = (apply_transform(mask.astype(np.float64), transform, order=0) > 0.5).astype(np.uint8)
    if return_transform:
        return out, out_mask, transform
    return out, out_mask


def balance_by_oversampling(manifest: DatasetManifest, seed: int, by: str = "severity") -> DatasetManifest:
    """Duplicate entries of minority classes until every class has the majority count.

    Duplicates get ids ``<tile_id>#dup<n>`` and point at the same files; augmentation
    during training makes them distinct samples.
    """
    def key(e):
        value = getattr(e, by)
        return value.value if value is not None else None

    groups: dict = {}
    for e in manifest.entries:
        groups.setdefault(key(e), []).append(e)
    groups.pop(None, None)
    if not groups:
        return manifest
    target = max(len(g) for g in groups.values())
    rng = np.random.default_rng(seed)
    extra = []
    for name in sorted(groups):
        group = groups[name]
        picks = rng.choice(len(group), size=target - len(group), replace=True) if len(group) < target else []
        for n, j in enumerate(picks):
            src = group[int(j)]
            extra.append(type(src)(f"{src.tile_id}#dup{n}", src.image_path, src.mask_path, src.severity, src.artifact_kind))
    return DatasetManifest(manifest.entries + tuple(extra), manifest.root)
