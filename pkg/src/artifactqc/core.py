"""Domain types, run configuration and the manifest record format."""

from __future__ import annotations

import dataclasses
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np


class ArtifactKind(str, Enum):
    TISSUE_FOLD = "tissue_fold"
    AIR_BUBBLE = "air_bubble"


class Severity(str, Enum):
    LOW = "low"
    MID = "mid"
    HIGH = "high"

    @property
    def index(self) -> int:
        return SEVERITY_ORDER.index(self)


# Class-index order used by every classifier and probability vector.
SEVERITY_ORDER = (Severity.LOW, Severity.MID, Severity.HIGH)


class Optimizer(str, Enum):
    ADAM = "adam"
    ADAMAX = "adamax"
    RMSPROP = "rmsprop"
    SGD = "sgd"


class Loss(str, Enum):
    DICE_COEF_LOSS = "dice_coef_loss"
    BINARY_CROSS_ENTROPY = "binary_cross_entropy"
    DICE_BCE = "dice_bce"
    CATEGORICAL_CROSS_ENTROPY = "categorical_cross_entropy"
    KL_DIVERGENCE = "kl_divergence"


class Architecture(str, Enum):
    DOUBLE_UNET = "double_unet"
    RESUNET_PP = "resunet_pp"
    UNET_BASELINE = "unet_baseline"


class ManifestError(ValueError):
    """Malformed manifest or config text, or a dangling file reference."""

    def __init__(self, message: str, line: int | None = None, path: str | Path | None = None):
        self.line = line
        self.path = path
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class TileSample:
    id: str
    image: np.ndarray
    source_slide: str = ""
    origin: tuple[int, int] = (0, 0)
    padded: bool = False

    def __post_init__(self):
        image = np.asarray(self.image, dtype=np.float64)
        if image.ndim != 3 or image.shape[2] != 3 or image.shape[0] == 0 or image.shape[1] == 0:
            raise ValueError(f"tile {self.id!r}: expected a non-empty HxWx3 image, got {image.shape}")
        if image.min() < 0.0 or image.max() > 1.0:
            raise ValueError(f"tile {self.id!r}: pixel values must lie in [0, 1]")
        object.__setattr__(self, "image", _freeze(image))
        object.__setattr__(self, "origin", (int(self.origin[0]), int(self.origin[1])))

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[:2]


@dataclass(frozen=True)
class MaskSample:
    tile_id: str
    mask: np.ndarray
    artifact_kind: ArtifactKind

    def __post_init__(self):
        mask = np.asarray(self.mask)
        if mask.ndim != 2:
            raise ValueError(f"mask for {self.tile_id!r} must be HxW, got {mask.shape}")
        if not np.isin(mask, (0, 1)).all():
            raise ValueError(f"mask for {self.tile_id!r} is not strictly binary")
        object.__setattr__(self, "mask", _freeze(mask.astype(np.uint8)))
        object.__setattr__(self, "artifact_kind", ArtifactKind(self.artifact_kind))

    def check_against(self, tile: TileSample) -> None:
        if tile.id != self.tile_id:
            raise ValueError(f"mask references {self.tile_id!r}, tile is {tile.id!r}")
        if tuple(self.mask.shape) != tuple(tile.shape):
            raise ValueError(f"mask shape {self.mask.shape} differs from tile shape {tile.shape}")


@dataclass(frozen=True)
class SeveritySample:
    tile_id: str
    label: Severity

    def __post_init__(self):
        object.__setattr__(self, "label", Severity(self.label))


@dataclass(frozen=True)
class ManifestEntry:
    tile_id: str
    image_path: str
    mask_path: str | None = None
    severity: Severity | None = None
    artifact_kind: ArtifactKind | None = None

    def __post_init__(self):
        if self.severity is not None:
            object.__setattr__(self, "severity", Severity(self.severity))
        if self.artifact_kind is not None:
            object.__setattr__(self, "artifact_kind", ArtifactKind(self.artifact_kind))


_NONE = "-"


@dataclass(frozen=True)
class DatasetManifest:
    """Ordered list of tile records; relative paths resolve against ``root``."""

    entries: tuple[ManifestEntry, ...] = ()
    root: Path = Path(".")

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        object.__setattr__(self, "root", Path(self.root))
        seen = set()
        for entry in self.entries:
            if entry.tile_id in seen:
                raise ManifestError(f"duplicate tile id {entry.tile_id!r}")
            seen.add(entry.tile_id)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def ids(self) -> list[str]:
        return [e.tile_id for e in self.entries]

    @property
    def kind_counts(self) -> dict[str, int]:
        return dict(Counter(e.artifact_kind.value for e in self.entries if e.artifact_kind))

    @property
    def severity_counts(self) -> dict[str, int]:
        return dict(Counter(e.severity.value for e in self.entries if e.severity))

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.root / p

    def subset(self, ids) -> "DatasetManifest":
        by_id = {e.tile_id: e for e in self.entries}
        return DatasetManifest(tuple(by_id[i] for i in ids), self.root)

    def to_text(self) -> str:
        lines = []
        for e in self.entries:
            fields = [
                e.tile_id,
                e.image_path,
                e.mask_path or _NONE,
                e.severity.value if e.severity else _NONE,
                e.artifact_kind.value if e.artifact_kind else _NONE,
            ]
            for f in fields:
                if "\t" in f or "\n" in f:
                    raise ManifestError(f"field {f!r} contains a tab or newline")
            lines.append("\t".join(fields))
        return "".join(line + "\n" for line in lines)

    @classmethod
    def from_text(cls, text: str, root: str | Path = ".") -> "DatasetManifest":
        entries = []
        for lineno, raw in enumerate(text.splitlines(), start=1):
            if not raw.strip():
                continue
            fields = raw.split("\t")
            if len(fields) != 5:
                raise ManifestError(f"expected 5 tab-separated fields, got {len(fields)}", line=lineno)
            tile_id, image_path, mask_path, severity, kind = fields
            if not tile_id or not image_path or image_path == _NONE:
                raise ManifestError("tile id and image path are required", line=lineno)
            try:
                entry = ManifestEntry(
                    tile_id,
                    image_path,
                    None if mask_path == _NONE else mask_path,
                    None if severity == _NONE else Severity(severity),
                    None if kind == _NONE else ArtifactKind(kind),
                )
            except ValueError as exc:
                raise ManifestError(str(exc), line=lineno) from None
            if entry.tile_id in {e.tile_id for e in entries}:
                raise ManifestError(f"duplicate tile id {tile_id!r}", line=lineno)
            entries.append(entry)
        return cls(tuple(entries), Path(root))


@dataclass(frozen=True)
class PlateauConfig:
    factor: float = 0.1
    patience: int = 4


@dataclass(frozen=True)
class RunConfig:
    """Training run settings.

    Values are not checked on construction; call :func:`validate_config`.
    ``width_scale`` multiplies every channel count (1.0 = full-size networks).
    """

    seed: int = 0
    batch_size: int = 8
    epochs: int = 200
    learning_rate: float = 1e-4
    optimizer: Optimizer = Optimizer.RMSPROP
    loss: Loss = Loss.DICE_COEF_LOSS
    plateau: PlateauConfig = field(default_factory=PlateauConfig)
    early_stop_patience: int = 10
    model: Architecture = Architecture.DOUBLE_UNET
    width_scale: float = 1.0

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        out = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, PlateauConfig):
                value = f"{value.factor!r},{value.patience}"
            elif isinstance(value, Enum):
                value = value.value
            elif isinstance(value, float):
                value = repr(value)
            out.append(f"{f.name}={value}\n")
        return "".join(out)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        values: dict = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or key not in known:
                raise ManifestError(f"unknown or malformed config key {key!r}", line=lineno)
            try:
                values[key] = _parse_config_value(key, value)
            except ValueError as exc:
                raise ManifestError(f"bad value for {key}: {exc}", line=lineno) from None
        return cls(**values)


_ENUM_FIELDS = {"optimizer": Optimizer, "loss": Loss, "model": Architecture}
_INT_FIELDS = {"seed", "batch_size", "epochs", "early_stop_patience"}
_FLOAT_FIELDS = {"learning_rate", "width_scale"}


def _parse_config_value(key: str, value: str):
    if key in _ENUM_FIELDS:
        return _ENUM_FIELDS[key](value)
    if key in _INT_FIELDS:
        return int(value)
    if key in _FLOAT_FIELDS:
        return float(value)
    factor, _, patience = value.partition(",")
    return PlateauConfig(float(factor), int(patience))


def load_config(path: str | Path) -> RunConfig:
    return RunConfig.from_text(Path(path).read_text(encoding="utf-8"))


def validate_config(config: RunConfig) -> list[str]:
    """Return one message per violated field invariant (empty when valid)."""
    problems = []
    for name, enum in _ENUM_FIELDS.items():
        value = getattr(config, name)
        try:
            enum(value)
        except ValueError:
            problems.append(f"{name}: {value!r} is not one of {[m.value for m in enum]}")
    if not config.learning_rate > 0:
        problems.append(f"learning_rate: must be > 0, got {config.learning_rate}")
    if not 0 < config.plateau.factor < 1:
        problems.append(f"plateau.factor: must lie in (0, 1), got {config.plateau.factor}")
    if config.plateau.patience < 1:
        problems.append(f"plateau.patience: must be >= 1, got {config.plateau.patience}")
    if config.early_stop_patience < 1:
        problems.append(f"early_stop_patience: must be >= 1, got {config.early_stop_patience}")
    if not 0 < config.width_scale <= 1:
        problems.append(f"width_scale: must lie in (0, 1], got {config.width_scale}")
    if config.batch_size < 1:
        problems.append(f"batch_size: must be >= 1, got {config.batch_size}")
    if config.epochs < 1:
        problems.append(f"epochs: must be >= 1, got {config.epochs}")
    return problems
