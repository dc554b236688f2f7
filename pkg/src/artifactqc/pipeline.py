"""Tile a slide image, segment artifacts, grade severity and decide what to exclude."""

from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .core import SEVERITY_ORDER, ArtifactKind, Severity, TileSample
from .data import write_image
from .metrics import binarize
from .validation import check_images


class Decision(str, Enum):
    RETAIN = "retain"
    EXCLUDE_REGION = "exclude_region"
    FLAG_SLIDE_PREP = "flag_slide_prep"


class MissingModel(KeyError):
    pass


# Overlay tint per severity (RGB in [0, 1]); ``None`` = not graded.
OVERLAY_COLORS = {
    Severity.LOW: (0.0, 0.8, 0.0),
    Severity.MID: (1.0, 0.65, 0.0),
    Severity.HIGH: (0.9, 0.0, 0.0),
    None: (0.0, 0.4, 1.0),
}
OVERLAY_ALPHA = 0.4


def tile_image(image, tile_side: int, stride: int, slide_id: str = "slide") -> list[TileSample]:
    """Row-major tiles; tiles overhanging the right/bottom edge are black-padded and flagged."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got {image.shape}")
    h, w = image.shape[:2]
    if tile_side < 1 or tile_side > min(h, w):
        raise ValueError(f"tile side {tile_side} exceeds image {h}x{w}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    n_rows = math.ceil((h - tile_side) / stride) + 1
    n_cols = math.ceil((w - tile_side) / stride) + 1
    tiles = []
    for r in range(n_rows):
        for c in range(n_cols):
            y, x = r * stride, c * stride
            patch = np.zeros((tile_side, tile_side, 3))
            src = image[y : y + tile_side, x : x + tile_side]
            patch[: src.shape[0], : src.shape[1]] = src
            padded = src.shape[:2] != (tile_side, tile_side)
            tiles.append(TileSample(f"{slide_id}_r{r:03d}_c{c:03d}", patch, slide_id, (x, y), padded))
    return tiles


def valid_region(tile: TileSample, image_shape) -> tuple[int, int]:
    """Rows and columns of ``tile`` that lie inside the source image."""
    x, y = tile.origin
    th, tw = tile.shape
    return min(th, image_shape[0] - y), min(tw, image_shape[1] - x)


def reassemble(tiles, image_shape) -> np.ndarray:
    out = np.zeros(tuple(image_shape[:2]) + (3,))
    for t in tiles:
        x, y = t.origin
        vh, vw = valid_region(t, image_shape)
        out[y : y + vh, x : x + vw] = t.image[:vh, :vw]
    return out


@dataclass(frozen=True)
class Policy:
    """Tiles whose artifact fraction is at most ``trigger_fraction`` are retained;
    the rest are mapped through their predicted severity."""

    trigger_fraction: float = 0.01
    high_action: Decision = Decision.EXCLUDE_REGION
    mid_action: Decision = Decision.FLAG_SLIDE_PREP
    low_action: Decision = Decision.RETAIN

    def __post_init__(self):
        if not 0 <= self.trigger_fraction <= 1:
            raise ValueError("trigger_fraction must lie in [0, 1]")
        for name in ("high_action", "mid_action", "low_action"):
            object.__setattr__(self, name, Decision(getattr(self, name)))

    def decide(self, fraction: float, severity: Severity) -> Decision:
        if fraction <= self.trigger_fraction:
            return Decision.RETAIN
        return {Severity.HIGH: self.high_action, Severity.MID: self.mid_action, Severity.LOW: self.low_action}[severity]


@dataclass
class TileVerdict:
    tile_id: str
    origin: tuple[int, int]
    artifact_fraction: float
    kind_fractions: dict[str, float]
    artifact_kind: str | None
    severity_probabilities: tuple[float, float, float]
    severity: Severity
    decision: Decision
    padded: bool = False
    external_quality_score: float | None = None

    def to_record(self) -> dict:
        return {
            "tile_id": self.tile_id,
            "origin": list(self.origin),
            "artifact_fraction": self.artifact_fraction,
            "kind_fractions": self.kind_fractions,
            "artifact_kind": self.artifact_kind,
            "severity_probabilities": list(self.severity_probabilities),
            "severity": self.severity.value,
            "decision": self.decision.value,
            "padded": self.padded,
            "external_quality_score": self.external_quality_score,
        }


@dataclass
class DecisionReport:
    verdicts: list[TileVerdict]
    model_ids: dict[str, str] = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    tiles: list[TileSample] = field(default_factory=list, repr=False)
    masks: list[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def counts(self) -> dict[str, int]:
        c = Counter(v.decision.value for v in self.verdicts)
        return {d.value: c.get(d.value, 0) for d in Decision}


def _resize(batch: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of an (N, H, W) or (N, H, W, C) float batch."""
    import torch
    import torch.nn.functional as F

    if tuple(batch.shape[1:3]) == tuple(size):
        return batch
    squeeze = batch.ndim == 3
    x = torch.from_numpy(np.ascontiguousarray(batch[..., None] if squeeze else batch)).permute(0, 3, 1, 2)
    shrinking = size[0] < batch.shape[1]
    y = F.interpolate(x.double(), size=size, mode="bilinear", align_corners=False, antialias=shrinking)
    out = y.permute(0, 2, 3, 1).numpy()
    return np.clip(out[..., 0] if squeeze else out, 0.0, 1.0)


def _segment(model, tiles: np.ndarray) -> np.ndarray:
    """Probability maps (N, H, W) from a SegModel, an estimator, or a plain callable.

    Tiles are resized to a SegModel's input size and the maps resized back.
    """
    from .segmentation.models import SegModel
    from .segmentation.training import predict_proba_maps

    if isinstance(model, SegModel):
        side = tuple(model.input_shape[:2])
        probs = predict_proba_maps(model, _resize(tiles, side))
        return _resize(probs, tiles.shape[1:3])
    if hasattr(model, "predict_proba"):
        return np.asarray(model.predict_proba(tiles))
    return np.asarray(model(tiles))


def _model_id(model) -> str:
    for attr in ("fingerprint", "model_id"):
        fn = getattr(model, attr, None)
        if callable(fn):
            return str(fn())
    arch = getattr(model, "architecture", None)
    if arch is not None:
        return f"{getattr(arch, 'value', arch)}@{getattr(model, 'width_scale', '')}"
    return type(model).__name__


def run_pipeline(
    image,
    seg_models: dict,
    severity_model,
    policy: Policy = Policy(),
    tile_side: int = 256,
    stride: int | None = None,
    kinds=None,
    slide_id: str = "slide",
    external_quality_score: float | None = None,
) -> DecisionReport:
    """Verdict for every tile of ``image``.

    ``seg_models`` maps artifact kind to a segmentation model; ``kinds`` (default:
    the keys of ``seg_models``) lists the kinds that must be checked. The union of
    the kinds' binary masks sets the artifact fraction. Every tile is graded by
    ``severity_model`` (``predict_proba`` over low/mid/high); the grade only
    changes the decision once the fraction exceeds the trigger.
    """
    image = check_images(image, "image", allow_single=True)[0]
    seg_models = {ArtifactKind(k): m for k, m in seg_models.items()}
    kinds = list(seg_models) if kinds is None else [ArtifactKind(k) for k in kinds]
    missing = [k.value for k in kinds if k not in seg_models]
    if missing:
        raise MissingModel(f"no segmentation model for artifact kind(s) {missing}")
    stride = tile_side if stride is None else stride
    tiles = tile_image(image, tile_side, stride, slide_id)
    if not tiles:
        return DecisionReport([])
    batch = np.stack([t.image for t in tiles])
    kind_masks = {k: binarize(_segment(seg_models[k], batch)) for k in kinds}
    severity_probs = np.asarray(severity_model.predict_proba(batch), dtype=np.float64)
    verdicts, masks = [], []
    for i, tile in enumerate(tiles):
        vh, vw = valid_region(tile, image.shape)
        area = vh * vw
        union = np.zeros(tile.shape, dtype=np.uint8)
        kind_fractions = {}
        for k in kinds:
            m = kind_masks[k][i].copy()
            m[vh:, :] = 0
            m[:, vw:] = 0
            kind_fractions[k.value] = float(m.sum() / area)
            union |= m
        fraction = float(union.sum() / area)
        probs = severity_probs[i] / severity_probs[i].sum()
        severity = SEVERITY_ORDER[int(np.argmax(probs))]
        dominant = max(kind_fractions, key=kind_fractions.get) if fraction > 0 else None
        verdicts.append(
            TileVerdict(
                tile.id,
                tile.origin,
                fraction,
                kind_fractions,
                dominant,
                tuple(float(p) for p in probs),
                severity,
                policy.decide(fraction, severity),
                tile.padded,
                external_quality_score,
            )
        )
        masks.append(union)
    config = {
        "trigger_fraction": policy.trigger_fraction,
        "high_action": policy.high_action.value,
        "mid_action": policy.mid_action.value,
        "low_action": policy.low_action.value,
        "tile_side": tile_side,
        "stride": stride,
        "kinds": [k.value for k in kinds],
    }
    model_ids = {f"seg:{k.value}": _model_id(seg_models[k]) for k in kinds}
    model_ids["severity"] = _model_id(severity_model)
    return DecisionReport(verdicts, model_ids, config, tiles, masks)


def render_overlay(image, mask, severity: Severity | None = None) -> np.ndarray:
    """Alpha-blend the severity colour onto masked pixels; others are untouched."""
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask)
    if mask.shape != image.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image {image.shape[:2]}")
    colour = np.asarray(OVERLAY_COLORS[Severity(severity) if severity is not None else None])
    blended = (1 - OVERLAY_ALPHA) * image + OVERLAY_ALPHA * colour
    return np.where(mask[..., None].astype(bool), blended, image)


def emit_report(report: DecisionReport, out_dir: str | Path) -> list[Path]:
    """Write ``verdicts.jsonl``, ``summary.csv`` and ``<tile_id>_overlay.png`` per tile."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        path = out_dir / "verdicts.jsonl"
        path.write_text("".join(json.dumps(v.to_record(), sort_keys=True) + "\n" for v in report.verdicts), encoding="utf-8")
        written.append(path)

        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["field", "value"])
        w.writerow(["tiles", len(report.verdicts)])
        for decision, count in report.counts.items():
            w.writerow([decision, count])
        for key, value in sorted(report.model_ids.items()):
            w.writerow([f"model:{key}", value])
        for key, value in sorted(report.config.items()):
            w.writerow([f"config:{key}", json.dumps(value)])
        path = out_dir / "summary.csv"
        path.write_text(buf.getvalue(), encoding="utf-8")
        written.append(path)

        for verdict, tile, mask in zip(report.verdicts, report.tiles, report.masks):
            overlay = render_overlay(tile.image, mask, verdict.severity if verdict.artifact_fraction > 0 else None)
            written.append(write_image(overlay, out_dir / f"{verdict.tile_id}_overlay.png"))
    except OSError as exc:
        raise OSError(f"failed writing report to {out_dir}: {exc}") from exc
    return written
