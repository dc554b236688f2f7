"""Transfer-learning severity classifiers and the backbone x optimizer x loss grid.

Each classifier is a frozen (by default) feature extractor, global average
pooling, and a trained softmax head over the three severity classes. The
desk-scale default swaps each named backbone for a small random convolutional
stand-in with the same input size, so the whole grid runs on a CPU in seconds.
"""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn

from . import metrics
from .core import Loss, Optimizer
from .segmentation.training import make_optimizer
from .validation import check_images, check_labels

log = logging.getLogger(__name__)

N_CLASSES = 3
KL_CLIP = 1e-7

BACKBONE_INPUT_SIDE = {
    "Xception": 224,
    "VGG16": 224,
    "VGG19": 224,
    "ResNet50": 224,
    "InceptionV3": 224,
    "InceptionResNetV2": 224,
    "MobileNet": 224,
    "MobileNetV2": 224,
    "DenseNet121": 224,
    "NasNetLarge": 331,
}
BACKBONES = tuple(BACKBONE_INPUT_SIDE)
GRID_OPTIMIZERS = (Optimizer.ADAM, Optimizer.ADAMAX, Optimizer.RMSPROP)
GRID_LOSSES = (Loss.CATEGORICAL_CROSS_ENTROPY, Loss.KL_DIVERGENCE)

_TORCHVISION = {
    "VGG16": "vgg16",
    "VGG19": "vgg19",
    "ResNet50": "resnet50",
    "InceptionV3": "inception_v3",
    "MobileNetV2": "mobilenet_v2",
    "DenseNet121": "densenet121",
}
_KERAS = {
    "Xception": ("xception", "Xception"),
    "InceptionResNetV2": ("inception_resnet_v2", "InceptionResNetV2"),
    "MobileNet": ("mobilenet", "MobileNet"),
    "NasNetLarge": ("nasnet", "NASNetLarge"),
}


class UnknownBackbone(ValueError):
    pass


@dataclass(frozen=True)
class BackboneSpec:
    name: str
    input_side: int
    desk_substitute: bool = True

    def __post_init__(self):
        if self.name not in BACKBONE_INPUT_SIDE:
            raise UnknownBackbone(f"unknown backbone {self.name!r}; choose from {list(BACKBONES)}")
        if self.input_side != BACKBONE_INPUT_SIDE[self.name]:
            raise ValueError(f"{self.name} takes {BACKBONE_INPUT_SIDE[self.name]}px inputs, not {self.input_side}")


def backbone_spec(name: str, desk_substitute: bool = True) -> BackboneSpec:
    if name not in BACKBONE_INPUT_SIDE:
        raise UnknownBackbone(f"unknown backbone {name!r}; choose from {list(BACKBONES)}")
    return BackboneSpec(name, BACKBONE_INPUT_SIDE[name], desk_substitute)


def _name_seed(*parts) -> int:
    return int.from_bytes(hashlib.sha256(":".join(map(str, parts)).encode()).digest()[:4], "little")


class DeskBackbone(nn.Module):
    """Small random convolutional feature extractor; weights are a function of the backbone name."""

    def __init__(self, name: str, width: int = 16):
        super().__init__()
        gen = torch.Generator().manual_seed(_name_seed("desk", name))
        self.convs = nn.Sequential(
            nn.Conv2d(3, width, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
            nn.ReLU(),
        )
        with torch.no_grad():
            for p in self.parameters():
                p.copy_(torch.randn(p.shape, generator=gen) * (0.5 if p.ndim > 1 else 0.1))
        self.out_features = 2 * width

    def forward(self, x):
        return self.convs(x).mean(dim=(2, 3))


class TorchvisionBackbone(nn.Module):
    _MEAN = torch.tensor([0.485, 0.456, 0.406])[None, :, None, None]
    _STD = torch.tensor([0.229, 0.224, 0.225])[None, :, None, None]

    def __init__(self, name: str, pretrained: bool):
        super().__init__()
        import torchvision.models as tvm

        ctor = getattr(tvm, _TORCHVISION[name])
        kwargs = {"weights": "DEFAULT" if pretrained else None}
        if name == "InceptionV3":
            kwargs.update(aux_logits=True, init_weights=not pretrained)
        net = ctor(**kwargs)
        if hasattr(net, "fc"):
            self.out_features = net.fc.in_features
            net.fc = nn.Identity()
            if name == "InceptionV3":
                net.aux_logits = False
                net.AuxLogits = None
            self.body = net
        else:
            self.out_features = {"VGG16": 512, "VGG19": 512, "MobileNetV2": 1280, "DenseNet121": 1024}[name]
            self.body = net.features
        self.pooled = hasattr(net, "fc")

    def forward(self, x):
        x = (x - self._MEAN) / self._STD
        feats = self.body(x)
        if not self.pooled:
            feats = F.relu(feats).mean(dim=(2, 3))
        return feats


class KerasBackbone(nn.Module):
    """Frozen keras.applications feature extractor exposed as a torch module (no gradients)."""

    def __init__(self, name: str, pretrained: bool):
        super().__init__()
        import tensorflow as tf

        module_name, cls_name = _KERAS[name]
        side = BACKBONE_INPUT_SIDE[name]
        self._app = getattr(tf.keras.applications, module_name)
        self._net = getattr(tf.keras.applications, cls_name)(
            include_top=False, weights="imagenet" if pretrained else None, input_shape=(side, side, 3), pooling="avg"
        )
        self.out_features = int(self._net.output_shape[-1])

    def forward(self, x):
        arr = x.detach().permute(0, 2, 3, 1).cpu().numpy() * 255.0
        feats = self._net(self._app.preprocess_input(arr), training=False).numpy()
        return torch.from_numpy(feats).float()


def _make_backbone(spec: BackboneSpec, pretrained: bool) -> nn.Module:
    if spec.desk_substitute:
        return DeskBackbone(spec.name)
    if spec.name in _TORCHVISION:
        return TorchvisionBackbone(spec.name, pretrained)
    return KerasBackbone(spec.name, pretrained)


class ClassifierNet(nn.Module):
    """Backbone, standardized pooled features, linear softmax head."""

    def __init__(self, spec: BackboneSpec, num_classes: int = N_CLASSES, pretrained: bool = False):
        super().__init__()
        self.spec = spec
        self.backbone = _make_backbone(spec, pretrained)
        n = self.backbone.out_features
        self.register_buffer("feat_mean", torch.zeros(n))
        self.register_buffer("feat_std", torch.ones(n))
        self.head = nn.Linear(n, num_classes)

    def resize(self, x: torch.Tensor) -> torch.Tensor:
        side = self.spec.input_side
        if x.shape[2:] != (side, side):
            x = F.interpolate(x, size=(side, side), mode="bilinear", align_corners=False)
        return x

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(self.resize(x))

    def head_logits(self, feats: torch.Tensor) -> torch.Tensor:
        return self.head((feats - self.feat_mean) / self.feat_std)

    def forward(self, x):
        return torch.softmax(self.head_logits(self.features(x)), dim=1)


def build_classifier(backbone: BackboneSpec | str, num_classes: int = N_CLASSES, pretrained: bool = False) -> ClassifierNet:
    """Classifier over ``num_classes``; inputs of any size are resized to the backbone's side."""
    spec = backbone if isinstance(backbone, BackboneSpec) else backbone_spec(backbone)
    return ClassifierNet(spec, num_classes, pretrained)


def classification_loss(logits: torch.Tensor, targets: torch.Tensor, loss: Loss) -> torch.Tensor:
    loss = Loss(loss)
    log_p = torch.log_softmax(logits, dim=1)
    onehot = F.one_hot(targets, logits.shape[1]).to(log_p.dtype)
    if loss is Loss.CATEGORICAL_CROSS_ENTROPY:
        return -(onehot * log_p).sum(dim=1).mean()
    if loss is Loss.KL_DIVERGENCE:
        y = onehot.clamp(KL_CLIP, 1.0)
        p = log_p.exp().clamp(KL_CLIP, 1.0)
        return (y * (y.log() - p.log())).sum(dim=1).mean()
    raise ValueError(f"{loss.value} is not a classification loss")


def _to_tensor(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2))).float()


class SeverityClassifier(ClassifierMixin, BaseEstimator):
    """Three-class severity classifier on one transfer-learning backbone.

    With ``fine_tune=False`` the backbone is frozen and its pooled features are
    computed once; only the head trains.
    """

    def __init__(
        self,
        backbone="MobileNetV2",
        optimizer="rmsprop",
        loss="categorical_cross_entropy",
        learning_rate=1e-4,
        epochs=25,
        batch_size=32,
        desk_substitute=True,
        pretrained=False,
        fine_tune=False,
        seed=0,
    ):
        self.backbone = backbone
        self.optimizer = optimizer
        self.loss = loss
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.desk_substitute = desk_substitute
        self.pretrained = pretrained
        self.fine_tune = fine_tune
        self.seed = seed

    def _features(self, X: np.ndarray) -> torch.Tensor:
        net = self.net_
        out = []
        with torch.no_grad():
            for start in range(0, len(X), self.batch_size):
                out.append(net.features(_to_tensor(X[start : start + self.batch_size])))
        return torch.cat(out)

    def fit(self, X, y):
        X = check_images(X)
        y = check_labels(y, len(X), N_CLASSES)
        torch.manual_seed(_name_seed(self.seed, self.backbone, self.optimizer, self.loss))
        rng = np.random.default_rng(self.seed)
        self.classes_ = np.arange(N_CLASSES)
        self.net_ = build_classifier(backbone_spec(self.backbone, self.desk_substitute), N_CLASSES, self.pretrained)
        net = self.net_
        for p in net.backbone.parameters():
            p.requires_grad_(bool(self.fine_tune))
        net.eval()
        feats = self._features(X)
        net.feat_mean.copy_(feats.mean(dim=0))
        net.feat_std.copy_(feats.std(dim=0, unbiased=False).clamp_min(1e-6))
        params = [p for p in net.parameters() if p.requires_grad]
        opt = make_optimizer(self.optimizer, params, self.learning_rate)
        targets = torch.from_numpy(y)
        self.loss_curve_ = []
        for _ in range(self.epochs):
            order = rng.permutation(len(X))
            total = 0.0
            for start in range(0, len(X), self.batch_size):
                idx = order[start : start + self.batch_size]
                opt.zero_grad()
                if self.fine_tune:
                    net.backbone.train()
                    f = net.features(_to_tensor(X[idx]))
                else:
                    f = feats[idx]
                batch_loss = classification_loss(net.head_logits(f), targets[idx], self.loss)
                if not torch.isfinite(batch_loss):
                    raise FloatingPointError("non-finite classifier loss")
                batch_loss.backward()
                opt.step()
                total += batch_loss.item() * len(idx)
            self.loss_curve_.append(total / len(X))
        net.eval()
        for p in net.parameters():
            p.requires_grad_(False)
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        X = check_images(X, allow_single=True)
        with torch.no_grad():
            feats = self._features(X)
            probs = torch.softmax(self.net_.head_logits(feats).double(), dim=1)
        return probs.numpy()

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)

    def evaluate(self, X, y) -> dict:
        """Loss (the configured loss), accuracy and macro one-vs-rest ROC on a labelled set."""
        probs = self.predict_proba(X)
        y = check_labels(y, len(probs), N_CLASSES)
        logits = torch.from_numpy(np.log(np.clip(probs, 1e-12, 1.0)))
        loss = float(classification_loss(logits, torch.from_numpy(y), self.loss))
        try:
            roc = metrics.roc_auc_multiclass(probs, y)
        except ValueError:
            roc = float("nan")
        return {"val_loss": loss, "test_accuracy": float(np.mean(probs.argmax(axis=1) == y)), "roc_score": roc}

    def fingerprint(self) -> str:
        """Hash of all weights; changes iff the network changes."""
        check_is_fitted(self, "net_")
        h = hashlib.sha256()
        for k, v in sorted(self.net_.state_dict().items()):
            h.update(k.encode())
            h.update(v.detach().cpu().numpy().tobytes())
        return h.hexdigest()[:16]

    def save(self, path: str | Path) -> Path:
        check_is_fitted(self, "net_")
        path = Path(path)
        state = {k: v.detach().cpu().numpy() for k, v in self.net_.state_dict().items()}
        if isinstance(self.net_.backbone, KerasBackbone):
            state = {k: v for k, v in state.items() if not k.startswith("backbone.")}
        params = {k: (v.value if hasattr(v, "value") else v) for k, v in self.get_params().items()}
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.array(json.dumps(params, sort_keys=True)), **{f"param/{k}": v for k, v in state.items()})
        return path

    @classmethod
    def load(cls, path: str | Path) -> "SeverityClassifier":
        with np.load(path, allow_pickle=False) as archive:
            params = json.loads(str(archive["__meta__"]))
            state = {k[len("param/"):]: torch.from_numpy(archive[k].copy()) for k in archive.files if k.startswith("param/")}
        clf = cls(**params)
        clf.classes_ = np.arange(N_CLASSES)
        clf.net_ = build_classifier(backbone_spec(clf.backbone, clf.desk_substitute), N_CLASSES, clf.pretrained)
        clf.net_.load_state_dict(state, strict=not isinstance(clf.net_.backbone, KerasBackbone))
        clf.net_.eval()
        return clf


@dataclass
class GridResult:
    backbone: str
    optimizer: str
    loss: str
    learning_rate: float
    val_loss: float
    test_accuracy: float
    roc_score: float
    checkpoint: str = ""
    error: str = ""

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.backbone, self.optimizer, self.loss)


GRID_COLUMNS = list(GridResult.__dataclass_fields__)


def grid_results_to_csv(results) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=GRID_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in results:
        row = asdict(r)
        for k in ("learning_rate", "val_loss", "test_accuracy", "roc_score"):
            row[k] = repr(float(row[k]))
        writer.writerow(row)
    return buf.getvalue()


def grid_results_from_csv(text: str) -> list[GridResult]:
    rows = csv.DictReader(io.StringIO(text))
    out = []
    for row in rows:
        out.append(
            GridResult(
                row["backbone"],
                row["optimizer"],
                row["loss"],
                float(row["learning_rate"]),
                float(row["val_loss"]),
                float(row["test_accuracy"]),
                float(row["roc_score"]),
                row.get("checkpoint", "") or "",
                row.get("error", "") or "",
            )
        )
    return out


def _value(v) -> str:
    return v.value if hasattr(v, "value") else str(v)


def run_grid(
    train,
    test,
    backbones=BACKBONES,
    optimizers=GRID_OPTIMIZERS,
    losses=GRID_LOSSES,
    epochs: int = 25,
    batch_size: int = 32,
    learning_rate: float = 1e-4,
    desk_substitute: bool = True,
    pretrained: bool = False,
    seed: int = 0,
    out_dir: str | Path | None = None,
) -> list[GridResult]:
    """Train and score one classifier per (backbone, optimizer, loss).

    ``test`` doubles as the validation set, so ``val_loss`` is the loss on it.
    With ``out_dir`` each result is appended to ``grid_results.csv`` and its
    weights saved; a rerun skips combinations already recorded there. A
    failing combination is recorded with its error instead of aborting.
    """
    X_train, y_train = train
    X_test, y_test = test
    combos = [(b, _value(o), _value(l)) for b, o, l in itertools.product(backbones, optimizers, losses)]
    if len(set(combos)) != len(combos):
        raise ValueError("grid contains duplicate combinations")
    done: dict[tuple, GridResult] = {}
    csv_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / "grid_results.csv"
        if csv_path.exists():
            done = {r.key: r for r in grid_results_from_csv(csv_path.read_text()) if not r.error}
    for key in combos:
        if key in done:
            continue
        backbone, opt, loss = key
        clf = SeverityClassifier(
            backbone, opt, loss, learning_rate, epochs, batch_size, desk_substitute, pretrained, seed=seed
        )
        try:
            clf.fit(X_train, y_train)
            scores = clf.evaluate(X_test, y_test)
            ckpt = ""
            if out_dir is not None:
                ckpt = str(clf.save(out_dir / f"{backbone}_{opt}_{loss}.npz").name)
            result = GridResult(backbone, opt, loss, learning_rate, checkpoint=ckpt, **scores)
        except Exception as exc:  # recorded per combination
            log.warning("grid combination %s failed: %s", key, exc)
            result = GridResult(backbone, opt, loss, learning_rate, math.nan, math.nan, math.nan, error=repr(exc))
        done[key] = result
        if csv_path is not None:
            csv_path.write_text(grid_results_to_csv([done[k] for k in combos if k in done]))
    return [done[k] for k in combos]


def selection_key(result: GridResult):
    """Accuracy descending, then validation loss ascending, then the combination name."""
    return (-result.test_accuracy, result.val_loss, result.backbone, result.optimizer, result.loss)


def select_base_models(results, k: int) -> list[GridResult]:
    results = [r for r in results if not r.error]
    if not 1 <= k <= len(results):
        raise ValueError(f"k={k} out of range for {len(results)} usable results")
    return sorted(results, key=selection_key)[:k]


def load_base_models(results, root: str | Path) -> list[SeverityClassifier]:
    root = Path(root)
    return [SeverityClassifier.load(root / r.checkpoint) for r in results]
