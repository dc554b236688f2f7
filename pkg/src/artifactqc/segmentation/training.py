"""Training loop, prediction and evaluation for segmentation models."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .. import metrics
from ..core import Loss, Optimizer, RunConfig, validate_config
from ..data import AugmentParams, augment
from ..validation import check_images, check_masks
from .models import SegModel
from .schedule import EarlyStopState, PlateauState, early_stop_step, plateau_step

log = logging.getLogger(__name__)

SEG_LOSSES = (Loss.DICE_COEF_LOSS, Loss.BINARY_CROSS_ENTROPY, Loss.DICE_BCE)


class TrainingDivergence(RuntimeError):
    pass


def dice_loss_tensor(pred: torch.Tensor, truth: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    p, t = pred.reshape(-1), truth.reshape(-1)
    return -(2.0 * (p * t).sum() + smooth) / (p.sum() + t.sum() + smooth)


def bce_tensor(pred: torch.Tensor, truth: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    return F.binary_cross_entropy(pred.clamp(eps, 1 - eps), truth)


def segmentation_loss(outputs, truth: torch.Tensor, loss: Loss) -> torch.Tensor:
    """Loss summed over every output map; each map is scored against the same mask."""
    loss = Loss(loss)
    if loss not in SEG_LOSSES:
        raise ValueError(f"{loss.value} is not a segmentation loss")
    total = 0.0
    for out in outputs:
        if loss is Loss.DICE_COEF_LOSS:
            total = total + dice_loss_tensor(out, truth)
        elif loss is Loss.BINARY_CROSS_ENTROPY:
            total = total + bce_tensor(out, truth)
        else:
            total = total + dice_loss_tensor(out, truth) + bce_tensor(out, truth)
    return total


def make_optimizer(name, params, lr: float) -> torch.optim.Optimizer:
    name = Optimizer(name)
    if name is Optimizer.ADAM:
        return torch.optim.Adam(params, lr=lr, eps=1e-7)
    if name is Optimizer.ADAMAX:
        return torch.optim.Adamax(params, lr=lr, eps=1e-7)
    if name is Optimizer.RMSPROP:
        return torch.optim.RMSprop(params, lr=lr, alpha=0.9, eps=1e-7)
    return torch.optim.SGD(params, lr=lr)


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_loss: float
    dice: float
    val_dice: float
    iou: float
    val_iou: float
    mean_iou: float
    precision: float
    recall: float
    lr: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    stop_reason: str = "max_epochs"

    @property
    def lrs(self) -> list[float]:
        return [r.lr for r in self.records]

    def column(self, name: str) -> list[float]:
        return [getattr(r, name) for r in self.records]

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = list(EpochRecord.__dataclass_fields__)
        writer = csv.DictWriter(buf, fieldnames=names, lineterminator="\n")
        writer.writeheader()
        for r in self.records:
            writer.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in asdict(r).items()})
        return buf.getvalue()


def _to_tensor(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2))).float()


def predict_proba_maps(model: SegModel, images, batch_size: int = 8) -> np.ndarray:
    """Final-output probability maps, shape (N, H, W)."""
    images = check_images(images, allow_single=True)
    if tuple(images.shape[1:]) != tuple(model.input_shape):
        raise ValueError(f"images are {images.shape[1:]}, model expects {model.input_shape}")
    net = model.network
    was_training = net.training
    net.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            outputs = net(_to_tensor(images[start : start + batch_size]))
            out.append(outputs[-1][:, 0].double().numpy())
    net.train(was_training)
    return np.concatenate(out)


def predict_mask(model: SegModel, image, threshold: float = metrics.DEFAULT_THRESHOLD) -> tuple[np.ndarray, np.ndarray]:
    """Probability map and binary mask for a single HxWx3 image.

    For DoubleUNet the second (refined) output is the prediction.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ValueError(f"expected one HxWx3 image, got {image.shape}")
    prob = predict_proba_maps(model, image[None])[0]
    return prob, metrics.binarize(prob, threshold)


def _validation_pass(model: SegModel, images, masks, loss: Loss, batch_size: int):
    net = model.network
    net.eval()
    total, n = 0.0, 0
    finals = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            x = _to_tensor(images[start : start + batch_size])
            y = torch.from_numpy(masks[start : start + batch_size, None]).float()
            outputs = net(x)
            total += float(segmentation_loss(outputs, y, loss)) * len(x)
            n += len(x)
            finals.append(outputs[-1][:, 0].double().numpy())
    net.train()
    return total / n, np.concatenate(finals)


def train_segmenter(
    model: SegModel,
    train_set: tuple[np.ndarray, np.ndarray],
    valid_set: tuple[np.ndarray, np.ndarray],
    config: RunConfig,
    augment_params: AugmentParams | None = None,
    callback=None,
) -> tuple[SegModel, TrainHistory]:
    """Mini-batch training with plateau learning-rate decay and early stopping.

    Both schedules watch the validation loss. ``augment_params`` (if given)
    warps each training sample freshly every epoch; images are expected to be
    in [0, 1] already, so use ``rescale=1``.
    """
    problems = validate_config(config)
    if problems:
        raise ValueError("invalid config: " + "; ".join(problems))
    loss_kind = Loss(config.loss)
    if loss_kind not in SEG_LOSSES:
        raise ValueError(f"{loss_kind.value} is not a segmentation loss")
    X = check_images(train_set[0], "train images")
    Y = check_masks(train_set[1], X, "train masks")
    Xv = check_images(valid_set[0], "valid images")
    Yv = check_masks(valid_set[1], Xv, "valid masks")

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    net = model.network
    net.train()
    lr = config.learning_rate
    opt = make_optimizer(config.optimizer, net.parameters(), lr)
    plateau = PlateauState(patience=config.plateau.patience, factor=config.plateau.factor)
    stopper = EarlyStopState(patience=config.early_stop_patience)
    history = TrainHistory()

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(X))
        batch_losses, inter, psum, tsum = [], 0.0, 0.0, 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            xb, yb = X[idx], Y[idx]
            if augment_params is not None:
                pairs = [augment(img, m, augment_params, rng) for img, m in zip(xb, yb)]
                xb = np.stack([p[0] for p in pairs])
                yb = np.stack([p[1] for p in pairs]).astype(np.float64)
            x = _to_tensor(xb)
            y = torch.from_numpy(yb[:, None]).float()
            opt.zero_grad()
            outputs = net(x)
            loss = segmentation_loss(outputs, y, loss_kind)
            if not torch.isfinite(loss):
                raise TrainingDivergence(f"non-finite training loss at epoch {epoch}: {loss.item()}")
            loss.backward()
            opt.step()
            batch_losses.append(loss.item() * len(idx))
            with torch.no_grad():
                p = outputs[-1].double()
                inter += float((p * y).sum())
                psum += float(p.sum())
                tsum += float(y.sum())

        train_loss = sum(batch_losses) / len(X)
        val_loss, val_probs = _validation_pass(model, Xv, Yv, loss_kind, config.batch_size)
        if not math.isfinite(val_loss):
            raise TrainingDivergence(f"non-finite validation loss at epoch {epoch}")
        precision, recall = metrics.precision_recall(val_probs, Yv)
        record = EpochRecord(
            epoch=epoch,
            loss=train_loss,
            val_loss=val_loss,
            dice=(2 * inter + 1.0) / (psum + tsum + 1.0),
            val_dice=metrics.dice_coef(val_probs, Yv),
            iou=(inter + 1.0) / (psum + tsum - inter + 1.0),
            val_iou=metrics.soft_iou(val_probs, Yv),
            mean_iou=metrics.mean_iou(val_probs, Yv),
            precision=precision,
            recall=recall,
            lr=lr,
        )
        history.records.append(record)
        log.debug("epoch %d loss %.5f val_loss %.5f lr %.2e", epoch, train_loss, val_loss, lr)
        if callback is not None:
            callback(record)

        stop, stopper = early_stop_step(stopper, val_loss)
        if stop:
            history.stop_reason = "early_stop"
            break
        lr, plateau = plateau_step(plateau, val_loss, lr)
        set_lr(opt, lr)

    net.eval()
    return model, history


def evaluate_segmenter(model: SegModel, test_set, iou_thresholds=(0.9, 0.85), batch_size: int = 8) -> metrics.SegMetricsReport:
    images, masks = test_set
    images = check_images(images, "test images")
    masks = check_masks(masks, images, "test masks")
    probs = predict_proba_maps(model, images, batch_size)
    report = metrics.segmentation_report(probs, masks, iou_thresholds)
    report.model = model.architecture.value
    return report
