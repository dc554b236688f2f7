from .estimator import ArtifactSegmenter
from .models import (
    DoubleUNet,
    ResidualBlock,
    ResUNetPP,
    SegModel,
    ShapeError,
    UNet,
    build_double_unet,
    build_model,
    build_resunet_pp,
    build_unet_baseline,
    load_vgg19_encoder,
)
from .schedule import EarlyStopState, PlateauState, early_stop_step, plateau_step
from .training import (
    TrainHistory,
    TrainingDivergence,
    evaluate_segmenter,
    predict_mask,
    predict_proba_maps,
    segmentation_loss,
    train_segmenter,
)

__all__ = [
    "ArtifactSegmenter",
    "DoubleUNet",
    "EarlyStopState",
    "PlateauState",
    "ResUNetPP",
    "ResidualBlock",
    "SegModel",
    "ShapeError",
    "TrainHistory",
    "TrainingDivergence",
    "UNet",
    "build_double_unet",
    "build_model",
    "build_resunet_pp",
    "build_unet_baseline",
    "early_stop_step",
    "evaluate_segmenter",
    "load_vgg19_encoder",
    "plateau_step",
    "predict_mask",
    "predict_proba_maps",
    "segmentation_loss",
    "train_segmenter",
]
