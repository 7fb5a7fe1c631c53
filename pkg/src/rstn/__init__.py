"""Recurrent saliency transformation network and stage-wise baseline for small-target 3-D segmentation."""

from .baseline import mix_and_match, stagewise_infer, stagewise_train
from .estimator import RSTNSegmenter, StagewiseSegmenter, check_masks, check_volumes
from .harness import ExperimentConfig, Report, assign_folds, crossval, report_emit
from .inference import InferenceConfig, IterationTrace, inter_iteration_dsc, segment_volume, segment_with_oracle_boxes
from .model import ModelBundle, init_bundle, load_bundle, save_bundle
from .recurrent import TrainConfig, crop, crop_box, loss_weights, soft_dsc_loss, train
from .synthgen import PhantomSpec, generate, generate_corpus
from .volume import LabelMask, Volume, dsc, load_rvol, save_mask, save_volume

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig", "InferenceConfig", "IterationTrace", "LabelMask", "ModelBundle", "PhantomSpec",
    "RSTNSegmenter", "Report", "StagewiseSegmenter", "TrainConfig", "Volume", "assign_folds", "check_masks",
    "check_volumes", "crop", "crop_box", "crossval", "dsc", "generate", "generate_corpus", "init_bundle",
    "inter_iteration_dsc", "load_bundle", "load_rvol", "loss_weights", "mix_and_match", "report_emit",
    "save_bundle", "save_mask", "save_volume", "segment_volume", "segment_with_oracle_boxes", "soft_dsc_loss",
    "stagewise_infer", "stagewise_train", "train",
]
