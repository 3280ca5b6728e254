"""Supervised-contrastive detection of copied artwork in generated images.

The package trains an image encoder so that an original and its forgeries
(inpainting, style transfer, adversarial noise, cutmix) embed close together,
then flags generated images whose cosine score against an indexed original
reaches a calibrated threshold. A region-level distance criterion gives a
second, model-free infringement check.
"""

from dfacon.criterion import CriterionConfig, CriterionReport, Transform, check_infringement
from dfacon.data import AnchorGroup, AttackType, DatasetSplit, PairRecord, load_manifest, split_groups
from dfacon.detector import DetectionVerdict, EmbeddingIndex, build_index, load_index, query, save_index
from dfacon.embedder import EncoderConfig, ProbePoint, make_encoder
from dfacon.errors import DfaconError
from dfacon.evaluation import MetricsReport, ablate_probe, calibrate_threshold, evaluate
from dfacon.loss import LossConfig, supcon_gradient, supcon_loss
from dfacon.sampler import ContrastiveBatch, make_batches
from dfacon.synth import SynthConfig, generate
from dfacon.trainer import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "AnchorGroup", "AttackType", "ContrastiveBatch", "CriterionConfig", "CriterionReport", "DatasetSplit",
    "DetectionVerdict", "DfaconError", "EmbeddingIndex", "EncoderConfig", "LossConfig", "MetricsReport",
    "PairRecord", "ProbePoint", "SynthConfig", "TrainConfig", "Transform", "ablate_probe", "build_index",
    "calibrate_threshold", "check_infringement", "evaluate", "generate", "load_checkpoint", "load_index",
    "load_manifest", "make_batches", "make_encoder", "query", "save_checkpoint", "save_index",
    "split_groups", "supcon_gradient", "supcon_loss", "train",
]
