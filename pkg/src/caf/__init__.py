"""Certifying adapters on a frozen extractor, certified by Gaussian randomized smoothing."""
from caf.checkpoint import load_checkpoint, save_checkpoint
from caf.data import Dataset, load_idx, make_blobs, make_half_plane, split
from caf.model import AdaptiveModel, make_adapter
from caf.rng import Stream
from caf.smoothing import ABSTAIN, CertifyParams, NoiseModel, certify, certified_accuracy_curve, predict_smoothed
from caf.train import TrainConfig, finetune_ensemble, pretrain_clean, train_adapter

__all__ = [
    "ABSTAIN", "AdaptiveModel", "CertifyParams", "Dataset", "NoiseModel", "Stream", "TrainConfig",
    "certified_accuracy_curve", "certify", "finetune_ensemble", "load_checkpoint", "load_idx",
    "make_adapter", "make_blobs", "make_half_plane", "predict_smoothed", "pretrain_clean",
    "save_checkpoint", "split", "train_adapter",
]
