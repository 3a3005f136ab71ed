"""Learned comparison of image patches with numpy convolutional networks."""
from .arch import ArchSpec, infer_shapes, parse_arch, render_arch
from .checkpoint import load_checkpoint, load_model, save_checkpoint
from .dataset import (Normalization, PairList, PatchStore, fit_normalization, load_pair_list,
                      load_patch_store, preprocess)
from .evaluation import (BenchmarkReport, ScoredPairs, fpr_at_recall, homography_match_eval,
                         roc_curve, run_protocol)
from .models import (MatchingMode, ModelKind, PatchModel, build_model, build_reduced_model,
                     match_descriptors)
from .network import Sequential
from .stereo import (MRFParams, RectifiedPair, cost_volume, dense_descriptors, edge_weights,
                     mrf_energy, optimize_mrf, wta)
from .training import LabeledPair, TrainConfig, augment, hinge_objective, sgd_step, train

__version__ = "0.1.0"

__all__ = [
    "ArchSpec",
    "augment",
    "BenchmarkReport",
    "build_model",
    "build_reduced_model",
    "cost_volume",
    "dense_descriptors",
    "edge_weights",
    "fit_normalization",
    "fpr_at_recall",
    "hinge_objective",
    "homography_match_eval",
    "infer_shapes",
    "LabeledPair",
    "load_checkpoint",
    "load_model",
    "load_pair_list",
    "load_patch_store",
    "match_descriptors",
    "MatchingMode",
    "ModelKind",
    "mrf_energy",
    "MRFParams",
    "Normalization",
    "optimize_mrf",
    "PairList",
    "parse_arch",
    "PatchModel",
    "PatchStore",
    "preprocess",
    "RectifiedPair",
    "render_arch",
    "roc_curve",
    "run_protocol",
    "save_checkpoint",
    "ScoredPairs",
    "Sequential",
    "sgd_step",
    "train",
    "TrainConfig",
    "wta",
]
