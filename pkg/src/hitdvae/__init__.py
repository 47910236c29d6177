"""Hierarchical transformer dynamical VAE for stochastic 3D human motion
generation, built on a self-contained float64 reverse-mode autodiff engine."""

__version__ = "0.1.0"

from .data import Corpus, MotionClip, PoseSequence, Skeleton, preprocess, synth_corpus
from .generator import generate, generate_mean
from .losses import LossBreakdown, LossWeights
from .metrics import ActionClassifier, FeatureStats, MetricReport, apd, fid
from .model import DiagGaussian, HiTDVAE, ModelConfig, reparameterize
from .nn import CouplingFlow, GcnBlock, GruCell, MultiHeadAttention
from .tensor import AdamState, Tensor, adam_step, grad_check
from .trainer import TrainSchedule, fit, pretrain_flow, train_step

__all__ = [
    "__version__",
    "Corpus", "MotionClip", "PoseSequence", "Skeleton", "preprocess", "synth_corpus",
    "generate", "generate_mean",
    "LossBreakdown", "LossWeights",
    "ActionClassifier", "FeatureStats", "MetricReport", "apd", "fid",
    "DiagGaussian", "HiTDVAE", "ModelConfig", "reparameterize",
    "CouplingFlow", "GcnBlock", "GruCell", "MultiHeadAttention",
    "AdamState", "Tensor", "adam_step", "grad_check",
    "TrainSchedule", "fit", "pretrain_flow", "train_step",
]
