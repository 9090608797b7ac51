"""Instance-batch normalized segmentation toolkit on a small numpy autodiff tape."""

from .autodiff import Tape, Var, grad_check
from .config import ConfigError, RunConfig, load_config, parse_config
from .data import SceneSpec, gen_dataset
from .divergence import ChannelStats, DivergenceReport, divergence_profile, kl_gaussian, layer_divergence, sym_kl
from .estimator import IBNSegmenter
from .losses import LossConfig, bce_loss, dice_loss, hybrid_loss, lovasz_hinge, miou
from .nn import NormPolicy, ToyNet, build_toynet, forward_segmentation, load_checkpoint, save_checkpoint
from .training import OptimConfig, RunLog, TrainingDiverged, cross_modality_eval, lr_at, train

__version__ = "0.1.0"

__all__ = [
    "ChannelStats", "ConfigError", "DivergenceReport", "IBNSegmenter", "LossConfig", "NormPolicy",
    "OptimConfig", "RunConfig", "RunLog", "SceneSpec", "Tape", "ToyNet", "TrainingDiverged", "Var",
    "bce_loss", "build_toynet", "cross_modality_eval", "dice_loss", "divergence_profile",
    "forward_segmentation", "gen_dataset", "grad_check", "hybrid_loss", "kl_gaussian", "layer_divergence",
    "load_checkpoint", "load_config", "lovasz_hinge", "lr_at", "miou", "parse_config", "save_checkpoint",
    "sym_kl", "train",
]
