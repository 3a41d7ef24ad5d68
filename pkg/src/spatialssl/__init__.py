"""Self-supervised spatial pretext tasks on synthetic CT-like volumes."""
from .config import TrainConfig
from .numerics import Eval, ParamVector, Tape, backward, grad_check
from .sampler import build_coupled_unit, sample_subregions
from .trainer import evaluate, initial_checkpoint, load_checkpoint, save_checkpoint, train
from .volume import Volume, load_raw, save_raw, synth_volume

__all__ = [
    "Eval", "ParamVector", "Tape", "TrainConfig", "Volume", "backward", "build_coupled_unit", "evaluate",
    "grad_check", "initial_checkpoint", "load_checkpoint", "load_raw", "sample_subregions", "save_checkpoint",
    "save_raw", "synth_volume", "train",
]
__version__ = "0.1.0"
