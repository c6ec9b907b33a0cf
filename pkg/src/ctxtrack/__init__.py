"""Single-object tracking with a scanned long-term context token, on numpy."""
from .config import DataConfig, ModelConfig, RunConfig, TrainConfig, load_run_config
from .estimator import ContextTracker
from .model import TrackerModel, load_checkpoint, save_checkpoint
from .trainer import ablate, eval_metrics, track_sequence, train

__all__ = ["ContextTracker", "DataConfig", "ModelConfig", "RunConfig", "TrainConfig", "TrackerModel",
           "ablate", "eval_metrics", "load_checkpoint", "load_run_config", "save_checkpoint",
           "track_sequence", "train"]
__version__ = "0.1.0"
