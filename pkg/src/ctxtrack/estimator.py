"""scikit-learn style wrapper: fit on sequences, predict boxes for a sequence."""
from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .config import DataConfig, ModelConfig, RunConfig, TrainConfig
from .trainer import eval_metrics, track_sequence, train


def check_sequence(seq):
    """A sequence needs ``boxes`` [T, 4], ``frame(t)`` and ``len``."""
    if not hasattr(seq, "frame") or not hasattr(seq, "boxes"):
        raise TypeError(f"expected a sequence with frame() and boxes, got {type(seq).__name__}")
    boxes = np.asarray(seq.boxes, dtype=np.float64)
    if boxes.ndim != 2 or boxes.shape[1] != 4 or len(boxes) != len(seq):
        raise ValueError(f"sequence boxes must be [T, 4] with T = {len(seq)}, got {boxes.shape}")
    if not np.isfinite(boxes).all() or (boxes[:, 2:] <= 0).any():
        raise ValueError("sequence boxes must be finite with positive size")
    return seq


def check_sequences(X) -> list:
    if hasattr(X, "frame"):
        X = [X]
    X = list(X)
    if not X:
        raise ValueError("need at least one sequence")
    return [check_sequence(s) for s in X]


class ContextTracker(BaseEstimator):
    """Tracker with scanned long-term context, trained on clips from ``X``."""

    def __init__(self, steps: int = 2000, batch_size: int = 16, clip_len: int = 2, lr_backbone: float = 5e-4,
                 insertion_layers=(3, 6, 9), n_context: int = 1, depth: int = 9, d_enc: int = 64,
                 window=None, search_factor: float = 4.0, template_factor: float = 2.0, seed: int = 0):
        self.steps = steps
        self.batch_size = batch_size
        self.clip_len = clip_len
        self.lr_backbone = lr_backbone
        self.insertion_layers = insertion_layers
        self.n_context = n_context
        self.depth = depth
        self.d_enc = d_enc
        self.window = window
        self.search_factor = search_factor
        self.template_factor = template_factor
        self.seed = seed

    def run_config(self) -> RunConfig:
        base = RunConfig()
        return replace(
            base,
            model=ModelConfig(depth=self.depth, d_enc=self.d_enc, insertion_layers=tuple(self.insertion_layers),
                              n_context=self.n_context, window=self.window),
            data=DataConfig(search_factor=self.search_factor, template_factor=self.template_factor),
            train=TrainConfig(steps=self.steps, batch_size=self.batch_size, clip_len=self.clip_len,
                              lr_backbone=self.lr_backbone, seed=self.seed),
        )

    def fit(self, X, y=None):
        pool = check_sequences(X)
        result = train(self.run_config(), pool)
        self.model_ = result.model
        self.loss_curve_ = result.losses
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("ContextTracker is not fitted yet; call fit first")

    def track(self, seq, init_box=None):
        self._check_fitted()
        check_sequence(seq)
        return track_sequence(self.model_, seq, init_box=init_box, search_factor=self.search_factor,
                              template_factor=self.template_factor)

    def predict(self, X):
        """Boxes [T, 4] for one sequence, or a list of them for several."""
        if hasattr(X, "frame"):
            return self.track(X).boxes
        return [self.track(s).boxes for s in check_sequences(X)]

    def score(self, X, y=None) -> float:
        """Mean IoU over visible frames after the first, averaged across sequences."""
        seqs = check_sequences(X)
        vals = []
        for s in seqs:
            boxes = self.track(s).boxes
            occ = getattr(s, "occluded", None)
            vals.append(eval_metrics(boxes[1:], s.boxes[1:], None if occ is None else occ[1:]).mean_iou)
        return float(np.mean(vals))
