"""scikit-learn style front end.

``X`` is an array of stereo pairs shaped [N, 2, H, W, 3] (left then right,
values in [0, 1]); ``y`` holds left-view disparities [N, H, W] with
non-finite entries marking invalid pixels.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .arch_space import ArchConfig, SearchSpace, check_input_hw
from .data import StereoSample
from .network import ElasticStereoNet
from .trainer import SHRINK_STAGES, ShrinkSchedule, Trainer, as_dataset


def check_stereo_pairs(X, scale: int | None = None) -> np.ndarray:
    """Validate and convert stereo pairs to float64 [N, 2, H, W, 3]."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 4:
        X = X[None]
    if X.ndim != 5 or X.shape[1] != 2 or X.shape[-1] != 3:
        raise ValueError(f"expected stereo pairs of shape [N, 2, H, W, 3], got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("no samples")
    if not np.isfinite(X).all():
        raise ValueError("images contain non-finite values")
    if scale is not None:
        check_input_hw(X.shape[2:4], scale)
    return X


def check_disparity(y, X: np.ndarray, d_max: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Disparity array and its valid mask, checked against ``X``."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape != X.shape[:1] + X.shape[2:4]:
        raise ValueError(f"disparity shape {y.shape} does not match pairs {X.shape}")
    valid = np.isfinite(y) & (y >= 0)
    if d_max is not None:
        valid &= y < d_max
    if not valid.any(axis=(1, 2)).all():
        raise ValueError("every sample needs at least one valid pixel")
    return np.where(valid, y, 0.0), valid


def _samples(X, y, valid) -> list:
    return [StereoSample(X[i, 0], X[i, 1], y[i], valid[i]) for i in range(len(X))]


class ElasticStereoRegressor(RegressorMixin, BaseEstimator):
    """Trains the elastic supernet and predicts with a chosen subnet.

    ``fit`` trains the full network; ``shrink`` runs the shrinking stages;
    ``set_subnet`` picks the config used by ``predict``/``score``.
    """

    def __init__(self, max_disparity: int = 24, iterations: int = 2000,
                 shrink_iterations: int = 300, batch_size: int = 2, lr: float = 1e-3,
                 shrink_lr: float = 5e-4, seed: int = 0, config: ArchConfig | None = None):
        self.max_disparity = max_disparity
        self.iterations = iterations
        self.shrink_iterations = shrink_iterations
        self.batch_size = batch_size
        self.lr = lr
        self.shrink_lr = shrink_lr
        self.seed = seed
        self.config = config

    def _schedule(self) -> ShrinkSchedule:
        sch = ShrinkSchedule.desk(self.iterations, self.shrink_iterations, self.batch_size)
        sch.stages[0].optimizer.lr = self.lr
        for s in sch.stages[1:]:
            s.optimizer.lr = self.shrink_lr
        return sch

    def fit(self, X, y):
        space = SearchSpace(max_disparity=self.max_disparity)
        X = check_stereo_pairs(X, space.max_scale)
        y, valid = check_disparity(y, X, self.max_disparity)
        torch.manual_seed(self.seed)
        self.store_ = ElasticStereoNet(space)
        self.trainer_ = Trainer(self.store_, _samples(X, y, valid), self._schedule(), self.seed)
        self.trainer_.run_stage("full")
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def shrink(self, X=None, y=None, stages=SHRINK_STAGES):
        """Run shrinking stages in order (optionally on new data)."""
        check_is_fitted(self, "store_")
        if X is not None:
            X = check_stereo_pairs(X, self.store_.space.max_scale)
            y, valid = check_disparity(y, X, self.max_disparity)
            self.trainer_.dataset = as_dataset(_samples(X, y, valid))
        for name in stages:
            self.trainer_.run_stage(name)
        return self

    def set_subnet(self, config: ArchConfig | None):
        self.config = config
        return self

    def extract(self, config: ArchConfig | None = None):
        check_is_fitted(self, "store_")
        config = self.config if config is None else config
        return self.store_.extract(config if config is not None else self.store_.space.max_config())

    @torch.no_grad()
    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "store_")
        scale = self.config.scale if self.config is not None else self.store_.space.max_scale
        X = check_stereo_pairs(X, scale)
        t = torch.as_tensor(X.transpose(0, 1, 4, 2, 3).copy(), dtype=torch.get_default_dtype())
        self.store_.eval()
        out = [self.store_.predict(t[i:i + 4, 0], t[i:i + 4, 1], self.config)
               for i in range(0, len(t), 4)]
        return torch.cat(out).numpy().astype(np.float64)

    def score(self, X, y, sample_weight=None) -> float:
        """Negative mean EPE (higher is better)."""
        X = check_stereo_pairs(X)
        y, valid = check_disparity(y, X)
        pred = self.predict(X)
        per = np.array([np.abs(pred[i] - y[i])[valid[i]].mean() for i in range(len(X))])
        return -float(np.average(per, weights=sample_weight))
