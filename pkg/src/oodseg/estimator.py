"""scikit-learn style wrapper around the training schedules.

``OODSegmenter`` takes stacked volumes, binary masks and an environment id
per sample. Unlabeled samples (``labeled=False``) only feed the domain
predictor.
"""
from __future__ import annotations

from typing import Optional

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .evaluation import dice_score
from .trainer import FoldInputs, SampleBank, TrainConfig, predict_logits, run_schedule
from .volumes import AugmentationConfig


def check_volume_batch(X, shape=None) -> np.ndarray:
    """Validate an ``(n, W, H, D)`` stack of finite volumes; returns float32."""
    X = np.asarray(X)
    if X.ndim != 4:
        raise ValueError(f"expected volumes of shape (n, W, H, D), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("empty volume batch")
    if not np.issubdtype(X.dtype, np.number) or np.issubdtype(X.dtype, np.complexfloating):
        raise ValueError(f"volumes must be real-valued, got dtype {X.dtype}")
    X = X.astype(np.float32)
    if not np.isfinite(X).all():
        raise ValueError("volumes contain non-finite values")
    if shape is not None and tuple(X.shape[1:]) != tuple(shape):
        raise ValueError(f"volume shape {X.shape[1:]} differs from fitted shape {tuple(shape)}")
    return X


def check_masks(y, X: np.ndarray) -> np.ndarray:
    """Validate binary masks matching ``X``; returns uint8."""
    y = np.asarray(y)
    if y.shape != X.shape:
        raise ValueError(f"mask shape {y.shape} does not match volume shape {X.shape}")
    if not np.isin(np.unique(y), (0, 1)).all():
        raise ValueError("masks must be binary (0/1)")
    return y.astype(np.uint8)


def check_environments(environments, n: int) -> np.ndarray:
    envs = np.asarray(environments)
    if envs.shape != (n,):
        raise ValueError(f"expected {n} environment ids, got shape {envs.shape}")
    if not np.issubdtype(envs.dtype, np.integer):
        if np.issubdtype(envs.dtype, np.floating) and np.all(envs == np.round(envs)):
            envs = envs.astype(np.int64)
        else:
            raise ValueError("environment ids must be integers")
    return envs.astype(np.int64)


def _zscore(X: np.ndarray) -> np.ndarray:
    axes = (1, 2, 3)
    mean = X.mean(axis=axes, keepdims=True)
    std = X.std(axis=axes, keepdims=True)
    return ((X - mean) / np.where(std > 0, std, 1.0)).astype(np.float32)


class OODSegmenter(BaseEstimator):
    """Binary 3D segmenter trained with ERM, V-REx, domain prediction or both.

    Parameters mirror :class:`~oodseg.trainer.TrainConfig`; ``val_fraction``
    of each environment is held out (seeded) to guide early stopping.
    """

    def __init__(self, method: str = "erm", lambda_vrex: float = 0.0, alpha: float = 1.0,
                 beta: float = 1.0, learning_rate: float = 5e-5, dp_learning_rate: Optional[float] = None,
                 max_epochs: int = 100, patience: int = 20, warmup_epochs: int = 5,
                 joint_epochs: int = 5, dp_inner_steps: int = 1, batch_budget: int = 6,
                 base_channels: int = 8, levels: int = 3, val_fraction: float = 0.1, augment: bool = True,
                 normalize: bool = True, seed: int = 0):
        self.method = method
        self.lambda_vrex = lambda_vrex
        self.alpha = alpha
        self.beta = beta
        self.learning_rate = learning_rate
        self.dp_learning_rate = dp_learning_rate
        self.max_epochs = max_epochs
        self.patience = patience
        self.warmup_epochs = warmup_epochs
        self.joint_epochs = joint_epochs
        self.dp_inner_steps = dp_inner_steps
        self.batch_budget = batch_budget
        self.base_channels = base_channels
        self.levels = levels
        self.val_fraction = val_fraction
        self.augment = augment
        self.normalize = normalize
        self.seed = seed

    def _config(self) -> TrainConfig:
        aug = AugmentationConfig(seed=self.seed) if self.augment else AugmentationConfig.disabled()
        return TrainConfig(
            method=self.method, lambda_vrex=self.lambda_vrex, alpha=self.alpha, beta=self.beta,
            learning_rate=self.learning_rate, dp_learning_rate=self.dp_learning_rate,
            max_epochs=self.max_epochs, patience=self.patience, warmup_epochs=self.warmup_epochs,
            joint_epochs=self.joint_epochs, dp_inner_steps=self.dp_inner_steps,
            batch_budget=self.batch_budget,
            dp_batch_budget=self.batch_budget, base_channels=self.base_channels,
            levels=self.levels, augmentation=aug, seed=self.seed,
        )

    def _prepare(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_volume_batch(X, self.input_shape_)
        return _zscore(X) if self.normalize else X

    def fit(self, X, y, environments, labeled=None):
        """Train on volumes ``X`` with masks ``y``.

        ``labeled`` is an optional boolean vector; rows of ``y`` for
        unlabeled samples are ignored.
        """
        cfg = self._config()
        X = check_volume_batch(X)
        envs = check_environments(environments, len(X))
        labeled = np.ones(len(X), bool) if labeled is None else np.asarray(labeled, bool)
        if labeled.shape != (len(X),):
            raise ValueError("labeled must be a boolean vector with one entry per sample")
        if not labeled.any():
            raise ValueError("need at least one labeled sample")
        y = np.asarray(y)
        y = check_masks(np.where(labeled[:, None, None, None], y, 0), X)
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.normalize:
            X = _zscore(X)

        bank = SampleBank()
        ids = [f"s{i:06d}" for i in range(len(X))]
        for i, sid in enumerate(ids):
            bank.add(sid, X[i], y[i] if labeled[i] else None, int(envs[i]))
        seg_train, seg_val, dp_train, dp_val = {}, {}, {}, {}
        for env_id in np.unique(envs):
            idx = np.flatnonzero(envs == env_id)
            rng = np.random.default_rng([self.seed, int(env_id)])
            idx = idx[rng.permutation(len(idx))]
            n_val = int(np.floor(self.val_fraction * len(idx) + 0.5)) if len(idx) > 1 else 0
            val, tr = idx[:n_val], idx[n_val:]
            e = int(env_id)
            dp_train[e] = [ids[i] for i in sorted(tr)]
            dp_val[e] = [ids[i] for i in sorted(val)]
            seg_train[e] = [ids[i] for i in sorted(tr) if labeled[i]]
            seg_val[e] = [ids[i] for i in sorted(val) if labeled[i]]
        inputs = FoldInputs(
            {e: v for e, v in seg_train.items() if v}, {e: v for e, v in seg_val.items() if v},
            {e: v for e, v in dp_train.items() if v}, {e: v for e, v in dp_val.items() if v},
        )
        if cfg.method != "erm" and len(inputs.training_envs) < 2:
            raise ValueError(f"{cfg.method} needs at least two environments")
        state = run_schedule(bank, inputs, cfg)
        self.state_ = state
        self.model_ = state.model
        self.input_shape_ = tuple(X.shape[1:])
        self.environments_ = np.array(state.domain_envs)
        self.history_ = state.history
        return self

    def predict_proba(self, X) -> np.ndarray:
        """Voxelwise foreground probabilities."""
        Xp = self._prepare(X)
        seg, _ = predict_logits(self.model_, Xp)
        return torch.sigmoid(torch.from_numpy(seg)).numpy()

    def predict(self, X) -> np.ndarray:
        Xp = self._prepare(X)
        seg, _ = predict_logits(self.model_, Xp)
        return (seg > 0).astype(np.uint8)

    def predict_domain(self, X) -> np.ndarray:
        """Environment id predicted by the domain head for each volume."""
        Xp = self._prepare(X)
        _, dom = predict_logits(self.model_, Xp)
        return self.environments_[np.argmax(dom[:, : len(self.environments_)], axis=1)]

    def transform(self, X) -> np.ndarray:
        """Shared representation features, shape ``(n, C, W, H, D)``."""
        Xp = self._prepare(X)
        dtype = next(self.model_.parameters()).dtype
        out = []
        with torch.no_grad():
            for i in range(0, len(Xp), 8):
                x = torch.from_numpy(Xp[i:i + 8][:, None]).to(dtype)
                out.append(self.model_.features(x).numpy())
        return np.concatenate(out)

    def score(self, X, y) -> float:
        """Mean per-volume Dice in percent."""
        pred = self.predict(X)
        y = check_masks(y, pred)
        return float(np.mean([dice_score(p, t) for p, t in zip(pred, y)]))
