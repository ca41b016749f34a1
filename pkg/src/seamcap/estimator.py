"""scikit-learn style wrappers around normalisation and the pose network."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import neuralnet as nnm
from .exceptions import ConfigError, DataError
from .kinematics import POSE_DIM, Skeleton, TEMPLATE_ARM_LENGTH, forward_kinematics, mpjpe
from .signals import HISTORY, WINDOW, WINDOW_MEDIAN_SCALE, channel_indices, normalize_session


def _check_windows(X, n_channels=None):
    X = check_array(X, allow_nd=True, dtype=[np.float32, np.float64], copy=False)
    if X.ndim != 3:
        raise DataError(f"expected windows (n, frames, channels), got shape {X.shape}")
    if n_channels is not None and X.shape[-1] != n_channels:
        raise DataError(f"expected {n_channels} channels, got {X.shape[-1]}")
    return X


def _arm_lengths(arm_length, n):
    if arm_length is None:
        arm_length = TEMPLATE_ARM_LENGTH
    a = np.asarray(arm_length, dtype=float)
    a = np.full(n, float(a)) if a.ndim == 0 else a.reshape(-1)
    if len(a) != n or not np.all(np.isfinite(a)) or np.any(a <= 0):
        raise DataError("arm_length must be positive and scalar or one per window")
    return a


def joints_for(pose, arm_length) -> np.ndarray:
    """Forward kinematics with a per-row arm length; pose (n, 78) -> (n, 8, 3)."""
    pose = np.asarray(pose, dtype=float)
    a = _arm_lengths(arm_length, len(pose))
    out = np.empty((len(pose), 8, 3))
    for length in np.unique(a):
        m = a == length
        out[m] = forward_kinematics(pose[m], Skeleton.from_arm_length(length))
    return out


class WindowNormalizer(TransformerMixin, BaseEstimator):
    """Turn raw integer codes (n_frames, 8) into normalised windows.

    Stateless apart from the channel bookkeeping; ``remove`` names seam
    groups whose channels are dropped after normalisation.
    """

    def __init__(self, hop=1, history=HISTORY, window=WINDOW,
                 scale=WINDOW_MEDIAN_SCALE, remove=()):
        self.hop = hop
        self.history = history
        self.window = window
        self.scale = scale
        self.remove = remove

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if self.hop < 1 or self.window < 1 or self.history < self.window:
            raise ConfigError("need hop >= 1 and history >= window >= 1")
        self.n_features_in_ = X.shape[1]
        self.channels_ = channel_indices(self.remove) if self.remove else list(range(X.shape[1]))
        return self

    def transform(self, X):
        check_is_fitted(self, "channels_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise DataError(f"expected {self.n_features_in_} channels, got {X.shape[1]}")
        W, ends = normalize_session(X, hop=self.hop, history=self.history,
                                    window=self.window, scale=self.scale)
        self.end_index_ = ends
        return W[..., self.channels_]


class SeamPoseRegressor(BaseEstimator):
    """Windows (n, 96, C) -> pose vectors (n, 78).

    ``stage="independent"`` trains from scratch; ``stage="adaptive"`` with
    ``warm_start=True`` fine-tunes the already fitted network.
    """

    def __init__(self, hidden=256, embed=96, dec_hidden=256, input_gain=10.0,
                 stage="independent", epochs=None, learning_rate=None, batch_size=512,
                 augment=True, warm_start=False, dtype="float32", random_state=0):
        self.hidden = hidden
        self.embed = embed
        self.dec_hidden = dec_hidden
        self.input_gain = input_gain
        self.stage = stage
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.augment = augment
        self.warm_start = warm_start
        self.dtype = dtype
        self.random_state = random_state

    def _train_config(self):
        return nnm.TrainConfig(stage=self.stage, epochs=self.epochs, start_lr=self.learning_rate,
                               batch_size=self.batch_size, seed=int(self.random_state or 0),
                               augment=self.augment, dtype=self.dtype)

    @staticmethod
    def _as_data(X, y, arm_length):
        y = check_array(y, dtype=np.float64)
        if y.shape != (len(X), POSE_DIM):
            raise DataError(f"y must be (n, {POSE_DIM}), got {y.shape}")
        a = _arm_lengths(arm_length, len(X))
        return {"X": X, "pose": y, "joints": joints_for(y, a), "arm_length": a}

    def fit(self, X, y, arm_length=None, eval_set=None, log=None):
        """Fit on windows ``X`` and pose targets ``y``.

        ``arm_length`` is a scalar or one value per window. ``eval_set`` is
        ``(X_val, y_val[, arm_length_val])`` and selects the best epoch.
        """
        config = self._train_config()
        X = _check_windows(X)
        data = self._as_data(X, y, arm_length)
        val = None
        if eval_set is not None:
            Xv, yv, *av = eval_set
            val = self._as_data(_check_windows(Xv, X.shape[-1]), yv, av[0] if av else None)
        init = None
        if config.stage == "adaptive":
            if not (self.warm_start and hasattr(self, "model_")):
                raise ConfigError("adaptive stage needs warm_start=True and a fitted model")
            init = self.model_
        elif self.warm_start and hasattr(self, "model_"):
            init = self.model_
        arch = nnm.Architecture(n_channels=X.shape[-1], embed=self.embed, hidden=self.hidden,
                                dec_hidden=self.dec_hidden, input_gain=self.input_gain)
        self.model_, rows = nnm.train(config, data, val, init=init, arch=arch, log=log)
        self.history_ = getattr(self, "history_", []) + [dict(r, stage=config.stage) for r in rows]
        self.n_features_in_ = X.shape[-1]
        return self

    @torch.no_grad()
    def predict(self, X, batch_size=512):
        check_is_fitted(self, "model_")
        X = _check_windows(X, self.n_features_in_)
        dtype = next(self.model_.parameters()).dtype
        self.model_.eval()
        out = [self.model_(torch.as_tensor(X[i:i + batch_size], dtype=dtype)).double().numpy()
               for i in range(0, len(X), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, POSE_DIM))

    def predict_joints(self, X, arm_length=None):
        """Pelvis-relative joint positions (n, 8, 3) in metres."""
        pose = self.predict(X)
        return joints_for(pose, _arm_lengths(arm_length, len(pose)))

    def score(self, X, y, arm_length=None):
        """Negative MPJPE in centimetres (higher is better)."""
        truth = joints_for(check_array(y, dtype=np.float64), _arm_lengths(arm_length, len(y)))
        return -mpjpe(self.predict_joints(X, arm_length), truth)

    # ---- persistence

    def save(self, directory):
        check_is_fitted(self, "model_")
        nnm.save_checkpoint(directory, self.model_, estimator=self.get_params(),
                            n_features_in=self.n_features_in_)
        nnm.write_metrics_csv(Path(directory) / "metrics.csv", self.history_)

    @classmethod
    def load(cls, directory) -> "SeamPoseRegressor":
        model, manifest = nnm.load_checkpoint(directory)
        est = cls(**manifest.get("estimator", {}))
        est.model_ = model
        est.n_features_in_ = manifest.get("n_features_in", model.arch.n_channels)
        est.history_ = []
        return est

