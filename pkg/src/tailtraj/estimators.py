"""scikit-learn compatible wrappers around the difficulty scorer and the predictor."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .difficulty import DifficultyTable, KalmanConfig, kalman_score
from .evaluation import predict_scene
from .losses import LossConfig
from .model import ModelConfig
from .trainer import TrainConfig, train
from .validation import check_samples, split_windows


class KalmanDifficultyScorer(TransformerMixin, BaseEstimator):
    """Per-sample difficulty as the displacement error of a constant-velocity Kalman filter.

    ``transform`` takes samples (or full windows of shape (n, h+1+M, 2)
    together with ``horizon=M``) and returns a column of scores in meters.
    """

    def __init__(self, process_noise_std=0.05, obs_noise_std=0.05, reduce="mean", horizon=None):
        self.process_noise_std = process_noise_std
        self.obs_noise_std = obs_noise_std
        self.reduce = reduce
        self.horizon = horizon

    def _kalman(self):
        return KalmanConfig(self.process_noise_std, self.obs_noise_std, reduce=self.reduce)

    def _samples(self, X):
        if isinstance(X, (list, tuple)):
            return check_samples(X)
        if self.horizon is None:
            raise ValueError("horizon must be set to split array windows into history and future")
        return check_samples(*split_windows(X, self.horizon))

    def fit(self, X, y=None):
        self.kalman_config_ = self._kalman()
        self.n_samples_seen_ = len(self._samples(X))
        return self

    def transform(self, X):
        check_is_fitted(self, "kalman_config_")
        return np.array([[kalman_score(s, self.kalman_config_)] for s in self._samples(X)])


class MultiHypothesisForecaster(RegressorMixin, BaseEstimator):
    """K-hypothesis trajectory predictor trained with EWTA plus the difficulty contrastive term.

    ``predict`` returns (n, K, M, 2) positions in scene coordinates,
    ``transform`` the (n, embed_dim) embeddings and ``score`` the negative
    mean min-FDE (higher is better, as scikit-learn expects).
    """

    def __init__(
        self,
        n_hypotheses=20,
        embed_dim=64,
        hidden_widths=(64, 64),
        use_neighbors=True,
        max_neighbors=4,
        contrastive_weight=50.0,
        temperature=0.5,
        target_pos_ratio=0.1,
        target_neg_ratio=0.4,
        denominator_mode="masked",
        baseline="none",
        epochs_per_stage=5,
        batch_size=64,
        learning_rate=1e-3,
        kalman_process_noise=0.05,
        kalman_obs_noise=0.05,
        random_state=0,
    ):
        self.n_hypotheses = n_hypotheses
        self.embed_dim = embed_dim
        self.hidden_widths = hidden_widths
        self.use_neighbors = use_neighbors
        self.max_neighbors = max_neighbors
        self.contrastive_weight = contrastive_weight
        self.temperature = temperature
        self.target_pos_ratio = target_pos_ratio
        self.target_neg_ratio = target_neg_ratio
        self.denominator_mode = denominator_mode
        self.baseline = baseline
        self.epochs_per_stage = epochs_per_stage
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.kalman_process_noise = kalman_process_noise
        self.kalman_obs_noise = kalman_obs_noise
        self.random_state = random_state

    def _train_config(self, h, M):
        model = ModelConfig(
            h=h, M=M, K=self.n_hypotheses, embed_dim=self.embed_dim, hidden_widths=tuple(self.hidden_widths),
            use_neighbors=self.use_neighbors, max_neighbors=self.max_neighbors,
        )
        loss = LossConfig(
            tau=self.temperature, lam=self.contrastive_weight,
            denominator_mode=self.denominator_mode, baseline=self.baseline,
        )
        return TrainConfig(
            seed=self.random_state, batch_size=self.batch_size, epochs_per_stage=self.epochs_per_stage,
            lr=self.learning_rate, target_pos_ratio=self.target_pos_ratio,
            target_neg_ratio=self.target_neg_ratio, model=model, loss=loss,
        )

    def fit(self, X, y=None, difficulty=None):
        """Fit on samples (or histories ``X`` with futures ``y``).

        ``difficulty`` optionally supplies precomputed scores, either a
        :class:`DifficultyTable` or an array aligned with the samples;
        otherwise Kalman scores are computed here.
        """
        samples = check_samples(X, y)
        h, M = samples[0].h, samples[0].M
        if difficulty is None:
            kcfg = KalmanConfig(self.kalman_process_noise, self.kalman_obs_noise)
            table = DifficultyTable({s.sample_id: kalman_score(s, kcfg) for s in samples}, "train")
        elif isinstance(difficulty, DifficultyTable):
            table = difficulty
        else:
            values = np.asarray(difficulty, dtype=np.float64).ravel()
            if len(values) != len(samples):
                raise ValueError("difficulty must have one score per sample")
            table = DifficultyTable({s.sample_id: float(v) for s, v in zip(samples, values)}, "train")
        cfg = self._train_config(h, M)
        self.params_, self.run_log_ = train(cfg, samples, table)
        self.train_config_ = cfg
        self.history_length_ = h
        self.horizon_ = M
        return self

    def _inputs(self, X, y=None):
        check_is_fitted(self, "params_")
        samples = check_samples(X, y, require_future=False)
        if isinstance(X, (list, tuple)):
            return samples
        if y is None:
            # dummy futures only serve packing; shape must match the model
            for s in samples:
                s.future = np.zeros((self.horizon_, 2))
        return samples

    def predict(self, X):
        samples = self._inputs(X)
        hyps, _ = predict_scene(self.params_, samples)
        return hyps

    def transform(self, X):
        samples = self._inputs(X)
        _, z = predict_scene(self.params_, samples)
        return z

    def score(self, X, y=None, sample_weight=None):
        samples = self._inputs(X, y)
        hyps, _ = predict_scene(self.params_, samples)
        gt = np.stack([s.future for s in samples])
        fde = np.linalg.norm(hyps[:, :, -1] - gt[:, None, -1], axis=-1).min(axis=1)
        return -float(np.average(fde, weights=sample_weight))
