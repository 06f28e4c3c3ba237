"""Kalman-filter difficulty scores, top-p% selection and score binning."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class KalmanConfig:
    """Constant-velocity filter settings.

    ``process_noise_std`` is a per-step acceleration-like perturbation and
    ``obs_noise_std`` the position measurement noise, both in meters.
    ``reduce`` picks the displacement summary: ``"mean"`` over all future
    steps or ``"final"`` for the last step only.
    """

    process_noise_std: float = 0.05
    obs_noise_std: float = 0.05
    init_pos_std: float = 1.0
    init_vel_std: float = 1.0
    init_from: str = "first_two"
    reduce: str = "mean"

    def __post_init__(self):
        if self.process_noise_std < 0 or self.obs_noise_std < 0:
            raise ValueError("noise standard deviations must be >= 0")
        if self.init_from != "first_two":
            raise ValueError(f"unsupported init_from {self.init_from!r}")
        if self.reduce not in ("mean", "final"):
            raise ValueError(f"reduce must be 'mean' or 'final', got {self.reduce!r}")


class DifficultyError(ValueError):
    def __init__(self, message, sample_id=None):
        super().__init__(message if sample_id is None else f"{sample_id}: {message}")
        self.sample_id = sample_id


_F = np.array([[1.0, 0, 1, 0], [0, 1, 0, 1], [0, 0, 1, 0], [0, 0, 0, 1]])
_H = np.array([[1.0, 0, 0, 0], [0, 1, 0, 0]])


def _process_cov(q_std):
    # white-acceleration model with unit step, same block for both axes
    return np.kron([[0.25, 0.5], [0.5, 1.0]], np.eye(2)) * q_std**2


def kalman_extrapolate(history, M, cfg=KalmanConfig()):
    """Filter ``history`` (n, 2) and return M predict-only positions (M, 2)."""
    history = np.asarray(history, dtype=np.float64)
    if len(history) < 2:
        raise DifficultyError("history must contain at least 2 points")
    x = np.concatenate([history[1], history[1] - history[0]])
    P = np.diag([cfg.init_pos_std**2] * 2 + [cfg.init_vel_std**2] * 2)
    Q = _process_cov(cfg.process_noise_std)
    R = np.eye(2) * cfg.obs_noise_std**2
    for z in history[2:]:
        x = _F @ x
        P = _F @ P @ _F.T + Q
        S = _H @ P @ _H.T + R
        K = np.linalg.solve(S, _H @ P).T
        x = x + K @ (z - _H @ x)
        P = (np.eye(4) - K @ _H) @ P
    out = np.empty((M, 2))
    for m in range(M):
        x = _F @ x
        out[m] = x[:2]
    return out


def kalman_score(sample, cfg=KalmanConfig()):
    """Mean (or final) displacement between the filter extrapolation and the true future."""
    pred = kalman_extrapolate(sample.history, len(sample.future), cfg)
    err = np.linalg.norm(pred - sample.future, axis=1)
    value = float(err.mean() if cfg.reduce == "mean" else err[-1])
    if not math.isfinite(value):
        raise DifficultyError("non-finite difficulty score")
    return value


@dataclass
class DifficultyTable:
    entries: dict = field(default_factory=dict)
    split: str = ""

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, sample_id):
        return self.entries[sample_id]

    def __contains__(self, sample_id):
        return sample_id in self.entries

    def subset(self, ids, split=None):
        return DifficultyTable({i: self.entries[i] for i in ids}, split if split is not None else self.split)

    def scores(self, ids):
        return np.array([self.entries[i] for i in ids], dtype=np.float64)

    def to_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", "score"])
            for sid in sorted(self.entries):
                w.writerow([sid, f"{self.entries[sid]:.9f}"])

    @classmethod
    def from_csv(cls, path, split=""):
        entries = {}
        with Path(path).open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["sample_id", "score"]:
                raise ValueError(f"{path}: expected header 'sample_id,score', got {header}")
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != 2:
                    raise ValueError(f"{path}: line {lineno}: expected 2 fields")
                if row[0] in entries:
                    raise ValueError(f"{path}: line {lineno}: duplicate sample_id {row[0]!r}")
                entries[row[0]] = float(row[1])
        return cls(entries, split)


def score_split(samples, cfg=KalmanConfig(), split=""):
    entries = {}
    for s in samples:
        try:
            entries[s.sample_id] = kalman_score(s, cfg)
        except DifficultyError as exc:
            raise DifficultyError(str(exc), s.sample_id) from None
    return DifficultyTable(entries, split)


def top_percent(table, p):
    """Ids of the ceil(p% of N) hardest samples, hardest first, ties by id."""
    if not 0 < p <= 100:
        raise ValueError(f"percent must lie in (0, 100], got {p}")
    n = math.ceil(p / 100 * len(table) - 1e-9)
    ranked = sorted(table.entries.items(), key=lambda kv: (-kv[1], kv[0]))
    return [sid for sid, _ in ranked[:n]]


@dataclass
class DifficultyBins:
    edges: np.ndarray
    tail_threshold: float
    class_of: dict
    counts: np.ndarray

    @property
    def n_classes(self):
        return len(self.counts)


def bin_scores(table, bin_width, tail_threshold):
    """Discretize scores into dense pseudo-classes with a single tail class."""
    if bin_width <= 0 or tail_threshold <= 0:
        raise ValueError("bin_width and tail_threshold must be > 0")
    n_raw = int(math.ceil(tail_threshold / bin_width))
    raw = {}
    for sid, s in table.entries.items():
        raw[sid] = n_raw if s >= tail_threshold else min(int(math.floor(s / bin_width)), n_raw - 1)
    used = sorted(set(raw.values()))
    dense = {r: i for i, r in enumerate(used)}
    class_of = {sid: dense[r] for sid, r in raw.items()}
    counts = np.bincount(list(class_of.values()), minlength=len(used)).astype(np.int64)
    # lower edge of each surviving class, then the upper bound of the last one
    lows = [min(r * bin_width, tail_threshold) for r in used]
    edges = np.array(lows + [math.inf]) if used else np.array([0.0, math.inf])
    return DifficultyBins(edges, float(tail_threshold), class_of, counts)
