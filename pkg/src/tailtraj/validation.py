"""Input coercion shared by the estimators.

Estimators accept either a list of :class:`~tailtraj.data.TrajectorySample`
or plain arrays: histories ``(n, h+1, 2)`` with optional futures
``(n, M, 2)``.
"""

from __future__ import annotations

import numpy as np

from .data import TrajectorySample


def _as_tracks(a, name, min_len):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 3 or a.shape[2] != 2:
        raise ValueError(f"{name} must have shape (n_samples, n_steps, 2), got {a.shape}")
    if a.shape[1] < min_len:
        raise ValueError(f"{name} needs at least {min_len} steps, got {a.shape[1]}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains NaN or inf")
    return a


def check_samples(X, y=None, require_future=True):
    """Return a list of samples built from ``X`` (and ``y`` when X is an array)."""
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], TrajectorySample):
        if y is not None:
            raise ValueError("y must be None when X holds TrajectorySample objects")
        return list(X)
    if isinstance(X, (list, tuple)) and not X:
        raise ValueError("empty input")
    hist = _as_tracks(X, "X", 2)
    if y is None:
        if require_future:
            raise ValueError("future trajectories y are required")
        fut = np.zeros((len(hist), 1, 2))
    else:
        fut = _as_tracks(y, "y", 1)
        if len(fut) != len(hist):
            raise ValueError(f"X and y have different lengths ({len(hist)} vs {len(fut)})")
    return [TrajectorySample(f"sample/{i:08d}", hist[i], fut[i]) for i in range(len(hist))]


def split_windows(W, horizon):
    """Split full windows ``(n, h+1+M, 2)`` into (histories, futures)."""
    W = _as_tracks(W, "X", horizon + 2)
    return W[:, :-horizon], W[:, -horizon:]
