import numpy as np

from tailtraj.data import TrajectorySample


def make_sample(points, h, sample_id="s", neighbors=None):
    pts = np.asarray(points, dtype=float)
    return TrajectorySample(sample_id, pts[: h + 1], pts[h + 1 :], neighbors if neighbors is not None else [])


def random_sample(rng, h=4, M=3, n_neighbors=0, sample_id="s"):
    steps = rng.normal(0, 0.5, size=(h + M + 1, 2))
    pts = np.cumsum(steps, axis=0) + rng.normal(0, 3, size=2)
    nb = [np.cumsum(rng.normal(0, 0.5, size=(h + 1, 2)), axis=0) + pts[h] for _ in range(n_neighbors)]
    return TrajectorySample(sample_id, pts[: h + 1], pts[h + 1 :], np.array(nb) if nb else [])


