"""Winner-takes-all regression loss, difficulty-aware contrastive loss and
the imbalanced-learning baselines (reweighting, resampling, LDAM).

Batch functions return gradients alongside values so the trainer can chain
them into :func:`tailtraj.model.backward`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

BASELINES = ("none", "reweight_invfreq", "reweight_effective", "ldam", "resample")


@dataclass(frozen=True)
class LossConfig:
    """Loss hyperparameters.

    ``theta_p``/``theta_n`` are in meters of difficulty score. They may be
    left as None and filled in by threshold calibration before training.
    """

    tau: float = 0.5
    lam: float = 50.0
    theta_p: Optional[float] = None
    theta_n: Optional[float] = None
    k: int = 1
    denominator_mode: str = "masked"
    normalize_z: bool = True
    ewta_mode: str = "per_step"
    baseline: str = "none"
    beta: float = 0.999
    ldam_C: float = 1.0
    ldam_s: float = 1.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.theta_p is not None and not self.theta_p > 0:
            raise ValueError("theta_p must be > 0")
        if self.theta_p is not None and self.theta_n is not None and self.theta_p > self.theta_n:
            raise ValueError(f"theta_p ({self.theta_p}) must not exceed theta_n ({self.theta_n})")
        if self.denominator_mode not in ("masked", "full"):
            raise ValueError(f"denominator_mode must be 'masked' or 'full', got {self.denominator_mode!r}")
        if self.ewta_mode not in ("per_step", "per_trajectory"):
            raise ValueError(f"ewta_mode must be 'per_step' or 'per_trajectory', got {self.ewta_mode!r}")
        if self.baseline not in BASELINES:
            raise ValueError(f"baseline must be one of {BASELINES}, got {self.baseline!r}")
        if not 0 <= self.beta < 1:
            raise ValueError("beta must lie in [0, 1)")
        if self.ldam_C <= 0 or self.ldam_s <= 0:
            raise ValueError("ldam_C and ldam_s must be > 0")

    def with_(self, **kw):
        return replace(self, **kw)


# ---------------------------------------------------------------------------
# EWTA


def _winner_mask(dist, k, mode):
    """dist (..., K, M) -> boolean mask with k winners per step (ties to lower index)."""
    K, M = dist.shape[-2:]
    if mode == "per_step":
        order = np.argsort(dist, axis=-2, kind="stable")[..., :k, :]
        mask = np.zeros(dist.shape, dtype=bool)
        np.put_along_axis(mask, order, True, axis=-2)
        return mask
    total = dist.sum(axis=-1)
    order = np.argsort(total, axis=-1, kind="stable")[..., :k]
    sel = np.zeros(total.shape, dtype=bool)
    np.put_along_axis(sel, order, True, axis=-1)
    return np.broadcast_to(sel[..., None], dist.shape).copy()


def ewta_batch(hyps, gt, k, mode="per_step"):
    """Per-sample EWTA losses.

    hyps (B, K, M, 2), gt (B, M, 2). Returns ``(losses (B,), mask (B, K, M),
    grad (B, K, M, 2))`` where ``grad[b]`` is d losses[b] / d hyps[b].
    """
    K, M = hyps.shape[1:3]
    if not 1 <= k <= K:
        raise ValueError(f"k must lie in [1, {K}], got {k}")
    diff = hyps - gt[:, None]
    dist = np.sqrt((diff**2).sum(axis=-1))
    mask = _winner_mask(dist, k, mode)
    losses = (dist * mask).sum(axis=(1, 2)) / (M * k)
    safe = np.where(dist > 0, dist, 1.0)
    grad = np.where(mask[..., None] & (dist[..., None] > 0), diff / safe[..., None], 0.0) / (M * k)
    return losses, mask, grad


def ewta_loss(hyps, gt, k, mode="per_step"):
    """EWTA loss of one sample: hyps (K, M, 2), gt (M, 2) -> (loss, winner mask (K, M))."""
    hyps = np.asarray(hyps, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if hyps.ndim != 3 or gt.shape != hyps.shape[1:]:
        raise ValueError(f"inconsistent shapes {hyps.shape} and {gt.shape}")
    losses, mask, _ = ewta_batch(hyps[None], gt[None], k, mode)
    return float(losses[0]), mask[0]


def ewta_schedule(K, epochs_per_stage, epoch):
    if epochs_per_stage < 1:
        raise ValueError("epochs_per_stage must be >= 1")
    return max(1, K - epoch // epochs_per_stage)


# ---------------------------------------------------------------------------
# contrastive


@dataclass
class ContrastiveDiagnostics:
    per_anchor: np.ndarray  # loss of each anchor (0 where no positives)
    positives_per_anchor: np.ndarray
    negatives_per_anchor: np.ndarray
    anchors_used: int


def pair_masks(scores, theta_p, theta_n):
    s = np.asarray(scores, dtype=np.float64)
    d = np.abs(s[:, None] - s[None, :])
    off = ~np.eye(len(s), dtype=bool)
    pos = (d < theta_p) & off
    neg = (d > theta_n) & off if theta_n is not None else np.zeros_like(pos)
    return pos, neg


def contrastive_loss(embeddings, scores, cfg, return_grad=False):
    """Difficulty-driven supervised contrastive loss averaged over anchors with positives."""
    Z = np.asarray(embeddings, dtype=np.float64)
    s = np.asarray(scores, dtype=np.float64)
    N = len(Z)
    if N < 2 or len(s) != N:
        raise ValueError("need at least 2 embeddings with one score each")
    if cfg.theta_p is None or (cfg.denominator_mode == "masked" and cfg.theta_n is None):
        raise ValueError("theta_p/theta_n must be set (run threshold calibration first)")
    if cfg.theta_n is not None and cfg.theta_p > cfg.theta_n:
        raise ValueError("theta_p must not exceed theta_n")

    if cfg.normalize_z:
        norms = np.linalg.norm(Z, axis=1)
        if np.any(norms == 0):
            raise ValueError("zero-norm embedding cannot be normalized")
        U = Z / norms[:, None]
    else:
        U = Z
    pos, neg = pair_masks(s, cfg.theta_p, cfg.theta_n)
    if cfg.denominator_mode == "masked":
        denom_set = pos | neg
    else:
        denom_set = ~np.eye(N, dtype=bool)

    sim = U @ U.T / cfg.tau
    # log-sum-exp over each anchor's denominator set, shifted for stability
    shift = np.where(denom_set, sim, -np.inf).max(axis=1, initial=-np.inf)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    ex = np.where(denom_set, np.exp(sim - shift[:, None]), 0.0)
    denom = ex.sum(axis=1)
    n_pos = pos.sum(axis=1)
    used = n_pos > 0
    log_d = np.log(np.where(used, denom, 1.0)) + shift
    per_anchor = np.zeros(N)
    for i in np.flatnonzero(used):
        per_anchor[i] = -(sim[i, pos[i]] - log_d[i]).sum() / n_pos[i]
    A = int(used.sum())
    loss = float(per_anchor.sum() / A) if A else 0.0
    diag = ContrastiveDiagnostics(per_anchor, n_pos, neg.sum(axis=1), A)
    if not return_grad:
        return loss, diag

    dZ = np.zeros_like(Z)
    if A:
        q = ex / np.where(used, denom, 1.0)[:, None]
        G = np.where(used[:, None], q - pos / np.maximum(n_pos, 1)[:, None], 0.0) / A
        dU = (G + G.T) @ U / cfg.tau
        if cfg.normalize_z:
            dZ = (dU - U * (U * dU).sum(axis=1, keepdims=True)) / norms[:, None]
        else:
            dZ = dU
    return loss, diag, dZ


# ---------------------------------------------------------------------------
# joint objective


@dataclass
class LossBreakdown:
    total: float
    ewta: float
    contrastive: float
    winner_mask: np.ndarray
    positives_per_anchor: np.ndarray
    anchors_used: int
    aux: float = 0.0
    grads: dict = field(default_factory=dict, repr=False)


def joint_loss(hyps, gt, embeddings, scores, cfg, sample_weights=None, logits=None, classes=None, class_counts=None):
    """Batch EWTA (weighted mean) plus ``lam`` times the contrastive loss.

    Supplying ``logits``/``classes``/``class_counts`` adds the LDAM head term
    with unit weight. Gradients are returned in ``breakdown.grads`` under the
    keys ``hyps``, ``z`` and ``logits``.
    """
    B = len(hyps)
    losses, mask, g_h = ewta_batch(hyps, gt, cfg.k, cfg.ewta_mode)
    if sample_weights is None:
        ewta = float(losses.mean())
        d_hyps = g_h / B
    else:
        w = np.asarray(sample_weights, dtype=np.float64)
        ewta = float((w * losses).sum() / B)
        d_hyps = g_h * (w / B)[:, None, None, None]

    contr, n_pos, used = 0.0, np.zeros(B, dtype=np.int64), 0
    d_z = None
    if cfg.lam > 0:
        contr, diag, dZ = contrastive_loss(embeddings, scores, cfg, return_grad=True)
        n_pos, used = diag.positives_per_anchor, diag.anchors_used
        d_z = cfg.lam * dZ
    elif cfg.theta_p is not None and (cfg.theta_n is not None or cfg.denominator_mode == "full"):
        contr, diag = contrastive_loss(embeddings, scores, cfg)
        n_pos, used = diag.positives_per_anchor, diag.anchors_used
    total = ewta + cfg.lam * contr if cfg.lam > 0 else ewta

    aux, d_logits = 0.0, None
    if logits is not None:
        aux, d_logits = ldam_batch(logits, classes, class_counts, cfg.ldam_C, cfg.ldam_s, sample_weights)
        total += aux
    grads = {"hyps": d_hyps, "z": d_z, "logits": d_logits}
    return LossBreakdown(total, ewta, contr, mask, n_pos, used, aux, grads)


# ---------------------------------------------------------------------------
# class weights, resampling, LDAM


def _normalize_weights(raw, counts):
    counts = np.asarray(counts, dtype=np.float64)
    return raw * counts.sum() / (raw * counts).sum()


def _counts(bins_or_counts):
    counts = getattr(bins_or_counts, "counts", bins_or_counts)
    counts = np.asarray(counts, dtype=np.float64)
    if counts.size == 0 or np.any(counts <= 0):
        raise ValueError("every class needs at least one sample")
    return counts


def class_weights_inverse_freq(bins):
    """w_c proportional to 1/n_c with mean sample weight 1."""
    counts = _counts(bins)
    return _normalize_weights(1.0 / counts, counts)


def effective_number_raw(counts, beta):
    counts = np.asarray(counts, dtype=np.float64)
    if beta == 0:
        return np.ones_like(counts)
    return (1.0 - beta) / (1.0 - np.power(beta, counts))


def class_weights_effective(bins, beta):
    """Class-balanced weights from the effective number of samples, mean sample weight 1."""
    if not 0 <= beta < 1:
        raise ValueError("beta must lie in [0, 1)")
    counts = _counts(bins)
    return _normalize_weights(effective_number_raw(counts, beta), counts)


def resample_distribution(bins, sample_ids=None):
    """Per-sample draw probabilities proportional to 1/n_class, ordered like ``sample_ids``."""
    counts = _counts(bins)
    ids = sorted(bins.class_of) if sample_ids is None else list(sample_ids)
    inv = np.array([1.0 / counts[bins.class_of[i]] for i in ids])
    return inv / inv.sum()


def ldam_margins(counts, C):
    counts = _counts(counts)
    return C / counts**0.25


def ldam_batch(logits, classes, counts, C, s=1.0, sample_weights=None):
    """Mean label-distribution-aware margin cross-entropy and its logit gradient."""
    logits = np.asarray(logits, dtype=np.float64)
    classes = np.asarray(classes)
    B, n_cls = logits.shape
    if np.any(classes < 0) or np.any(classes >= n_cls):
        raise ValueError("class index out of range")
    delta = ldam_margins(counts, C)
    if len(delta) != n_cls:
        raise ValueError("counts must have one entry per class")
    rows = np.arange(B)
    adj = logits.copy()
    adj[rows, classes] -= delta[classes]
    a = s * adj
    a = a - a.max(axis=1, keepdims=True)
    logp = a - np.log(np.exp(a).sum(axis=1, keepdims=True))
    nll = -logp[rows, classes]
    w = np.ones(B) if sample_weights is None else np.asarray(sample_weights, dtype=np.float64)
    loss = float((w * nll).sum() / B)
    grad = np.exp(logp)
    grad[rows, classes] -= 1.0
    grad *= (s * w / B)[:, None]
    return loss, grad


def ldam_loss(logits, true_class, counts, C, s=1.0):
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= true_class < len(logits):
        raise ValueError(f"class index {true_class} out of range")
    return ldam_batch(logits[None], np.array([true_class]), counts, C, s)[0]
