"""Training loop: threshold calibration, EWTA stages, Adam and the imbalance baselines.

All randomness comes from ``numpy.random.default_rng`` seeded with
``(cfg.seed, purpose, ...)`` tuples, so a run is a pure function of its
config and inputs:

* ``(seed, 0)`` initializes the parameters,
* ``(seed, 1, epoch)`` shuffles or resamples one epoch,
* ``(seed, 2)`` subsamples score pairs during threshold calibration.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .difficulty import bin_scores
from .evaluation import evaluate
from .losses import (
    LossConfig,
    class_weights_effective,
    class_weights_inverse_freq,
    ewta_schedule,
    joint_loss,
    resample_distribution,
)
from .model import ModelConfig, backward, forward, init_params, pack_samples, save_checkpoint

log = logging.getLogger(__name__)

MAX_PAIRS = 1_000_000


class CalibrationError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    def __init__(self, epoch, batch, what="loss"):
        super().__init__(f"non-finite {what} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    batch_size: int = 64
    epochs_per_stage: int = 5
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    target_pos_ratio: float = 0.1
    target_neg_ratio: float = 0.4
    drw_start_epoch: Optional[int] = None
    bin_width: float = 0.5
    tail_threshold: float = 3.0
    eval_percents: tuple = (1.0, 2.0, 3.0)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs_per_stage < 1:
            raise ValueError("epochs_per_stage must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        for name in ("target_pos_ratio", "target_neg_ratio"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.target_pos_ratio + self.target_neg_ratio > 1:
            raise ValueError("target_pos_ratio + target_neg_ratio must not exceed 1")
        if self.drw_start_epoch is not None and self.drw_start_epoch < 0:
            raise ValueError("drw_start_epoch must be >= 0")

    @property
    def n_epochs(self):
        return self.model.K * self.epochs_per_stage

    def to_dict(self):
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["eval_percents"] = list(self.eval_percents)
        return d


# ---------------------------------------------------------------------------
# thresholds


def pairwise_differences(scores, seed=0, max_pairs=MAX_PAIRS):
    s = np.asarray(scores, dtype=np.float64)
    n = len(s)
    n_pairs = n * (n - 1) // 2
    if n_pairs <= max_pairs:
        i, j = np.triu_indices(n, k=1)
    else:
        rng = np.random.default_rng((seed, 2))
        i = rng.integers(0, n, size=max_pairs)
        j = rng.integers(0, n - 1, size=max_pairs)
        j = np.where(j >= i, j + 1, j)
    return np.sort(np.abs(s[i] - s[j]))


def calibrate_thresholds(scores, target_pos_ratio, target_neg_ratio, seed=0):
    """Pick (theta_p, theta_n) from the empirical pairwise score differences.

    theta_p is the smallest observed difference v with at least the target
    share of pairs strictly below v. theta_n is the largest observed v whose
    upper tail (differences >= v) still holds the negative share.
    """
    if hasattr(scores, "entries"):
        values = np.fromiter(scores.entries.values(), dtype=np.float64)
    else:
        values = np.asarray(scores, dtype=np.float64)
    if len(values) < 2:
        raise CalibrationError("need at least 2 scores to calibrate thresholds")
    if not (0 < target_pos_ratio < 1 and 0 < target_neg_ratio < 1) or target_pos_ratio + target_neg_ratio > 1:
        raise CalibrationError("invalid target ratios")
    d = pairwise_differences(values, seed)
    P = len(d)
    if d[-1] == 0:
        raise CalibrationError("all scores are identical: no pair can fall strictly below a positive threshold")
    uniq = np.unique(d)
    below = np.searchsorted(d, uniq, side="left")  # count strictly below each value
    at_or_above = P - below
    need_p = math.ceil(target_pos_ratio * P - 1e-9)
    need_n = math.ceil(target_neg_ratio * P - 1e-9)
    ok_p = np.flatnonzero((below >= need_p) & (uniq > 0))
    ok_n = np.flatnonzero(at_or_above >= need_n)
    if not len(ok_p):
        raise CalibrationError(f"no threshold puts {target_pos_ratio:.0%} of pairs strictly below it")
    theta_p = float(uniq[ok_p[0]])
    theta_n = float(uniq[ok_n[-1]])
    if theta_p > theta_n:
        raise CalibrationError(
            f"incompatible ratios: theta_p={theta_p:.6g} exceeds theta_n={theta_n:.6g}"
        )
    return theta_p, theta_n


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    t: int
    m: dict
    v: dict

    @classmethod
    def zeros(cls, arrays):
        return cls(0, {k: np.zeros_like(a) for k, a in arrays.items()}, {k: np.zeros_like(a) for k, a in arrays.items()})


def adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns new ``(params, state)`` without mutating inputs."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {k}")
    t = state.t + 1
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = beta1 * state.m[k] + (1.0 - beta1) * g
        v = beta2 * state.v[k] + (1.0 - beta2) * (g * g)
        new_p[k] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(t, new_m, new_v)


# ---------------------------------------------------------------------------
# training


@dataclass
class RunLog:
    records: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    wall_times: list = field(default_factory=list, compare=False, repr=False)

    def append(self, record, path=None):
        if record["epoch"] != len(self.records):
            raise ValueError("epochs must be contiguous from 0")
        self.records.append(record)
        if path is not None:
            with Path(path).open("a") as fh:
                fh.write(json.dumps(record) + "\n")


def _baseline_weights(cfg, bins, train_ids):
    scheme = cfg.loss.baseline
    if scheme == "reweight_invfreq":
        cw = class_weights_inverse_freq(bins)
    elif scheme in ("reweight_effective", "ldam"):
        cw = class_weights_effective(bins, cfg.loss.beta)
    else:
        return None
    return np.array([cw[bins.class_of[i]] for i in train_ids])


def _weights_active(cfg, epoch):
    scheme = cfg.loss.baseline
    if scheme in ("reweight_invfreq", "reweight_effective"):
        return cfg.drw_start_epoch is None or epoch >= cfg.drw_start_epoch
    if scheme == "ldam":
        return cfg.drw_start_epoch is not None and epoch >= cfg.drw_start_epoch
    return False


def prepare_loss_config(cfg, table, train_ids):
    """Fill in calibrated thresholds when the contrastive term is enabled."""
    loss = cfg.loss
    if loss.lam > 0 and (loss.theta_p is None or loss.theta_n is None):
        tp, tn = calibrate_thresholds(table.scores(train_ids), cfg.target_pos_ratio, cfg.target_neg_ratio, cfg.seed)
        loss = replace(loss, theta_p=loss.theta_p if loss.theta_p is not None else tp,
                       theta_n=loss.theta_n if loss.theta_n is not None else tn)
    return loss


def train(cfg, train_samples, table, val_samples=None, val_table=None, log_path=None, checkpoint_dir=None, meta=None):
    """Train a predictor; returns ``(ModelParams, RunLog)``.

    Only the training-split rows of ``table`` are read, both for the
    contrastive scores and for threshold calibration.
    """
    train_samples = sorted(train_samples, key=lambda s: s.sample_id)
    train_ids = [s.sample_id for s in train_samples]
    missing = [i for i in train_ids if i not in table]
    if missing:
        raise KeyError(f"difficulty table lacks {len(missing)} training samples, e.g. {missing[0]!r}")
    train_table = table.subset(train_ids, "train")
    scores = train_table.scores(train_ids)

    needs_bins = cfg.loss.baseline != "none"
    bins = bin_scores(train_table, cfg.bin_width, cfg.tail_threshold) if needs_bins else None
    model_cfg = cfg.model
    if cfg.loss.baseline == "ldam":
        model_cfg = replace(model_cfg, n_classes=bins.n_classes)
    elif model_cfg.n_classes:
        model_cfg = replace(model_cfg, n_classes=0)
    cfg = replace(cfg, model=model_cfg, loss=prepare_loss_config(cfg, train_table, train_ids))

    classes = np.array([bins.class_of[i] for i in train_ids]) if bins is not None else None
    weights = _baseline_weights(cfg, bins, train_ids) if bins is not None else None
    draw_p = resample_distribution(bins, train_ids) if cfg.loss.baseline == "resample" else None

    data = pack_samples(train_samples, model_cfg)
    params = init_params(model_cfg, seed=np.random.default_rng((cfg.seed, 0)).integers(2**63))
    state = AdamState.zeros(params.arrays)
    runlog = RunLog(config=cfg.to_dict())
    if log_path is not None:
        Path(log_path).write_text("")
    val_batch = None

    N = len(train_samples)
    for epoch in range(cfg.n_epochs):
        t0 = time.perf_counter()
        k = ewta_schedule(model_cfg.K, cfg.epochs_per_stage, epoch)
        loss_cfg = replace(cfg.loss, k=k)
        rng = np.random.default_rng((cfg.seed, 1, epoch))
        order = rng.choice(N, size=N, replace=True, p=draw_p) if draw_p is not None else rng.permutation(N)
        w_active = weights is not None and _weights_active(cfg, epoch)
        sums = np.zeros(5)
        n_batches = 0
        for b, start in enumerate(range(0, N, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            batch = data.take(idx)
            cache = forward(params, batch)
            use_contr = loss_cfg.lam > 0 and len(idx) >= 2
            bd = joint_loss(
                cache.hyps,
                batch.future,
                cache.z,
                scores[idx],
                loss_cfg if use_contr else replace(loss_cfg, lam=0.0),
                sample_weights=weights[idx] if w_active else None,
                logits=cache.logits,
                classes=classes[idx] if cache.logits is not None else None,
                class_counts=bins.counts if cache.logits is not None else None,
            )
            if not math.isfinite(bd.total):
                raise NonFiniteLossError(epoch, b)
            g = backward(params, cache, bd.grads["hyps"], bd.grads["z"], bd.grads["logits"])
            try:
                new_arrays, state = adam_step(params.arrays, g, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps_adam)
            except FloatingPointError:
                raise NonFiniteLossError(epoch, b, "gradient") from None
            params = type(params)(model_cfg, new_arrays)
            sums += [bd.total, bd.ewta, bd.contrastive, bd.aux, bd.anchors_used / len(idx)]
            n_batches += 1
        mean = sums / max(n_batches, 1)
        record = {
            "epoch": epoch,
            "k": k,
            "loss_total": float(mean[0]),
            "loss_ewta": float(mean[1]),
            "loss_contrastive": float(mean[2]),
            "loss_aux": float(mean[3]),
            "anchor_fraction": float(mean[4]),
            "weights_active": bool(w_active),
        }
        if val_samples:
            if val_batch is None:
                val_batch = val_samples
            rep = evaluate(params, val_batch, val_table, cfg.eval_percents)
            for name, sub in rep.subsets.items():
                record[f"val_{name}_min_ade"] = sub["min_ade"]
                record[f"val_{name}_min_fde"] = sub["min_fde"]
        runlog.append(record, log_path)
        runlog.wall_times.append(time.perf_counter() - t0)
        log.info("epoch %d k=%d loss=%.4f", epoch, k, record["loss_total"])
        if checkpoint_dir is not None and (epoch + 1) % cfg.epochs_per_stage == 0:
            stage = epoch // cfg.epochs_per_stage
            save_checkpoint(params, Path(checkpoint_dir) / f"stage_{stage:03d}.ckpt", meta)
    return params, runlog
