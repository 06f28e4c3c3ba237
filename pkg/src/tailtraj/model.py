"""Multi-hypothesis trajectory predictor with hand-written reverse mode.

Architecture::

    neighbors --tanh layer--> masked mean --+
    history (flattened) --------------------+--> tanh MLP --> z --> [tanh decoder] --> K linear heads
                                                                                    --> cumsum over steps

The decoder layers are optional (``decoder_widths``); without them the heads
read z directly.

An optional linear classification head on ``z`` feeds the LDAM baseline.
Everything runs in float64.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .data import normalize

CHECKPOINT_MAGIC = b"TAILTRAJ-CKPT\n"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    h: int = 7
    M: int = 12
    K: int = 20
    embed_dim: int = 64
    hidden_widths: tuple = (64, 64)
    use_neighbors: bool = True
    max_neighbors: int = 4
    neighbor_width: int = 16
    n_classes: int = 0
    decoder_widths: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        object.__setattr__(self, "decoder_widths", tuple(int(w) for w in self.decoder_widths))
        if self.h < 1 or self.M < 1:
            raise ValueError("h and M must be >= 1")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.embed_dim < 2:
            raise ValueError("embed_dim must be >= 2")
        if not self.hidden_widths or min(self.hidden_widths) < 1:
            raise ValueError("hidden_widths must be a non-empty list of positive sizes")
        if self.use_neighbors and (self.max_neighbors < 1 or self.neighbor_width < 1):
            raise ValueError("max_neighbors and neighbor_width must be >= 1 when neighbors are used")
        if self.n_classes < 0:
            raise ValueError("n_classes must be >= 0")
        if self.decoder_widths and min(self.decoder_widths) < 1:
            raise ValueError("decoder_widths must hold positive sizes")

    @property
    def input_dim(self):
        return 2 * (self.h + 1)

    def param_shapes(self):
        shapes = {}
        d_in = self.input_dim
        if self.use_neighbors:
            shapes["nbr.W"] = (self.input_dim, self.neighbor_width)
            shapes["nbr.b"] = (self.neighbor_width,)
            d_in += self.neighbor_width
        for i, w in enumerate(self.hidden_widths):
            shapes[f"enc.W{i}"] = (d_in, w)
            shapes[f"enc.b{i}"] = (w,)
            d_in = w
        shapes["enc.Wz"] = (d_in, self.embed_dim)
        shapes["enc.bz"] = (self.embed_dim,)
        d_in = self.embed_dim
        for i, w in enumerate(self.decoder_widths):
            shapes[f"dec.W{i}"] = (d_in, w)
            shapes[f"dec.b{i}"] = (w,)
            d_in = w
        shapes["head.W"] = (d_in, self.K * self.M * 2)
        shapes["head.b"] = (self.K * self.M * 2,)
        if self.n_classes:
            shapes["cls.W"] = (self.embed_dim, self.n_classes)
            shapes["cls.b"] = (self.n_classes,)
        return shapes

    def to_dict(self):
        d = asdict(self)
        d["hidden_widths"] = list(self.hidden_widths)
        d["decoder_widths"] = list(self.decoder_widths)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class ShapeMismatchError(ValueError):
    pass


@dataclass
class ModelParams:
    config: ModelConfig
    arrays: dict

    def __post_init__(self):
        expected = self.config.param_shapes()
        if list(self.arrays) != list(expected):
            raise ShapeMismatchError(f"parameter names {list(self.arrays)} do not match config {list(expected)}")
        for name, shape in expected.items():
            arr = self.arrays[name]
            if arr.shape != shape:
                raise ShapeMismatchError(f"{name}: shape {arr.shape} != expected {shape}")

    def copy(self):
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def zeros_like(self):
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}

    @property
    def n_params(self):
        return sum(v.size for v in self.arrays.values())

    def equals(self, other):
        return self.config == other.config and all(
            np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays
        )


def init_params(config, seed=0, head_scale=0.1):
    """Scaled-normal weights, zero biases except the embedding bias.

    A standing agent without neighbors has an all-zero input, so with a zero
    embedding bias its z would be exactly 0 and could not be normalized.
    """
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in config.param_shapes().items():
        if name == "enc.bz":
            # own stream so the weight draws do not depend on it
            arrays[name] = np.random.default_rng((seed, 1)).normal(0.0, 0.1, size=shape)
            continue
        if len(shape) == 1:
            arrays[name] = np.zeros(shape)
            continue
        scale = 1.0 / math.sqrt(shape[0])
        if name == "head.W":
            scale *= head_scale
        arrays[name] = rng.normal(0.0, scale, size=shape)
    return ModelParams(config, arrays)


def zero_params(config):
    return ModelParams(config, {k: np.zeros(s) for k, s in config.param_shapes().items()})


# ---------------------------------------------------------------------------
# packing samples into arrays


@dataclass
class Batch:
    """Normalized model inputs for a list of samples."""

    ids: list
    history: np.ndarray  # (B, 2(h+1))
    neighbors: np.ndarray  # (B, N, 2(h+1))
    mask: np.ndarray  # (B, N) 1.0 where a neighbor is present
    future: np.ndarray  # (B, M, 2) normalized ground truth
    offsets: np.ndarray  # (B, 2) translation back to scene coordinates

    def __len__(self):
        return len(self.ids)

    def take(self, idx):
        idx = np.asarray(idx)
        return Batch(
            [self.ids[i] for i in idx],
            self.history[idx],
            self.neighbors[idx],
            self.mask[idx],
            self.future[idx],
            self.offsets[idx],
        )


def pack_samples(samples, config):
    B = len(samples)
    n_nb = config.max_neighbors if config.use_neighbors else 0
    X = np.zeros((B, config.input_dim))
    NB = np.zeros((B, n_nb, config.input_dim))
    mask = np.zeros((B, n_nb))
    Y = np.zeros((B, config.M, 2))
    off = np.zeros((B, 2))
    for i, s in enumerate(samples):
        if s.h != config.h or s.M != config.M:
            raise ShapeMismatchError(
                f"{s.sample_id}: sample has h={s.h}, M={s.M}; model expects h={config.h}, M={config.M}"
            )
        ns, rec = normalize(s)
        X[i] = ns.history.ravel()
        Y[i] = ns.future
        off[i] = rec.offset
        if n_nb:
            nb = ns.neighbors[:n_nb]
            NB[i, : len(nb)] = nb.reshape(len(nb), config.input_dim)
            mask[i, : len(nb)] = 1.0
    return Batch([s.sample_id for s in samples], X, NB, mask, Y, off)


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class ForwardCache:
    batch: Batch
    nbr_act: Optional[np.ndarray]
    nbr_count: Optional[np.ndarray]
    acts: list  # layer inputs: [enc input, hidden_1, ..., hidden_L]
    z: np.ndarray
    hyps: np.ndarray  # (B, K, M, 2)
    logits: Optional[np.ndarray] = None
    dec_acts: tuple = ()  # decoder layer outputs


def forward(params, batch):
    cfg = params.config
    P = params.arrays
    if batch.history.shape[1] != cfg.input_dim:
        raise ShapeMismatchError("history length does not match the model config")
    inp = batch.history
    nbr_act = count = None
    if cfg.use_neighbors:
        nbr_act = np.tanh(batch.neighbors @ P["nbr.W"] + P["nbr.b"])
        count = batch.mask.sum(axis=1, keepdims=True)
        agg = (nbr_act * batch.mask[..., None]).sum(axis=1) / np.maximum(count, 1.0)
        inp = np.concatenate([inp, agg], axis=1)
    acts = [inp]
    a = inp
    for i in range(len(cfg.hidden_widths)):
        a = np.tanh(a @ P[f"enc.W{i}"] + P[f"enc.b{i}"])
        acts.append(a)
    z = a @ P["enc.Wz"] + P["enc.bz"]
    dec_acts = _decode(P, cfg, z)
    d = dec_acts[-1] if dec_acts else z
    steps = (d @ P["head.W"] + P["head.b"]).reshape(len(z), cfg.K, cfg.M, 2)
    hyps = np.cumsum(steps, axis=2)
    logits = z @ P["cls.W"] + P["cls.b"] if cfg.n_classes else None
    return ForwardCache(batch, nbr_act, count, acts, z, hyps, logits, tuple(dec_acts))


def _decode(P, cfg, z):
    outs = []
    d = z
    for i in range(len(cfg.decoder_widths)):
        d = np.tanh(d @ P[f"dec.W{i}"] + P[f"dec.b{i}"])
        outs.append(d)
    return outs


def backward(params, cache, d_hyps=None, d_z=None, d_logits=None):
    """Gradients of a scalar loss given its partials w.r.t. hyps, z and logits.

    Upstream gradients arriving at ``z`` directly (contrastive path) and via
    the heads (EWTA path) are summed.
    """
    if cache is None:
        raise ValueError("backward needs the cache returned by forward()")
    cfg = params.config
    P = params.arrays
    B = len(cache.z)
    g = params.zeros_like()
    dz = np.zeros_like(cache.z) if d_z is None else np.array(d_z, dtype=np.float64, copy=True)
    if d_hyps is not None:
        # cumsum adjoint: reverse cumulative sum over steps
        d_steps = np.flip(np.cumsum(np.flip(d_hyps, axis=2), axis=2), axis=2).reshape(B, -1)
        n_dec = len(cfg.decoder_widths)
        top = cache.dec_acts[-1] if n_dec else cache.z
        g["head.W"] = top.T @ d_steps
        g["head.b"] = d_steps.sum(axis=0)
        dd = d_steps @ P["head.W"].T
        for i in reversed(range(n_dec)):
            dd = dd * (1.0 - cache.dec_acts[i] ** 2)
            below = cache.dec_acts[i - 1] if i > 0 else cache.z
            g[f"dec.W{i}"] = below.T @ dd
            g[f"dec.b{i}"] = dd.sum(axis=0)
            dd = dd @ P[f"dec.W{i}"].T
        dz += dd
    if d_logits is not None and cfg.n_classes:
        g["cls.W"] = cache.z.T @ d_logits
        g["cls.b"] = d_logits.sum(axis=0)
        dz += d_logits @ P["cls.W"].T
    L = len(cfg.hidden_widths)
    g["enc.Wz"] = cache.acts[L].T @ dz
    g["enc.bz"] = dz.sum(axis=0)
    da = dz @ P["enc.Wz"].T
    for i in reversed(range(L)):
        da = da * (1.0 - cache.acts[i + 1] ** 2)
        g[f"enc.W{i}"] = cache.acts[i].T @ da
        g[f"enc.b{i}"] = da.sum(axis=0)
        da = da @ P[f"enc.W{i}"].T
    if cfg.use_neighbors:
        d_agg = da[:, cfg.input_dim :]
        m = cache.batch.mask[..., None]
        d_act = m * d_agg[:, None, :] / np.maximum(cache.nbr_count, 1.0)[..., None]
        d_pre = d_act * (1.0 - cache.nbr_act**2)
        nb = cache.batch.neighbors
        g["nbr.W"] = nb.reshape(-1, nb.shape[-1]).T @ d_pre.reshape(-1, d_pre.shape[-1])
        g["nbr.b"] = d_pre.sum(axis=(0, 1))
    return g


def encode(params, sample):
    """Embedding of one sample (normalization is applied here)."""
    return forward(params, pack_samples([sample], params.config)).z[0]


def predict(params, z):
    """Hypotheses (K, M, 2) decoded from a single embedding, relative to the last observed point."""
    cfg = params.config
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (cfg.embed_dim,):
        raise ShapeMismatchError(f"embedding shape {z.shape} != ({cfg.embed_dim},)")
    if not np.all(np.isfinite(z)):
        raise ValueError("embedding must be finite")
    dec = _decode(params.arrays, cfg, z[None])
    d = dec[-1] if dec else z[None]
    steps = (d @ params.arrays["head.W"] + params.arrays["head.b"]).reshape(cfg.K, cfg.M, 2)
    return np.cumsum(steps, axis=1)


# ---------------------------------------------------------------------------
# finite-difference check


def grad_check(params, batch, loss_fn, epsilon=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(cache)`` returns ``(value, d_hyps, d_z, d_logits)``; any of the
    partials may be None.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    cache = forward(params, batch)
    value, d_h, d_z, d_l = loss_fn(cache)
    if not math.isfinite(value):
        raise FloatingPointError("loss is not finite")
    analytic = backward(params, cache, d_h, d_z, d_l)
    probe = params.copy()
    worst = 0.0
    for name, arr in probe.arrays.items():
        flat = arr.reshape(-1)
        ga = analytic[name].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            up = loss_fn(forward(probe, batch))[0]
            flat[j] = orig - epsilon
            down = loss_fn(forward(probe, batch))[0]
            flat[j] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise FloatingPointError(f"loss is not finite while perturbing {name}[{j}]")
            num = (up - down) / (2 * epsilon)
            err = abs(ga[j] - num) / max(1e-8, abs(ga[j]) + abs(num))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoints


class CheckpointError(ValueError):
    pass


def save_checkpoint(params, path, meta=None):
    """Binary layout: magic line, one JSON header line, then raw little-endian float64 arrays."""
    blobs = [np.ascontiguousarray(a, dtype="<f8").tobytes() for a in params.arrays.values()]
    payload = b"".join(blobs)
    header = {
        "version": CHECKPOINT_VERSION,
        "config": params.config.to_dict(),
        "arrays": [[k, list(v.shape)] for k, v in params.arrays.items()],
        "sha256": hashlib.sha256(payload).hexdigest(),
        "meta": meta or {},
    }
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(payload)


def read_checkpoint(path):
    """Return ``(params, meta)``."""
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic header)")
    rest = raw[len(CHECKPOINT_MAGIC) :]
    nl = rest.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(rest[:nl])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: format version {header.get('version')} != {CHECKPOINT_VERSION}")
    payload = rest[nl + 1 :]
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    config = ModelConfig.from_dict(header["config"])
    arrays, pos = {}, 0
    for name, shape in header["arrays"]:
        n = int(np.prod(shape)) * 8
        if pos + n > len(payload):
            raise CheckpointError(f"{path}: truncated payload")
        arrays[name] = np.frombuffer(payload[pos : pos + n], dtype="<f8").reshape(shape).astype(np.float64)
        pos += n
    if pos != len(payload):
        raise CheckpointError(f"{path}: trailing bytes after payload")
    return ModelParams(config, arrays), header.get("meta", {})


def load_checkpoint(path, expected=None):
    params, _ = read_checkpoint(path)
    if expected is not None:
        got = params.config.to_dict()
        for key, want in expected.to_dict().items():
            if got[key] != want:
                raise CheckpointError(f"{path}: config field {key!r} is {got[key]!r}, expected {want!r}")
    return params
