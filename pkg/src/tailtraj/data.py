"""Trajectory ingestion, synthetic scene generation and sample windowing.

Positions are in meters, time is a discrete frame index. A scene carries the
seconds-per-frame step ``dt`` so downstream code never has to guess it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import reduce
from pathlib import Path
from typing import Optional

import numpy as np

MANEUVERS = ("turn", "stop", "swerve")
SPLIT_STREAM = 0x73706C74


class TrajectoryFormatError(ValueError):
    """Raised on malformed ETH-UCY input."""


@dataclass(frozen=True)
class TrajectoryPoint:
    t: int
    x: float
    y: float

    def __post_init__(self):
        if self.t < 0:
            raise ValueError(f"frame index must be >= 0, got {self.t}")
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite position at frame {self.t}")


@dataclass
class AgentTrack:
    """One agent's positions, stored as parallel arrays sorted by frame."""

    agent_id: int
    frames: np.ndarray
    xy: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.int64)
        self.xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        if len(self.frames) != len(self.xy):
            raise ValueError("frames and xy must have the same length")
        if len(self.frames) and self.frames[0] < 0:
            raise ValueError("frame indices must be >= 0")
        if np.any(np.diff(self.frames) <= 0):
            raise ValueError(f"agent {self.agent_id}: frames must be strictly increasing")
        if not np.all(np.isfinite(self.xy)):
            raise ValueError(f"agent {self.agent_id}: non-finite position")

    @classmethod
    def from_points(cls, agent_id, points):
        points = sorted(points, key=lambda p: p.t)
        return cls(agent_id, [p.t for p in points], [(p.x, p.y) for p in points])

    @property
    def points(self):
        return [TrajectoryPoint(int(t), float(x), float(y)) for t, (x, y) in zip(self.frames, self.xy)]

    def __len__(self):
        return len(self.frames)


@dataclass
class Scene:
    scene_id: str
    dt: float
    tracks: list
    maneuver_labels: Optional[dict] = None

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        ids = [tr.agent_id for tr in self.tracks]
        if len(set(ids)) != len(ids):
            raise ValueError("agent ids must be unique within a scene")

    def track(self, agent_id):
        for tr in self.tracks:
            if tr.agent_id == agent_id:
                return tr
        raise KeyError(agent_id)

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.scene_id == other.scene_id
            and self.dt == other.dt
            and self.maneuver_labels == other.maneuver_labels
            and len(self.tracks) == len(other.tracks)
            and all(
                a.agent_id == b.agent_id
                and np.array_equal(a.frames, b.frames)
                and np.array_equal(a.xy, b.xy)
                for a, b in zip(self.tracks, other.tracks)
            )
        )


@dataclass
class TrajectorySample:
    """A single prediction window.

    ``history`` has shape (h+1, 2) covering frames t-h..t, ``future`` has
    shape (M, 2) covering t+1..t+M. ``neighbors`` has shape (n, h+1, 2) and
    is time-aligned with ``history``; it is sorted by distance to the agent
    at the anchor frame.
    """

    sample_id: str
    history: np.ndarray
    future: np.ndarray
    neighbors: np.ndarray = field(default_factory=lambda: np.zeros((0, 0, 2)))
    origin_scene: str = ""
    agent_id: int = -1
    anchor_frame: int = -1
    label: str = ""

    def __post_init__(self):
        self.history = np.asarray(self.history, dtype=np.float64)
        self.future = np.asarray(self.future, dtype=np.float64)
        nb = np.asarray(self.neighbors, dtype=np.float64)
        if nb.size == 0:
            nb = np.zeros((0, len(self.history), 2))
        self.neighbors = nb
        if self.history.ndim != 2 or self.history.shape[1] != 2:
            raise ValueError("history must have shape (h+1, 2)")
        if self.future.ndim != 2 or self.future.shape[1] != 2:
            raise ValueError("future must have shape (M, 2)")
        if nb.ndim != 3 or nb.shape[1:] != self.history.shape:
            raise ValueError("neighbor histories must be time-aligned with the history")

    @property
    def h(self):
        return len(self.history) - 1

    @property
    def M(self):
        return len(self.future)


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list

    def __post_init__(self):
        a, b, c = set(self.train), set(self.val), set(self.test)
        if (a & b) or (a & c) or (b & c):
            raise ValueError("splits must be pairwise disjoint")


@dataclass(frozen=True)
class TransformRecord:
    """Translation applied by :func:`normalize`."""

    offset: tuple

    def apply(self, xy):
        return np.asarray(xy, dtype=np.float64) - np.asarray(self.offset)

    def invert(self, xy):
        return np.asarray(xy, dtype=np.float64) + np.asarray(self.offset)


# ---------------------------------------------------------------------------
# ETH-UCY plain text


def _parse_agent_id(token, lineno):
    value = float(token)
    if not value.is_integer() or value < 0:
        raise TrajectoryFormatError(f"line {lineno}: agent id must be a non-negative integer, got {token!r}")
    return int(value)


def load_ethucy(path, dt, scene_id=None):
    """Read a ``frame_id agent_id x y`` file (tab or whitespace separated)."""
    path = Path(path)
    rows = {}
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 4:
                raise TrajectoryFormatError(f"line {lineno}: expected 4 fields, got {len(fields)}")
            try:
                frame = float(fields[0])
                agent = _parse_agent_id(fields[1], lineno)
                x, y = float(fields[2]), float(fields[3])
            except ValueError as exc:
                if isinstance(exc, TrajectoryFormatError):
                    raise
                raise TrajectoryFormatError(f"line {lineno}: non-numeric field in {line.strip()!r}") from None
            if not frame.is_integer() or frame < 0:
                raise TrajectoryFormatError(f"line {lineno}: frame id must be a non-negative integer")
            if not (math.isfinite(x) and math.isfinite(y)):
                raise TrajectoryFormatError(f"line {lineno}: non-finite position")
            key = (int(frame), agent)
            if key in rows:
                raise TrajectoryFormatError(f"line {lineno}: duplicate (frame, agent) pair {key}")
            rows[key] = (x, y)

    per_agent = {}
    for (frame, agent), xy in rows.items():
        per_agent.setdefault(agent, []).append((frame, xy))
    tracks = []
    for agent in sorted(per_agent):
        pts = sorted(per_agent[agent])
        tracks.append(AgentTrack(agent, [f for f, _ in pts], [xy for _, xy in pts]))
    return Scene(scene_id or path.stem, float(dt), tracks)


def write_ethucy(scene, path):
    """Write ``scene`` as tab-separated lines ordered by (frame, agent)."""
    rows = []
    for tr in scene.tracks:
        for f, (x, y) in zip(tr.frames, tr.xy):
            rows.append((int(f), tr.agent_id, x, y))
    rows.sort(key=lambda r: (r[0], r[1]))
    with Path(path).open("w") as fh:
        for f, a, x, y in rows:
            fh.write(f"{f}\t{a}\t{x:.6f}\t{y:.6f}\n")


# ---------------------------------------------------------------------------
# windowing


def infer_frame_step(scene):
    """Greatest common divisor of all consecutive frame differences (1 if none)."""
    diffs = [np.diff(tr.frames) for tr in scene.tracks if len(tr) > 1]
    if not diffs:
        return 1
    return int(reduce(math.gcd, np.unique(np.concatenate(diffs)).tolist()))


def make_sample_id(scene_id, agent_id, frame):
    return f"{scene_id}/{agent_id:06d}/{frame:08d}"


def extract_samples(scene, h, M, neighbor_radius=3.0, max_neighbors=None, frame_step=None):
    """Cut every track into (history, future) windows over contiguous frames.

    Windows ordered by (agent_id, anchor frame). ``frame_step`` defaults to
    the scene's inferred step so that raw ETH-UCY files annotated every 10
    frames still count as contiguous.
    """
    if h < 1 or M < 1:
        raise ValueError("h and M must be >= 1")
    step = infer_frame_step(scene) if frame_step is None else int(frame_step)
    width = h + 1 + M

    # frame -> (tracks, index within track, positions) for neighbor lookup
    per_frame = {}
    for tr in scene.tracks:
        for i, f in enumerate(tr.frames.tolist()):
            per_frame.setdefault(f, []).append((tr, i))
    lookup = {
        f: (entries, np.array([tr.xy[i] for tr, i in entries]))
        for f, entries in per_frame.items()
    }

    labels = scene.maneuver_labels or {}
    samples = []
    for tr in sorted(scene.tracks, key=lambda tr: tr.agent_id):
        n = len(tr)
        if n < width:
            continue
        frames = tr.frames
        # contiguous[i] -> frames[i..i+width-1] are evenly spaced by step
        gaps = np.diff(frames) == step
        run = np.concatenate([[0], np.cumsum(~gaps)])
        for start in range(n - width + 1):
            end = start + width - 1
            if run[end] != run[start]:
                continue
            anchor_idx = start + h
            t = int(frames[anchor_idx])
            hist = tr.xy[start : anchor_idx + 1]
            fut = tr.xy[anchor_idx + 1 : end + 1]
            nbrs = _neighbors(lookup, tr.agent_id, tr.xy[anchor_idx], t, h, step, neighbor_radius, max_neighbors)
            samples.append(
                TrajectorySample(
                    sample_id=make_sample_id(scene.scene_id, tr.agent_id, t),
                    history=hist.copy(),
                    future=fut.copy(),
                    neighbors=nbrs,
                    origin_scene=scene.scene_id,
                    agent_id=tr.agent_id,
                    anchor_frame=t,
                    label=labels.get(tr.agent_id, ""),
                )
            )
    return samples


def _neighbors(lookup, agent_id, anchor_xy, t, h, step, radius, max_neighbors):
    entries, xy = lookup[t]
    dist = np.hypot(*(xy - anchor_xy).T)
    hist_frames = t - (h - np.arange(h + 1)) * step
    found = []
    for j in np.flatnonzero(dist <= radius):
        tr, idx = entries[j]
        if tr.agent_id == agent_id:
            continue
        lo = idx - h
        if lo < 0 or not np.array_equal(tr.frames[lo : idx + 1], hist_frames):
            continue
        found.append((float(dist[j]), tr.agent_id, tr.xy[lo : idx + 1]))
    found.sort(key=lambda r: (r[0], r[1]))
    if max_neighbors is not None:
        found = found[:max_neighbors]
    if not found:
        return np.zeros((0, h + 1, 2))
    return np.stack([r[2] for r in found])


def normalize(sample):
    """Translate a sample so its last observed position is the origin."""
    offset = sample.history[-1].copy()
    rec = TransformRecord((float(offset[0]), float(offset[1])))
    out = TrajectorySample(
        sample_id=sample.sample_id,
        history=sample.history - offset,
        future=sample.future - offset,
        neighbors=sample.neighbors - offset,
        origin_scene=sample.origin_scene,
        agent_id=sample.agent_id,
        anchor_frame=sample.anchor_frame,
        label=sample.label,
    )
    return out, rec


def denormalize(sample, record):
    out = TrajectorySample(
        sample_id=sample.sample_id,
        history=record.invert(sample.history),
        future=record.invert(sample.future),
        neighbors=record.invert(sample.neighbors),
        origin_scene=sample.origin_scene,
        agent_id=sample.agent_id,
        anchor_frame=sample.anchor_frame,
        label=sample.label,
    )
    return out


def split_samples(samples, val_fraction=0.1, test_fraction=0.2, seed=0, by="agent"):
    """Partition sample ids into train/val/test.

    Splitting by agent keeps overlapping windows of one track together so no
    future positions leak between splits.
    """
    if not (0 <= val_fraction < 1 and 0 <= test_fraction < 1 and val_fraction + test_fraction < 1):
        raise ValueError("invalid split fractions")
    if by == "agent":
        groups = sorted({(s.origin_scene, s.agent_id) for s in samples})
        key = lambda s: (s.origin_scene, s.agent_id)  # noqa: E731
    else:
        groups = sorted({s.sample_id for s in samples})
        key = lambda s: s.sample_id  # noqa: E731
    # tagged so the split never lines up with other generators built from the same integer seed
    rng = np.random.default_rng((seed, SPLIT_STREAM))
    order = rng.permutation(len(groups))
    n_test = int(round(test_fraction * len(groups)))
    n_val = int(round(val_fraction * len(groups)))
    assign = {}
    for rank, gi in enumerate(order):
        assign[groups[gi]] = "test" if rank < n_test else "val" if rank < n_test + n_val else "train"
    out = {"train": [], "val": [], "test": []}
    for s in samples:
        out[assign[key(s)]].append(s.sample_id)
    return DatasetSplit(**out)


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SyntheticConfig:
    """Generator settings. Speeds in m/s, distances in meters."""

    n_agents: int = 1000
    maneuver_fraction: float = 0.05
    noise_std: float = 0.0
    track_length: int = 24
    dt: float = 0.4
    turn_weight: float = 1.0
    stop_weight: float = 1.0
    swerve_weight: float = 1.0
    speed_min: float = 0.8
    speed_max: float = 1.6
    swerve_offset: float = 1.2
    distractor_fraction: float = 0.1
    curvature_std: float = 0.0
    heading_modes: int = 0
    heading_jitter: float = 0.1
    spacing: float = 60.0
    scene_id: str = "synthetic"

    def validate(self):
        if self.n_agents < 1:
            raise ValueError("n_agents: must be >= 1")
        if not 0.0 <= self.maneuver_fraction <= 1.0:
            raise ValueError(f"maneuver_fraction: must lie in [0, 1], got {self.maneuver_fraction}")
        if not 0.0 <= self.distractor_fraction <= 1.0:
            raise ValueError(f"distractor_fraction: must lie in [0, 1], got {self.distractor_fraction}")
        if self.noise_std < 0:
            raise ValueError(f"noise_std: must be >= 0, got {self.noise_std}")
        if self.heading_modes < 0 or self.heading_jitter < 0:
            raise ValueError("heading_modes/heading_jitter: must be >= 0")
        if self.curvature_std < 0:
            raise ValueError(f"curvature_std: must be >= 0, got {self.curvature_std}")
        if self.track_length < 12:
            raise ValueError("track_length: must be >= 12 to fit the maneuver patterns")
        if self.dt <= 0:
            raise ValueError("dt: must be > 0")
        if min(self.turn_weight, self.stop_weight, self.swerve_weight) < 0 or (
            self.turn_weight + self.stop_weight + self.swerve_weight <= 0
        ):
            raise ValueError("maneuver weights: must be >= 0 with a positive sum")
        if not 0 < self.speed_min <= self.speed_max:
            raise ValueError("speed_min/speed_max: need 0 < speed_min <= speed_max")


def _rot(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def _straight(start, heading, step_len, n):
    d = np.array([math.cos(heading), math.sin(heading)]) * step_len
    return start + np.arange(n)[:, None] * d


def _arc(start, heading, step_len, n, turn_rate):
    """Constant turn rate (rad per step); turn_rate 0 gives a straight line."""
    th = heading + turn_rate * np.arange(n - 1)
    steps = step_len * np.stack([np.cos(th), np.sin(th)], axis=1)
    return start + np.concatenate([np.zeros((1, 2)), np.cumsum(steps, axis=0)])


def generate_synthetic(cfg, seed):
    """Build a long-tailed scene: mostly constant-velocity walkers plus a few maneuvers.

    Every agent lives in its own grid cell so the only neighbors an agent sees
    are the static partner of a swerve or an off-path distractor.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    n_man = int(math.floor(cfg.n_agents * cfg.maneuver_fraction))
    weights = np.array([cfg.turn_weight, cfg.stop_weight, cfg.swerve_weight], dtype=float)
    kinds = rng.choice(3, size=n_man, p=weights / weights.sum())
    man_slots = set(rng.permutation(cfg.n_agents)[:n_man].tolist())
    L = cfg.track_length
    grid = int(math.ceil(math.sqrt(cfg.n_agents)))

    tracks, labels = [], {}
    extra_id = cfg.n_agents
    kind_iter = iter(kinds.tolist())
    for aid in range(cfg.n_agents):
        cell = np.array([(aid % grid) * cfg.spacing, (aid // grid) * cfg.spacing])
        if cfg.heading_modes:
            # corridor directions, as in scenes with a few dominant walkways
            mode = rng.integers(cfg.heading_modes)
            heading = 2 * math.pi * mode / cfg.heading_modes + rng.normal(0.0, cfg.heading_jitter)
        else:
            heading = rng.uniform(-math.pi, math.pi)
        step_len = rng.uniform(cfg.speed_min, cfg.speed_max) * cfg.dt
        unit = np.array([math.cos(heading), math.sin(heading)])
        start = cell - unit * step_len * (L - 1) / 2
        static = None
        if aid in man_slots:
            kind = MANEUVERS[next(kind_iter)]
            xy, static = _maneuver(kind, rng, start, heading, step_len, L, cfg)
        else:
            kind = "linear"
            if cfg.curvature_std > 0:
                xy = _arc(start, heading, step_len, L, rng.normal(0.0, cfg.curvature_std))
            else:
                xy = _straight(start, heading, step_len, L)
            if rng.uniform() < cfg.distractor_fraction:
                # bystander beside the path, never on it
                at = rng.integers(L // 3, L)
                side = rng.choice([-1.0, 1.0]) * rng.uniform(1.5, 2.5)
                static = xy[at] + side * np.array([-unit[1], unit[0]])
        labels[aid] = kind
        tracks.append((aid, xy))
        if static is not None:
            tracks.append((extra_id, np.repeat(static[None, :], L, axis=0)))
            labels[extra_id] = "static"
            extra_id += 1

    out = []
    for aid, xy in tracks:
        if cfg.noise_std > 0:
            xy = xy + rng.normal(0.0, cfg.noise_std, size=xy.shape)
        out.append(AgentTrack(aid, np.arange(L), xy))
    return Scene(cfg.scene_id, cfg.dt, out, labels)


def _maneuver(kind, rng, start, heading, step_len, L, cfg):
    onset = int(rng.integers(4, L - 6))
    if kind == "turn":
        # 90 degrees spread over 3 steps
        sign = rng.choice([-1.0, 1.0])
        xy = np.empty((L, 2))
        xy[0] = start
        for i in range(1, L):
            k = min(max(i - onset, 0), 3)
            th = heading + sign * (math.pi / 2) * k / 3
            xy[i] = xy[i - 1] + step_len * np.array([math.cos(th), math.sin(th)])
        return xy, None
    if kind == "stop":
        # zero velocity for 4 steps mid-track
        moving = np.ones(L - 1)
        moving[onset : onset + 4] = 0.0
        d = np.array([math.cos(heading), math.sin(heading)]) * step_len
        xy = start + np.concatenate([[0.0], np.cumsum(moving)])[:, None] * d
        return xy, None
    # swerve: lateral ramp around a static agent standing on the straight path
    unit = np.array([math.cos(heading), math.sin(heading)])
    normal = np.array([-unit[1], unit[0]])
    base = _straight(start, heading, step_len, L)
    sign = rng.choice([-1.0, 1.0])
    ramp = 3
    pass_at = onset + ramp + 1
    offset = np.zeros(L)
    for i in range(L):
        if i <= onset:
            continue
        if i < onset + ramp:
            offset[i] = (i - onset) / ramp
        elif i <= pass_at + 1:
            offset[i] = 1.0
        elif i < pass_at + 1 + ramp:
            offset[i] = 1.0 - (i - pass_at - 1) / ramp
    xy = base + sign * cfg.swerve_offset * offset[:, None] * normal
    return xy, base[min(pass_at, L - 1)].copy()
