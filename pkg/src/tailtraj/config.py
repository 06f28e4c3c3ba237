"""Flat ``section.key = value`` configuration with provenance tracking.

Example file::

    # comments start with '#'
    gen.n_agents = 1000
    loss.lambda = 50
    model.hidden_widths = 64,64

Every key has a typed default; values from a file override defaults and
command-line flags override both. :class:`ResolvedConfig` remembers where
each value came from.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text):
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _float_list(text):
    if isinstance(text, (list, tuple)):
        return tuple(float(v) for v in text)
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def _opt_float(text):
    if text is None or str(text).strip().lower() in ("", "none", "auto"):
        return None
    return float(text)


def _opt_epoch(text):
    """Non-negative int, ``none`` (never) or ``final`` (last EWTA stage)."""
    if text is None:
        return None
    t = str(text).strip().lower()
    if t in ("", "none", "inf"):
        return None
    if t == "final":
        return "final"
    return int(t)


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class Option:
    key: str
    default: object
    parse: object
    help: str = ""


OPTIONS = [
    # data
    Option("data.h", 7, int, "observed history steps (history holds h+1 points)"),
    Option("data.M", 12, int, "predicted future steps"),
    Option("data.dt", 0.4, float, "seconds per frame step"),
    Option("data.neighbor_radius", 5.0, float, "neighbor inclusion radius in meters"),
    Option("data.max_neighbors", 4, int, "neighbors kept per sample"),
    Option("data.frame_step", 0, int, "frame id increment between annotations (0 = infer)"),
    Option("data.val_fraction", 0.1, float, "share of agents in the validation split"),
    Option("data.test_fraction", 0.2, float, "share of agents in the test split"),
    Option("data.split_seed", 0, int, "seed of the agent-level split"),
    # synthetic generator
    Option("gen.n_agents", 1000, int, "number of walkers"),
    Option("gen.maneuver_fraction", 0.05, float, "share of walkers with a maneuver"),
    Option("gen.noise_std", 0.02, float, "position noise std in meters"),
    Option("gen.track_length", 24, int, "frames per track"),
    Option("gen.turn_weight", 1.0, float, "relative frequency of 90-degree turns"),
    Option("gen.stop_weight", 1.0, float, "relative frequency of stop-and-go"),
    Option("gen.swerve_weight", 1.0, float, "relative frequency of swerves"),
    Option("gen.speed_min", 0.8, float, "minimum walking speed m/s"),
    Option("gen.speed_max", 1.6, float, "maximum walking speed m/s"),
    Option("gen.swerve_offset", 1.2, float, "lateral swerve amplitude in meters"),
    Option("gen.distractor_fraction", 0.1, float, "share of linear walkers with an off-path bystander"),
    Option("gen.spacing", 60.0, float, "grid spacing between walkers in meters"),
    Option("gen.curvature_std", 0.0, float, "std of the constant turn rate of linear walkers (rad/step)"),
    Option("gen.heading_modes", 0, int, "number of corridor headings (0 = uniform headings)"),
    Option("gen.heading_jitter", 0.1, float, "heading std around a corridor direction (rad)"),
    Option("gen.scene_id", "synthetic", str, "scene identifier"),
    # difficulty
    Option("kalman.process_noise_std", 0.05, float, "filter process noise std (m)"),
    Option("kalman.obs_noise_std", 0.05, float, "filter observation noise std (m)"),
    Option("kalman.reduce", "mean", str, "mean | final displacement"),
    # model
    Option("model.K", 20, int, "number of hypotheses"),
    Option("model.embed_dim", 64, int, "embedding size"),
    Option("model.hidden_widths", (64, 64), _int_list, "encoder hidden layer sizes"),
    Option("model.use_neighbors", True, _bool, "feed neighbor histories to the encoder"),
    Option("model.neighbor_width", 16, int, "neighbor sub-encoder width"),
    Option("model.decoder_widths", (), _int_list, "tanh decoder layer sizes between z and the heads (empty = none)"),
    # loss
    Option("loss.tau", 0.5, float, "contrastive temperature"),
    Option("loss.lambda", 50.0, float, "contrastive weight (0 disables)"),
    Option("loss.theta_p", None, _opt_float, "positive threshold (none = calibrate)"),
    Option("loss.theta_n", None, _opt_float, "negative threshold (none = calibrate)"),
    Option("loss.denominator_mode", "masked", str, "masked | full"),
    Option("loss.normalize_z", True, _bool, "L2-normalize embeddings"),
    Option("loss.ewta_mode", "per_step", str, "per_step | per_trajectory"),
    Option("loss.baseline", "none", str, "none | reweight_invfreq | reweight_effective | ldam | resample"),
    Option("loss.beta", 0.999, float, "effective-number beta"),
    Option("loss.ldam_C", 1.0, float, "LDAM margin scale"),
    Option("loss.ldam_s", 1.0, float, "LDAM logit scale"),
    # training
    Option("train.seed", 0, int, "training seed"),
    Option("train.batch_size", 64, int, "batch size"),
    Option("train.epochs_per_stage", 5, int, "epochs per EWTA stage"),
    Option("train.lr", 1e-3, float, "Adam learning rate"),
    Option("train.beta1", 0.9, float, "Adam beta1"),
    Option("train.beta2", 0.999, float, "Adam beta2"),
    Option("train.eps", 1e-8, float, "Adam epsilon"),
    Option("train.target_pos_ratio", 0.1, float, "target share of positive pairs"),
    Option("train.target_neg_ratio", 0.4, float, "target share of negative pairs"),
    Option("train.drw_start_epoch", None, _opt_epoch, "deferred reweighting start (none | final | epoch)"),
    Option("train.bin_width", 0.5, float, "difficulty bin width for pseudo-classes (m)"),
    Option("train.tail_threshold", 3.0, float, "scores above this share one tail class (m)"),
    # evaluation
    Option("eval.percents", (1.0, 2.0, 3.0), _float_list, "top-p% hardest subsets to report"),
    Option("eval.run_id", "", str, "run label in reports"),
]

OPTION_MAP = {o.key: o for o in OPTIONS}


@dataclass
class ResolvedConfig:
    values: dict
    provenance: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def section(self, name):
        prefix = name + "."
        return {k[len(prefix) :]: v for k, v in self.values.items() if k.startswith(prefix)}

    def echo(self):
        """Plain-JSON view of every resolved value."""
        out = {}
        for k, v in self.values.items():
            out[k] = list(v) if isinstance(v, tuple) else v
        return out

    def to_text(self):
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.values.items())


def parse_config_text(text, source="<config>"):
    raw = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}", "expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in OPTION_MAP:
            raise ConfigError(key, f"unknown key ({source}, line {lineno})")
        raw[key] = value
    return raw


def read_config_file(path):
    return parse_config_text(Path(path).read_text(), str(path))


def resolve(file_values=None, flag_values=None, keys=None):
    """Merge defaults <- file <- flags; parse and validate each value."""
    keys = list(OPTION_MAP) if keys is None else keys
    values, prov = {}, {}
    file_values = file_values or {}
    flag_values = flag_values or {}
    for key in keys:
        opt = OPTION_MAP[key]
        if key in flag_values:
            raw, src = flag_values[key], "flag"
        elif key in file_values:
            raw, src = file_values[key], "file"
        else:
            values[key], prov[key] = opt.default, "default"
            continue
        try:
            value = opt.parse(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(key, f"invalid value {raw!r} ({exc})") from None
        if isinstance(value, float) and not math.isfinite(value):
            raise ConfigError(key, "value must be finite")
        values[key], prov[key] = value, src
    return ResolvedConfig(values, prov)
