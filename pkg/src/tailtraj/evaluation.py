"""Best-of-K metrics, top-p% hardest-subset reports, CSV exports and run comparison."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .difficulty import top_percent
from .model import forward, pack_samples

REPORT_VERSION = 1


def _displacements(hyps, gt):
    hyps = np.asarray(hyps, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if hyps.ndim != 3 or hyps.shape[1:] != gt.shape:
        raise ValueError(f"inconsistent shapes {hyps.shape} and {gt.shape}")
    return np.linalg.norm(hyps - gt[None], axis=-1)  # (K, M)


def min_ade(hyps, gt):
    """Smallest mean displacement over the K hypotheses."""
    return float(_displacements(hyps, gt).mean(axis=1).min())


def min_fde(hyps, gt):
    return float(_displacements(hyps, gt)[:, -1].min())


def predict_scene(params, samples, chunk=1024):
    """Hypotheses in scene coordinates, shape (N, K, M, 2), plus embeddings (N, D)."""
    hyps, zs = [], []
    for start in range(0, len(samples), chunk):
        batch = pack_samples(samples[start : start + chunk], params.config)
        cache = forward(params, batch)
        hyps.append(cache.hyps + batch.offsets[:, None, None, :])
        zs.append(cache.z)
    if not hyps:
        cfg = params.config
        return np.zeros((0, cfg.K, cfg.M, 2)), np.zeros((0, cfg.embed_dim))
    return np.concatenate(hyps), np.concatenate(zs)


@dataclass
class EvalReport:
    """Metrics for the whole split and for each top-p% hardest subset.

    ``subsets`` maps ``"all"`` and ``"top<p>"`` names to dicts with keys
    ``min_ade``, ``min_fde``, ``count``, in that order.
    """

    run_id: str
    percents: list
    subsets: dict
    config: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "version": REPORT_VERSION,
            "run_id": self.run_id,
            "percents": list(self.percents),
            "subsets": self.subsets,
            "config": self.config,
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path):
        d = json.loads(Path(path).read_text())
        if d.get("version") != REPORT_VERSION:
            raise ValueError(f"{path}: unsupported report version {d.get('version')}")
        return cls(d["run_id"], d["percents"], d["subsets"], d.get("config", {}))


def subset_name(p):
    return f"top{p:g}"


def evaluate(params, samples, table, percents=(1, 2, 3), run_id="", config=None):
    samples = sorted(samples, key=lambda s: s.sample_id)
    ids = [s.sample_id for s in samples]
    missing = [i for i in ids if i not in table]
    if missing:
        raise KeyError(f"difficulty table does not cover sample {missing[0]!r}")
    hyps, _ = predict_scene(params, samples)
    gts = np.stack([s.future for s in samples]) if samples else np.zeros((0, params.config.M, 2))
    disp = np.linalg.norm(hyps - gts[:, None], axis=-1)  # (N, K, M)
    ade = disp.mean(axis=2).min(axis=1) if len(ids) else np.zeros(0)
    fde = disp[:, :, -1].min(axis=1) if len(ids) else np.zeros(0)
    pos = {sid: i for i, sid in enumerate(ids)}

    def summary(sel):
        idx = np.array([pos[i] for i in sel], dtype=np.int64)
        if len(idx) == 0:
            return {"min_ade": math.nan, "min_fde": math.nan, "count": 0}
        return {"min_ade": float(ade[idx].mean()), "min_fde": float(fde[idx].mean()), "count": int(len(idx))}

    subsets = {"all": summary(ids)}
    sub_table = table.subset(ids)
    for p in percents:
        subsets[subset_name(p)] = summary(top_percent(sub_table, p) if len(ids) else [])
    return EvalReport(run_id, [float(p) for p in percents], subsets, config or {})


# ---------------------------------------------------------------------------
# exports


def export_embeddings(params, samples, table, path=None):
    """CSV with ``sample_id,score,z_0..z_{D-1}``; returns the text, writes it when ``path`` is given."""
    samples = sorted(samples, key=lambda s: s.sample_id)
    _, zs = predict_scene(params, samples)
    D = params.config.embed_dim
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_id", "score"] + [f"z_{i}" for i in range(D)])
    for s, z in zip(samples, zs):
        w.writerow([s.sample_id, f"{table[s.sample_id]:.9f}"] + [f"{v:.9f}" for v in z])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def histogram(table, bin_width):
    """Rows ``(lo, hi, count)`` covering [0, max score] with empty bins kept."""
    if not bin_width > 0:
        raise ValueError("bin_width must be > 0")
    scores = np.fromiter(table.entries.values(), dtype=np.float64)
    if scores.size == 0:
        return []
    idx = np.floor(scores / bin_width).astype(np.int64)
    counts = np.bincount(idx, minlength=int(idx.max()) + 1)
    return [(i * bin_width, (i + 1) * bin_width, int(c)) for i, c in enumerate(counts)]


def export_histogram(table, bin_width, path=None):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_lo", "bin_hi", "count"])
    for lo, hi, c in histogram(table, bin_width):
        w.writerow([f"{lo:.9f}", f"{hi:.9f}", c])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


# ---------------------------------------------------------------------------
# comparison


@dataclass
class Comparison:
    columns: list
    rows: list  # [run_id, value..., delta%...]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for row in self.rows:
            w.writerow([row[0]] + [f"{v:.6f}" for v in row[1:]])
        return buf.getvalue()

    def to_markdown(self):
        lines = ["| " + " | ".join(self.columns) + " |", "|" + "---|" * len(self.columns)]
        for row in self.rows:
            lines.append("| " + " | ".join([row[0]] + [f"{v:.4f}" for v in row[1:]]) + " |")
        return "\n".join(lines) + "\n"


class ComparisonError(ValueError):
    pass


def compare_runs(reports, baseline=0):
    """One row per report with absolute metrics and relative deltas (%) against ``reports[baseline]``."""
    if not reports:
        raise ComparisonError("no reports to compare")
    if not 0 <= baseline < len(reports):
        raise ComparisonError(f"baseline index {baseline} out of range")
    names = list(reports[0].subsets)
    for r in reports[1:]:
        if list(r.percents) != list(reports[0].percents) or list(r.subsets) != names:
            raise ComparisonError(f"report {r.run_id!r} uses different percents")
    metrics = [(n, m) for n in names for m in ("min_ade", "min_fde")]
    columns = ["run"] + [f"{n}_{m}" for n, m in metrics] + [f"{n}_{m}_delta_pct" for n, m in metrics]
    base = reports[baseline]
    rows = []
    for i, r in enumerate(reports):
        vals = [r.subsets[n][m] for n, m in metrics]
        deltas = []
        for (n, m), v in zip(metrics, vals):
            b = base.subsets[n][m]
            deltas.append(0.0 if b == 0 and v == 0 else 100.0 * (v - b) / b if b else math.inf)
        rows.append([r.run_id or f"run{i}"] + vals + deltas)
    return Comparison(columns, rows)
