"""Acceptance criteria, one test per criterion, each at its stated tolerance.

Verdicts are also collected and printed as one line per criterion at the end
of the pytest run.
"""

import math
import pathlib
import time

import numpy as np
import pytest

import desk
from acceptance_log import record
from helpers import make_sample, random_sample
from oracles import contrastive_termwise, ewta_bruteforce
from tailtraj.cli import main as cli
from tailtraj.data import AgentTrack, Scene, load_ethucy, write_ethucy
from tailtraj.difficulty import kalman_score
from tailtraj.losses import (
    LossConfig,
    class_weights_effective,
    contrastive_loss,
    ewta_loss,
    joint_loss,
    ldam_margins,
)
from tailtraj.model import ModelConfig, grad_check, init_params, pack_samples


def rigid(points, theta, shift):
    c, s = math.cos(theta), math.sin(theta)
    return np.asarray(points) @ np.array([[c, s], [-s, c]]) + shift


def test_criterion_01_loss_oracles():
    t0 = time.perf_counter()
    worst_e = worst_c = 0.0
    for i in range(500):
        rng = np.random.default_rng((1, i))
        K, M = int(rng.integers(1, 7)), int(rng.integers(1, 5))
        hyps, gt = rng.normal(size=(K, M, 2)), rng.normal(size=(M, 2))
        k = int(rng.integers(1, K + 1))
        worst_e = max(worst_e, abs(ewta_loss(hyps, gt, k)[0] - ewta_bruteforce(hyps, gt, k)))
        N, D = int(rng.integers(2, 9)), int(rng.integers(1, 5))
        Z, s = rng.normal(size=(N, D)), rng.uniform(0, 2, size=N)
        tp = float(rng.uniform(0.05, 0.6))
        tn = tp + float(rng.uniform(0, 0.8))
        for mode in ("masked", "full"):
            for norm in (True, False):
                cfg = LossConfig(tau=0.5, theta_p=tp, theta_n=tn, denominator_mode=mode, normalize_z=norm)
                got = contrastive_loss(Z, s, cfg)[0]
                worst_c = max(worst_c, abs(got - contrastive_termwise(Z, s, 0.5, tp, tn, mode, norm)))
    secs = time.perf_counter() - t0
    ok = worst_e < 1e-10 and worst_c < 1e-10 and secs < 30
    record(1, ok, f"500 instances, max |ewta diff| {worst_e:.1e}, max |contrastive diff| {worst_c:.1e}, {secs:.1f}s")
    assert ok


def test_criterion_02_gradient_suite():
    t0 = time.perf_counter()
    kinds = ("ewta_k1", "ewta_khalf", "ewta_kK", "contrastive", "joint")
    worst = {k: 0.0 for k in kinds}
    for d in range(100):
        rng = np.random.default_rng((2, d))
        K, M, h = int(rng.integers(2, 6)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        cfg = ModelConfig(
            h=h, M=M, K=K, embed_dim=int(rng.integers(2, 5)), hidden_widths=(int(rng.integers(2, 5)),),
            use_neighbors=bool(d % 2), max_neighbors=2, neighbor_width=2, decoder_widths=(3,) if d % 3 == 0 else (),
        )
        params = init_params(cfg, seed=d, head_scale=1.0)
        samples = [random_sample(rng, h=h, M=M, n_neighbors=int(rng.integers(0, 3)), sample_id=f"s{i}") for i in range(5)]
        batch = pack_samples(samples, cfg)
        scores = rng.uniform(0, 1, size=5)
        kind = kinds[d % 5]
        k = {"ewta_k1": 1, "ewta_khalf": max(1, K // 2), "ewta_kK": K}.get(kind, 1)
        lc = LossConfig(lam=0.0 if kind.startswith("ewta") else 2.0, theta_p=0.3, theta_n=0.5, k=k)

        def loss_fn(cache):
            if kind == "contrastive":
                value, _, dz = contrastive_loss(cache.z, scores, lc, return_grad=True)
                return value, None, dz, None
            bd = joint_loss(cache.hyps, batch.future, cache.z, scores, lc)
            return bd.total, bd.grads["hyps"], bd.grads["z"], None

        worst[kind] = max(worst[kind], grad_check(params, batch, loss_fn, epsilon=1e-5))
    secs = time.perf_counter() - t0
    top = max(worst.values())
    ok = top < 1e-4 and secs < 120
    record(2, ok, f"100 draws, max relative error {top:.1e} ({', '.join(f'{k} {v:.0e}' for k, v in worst.items())}), {secs:.1f}s")
    assert ok


def test_criterion_03_kalman():
    h, M = 7, 12
    linear = make_sample([(0.5 * i, -0.3 * i) for i in range(h + M + 1)], h)
    still = make_sample([(2.0, 3.0)] * (h + M + 1), h)
    turn = make_sample([(0, 0), (1, 0), (2, 0), (3, 0), (3, 1), (3, 2)], 3)
    s_lin, s_still, s_turn = kalman_score(linear), kalman_score(still), kalman_score(turn)
    expected = (math.sqrt(2) + math.sqrt(8)) / 2
    rng = np.random.default_rng(3)
    worst = 0.0
    for i in range(100):
        s = random_sample(rng, h=int(rng.integers(1, 8)), M=int(rng.integers(1, 13)))
        pts = np.concatenate([s.history, s.future])
        moved = make_sample(rigid(pts, rng.uniform(-math.pi, math.pi), rng.normal(0, 50, size=2)), s.h)
        worst = max(worst, abs(kalman_score(moved) - kalman_score(s)))
    ok = s_lin < 1e-9 and s_still < 1e-9 and abs(s_turn - expected) <= 1e-6 and worst < 1e-9
    record(3, ok, f"linear {s_lin:.1e}, stationary {s_still:.1e}, turn {s_turn:.7f}, rigid max diff {worst:.1e}")
    assert ok


def test_criterion_04_ewta_properties():
    failures = 0
    for i in range(1000):
        rng = np.random.default_rng((4, i))
        K, M = int(rng.integers(1, 9)), int(rng.integers(1, 6))
        hyps, gt = rng.normal(size=(K, M, 2)), rng.normal(size=(M, 2))
        vals = [ewta_loss(hyps, gt, k)[0] for k in range(1, K + 1)]
        d = np.linalg.norm(hyps - gt, axis=-1)
        perm = rng.permutation(K)
        ok = all(a <= b + 1e-12 for a, b in zip(vals, vals[1:]))
        ok &= abs(vals[0] - d.min(axis=0).mean()) < 1e-12
        ok &= abs(vals[-1] - d.mean()) < 1e-12
        for k in range(1, K + 1):
            loss, mask = ewta_loss(hyps, gt, k)
            loss_p, mask_p = ewta_loss(hyps[perm], gt, k)
            ok &= abs(loss - loss_p) < 1e-12 and np.array_equal(mask_p, mask[perm])
        failures += not ok
    record(4, failures == 0, f"1000 instances, {failures} violations (monotone in k, permutation, k=1 min, k=K mean)")
    assert failures == 0


def test_criterion_05_contrastive_properties():
    failures = 0
    for i in range(1000):
        rng = np.random.default_rng((5, i))
        N, D = int(rng.integers(2, 10)), int(rng.integers(2, 6))
        Z, s = rng.normal(size=(N, D)), rng.uniform(0, 2, size=N)
        cfg = LossConfig(tau=0.5, theta_p=0.4, theta_n=0.9, denominator_mode=("masked", "full")[i % 2])
        base, diag = contrastive_loss(Z, s, cfg)
        scaled = contrastive_loss(Z * rng.uniform(0.01, 100, size=(N, 1)), s, cfg)[0]
        perm = rng.permutation(N)
        loss_p, diag_p = contrastive_loss(Z[perm], s[perm], cfg)
        z = rng.normal(size=D)
        pair = contrastive_loss(np.stack([z, z]), np.array([0.1, 0.1 + rng.uniform(0, 0.39)]), cfg)[0]
        ok = abs(scaled - base) < 1e-10 and abs(loss_p - base) < 1e-10
        ok &= np.allclose(diag_p.per_anchor, diag.per_anchor[perm], atol=1e-10, equal_nan=True)
        ok &= abs(pair) < 1e-10
        failures += not ok
    record(5, failures == 0, f"1000 instances, {failures} violations (scale, permutation, identical single positive)")
    assert failures == 0


def test_criterion_06_desk_contrastive_experiment():
    t0 = time.perf_counter()
    res = desk.contrastive_experiment()
    secs = sum(r["seconds"] for rs in [res["base"], *res["lam_runs"].values()] for r in rs)
    ok = res["d_top"] <= -0.10 and res["d_all"] <= 0.05 and secs < 15 * 60
    record(6, ok, f"lambda={res['lambda']:g} (validation), median test top-5% min-FDE {100 * res['d_top']:+.1f}% "
                  f"(need <= -10%), overall {100 * res['d_all']:+.1f}% (need <= +5%), "
                  f"{secs:.0f}s training, {time.perf_counter() - t0:.0f}s total")
    assert ok


@pytest.mark.parametrize("name", ["reweight_invfreq", "resample"])
def test_criterion_07_baseline_overfitting(name):
    res = desk.baseline_experiment(name)
    ok = res["d_top"] < 0 and res["d_all"] >= 0.10
    record(7, ok, f"{name}: median test top-5% min-FDE {100 * res['d_top']:+.1f}% (need < 0), "
                    f"overall {100 * res['d_all']:+.1f}% (need >= +10%)")
    assert ok


def test_criterion_08_weight_formulas():
    counts = [90, 10, 3, 1]
    worst = 0.0
    for beta in (0.0, 0.9, 0.999):
        raw = [1.0 if beta == 0 else (1 - beta) / (1 - beta**n) for n in counts]
        scale = sum(counts) / sum(r * n for r, n in zip(raw, counts))
        hand = [r * scale for r in raw]
        got = class_weights_effective(np.array(counts), beta)
        worst = max(worst, max(abs(a - b) for a, b in zip(got, hand)))
    # two-class hand value: beta 0.9, counts (1, 9)
    hand2 = [1.0, 0.1 / (1 - 0.9**9)]
    s2 = 10 / (hand2[0] + 9 * hand2[1])
    worst = max(worst, float(np.max(np.abs(class_weights_effective(np.array([1, 9]), 0.9) - np.array(hand2) * s2))))
    n = np.array([1, 2, 16, 81, 1000, 12345])
    margin_err = float(np.max(np.abs(ldam_margins(n, 1.0) - n ** -0.25)))
    ok = worst < 1e-9 and margin_err < 1e-12
    record(8, ok, f"effective-number weights max diff {worst:.1e}, LDAM margins max diff {margin_err:.1e}")
    assert ok


def _pipeline(d, monkeypatch):
    # relative paths so both runs see identical argv
    monkeypatch.chdir(d)
    d = pathlib.Path(".")
    common = ["--data.h", "4", "--data.M", "6"]
    train_flags = [*common, "--model.K", "4", "--model.embed_dim", "8", "--model.hidden_widths", "16",
                   "--train.epochs_per_stage", "2", "--eval.percents", "1,5"]
    codes = [
        cli(["gen", "--seed", "3", "--out", str(d / "scene.txt"), "--gen.n_agents", "120"]),
        cli(["score", "--data", str(d / "scene.txt"), "--out", str(d / "scores.csv"), *common]),
        cli(["train", "--data", str(d / "scene.txt"), "--scores", str(d / "scores.csv"), "--out-dir", str(d / "run"), *train_flags]),
        cli(["eval", "--checkpoint", str(d / "run" / "final.ckpt"), "--data", str(d / "scene.txt"),
             "--scores", str(d / "scores.csv"), "--out", str(d / "report.json"), "--eval.run_id", "r"]),
    ]
    return codes, {p.as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_criterion_09_cli_determinism(tmp_path, monkeypatch):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    codes_a, files_a = _pipeline(tmp_path / "a", monkeypatch)
    codes_b, files_b = _pipeline(tmp_path / "b", monkeypatch)
    differing = sorted(k for k in files_a if files_a[k] != files_b.get(k))
    ok = codes_a == codes_b == [0, 0, 0, 0] and files_a.keys() == files_b.keys() and not differing
    record(9, ok, f"gen->score->train->eval twice: {len(files_a)} files, {len(differing)} differ")
    assert ok


def test_criterion_10_ingestion_round_trip(tmp_path):
    worst, mismatched = 0.0, 0
    for i in range(50):
        rng = np.random.default_rng((10, i))
        tracks = []
        for aid in rng.choice(10_000, size=int(rng.integers(1, 12)), replace=False):
            start = int(rng.integers(0, 500))
            frames = start + 10 * np.arange(int(rng.integers(1, 30)))
            tracks.append(AgentTrack(int(aid), frames, rng.uniform(-1e3, 1e3, size=(len(frames), 2))))
        scene = Scene(f"scene{i}", 0.4, tracks)
        path = tmp_path / f"scene{i}.txt"
        write_ethucy(scene, path)
        back = load_ethucy(path, 0.4, f"scene{i}")
        a = {t.agent_id: t for t in scene.tracks}
        b = {t.agent_id: t for t in back.tracks}
        if a.keys() != b.keys() or any(not np.array_equal(a[k].frames, b[k].frames) for k in a):
            mismatched += 1
            continue
        worst = max(worst, max(float(np.max(np.abs(a[k].xy - b[k].xy))) for k in a))
    ok = mismatched == 0 and worst <= 5e-7 + 1e-12
    record(10, ok, f"50 scenes, {mismatched} id/frame mismatches, max position error {worst:.1e} (6-decimal bound 5e-7)")
    assert ok
