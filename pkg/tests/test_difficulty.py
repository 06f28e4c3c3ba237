import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import make_sample, random_sample
from tailtraj.data import TrajectorySample
from tailtraj.difficulty import (
    DifficultyError,
    DifficultyTable,
    KalmanConfig,
    bin_scores,
    kalman_extrapolate,
    kalman_score,
    score_split,
    top_percent,
)


def textbook_axis_filter(zs, M, q, r, p0, v0):
    """Decoupled 1-D position/velocity filter written out with scalar algebra."""
    x, v = zs[1], zs[1] - zs[0]
    pxx, pxv, pvv = p0, 0.0, v0
    for z in zs[2:]:
        # predict with F = [[1, 1], [0, 1]] and white-acceleration noise
        x, v = x + v, v
        pxx, pxv, pvv = pxx + 2 * pxv + pvv + q * 0.25, pxv + pvv + q * 0.5, pvv + q
        s = pxx + r
        kx, kv = pxx / s, pxv / s
        innov = z - x
        x, v = x + kx * innov, v + kv * innov
        pxx, pxv, pvv = (1 - kx) * pxx, (1 - kx) * pxv, pvv - kv * pxv
    out = []
    for _ in range(M):
        x = x + v
        out.append(x)
    return out


def oracle_extrapolate(history, M, cfg):
    q, r = cfg.process_noise_std**2, cfg.obs_noise_std**2
    p0, v0 = cfg.init_pos_std**2, cfg.init_vel_std**2
    xs = textbook_axis_filter(list(history[:, 0]), M, q, r, p0, v0)
    ys = textbook_axis_filter(list(history[:, 1]), M, q, r, p0, v0)
    return np.c_[xs, ys]


class TestKalmanScore:
    def test_constant_velocity_is_zero(self):
        s = make_sample([(i, 0.0) for i in range(8 + 12)], 7)
        assert kalman_score(s) < 1e-9

    def test_stationary_is_zero(self):
        s = make_sample([(2.5, -1.0)] * 20, 7)
        assert kalman_score(s) < 1e-9

    def test_hand_derived_turn(self):
        s = make_sample([(0, 0), (1, 0), (2, 0), (3, 0), (3, 1), (3, 2)], 3)
        expected = (math.sqrt(2) + math.sqrt(8)) / 2
        assert kalman_score(s) == pytest.approx(expected, abs=1e-6)
        assert expected == pytest.approx(2.1213, abs=1e-4)

    def test_final_reduction(self):
        s = make_sample([(0, 0), (1, 0), (2, 0), (3, 0), (3, 1), (3, 2)], 3)
        assert kalman_score(s, KalmanConfig(reduce="final")) == pytest.approx(math.sqrt(8), abs=1e-9)

    def test_short_history_rejected(self):
        s = TrajectorySample("x", [(0, 0)], [(1, 0)])
        with pytest.raises(DifficultyError):
            kalman_score(s)

    @pytest.mark.parametrize("q,r", [(0.05, 0.05), (0.3, 0.1), (0.0, 0.2), (1.0, 0.0)])
    def test_matches_textbook_filter(self, rng, q, r):
        cfg = KalmanConfig(process_noise_std=q, obs_noise_std=r)
        for _ in range(20):
            s = random_sample(rng, h=6, M=5)
            got = kalman_extrapolate(s.history, 5, cfg)
            assert np.allclose(got, oracle_extrapolate(s.history, 5, cfg), atol=1e-10)

    @given(st.integers(0, 100_000))
    @settings(max_examples=50, deadline=None)
    def test_rigid_transform_invariance(self, seed):
        rng = np.random.default_rng(seed)
        s = random_sample(rng, h=5, M=4)
        th = rng.uniform(0, 2 * np.pi)
        R = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        t = rng.normal(0, 20, size=2)
        moved = TrajectorySample("m", s.history @ R.T + t, s.future @ R.T + t)
        assert abs(kalman_score(s) - kalman_score(moved)) < 1e-9

    def test_zero_iff_future_is_extrapolation(self, rng):
        s = random_sample(rng, h=5, M=4)
        pred = kalman_extrapolate(s.history, 4)
        exact = TrajectorySample("e", s.history, pred)
        assert kalman_score(exact) < 1e-12
        bumped = TrajectorySample("b", s.history, pred + [[0, 0], [0, 0], [0, 0], [0.1, 0]])
        assert kalman_score(bumped) > 0


class TestScoreSplit:
    def linear(self, sid, v):
        return make_sample([(i * v, i * v / 2) for i in range(10)], 6, sid)

    def test_empty(self):
        assert len(score_split([])) == 0

    def test_linear_samples(self):
        table = score_split([self.linear(f"s{i}", i + 0.5) for i in range(3)])
        assert len(table) == 3
        assert max(table.entries.values()) < 1e-9

    def test_order_independent(self, rng):
        samples = [random_sample(rng, sample_id=f"s{i}") for i in range(10)]
        assert score_split(samples).entries == score_split(samples[::-1]).entries

    def test_error_carries_sample_id(self):
        bad = TrajectorySample("bad-one", [(0, 0)], [(1, 1)])
        with pytest.raises(DifficultyError, match="bad-one"):
            score_split([self.linear("ok", 1.0), bad])

    def test_csv_round_trip(self, tmp_path, rng):
        table = score_split([random_sample(rng, sample_id=f"s{i}") for i in range(5)])
        table.to_csv(tmp_path / "s.csv")
        back = DifficultyTable.from_csv(tmp_path / "s.csv")
        assert back.entries.keys() == table.entries.keys()
        for k in table.entries:
            assert back[k] == pytest.approx(table[k], abs=1e-9)
        assert (tmp_path / "s.csv").read_text().splitlines()[0] == "sample_id,score"


class TestTopPercent:
    def test_count(self):
        table = DifficultyTable({f"s{i:03d}": float(i) for i in range(200)})
        assert top_percent(table, 1) == ["s199", "s198"]

    def test_tie_break(self):
        table = DifficultyTable({"b": 1.0, "a": 1.0, "c": 0.5})
        assert top_percent(table, 100 / 3) == ["a"]

    def test_all(self):
        table = DifficultyTable({"a": 0.1, "b": 3.0, "c": 2.0})
        assert top_percent(table, 100) == ["b", "c", "a"]

    @pytest.mark.parametrize("p", [0, -1, 100.5])
    def test_out_of_range(self, p):
        with pytest.raises(ValueError):
            top_percent(DifficultyTable({"a": 1.0}), p)

    @given(st.lists(st.floats(0, 10), min_size=1, max_size=60), st.floats(0.1, 100), st.floats(0.1, 100))
    @settings(max_examples=100, deadline=None)
    def test_nested(self, scores, p1, p2):
        table = DifficultyTable({f"s{i:03d}": v for i, v in enumerate(scores)})
        lo, hi = sorted((p1, p2))
        assert set(top_percent(table, lo)) <= set(top_percent(table, hi))


class TestBinScores:
    def test_single_bin(self):
        bins = bin_scores(DifficultyTable({"a": 0.1, "b": 0.2, "c": 0.3}), 0.5, 2.0)
        assert bins.n_classes == 1
        assert bins.counts.tolist() == [3]

    def test_hand_binning(self):
        bins = bin_scores(DifficultyTable({"a": 0.1, "b": 0.6, "c": 5.0}), 0.5, 2.0)
        assert bins.counts.tolist() == [1, 1, 1]
        assert [bins.class_of[k] for k in "abc"] == [0, 1, 2]

    def test_tail(self):
        bins = bin_scores(DifficultyTable({"a": 2.5, "b": 9.9}), 0.5, 2.0)
        assert bins.n_classes == 1
        assert bins.class_of["a"] == bins.class_of["b"]

    @given(st.lists(st.floats(0, 8), min_size=1, max_size=80), st.floats(0.05, 2), st.floats(0.1, 6))
    @settings(max_examples=100, deadline=None)
    def test_invariants(self, scores, width, tail):
        table = DifficultyTable({f"s{i}": v for i, v in enumerate(scores)})
        bins = bin_scores(table, width, tail)
        assert bins.counts.sum() == len(table)
        assert np.all(np.diff(bins.edges) > 0)
        ranked = sorted(table.entries, key=table.entries.get)
        cls = [bins.class_of[i] for i in ranked]
        assert cls == sorted(cls)
        top = [bins.class_of[k] for k, v in table.entries.items() if v >= tail]
        assert len(set(top)) <= 1
        if top:
            assert top[0] == bins.n_classes - 1
