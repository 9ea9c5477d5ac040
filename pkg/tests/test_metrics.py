import numpy as np
import pytest

from safesim.engine import CollisionEvent, OffroadEvent, SimLog
from safesim.metrics import (DrivingProfileHistogram, PROFILE_SPECS, aggregate,
                             collision_diversity, log_profiles, realism,
                             realism_of_histogram, ttc_cost_window, wasserstein_1d)


def _hist(samples):
    return DrivingProfileHistogram.from_samples(
        {k: np.asarray(samples.get(k, [0.0])) for k in PROFILE_SPECS})


def _make_log(name="s", seed=0, n_steps=40, collision_time=None, dt=0.1,
              rel_speed=2.0, angle=0.5, point=(1.0, 0.0), offroad=()):
    rng = np.random.default_rng(seed)
    ids = ["ego", "adv", "npc1"]
    roles = {"ego": "ego", "adv": "adversary", "npc1": "reactive"}
    init = np.array([[0, 0, 8, 0], [0, -30, 7, np.pi / 2], [40, 3.5, 6, np.pi]], float)
    states = np.empty((n_steps, 3, 4))
    actions = rng.uniform(-1, 1, (n_steps, 3, 2))
    cur = init.copy()
    from safesim.dynamics import step_array

    for t in range(n_steps):
        cur = step_array(cur, actions[t], dt)
        states[t] = cur
    collisions = []
    if collision_time is not None:
        collisions.append(CollisionEvent(time=collision_time, agent_i="ego",
                                         agent_j="adv", rel_speed=rel_speed,
                                         angle=angle, point=point))
    return SimLog(scenario_name=name, seed=seed, dt=dt, agent_ids=ids, roles=roles,
                  shapes={i: (4.6, 1.9) for i in ids}, initial_states=init,
                  states=states, actions=actions,
                  times=(np.arange(n_steps) + 1) * dt,
                  collisions=collisions,
                  offroads=[OffroadEvent(time=1.0, agent_id=a) for a in offroad],
                  terminated="max_duration", duration=n_steps * dt)


class TestWasserstein:
    def test_identical_zero(self):
        h = _hist({"long_accel": np.random.default_rng(0).normal(0, 2, 1000)})
        assert realism_of_histogram(h, h) == 0.0

    def test_symmetry(self):
        a = _hist({"long_accel": np.random.default_rng(1).normal(0, 2, 500)})
        b = _hist({"long_accel": np.random.default_rng(2).normal(1, 1, 500)})
        assert realism_of_histogram(a, b) == pytest.approx(realism_of_histogram(b, a))

    def test_one_bin_shift_equals_bin_width(self):
        lo, hi, nbins = PROFILE_SPECS["long_accel"]
        edges = np.linspace(lo, hi, nbins + 1)
        h1 = np.zeros(nbins)
        h2 = np.zeros(nbins)
        h1[10] = 1.0
        h2[11] = 1.0
        width = edges[1] - edges[0]
        assert wasserstein_1d(h1, h2, edges) == pytest.approx(width)

    def test_matches_sorted_sample_transport(self):
        # brute-force 1-D optimal transport on expanded integer-count samples
        rng = np.random.default_rng(3)
        lo, hi, nbins = PROFILE_SPECS["long_accel"]
        edges = np.linspace(lo, hi, nbins + 1)
        centers = 0.5 * (edges[:-1] + edges[1:])
        for _ in range(10):
            c1 = rng.integers(0, 6, nbins)
            c2 = rng.permutation(c1)  # same total mass
            n = c1.sum()
            if n == 0:
                continue
            h1 = c1 / n
            h2 = c2 / n
            x1 = np.sort(np.repeat(centers, c1))
            x2 = np.sort(np.repeat(centers, c2))
            brute = np.abs(x1 - x2).mean()
            assert wasserstein_1d(h1, h2, edges) == pytest.approx(brute, abs=1e-9)

    def test_rejects_mismatched_edges(self):
        h = _hist({"long_accel": [0.0]})
        other = DrivingProfileHistogram(
            edges={k: v + 1.0 for k, v in h.edges.items()}, hist=h.hist)
        with pytest.raises(ValueError):
            realism_of_histogram(h, other)

    def test_histograms_normalized(self):
        h = _hist({"long_accel": np.random.default_rng(0).normal(0, 5, 2000),
                   "lat_accel": [0.1, 0.2], "jerk": [30.0, -40.0]})
        for prop in PROFILE_SPECS:
            assert h.hist[prop].sum() == pytest.approx(1.0)

    def test_save_load_round_trip(self, tmp_path):
        h = _hist({"long_accel": np.random.default_rng(0).normal(0, 2, 100)})
        h.save(tmp_path / "ref.json")
        h2 = DrivingProfileHistogram.load(tmp_path / "ref.json")
        for prop in PROFILE_SPECS:
            np.testing.assert_allclose(h.hist[prop], h2.hist[prop])

    def test_realism_invariant_to_log_order(self):
        logs = [_make_log(seed=i) for i in range(4)]
        ref = _hist({"long_accel": np.random.default_rng(9).normal(0, 2, 300)})
        assert realism(logs, ref) == pytest.approx(realism(logs[::-1], ref))


class TestTtcWindow:
    def test_window_arithmetic(self):
        log = _make_log(n_steps=100, collision_time=10.0)
        # window covers exactly the five steps at t = 9.5 .. 9.9
        from safesim import guidance

        idx_i = log.agent_ids.index("ego")
        idx_j = log.agent_ids.index("adv")
        allst = np.concatenate([log.initial_states[None], log.states])
        expected = []
        for t_idx in (95, 96, 97, 98, 99):
            si, sj = allst[t_idx, idx_i], allst[t_idx, idx_j]
            dx, dy = si[0] - sj[0], si[1] - sj[1]
            dvx = si[2] * np.cos(si[3]) - sj[2] * np.cos(sj[3])
            dvy = si[2] * np.sin(si[3]) - sj[2] * np.sin(sj[3])
            t_c, d2 = guidance.ttc_point(dx, dy, dvx, dvy)
            expected.append(-np.exp(-t_c**2 / 8.0 - d2 / 8.0))
        ev = log.collisions[0]
        assert ttc_cost_window(log, ev, 4.0, 4.0) == pytest.approx(np.mean(expected))

    def test_stationary_contact_pair_is_minus_one(self):
        log = _make_log(n_steps=60, collision_time=5.0)
        log.initial_states[:2] = [[0, 0, 0, 0], [0, 0, 0, 0]]
        log.states[:, 0] = [0, 0, 0, 0]
        log.states[:, 1] = [0, 0, 0, 0]
        ev = log.collisions[0]
        assert ttc_cost_window(log, ev, 4.0, 4.0) == pytest.approx(-1.0)

    def test_cross_module_consistency_with_guidance(self):
        from safesim.guidance import cost_ttc

        log = _make_log(n_steps=100, collision_time=10.0)
        allst = np.concatenate([log.initial_states[None], log.states])
        window = allst[95:100]
        ego = window[:, 0]
        adv = window[:, 1]
        value, _ = cost_ttc(ego, adv, 4.0, 4.0)
        ev = log.collisions[0]
        assert ttc_cost_window(log, ev, 4.0, 4.0) == pytest.approx(value / 5.0, abs=1e-9)


class TestCollisionDiversity:
    def _ev(self, angle=0.0, rel_speed=1.0, point=(0.0, 0.0)):
        return CollisionEvent(time=1.0, agent_i="ego", agent_j="adv",
                              rel_speed=rel_speed, angle=angle, point=point)

    def test_identical_events_zero(self):
        d = collision_diversity([self._ev(), self._ev()])
        assert d["angle_var"] == 0.0
        assert d["rel_speed_var"] == 0.0
        assert d["point_var"] == 0.0

    def test_two_speeds_sample_variance(self):
        d = collision_diversity([self._ev(rel_speed=1.0), self._ev(rel_speed=3.0)])
        assert d["rel_speed_var"] == pytest.approx(2.0)

    def test_angle_wrapping(self):
        # angles straddling the pi boundary stay tight after wrapping
        d = collision_diversity([self._ev(angle=np.pi - 0.05),
                                 self._ev(angle=-np.pi + 0.05)])
        assert d["angle_var"] == pytest.approx(2 * 0.05**2, rel=1e-6)

    def test_matches_independent_recomputation(self):
        rng = np.random.default_rng(4)
        events = [self._ev(angle=rng.uniform(-1, 1), rel_speed=rng.normal(2, 1),
                           point=tuple(rng.normal(0, 2, 2))) for _ in range(12)]
        d = collision_diversity(events)
        speeds = np.array([e.rel_speed for e in events])
        pts = np.array([e.point for e in events])
        n = len(events)
        # two-pass recomputation
        manual_speed = ((speeds - speeds.mean()) ** 2).sum() / (n - 1)
        manual_point = (((pts - pts.mean(0)) ** 2).sum()) / (n - 1)
        assert d["rel_speed_var"] == pytest.approx(manual_speed, abs=1e-12)
        assert d["point_var"] == pytest.approx(manual_point, abs=1e-12)

    def test_needs_two_events(self):
        with pytest.raises(ValueError):
            collision_diversity([self._ev()])


class TestAggregate:
    def test_all_collide(self):
        logs = [_make_log(name=f"s{i}", collision_time=3.0) for i in range(4)]
        report = aggregate(logs)
        assert report.summary["collision_rate"] == 100.0

    def test_no_offroad_zero(self):
        logs = [_make_log(name=f"s{i}") for i in range(3)]
        assert aggregate(logs).summary["adv_offroad"] == 0.0
        assert aggregate(logs).summary["other_offroad"] == 0.0

    def test_hand_tallied_batch(self):
        logs = [
            _make_log(name="a", seed=0, collision_time=2.0, rel_speed=1.0),
            _make_log(name="a", seed=1, collision_time=3.0, rel_speed=3.0),
            _make_log(name="b", seed=0),
            _make_log(name="b", seed=1, offroad=("adv",)),
            _make_log(name="c", seed=0, offroad=("npc1",)),
        ]
        report = aggregate(logs)
        s = report.summary
        assert s["n_runs"] == 5
        assert s["collision_rate"] == pytest.approx(100.0 * 2 / 5)
        assert s["adv_offroad"] == pytest.approx(100.0 * 1 / 5)
        assert s["other_offroad"] == pytest.approx(100.0 * 1 / 5)
        assert s["collision_rel_speed"] == pytest.approx(2.0)
        assert len(report.rows) == 5

    def test_rates_invariant_to_order(self):
        logs = [_make_log(name=f"s{i}", seed=i,
                          collision_time=2.0 if i % 2 else None) for i in range(6)]
        a = aggregate(logs).summary
        b = aggregate(logs[::-1]).summary
        for key in ("collision_rate", "adv_offroad", "collision_rel_speed"):
            assert a[key] == pytest.approx(b[key], nan_ok=True)

    def test_diversity_grouped_by_scenario(self):
        logs = [_make_log(name="a", seed=0, collision_time=2.0, rel_speed=1.0),
                _make_log(name="a", seed=1, collision_time=2.5, rel_speed=3.0)]
        s = aggregate(logs).summary
        assert s["collision_rel_speed_var"] == pytest.approx(2.0)

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            aggregate([])

    def test_csv_and_json_outputs(self, tmp_path):
        logs = [_make_log(name="a", collision_time=2.0), _make_log(name="b")]
        report = aggregate(logs)
        report.write_csv(tmp_path / "m.csv")
        report.write_json(tmp_path / "m.json")
        lines = open(tmp_path / "m.csv").read().strip().splitlines()
        assert len(lines) == 1 + 2 + 1  # header + rows + summary marker
        import json as j

        doc = j.load(open(tmp_path / "m.json"))
        assert "summary" in doc and "rows" in doc
