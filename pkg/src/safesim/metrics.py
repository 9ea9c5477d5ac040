"""Evaluation statistics over simulation logs: collision/offroad rates,
Wasserstein realism against a reference driving profile, pre-collision TTC
cost, and collision diversity.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import wrap_angle
from .guidance import ttc_point

# 41 uniform bins per property; accelerations in m/s^2, jerk in m/s^3
PROFILE_SPECS = {
    "long_accel": (-8.0, 8.0, 41),
    "lat_accel": (-8.0, 8.0, 41),
    "jerk": (-20.0, 20.0, 41),
}


@dataclass(frozen=True)
class DrivingProfileHistogram:
    """Normalized histograms of longitudinal accel, lateral accel, and jerk
    over shared fixed bin edges."""

    edges: dict  # property -> (n_bins + 1,)
    hist: dict  # property -> (n_bins,), sums to 1

    @staticmethod
    def from_samples(samples: dict) -> "DrivingProfileHistogram":
        edges, hist = {}, {}
        for prop, (lo, hi, nbins) in PROFILE_SPECS.items():
            e = np.linspace(lo, hi, nbins + 1)
            x = np.clip(np.asarray(samples[prop], dtype=float), lo, hi)
            h, _ = np.histogram(x, bins=e)
            total = h.sum()
            hist[prop] = h / total if total > 0 else np.full(nbins, 1.0 / nbins)
            edges[prop] = e
        return DrivingProfileHistogram(edges=edges, hist=hist)

    def to_json(self) -> dict:
        return {
            "edges": {k: v.tolist() for k, v in self.edges.items()},
            "hist": {k: v.tolist() for k, v in self.hist.items()},
        }

    @staticmethod
    def from_json(doc: dict) -> "DrivingProfileHistogram":
        return DrivingProfileHistogram(
            edges={k: np.asarray(v) for k, v in doc["edges"].items()},
            hist={k: np.asarray(v) for k, v in doc["hist"].items()},
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @staticmethod
    def load(path) -> "DrivingProfileHistogram":
        with open(path) as fh:
            return DrivingProfileHistogram.from_json(json.load(fh))


def wasserstein_1d(hist_a: np.ndarray, hist_b: np.ndarray, edges: np.ndarray) -> float:
    """W1 between two normalized histograms on shared uniform bins: the L1
    distance between their CDFs times the bin width."""
    if hist_a.shape != hist_b.shape or len(edges) != len(hist_a) + 1:
        raise ValueError("histogram shape mismatch")
    width = edges[1] - edges[0]
    return float(np.abs(np.cumsum(hist_a - hist_b)).sum() * width)


def log_profiles(log, per_trajectory_means: bool = False) -> dict:
    """Driving-profile samples (non-ego agents) from one simulation log.

    With `per_trajectory_means` each agent contributes the mean of each
    property instead of every step (the alternative reading of the reported
    "mean of mean values").
    """
    pre_states = np.concatenate([log.initial_states[None], log.states[:-1]], axis=0)
    accs, lats, jerks = [], [], []
    for i, aid in enumerate(log.agent_ids):
        if log.roles[aid] == "ego":
            continue
        acc = log.actions[:, i, 0]
        lat = pre_states[:, i, 2] * log.actions[:, i, 1]
        jerk = np.diff(acc) / log.dt if len(acc) > 1 else np.zeros(0)
        if per_trajectory_means:
            acc, lat = np.atleast_1d(acc.mean()), np.atleast_1d(lat.mean())
            jerk = np.atleast_1d(jerk.mean()) if len(jerk) else jerk
        accs.append(acc)
        lats.append(lat)
        if len(jerk):
            jerks.append(jerk)
    empty = np.zeros(0)
    return {
        "long_accel": np.concatenate(accs) if accs else empty,
        "lat_accel": np.concatenate(lats) if lats else empty,
        "jerk": np.concatenate(jerks) if jerks else empty,
    }


def realism(logs, reference: DrivingProfileHistogram,
            per_trajectory_means: bool = False) -> float:
    """Mean 1-D Wasserstein distance between the batch's driving-profile
    histograms and the reference, over the three properties."""
    if not logs:
        raise ValueError("need at least one log")
    merged = {k: [] for k in PROFILE_SPECS}
    for log in logs:
        p = log_profiles(log, per_trajectory_means)
        for k in merged:
            merged[k].append(p[k])
    samples = {k: np.concatenate(v) for k, v in merged.items()}
    batch = DrivingProfileHistogram.from_samples(samples)
    total = 0.0
    for prop in PROFILE_SPECS:
        if not np.array_equal(batch.edges[prop], reference.edges[prop]):
            raise ValueError(f"bin edges mismatch for {prop}")
        total += wasserstein_1d(batch.hist[prop], reference.hist[prop], batch.edges[prop])
    return total / len(PROFILE_SPECS)


def realism_of_histogram(batch: DrivingProfileHistogram,
                         reference: DrivingProfileHistogram) -> float:
    vals = []
    for prop in PROFILE_SPECS:
        if not np.array_equal(batch.edges[prop], reference.edges[prop]):
            raise ValueError(f"bin edges mismatch for {prop}")
        vals.append(wasserstein_1d(batch.hist[prop], reference.hist[prop], batch.edges[prop]))
    return float(np.mean(vals))


def ttc_cost_window(log, event, lambda_t: float = 4.0, lambda_d: float = 4.0,
                    window_s: float = 0.5) -> float:
    """Mean per-step TTC cost between the event's agents over the window_s
    seconds preceding the collision."""
    idx_i = log.agent_ids.index(event.agent_i)
    idx_j = log.agent_ids.index(event.agent_j)
    t_col_step = int(round(event.time / log.dt))  # steps are 1-indexed in time
    n_window = int(round(window_s / log.dt))
    lo = max(0, t_col_step - 1 - n_window)
    hi = t_col_step - 1
    if hi <= lo:
        return float("nan")
    all_states = np.concatenate([log.initial_states[None], log.states], axis=0)
    total = 0.0
    count = 0
    for t in range(lo, hi):
        si = all_states[t + 1, idx_i]
        sj = all_states[t + 1, idx_j]
        dx, dy = si[0] - sj[0], si[1] - sj[1]
        dvx = si[2] * np.cos(si[3]) - sj[2] * np.cos(sj[3])
        dvy = si[2] * np.sin(si[3]) - sj[2] * np.sin(sj[3])
        t_col, d_col2 = ttc_point(dx, dy, dvx, dvy)
        total += -np.exp(-t_col**2 / (2.0 * lambda_t) - d_col2 / (2.0 * lambda_d))
        count += 1
    return total / count


def collision_diversity(events) -> dict:
    """Sample variances of collision angle (wrapped about the circular mean),
    relative speed, and collision point (trace of the 2-D covariance)."""
    if len(events) < 2:
        raise ValueError("need at least two events")
    angles = np.array([e.angle for e in events])
    speeds = np.array([e.rel_speed for e in events])
    points = np.array([e.point for e in events])
    mean_dir = np.arctan2(np.sin(angles).mean(), np.cos(angles).mean())
    dev = wrap_angle(angles - mean_dir)
    return {
        "angle_var": float(np.sum(dev**2) / (len(dev) - 1)),
        "rel_speed_var": float(np.var(speeds, ddof=1)),
        "point_var": float(np.trace(np.cov(points.T, ddof=1))),
    }


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)  # one dict per run
    summary: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"rows": self.rows, "summary": self.summary}

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)

    def write_csv(self, path) -> None:
        if not self.rows:
            raise ValueError("empty report")
        cols = list(self.rows[0].keys())
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=cols)
            writer.writeheader()
            for row in self.rows:
                writer.writerow(row)
            writer.writerow({cols[0]: "summary"})
        with open(str(path) + ".summary.json", "w") as fh:
            json.dump(self.summary, fh, indent=1, sort_keys=True)


def _first_ego_adv_collision(log):
    for e in log.collisions:
        ri, rj = log.roles[e.agent_i], log.roles[e.agent_j]
        if {ri, rj} == {"ego", "adversary"}:
            return e
    return None


def aggregate(logs, reference: Optional[DrivingProfileHistogram] = None,
              lambda_t: float = 4.0, lambda_d: float = 4.0) -> MetricsReport:
    """Batch statistics: event rates are percentages of scenarios (ego-adv
    collision) or of agents (offroad, other collisions); means over scenarios.
    """
    if not logs:
        raise ValueError("empty batch")
    rows = []
    n_adv_agents = n_adv_offroad = 0
    n_other_agents = n_other_offroad = 0
    n_other_hit_ego = 0
    n_nonadv_pairwise = 0
    rel_speeds, ttc_windows = [], []
    by_scenario = {}
    for log in logs:
        ego_evt = _first_ego_adv_collision(log)
        adv_ids = [a for a in log.agent_ids if log.roles[a] == "adversary"]
        other_ids = [a for a in log.agent_ids
                     if log.roles[a] not in ("ego", "adversary")]
        offroad_ids = {e.agent_id for e in log.offroads}
        n_adv_agents += len(adv_ids)
        n_adv_offroad += sum(a in offroad_ids for a in adv_ids)
        n_other_agents += len(other_ids)
        n_other_offroad += sum(a in offroad_ids for a in other_ids)
        hit_ego = set()
        nonadv_coll = set()
        for e in log.collisions:
            pair_roles = {log.roles[e.agent_i], log.roles[e.agent_j]}
            for a in (e.agent_i, e.agent_j):
                if log.roles[a] not in ("ego", "adversary"):
                    if "ego" in pair_roles:
                        hit_ego.add(a)
                    if "adversary" not in pair_roles and "ego" not in pair_roles:
                        nonadv_coll.add(a)
        n_other_hit_ego += len(hit_ego)
        n_nonadv_pairwise += len(nonadv_coll)

        row = {
            "scenario": log.scenario_name,
            "seed": log.seed,
            "ego_adv_collision": int(ego_evt is not None),
            "collision_time": ego_evt.time if ego_evt else "",
            "rel_speed": ego_evt.rel_speed if ego_evt else "",
            "collision_angle": ego_evt.angle if ego_evt else "",
            "adv_offroad": int(any(a in offroad_ids for a in adv_ids)),
            "other_offroad": int(any(a in offroad_ids for a in other_ids)),
            "duration": log.duration,
        }
        if ego_evt is not None:
            rel_speeds.append(ego_evt.rel_speed)
            w = ttc_cost_window(log, ego_evt, lambda_t, lambda_d)
            if np.isfinite(w):
                ttc_windows.append(w)
            row["ttc_cost_window"] = w
            by_scenario.setdefault(log.scenario_name, []).append(ego_evt)
        else:
            row["ttc_cost_window"] = ""
        rows.append(row)

    diversity = {"angle_var": [], "rel_speed_var": [], "point_var": []}
    for events in by_scenario.values():
        if len(events) >= 2:
            d = collision_diversity(events)
            for k in diversity:
                diversity[k].append(d[k])

    n = len(logs)
    summary = {
        "n_runs": n,
        "collision_rate": 100.0 * sum(r["ego_adv_collision"] for r in rows) / n,
        "adv_offroad": 100.0 * n_adv_offroad / n_adv_agents if n_adv_agents else 0.0,
        "other_offroad": 100.0 * n_other_offroad / n_other_agents if n_other_agents else 0.0,
        "ego_other_collision": 100.0 * n_other_hit_ego / n_other_agents if n_other_agents else 0.0,
        "nonadv_pairwise_collision": 100.0 * n_nonadv_pairwise / n_other_agents if n_other_agents else 0.0,
        "collision_rel_speed": float(np.mean(rel_speeds)) if rel_speeds else float("nan"),
        "ttc_cost_pre_collision": float(np.mean(ttc_windows)) if ttc_windows else float("nan"),
    }
    for k, vals in diversity.items():
        summary[f"collision_{k}"] = float(np.mean(vals)) if vals else float("nan")
    if reference is not None:
        summary["realism"] = realism(logs, reference)
    return MetricsReport(rows=rows, summary=summary)
