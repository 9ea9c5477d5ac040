"""Batch running and parameter sweeps over (value x seed x scenario) cells.

Cells are independent simulations; they can run in a process pool, each cell
seeded on its own, and results are merged in a deterministic order.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

from .engine import SimConfig, run
from .guidance import GuidanceConfig
from .metrics import aggregate
from .scene import ROLE_ADVERSARY, ScenarioSpec

_GUIDANCE_FIELDS = {f.name for f in dataclasses.fields(GuidanceConfig)}


@dataclass(frozen=True)
class SweepSpec:
    parameter: str  # GuidanceConfig field, "proposal.<key>", or "planner"
    values: tuple
    seeds: tuple
    scenarios: tuple  # ScenarioSpec objects or paths

    def validate(self) -> "SweepSpec":
        if len(self.values) == 0 or len(self.seeds) == 0 or len(self.scenarios) == 0:
            raise ValueError("sweep needs values, seeds, and scenarios")
        split_overrides(self.parameter, self.values[0])  # path must resolve
        return self


def split_overrides(path: str, value):
    """Map a dotted parameter path to (guidance override, psi patch, planner)."""
    if path == "planner":
        return {}, {}, {"kind": value}
    if path.startswith("proposal."):
        key = path.split(".", 1)[1]
        if key == "offset":
            return {}, {"offsets": [float(value)]}, None
        if key not in ("accel", "lane", "offsets"):
            raise ValueError(f"unknown proposal key {key}")
        return {}, {key: value}, None
    name = path.split(".", 1)[1] if path.startswith("guidance.") else path
    if name not in _GUIDANCE_FIELDS:
        raise ValueError(f"unknown parameter path {path}")
    return {name: value}, {}, None


def apply_cell(scenario: ScenarioSpec, defaults: GuidanceConfig,
               overrides: dict):
    """Apply dotted-path overrides; returns (scenario, guidance defaults)."""
    g_over, psi_patch, planner = {}, {}, None
    for path, value in (overrides or {}).items():
        g, p, pl = split_overrides(path, value)
        g_over.update(g)
        psi_patch.update(p)
        planner = pl if pl is not None else planner
    if g_over:
        defaults = defaults.override(**g_over)
    if psi_patch or planner is not None:
        doc = copy.deepcopy(scenario.to_json())
        if planner is not None:
            doc["planner"] = planner
        if psi_patch:
            for agent in doc["agents"]:
                if agent["role"] == ROLE_ADVERSARY:
                    agent.setdefault("psi", {}).setdefault("proposal", {}).update(psi_patch)
        scenario = ScenarioSpec.from_json(doc)
    return scenario, defaults


@dataclass(frozen=True)
class Cell:
    scenario: ScenarioSpec
    seed: int
    overrides: dict = field(default_factory=dict)
    tag: str = ""


def run_cell(cell: Cell, model, sim: SimConfig, defaults: GuidanceConfig):
    scenario, d = apply_cell(cell.scenario, defaults, cell.overrides)
    sim = dataclasses.replace(sim, seed=cell.seed)
    return run(scenario, sim, model, d)


def run_cells(cells, model, sim: SimConfig, defaults: GuidanceConfig,
              workers: int = 1):
    """Run cells (in order); with workers > 1 a process pool is used and the
    results are still returned in submission order."""
    if workers <= 1:
        return [run_cell(c, model, sim, defaults) for c in cells]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(run_cell, c, model, sim, defaults) for c in cells]
        return [f.result() for f in futures]


def run_sweep(spec: SweepSpec, model, sim: SimConfig, defaults: GuidanceConfig,
              workers: int = 1, cell_dir=None, reference=None):
    """Cartesian product of values x scenarios x seeds.

    Returns (rows, logs_by_value): one row per cell plus one marginal row per
    value. When `cell_dir` is given, each cell's row is also written to its own
    JSON file (atomically) and merged from disk afterwards.
    """
    spec.validate()
    scenarios = [s if isinstance(s, ScenarioSpec) else ScenarioSpec.load(s)
                 for s in spec.scenarios]
    cells = [Cell(scenario=sc, seed=seed, overrides={spec.parameter: value},
                  tag=f"{spec.parameter}={value}")
             for value in spec.values for sc in scenarios for seed in spec.seeds]
    logs = run_cells(cells, model, sim, defaults, workers=workers)

    rows = []
    logs_by_value = {v: [] for v in spec.values}
    for cell, log in zip(cells, logs):
        value = cell.overrides[spec.parameter]
        logs_by_value[value].append(log)
        report = aggregate([log])
        row = {"parameter": spec.parameter, "value": value,
               "scenario": cell.scenario.name, "seed": cell.seed}
        row.update({k: v for k, v in report.summary.items() if k != "n_runs"})
        rows.append(row)
        if cell_dir is not None:
            os.makedirs(cell_dir, exist_ok=True)
            name = f"{spec.parameter}_{value}_{cell.scenario.name}_{cell.seed}.json"
            tmp = os.path.join(cell_dir, name + ".tmp")
            with open(tmp, "w") as fh:
                json.dump(row, fh)
            os.replace(tmp, os.path.join(cell_dir, name))

    if cell_dir is not None:
        merged = []
        for fname in sorted(os.listdir(cell_dir)):
            if fname.endswith(".json"):
                with open(os.path.join(cell_dir, fname)) as fh:
                    merged.append(json.load(fh))
        rows = sorted(merged, key=lambda r: (str(r["value"]), r["scenario"], r["seed"]))

    for value in spec.values:
        report = aggregate(logs_by_value[value], reference=reference)
        row = {"parameter": spec.parameter, "value": value,
               "scenario": "__marginal__", "seed": ""}
        row.update({k: v for k, v in report.summary.items() if k != "n_runs"})
        rows.append(row)
    return rows, logs_by_value
