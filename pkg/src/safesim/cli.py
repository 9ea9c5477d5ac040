"""Command-line entry points: scenario generation, training, simulation,
parameter sweeps, and metric reports.

Every command is deterministic given --seed (or the SAFESIM_SEED environment
variable). A JSON config file can mirror any flag per command; explicit flags
win over the config file. Exit codes: 0 success, 1 validation failure,
2 runtime failure, with a machine-readable error JSON on stderr.
"""

from __future__ import annotations

import glob
import json
import os
import sys

import click
import numpy as np

from .batch import SweepSpec, apply_cell, run_sweep
from .corpus import generate_corpus
from .diffusion import TrajectoryDenoiser
from .engine import SimConfig, read_jsonl, run, write_jsonl
from .guidance import GuidanceConfig
from .metrics import DrivingProfileHistogram, aggregate
from .scene import ScenarioSpec
from .scenarios import write_library


def _load_config(ctx, param, value):
    if value is None:
        return None
    with open(value) as fh:
        ctx.default_map = json.load(fh)
    return value


@click.group()
@click.option("--config", type=click.Path(exists=True), callback=_load_config,
              expose_value=False, is_eager=True,
              help="JSON config file mirroring the flags, per command.")
def cli():
    """Closed-loop safety-critical traffic simulation."""


@cli.command("gen-scenarios")
@click.argument("out_dir", type=click.Path())
def cmd_gen_scenarios(out_dir):
    """Write the deterministic scenario library as JSON files."""
    paths = write_library(out_dir)
    click.echo(f"wrote {len(paths)} scenarios to {out_dir}")


@cli.command("train")
@click.option("--out", "out_path", type=click.Path(), required=True,
              help="Model file to write (.npz).")
@click.option("--reference-out", type=click.Path(), default=None,
              help="Where to write the realism reference histogram JSON.")
@click.option("--episodes", default=260, show_default=True)
@click.option("--iterations", default=4000, show_default=True)
@click.option("--hidden-width", default=256, show_default=True)
@click.option("--seed", default=0, show_default=True, envvar="SAFESIM_SEED")
def cmd_train(out_path, reference_out, episodes, iterations, hidden_width, seed):
    """Generate the synthetic corpus and train the denoiser."""
    corpus, profiles = generate_corpus(n_episodes=episodes, seed=seed)
    model = TrajectoryDenoiser(hidden_width=hidden_width, n_iterations=iterations,
                               seed=seed).fit(corpus)
    model.save(out_path)
    click.echo(f"trained on {len(corpus.features)} windows; "
               f"final loss {model.final_loss_:.5f}; wrote {out_path}")
    if reference_out:
        DrivingProfileHistogram.from_samples(profiles).save(reference_out)
        click.echo(f"wrote reference histogram to {reference_out}")


def _guidance_overrides(rho_mode, gamma, ttc_weight, v_diff):
    over = {}
    if rho_mode is not None:
        over["rho_mode"] = rho_mode
    if gamma is not None:
        over["gamma"] = gamma
    if ttc_weight is not None:
        over["w_ttc"] = ttc_weight
    if v_diff is not None:
        over["v_diff"] = v_diff
    return over


@cli.command("simulate")
@click.argument("scenario_path", type=click.Path(exists=True))
@click.argument("model_path", type=click.Path(exists=True))
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--planner", type=click.Choice(["idm", "lane-graph", "constant-velocity"]),
              default=None, help="Override the scenario's ego planner.")
@click.option("--rho-mode", type=click.Choice(["fixed", "dynamic-softmax"]), default=None)
@click.option("--gamma", type=float, default=None)
@click.option("--ttc-weight", type=float, default=None)
@click.option("--v-diff", type=float, default=None)
@click.option("--proposal-offset", type=float, default=None)
@click.option("--samples", type=int, default=None, help="Samples per agent per tick.")
@click.option("--max-duration", type=float, default=None)
@click.option("--seed", default=0, show_default=True, envvar="SAFESIM_SEED")
@click.option("--svg", "svg_path", type=click.Path(), default=None,
              help="Also render the executed run as an SVG figure.")
def cmd_simulate(scenario_path, model_path, out_path, planner, rho_mode, gamma,
                 ttc_weight, v_diff, proposal_offset, samples, max_duration,
                 seed, svg_path):
    """Run one closed-loop scenario and write its JSONL log."""
    scenario = ScenarioSpec.load(scenario_path)
    model = TrajectoryDenoiser.load(model_path)
    overrides = {k: v for k, v in _guidance_overrides(
        rho_mode, gamma, ttc_weight, v_diff).items()}
    if proposal_offset is not None:
        overrides["proposal.offset"] = proposal_offset
    if planner is not None:
        overrides["planner"] = planner
    defaults = GuidanceConfig()
    scenario, defaults = apply_cell(scenario, defaults, overrides)
    sim = SimConfig(seed=seed,
                    num_samples=samples if samples is not None else SimConfig.num_samples,
                    max_duration=(max_duration if max_duration is not None
                                  else SimConfig.max_duration))
    log = run(scenario, sim, model, defaults)
    write_jsonl(log, out_path)
    click.echo(f"{scenario.name}: terminated={log.terminated} after {log.duration:.1f}s, "
               f"{len(log.collisions)} collision(s); wrote {out_path}")
    if svg_path:
        from .render import render_svg
        render_svg(log, scenario, svg_path)
        click.echo(f"wrote {svg_path}")


@cli.command("sweep")
@click.option("--parameter", required=True,
              help="GuidanceConfig field (e.g. w_ttc), proposal.<key>, or planner.")
@click.option("--values", required=True, help="Comma-separated values.")
@click.option("--seeds", default="0,1,2,3,4", show_default=True)
@click.option("--scenarios", "scenario_glob", required=True,
              help="Glob of scenario JSON files.")
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--samples", type=int, default=6, show_default=True)
@click.option("--max-duration", type=float, default=10.0, show_default=True)
@click.option("--workers", type=int, default=os.cpu_count(), show_default="cpu count")
def cmd_sweep(parameter, values, seeds, scenario_glob, model_path, out_path,
              samples, max_duration, workers):
    """Sweep one parameter over the scenario batch; CSV of metrics vs value."""
    paths = sorted(glob.glob(scenario_glob))
    if not paths:
        raise click.UsageError(f"no scenarios match {scenario_glob}")

    def parse(v):
        try:
            return float(v)
        except ValueError:
            return v

    spec = SweepSpec(parameter=parameter,
                     values=tuple(parse(v) for v in values.split(",")),
                     seeds=tuple(int(s) for s in seeds.split(",")),
                     scenarios=tuple(paths))
    model = TrajectoryDenoiser.load(model_path)
    sim = SimConfig(num_samples=samples, max_duration=max_duration)
    defaults = GuidanceConfig()
    rows, _ = run_sweep(spec, model, sim, defaults, workers=max(1, workers),
                        cell_dir=out_path + ".cells")
    import csv

    cols = list(rows[0].keys())
    with open(out_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        writer.writerows(rows)
    click.echo(f"wrote {len(rows)} rows to {out_path}")


@cli.command("evaluate")
@click.argument("log_dir", type=click.Path(exists=True))
@click.option("--reference", "reference_path", type=click.Path(exists=True), default=None)
@click.option("--out-prefix", default="metrics", show_default=True)
def cmd_evaluate(log_dir, reference_path, out_prefix):
    """Aggregate metrics over a directory of JSONL logs; CSV + JSON out."""
    paths = sorted(glob.glob(os.path.join(log_dir, "*.jsonl")))
    if not paths:
        raise click.UsageError(f"no .jsonl logs in {log_dir}")
    logs = [read_jsonl(p) for p in paths]
    reference = DrivingProfileHistogram.load(reference_path) if reference_path else None
    report = aggregate(logs, reference=reference)
    report.write_csv(out_prefix + ".csv")
    report.write_json(out_prefix + ".json")
    click.echo(json.dumps(report.summary, indent=1, sort_keys=True))


def main():
    try:
        cli(standalone_mode=False)
        return 0
    except (click.UsageError, click.BadParameter) as exc:
        sys.stderr.write(json.dumps({"error": "validation", "message": str(exc)}) + "\n")
        return 1
    except (ValueError, FileNotFoundError, KeyError) as exc:
        sys.stderr.write(json.dumps({"error": "validation", "message": str(exc)}) + "\n")
        return 1
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.Abort:
        return 2
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit 2
        sys.stderr.write(json.dumps({"error": "runtime", "message": str(exc)}) + "\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
