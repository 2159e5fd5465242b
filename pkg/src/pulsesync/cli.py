"""Command-line front end: parameter checking, simulation, sweeps, analysis.

Exit codes are a stable contract: 0 success, 2 invalid parameters or
scenario, 3 assertion failure (missed convergence bound or, under
--strict, any check violation), 4 I/O error.
"""

from __future__ import annotations

import hashlib
import json
import multiprocessing
import os
import sys
from fractions import Fraction
from pathlib import Path

import click

from . import analysis, engine, params as params_mod, trace as trace_mod
from .network import STRATEGIES
from .params import (CycleTooShortError, FaultRatioError, ParamsError,
                     absorbance_distance, build_ref, check_ref_properties,
                     derive_constants, min_cycle_bound, tau, validate_params)

_UNITS = {"ns": 1, "us": 10 ** 3, "ms": 10 ** 6, "s": 10 ** 9}

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_ASSERTION = 3
EXIT_IO = 4


def parse_duration(value) -> int:
    """Duration to integer nanoseconds; accepts ns/us/ms/s suffixed strings."""
    if isinstance(value, bool):
        raise ValueError(f"not a duration: {value!r}")
    if isinstance(value, int):
        return value
    if isinstance(value, float):
        if value != int(value):
            raise ValueError(f"fractional nanoseconds: {value!r}")
        return int(value)
    text = str(value).strip()
    mult = 1
    for suffix in ("ns", "us", "ms", "s"):
        if text.endswith(suffix):
            mult = _UNITS[suffix]
            text = text[: -len(suffix)].strip()
            break
    amount = Fraction(text) * mult
    if amount.denominator != 1:
        raise ValueError(f"{value!r} is not a whole number of nanoseconds")
    return int(amount)


# -- scenario files -----------------------------------------------------------

_SCENARIO_KEYS = {"params", "seed", "duration_cycles", "byzantine",
                  "initial_state", "chaos_until_ns", "clock_rates",
                  "trace_detail", "delays"}
_PARAM_KEYS = {"n", "f", "cycle_ns", "d_ns", "rho", "mode"}
_BYZ_KEYS = {"id", "strategy", "params"}


def scenario_from_dict(doc: dict) -> engine.Scenario:
    """Validate and normalize a scenario document.

    Unknown keys are rejected so that typos fail loudly rather than being
    silently defaulted.
    """
    if not isinstance(doc, dict):
        raise engine.ScenarioInvalid("scenario must be a JSON object")
    unknown = set(doc) - _SCENARIO_KEYS
    if unknown:
        raise engine.ScenarioInvalid(f"unknown scenario keys: {sorted(unknown)}")
    if "params" not in doc:
        raise engine.ScenarioInvalid("scenario missing 'params'")
    pdoc = doc["params"]
    unknown = set(pdoc) - _PARAM_KEYS
    if unknown:
        raise engine.ScenarioInvalid(f"unknown params keys: {sorted(unknown)}")
    try:
        params = validate_params(
            n=pdoc["n"], f=pdoc["f"],
            cycle=parse_duration(pdoc["cycle_ns"]),
            d=parse_duration(pdoc["d_ns"]),
            rho=pdoc.get("rho", 0),
            mode=pdoc.get("mode", params_mod.MODE_BROADCAST))
    except KeyError as exc:
        raise engine.ScenarioInvalid(f"params missing {exc}") from None

    byz = []
    for entry in doc.get("byzantine", []):
        unknown = set(entry) - _BYZ_KEYS
        if unknown:
            raise engine.ScenarioInvalid(
                f"unknown byzantine keys: {sorted(unknown)}")
        kind = entry.get("strategy", "silent")
        if kind not in STRATEGIES:
            raise engine.ScenarioInvalid(
                f"unknown strategy {kind!r}; known: {sorted(STRATEGIES)}")
        byz.append((int(entry["id"]), kind, dict(entry.get("params", {}))))

    initial = doc.get("initial_state", "synchronized")
    if isinstance(initial, dict):
        if set(initial) != {"phases"}:
            raise engine.ScenarioInvalid(
                "dict initial_state must be {'phases': {node: elapsed}}")
        initial = {"phases": {int(k): parse_duration(v)
                              for k, v in initial["phases"].items()}}
    elif initial not in ("synchronized", "random_phases", "adversarial_pools"):
        raise engine.ScenarioInvalid(f"unknown initial_state {initial!r}")

    detail = doc.get("trace_detail", "full")
    if detail not in trace_mod.DETAIL_NAMES:
        raise engine.ScenarioInvalid(
            f"trace_detail must be one of {sorted(trace_mod.DETAIL_NAMES)}")

    rates = doc.get("clock_rates")
    if rates is not None and rates != "extremes":
        if not isinstance(rates, list):
            raise engine.ScenarioInvalid(
                "clock_rates must be null, 'extremes', or a list of ppb ints")
        rates = [int(r) for r in rates]

    return engine.Scenario(
        params=params,
        seed=int(doc.get("seed", 0)),
        duration_cycles=int(doc.get("duration_cycles", 10)),
        byzantine=tuple(byz),
        initial_state=initial,
        chaos_until=parse_duration(doc.get("chaos_until_ns", 0)),
        clock_ppb=rates,
        trace_detail=trace_mod.DETAIL_NAMES[detail],
        delays=doc.get("delays", "uniform"),
    )


def _load_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _out_dir() -> Path:
    return Path(os.environ.get("PULSESYNC_OUT", "."))


def _fmt_ns(ns: int) -> str:
    if ns % 10 ** 9 == 0:
        return f"{ns // 10 ** 9}s"
    return f"{ns}ns ({ns / 1e9:.6f}s)"


# -- commands -----------------------------------------------------------------


@click.group()
def main():
    """Self-stabilizing pulse synchronization simulator and analyzer."""


@main.command("check-params")
@click.option("--n", type=int, required=True, help="node count")
@click.option("--f", type=int, required=True, help="fault bound")
@click.option("--cycle", required=True, help="ideal pulse period (e.g. 100s)")
@click.option("--d", required=True, help="end-to-end delay bound (e.g. 1s)")
@click.option("--rho", default="0", help="clock drift bound")
@click.option("--mode", default=params_mod.MODE_BROADCAST,
              type=click.Choice(params_mod.MODES))
@click.option("--json", "as_json", is_flag=True, help="machine-readable output")
def cmd_check_params(n, f, cycle, d, rho, mode, as_json):
    """Validate parameters and print the derived protocol constants."""
    try:
        cycle_ns = parse_duration(cycle)
        d_ns = parse_duration(d)
        p = validate_params(n, f, cycle_ns, d_ns, rho, mode)
    except FaultRatioError as exc:
        click.echo(f"invalid: {exc}", err=True)
        sys.exit(EXIT_INVALID)
    except CycleTooShortError as exc:
        click.echo(f"invalid: {exc}", err=True)
        click.echo(f"minimum admissible cycle: {_fmt_ns(exc.min_cycle_ns)}",
                   err=True)
        sys.exit(EXIT_INVALID)
    except (ParamsError, ValueError) as exc:
        click.echo(f"invalid: {exc}", err=True)
        sys.exit(EXIT_INVALID)

    ref = build_ref(p)
    derived = derive_constants(p)
    report = check_ref_properties(ref, p)
    bound = min_cycle_bound(p.n, p.f, p.delay, p.rho)

    if as_json:
        out = {
            "params": {"n": p.n, "f": p.f, "cycle_ns": p.cycle, "d_ns": p.d,
                       "rho": str(p.rho), "mode": p.mode,
                       "sigma_ns": p.sigma, "delay_ns": p.delay},
            "min_cycle_ns": int(bound) + 1,
            "steps_ns": list(ref.steps),
            "tau_ns": list(derived.tau_ns),
            "absorbance_ns": [absorbance_distance(ref, p.f, s)
                              for s in range(1, p.n - p.f + 1)],
            "cycle_min_ns": derived.cycle_min_ns,
            "cycle_max_ns": derived.cycle_max_ns,
            "warmup_ns": derived.warmup_ns,
            "properties": {
                "monotone": report.monotone,
                "top_step_bound": report.top_step_bound,
                "step_tightness_bound": report.step_tightness_bound,
                "refractory_floor": report.refractory_floor,
                "sum_is_cycle": report.sum_is_cycle,
                "partition_coverage": report.partition_coverage,
            },
            "all_pass": report.all_pass,
        }
        click.echo(json.dumps(out, indent=2, sort_keys=True))
    else:
        click.echo(f"n={p.n} f={p.f} cycle={_fmt_ns(p.cycle)} d={_fmt_ns(p.d)} "
                   f"rho={p.rho} mode={p.mode} sigma={_fmt_ns(p.sigma)}")
        click.echo(f"minimum admissible cycle: > {_fmt_ns(int(bound))}")
        click.echo("threshold steps (level n+1 down to level 1):")
        for i, step in enumerate(reversed(ref.steps)):
            click.echo(f"  R{p.n + 1 - i:<3d} {_fmt_ns(step)}")
        click.echo("age windows tau(0..n+3): "
                   + " ".join(_fmt_ns(t) for t in derived.tau_ns))
        click.echo("absorbance distance by cluster size: "
                   + " ".join(f"{s}:{_fmt_ns(absorbance_distance(ref, p.f, s))}"
                              for s in range(1, p.n - p.f + 1)))
        click.echo(f"cycle bounds: [{_fmt_ns(derived.cycle_min_ns)}, "
                   f"{_fmt_ns(derived.cycle_max_ns)}]  "
                   f"warmup {_fmt_ns(derived.warmup_ns)}")
        for name, ok in (("monotone", report.monotone),
                         ("top-step bound", report.top_step_bound),
                         ("step tightness bound", report.step_tightness_bound),
                         ("refractory floor", report.refractory_floor),
                         ("sum == cycle", report.sum_is_cycle),
                         ("partition coverage", report.partition_coverage)):
            click.echo(f"  property {name:<22} {'PASS' if ok else 'FAIL'}")
    sys.exit(EXIT_OK if report.all_pass else EXIT_INVALID)


def _run_and_analyze(doc: dict):
    scn = scenario_from_dict(doc)
    tr = engine.run(scn)
    report = analysis.analyze(tr)
    return tr, report


@main.command("simulate")
@click.argument("scenario_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", default=None, help="trace output (JSONL)")
@click.option("--report", "report_path", default=None, help="analysis report (JSON)")
@click.option("--seed", type=int, default=None, help="override scenario seed")
@click.option("--assert-convergence-within", "within", type=float, default=None,
              help="fail (exit 3) if convergence takes more than this many cycles")
def cmd_simulate(scenario_path, out_path, report_path, seed, within):
    """Run one scenario: write the trace and its analysis report."""
    try:
        doc = _load_json(scenario_path)
    except (OSError, json.JSONDecodeError) as exc:
        click.echo(f"cannot read scenario: {exc}", err=True)
        sys.exit(EXIT_IO)
    if seed is not None:
        doc["seed"] = seed
    try:
        tr, report = _run_and_analyze(doc)
    except (engine.ScenarioInvalid, ParamsError, ValueError) as exc:
        click.echo(f"invalid scenario: {exc}", err=True)
        sys.exit(EXIT_INVALID)

    payload = tr.dumps()
    digest = hashlib.sha256(payload.encode("utf-8")).hexdigest()
    if out_path is None:
        out_path = _out_dir() / (Path(scenario_path).stem + ".trace.jsonl")
    if report_path is None:
        report_path = _out_dir() / (Path(scenario_path).stem + ".report.json")
    try:
        Path(out_path).write_text(payload, encoding="utf-8")
        Path(report_path).write_text(
            json.dumps(report, indent=2, sort_keys=True, default=str),
            encoding="utf-8")
    except OSError as exc:
        click.echo(f"cannot write output: {exc}", err=True)
        sys.exit(EXIT_IO)

    click.echo(f"trace: {out_path} sha256={digest}")
    click.echo(f"report: {report_path}")
    if not report["converged"]:
        click.echo("did not converge", err=True)
        sys.exit(EXIT_ASSERTION)
    cycles = report["convergence_cycles"]
    click.echo(f"converged after {cycles:.3f} cycles; "
               f"max spread {report['tightness']['max_spread']} ns; "
               f"checks {'ok' if report['ok'] else 'FAILED'}")
    if within is not None and cycles > within:
        click.echo(f"convergence exceeded {within} cycles", err=True)
        sys.exit(EXIT_ASSERTION)
    sys.exit(EXIT_OK if report["ok"] else EXIT_ASSERTION)


def _apply_path(doc: dict, dotted: str, value):
    parts = dotted.split(".")
    target = doc
    for part in parts[:-1]:
        target = target.setdefault(part, {})
    target[parts[-1]] = value


def _sweep_row(args):
    keys, values, base = args
    doc = json.loads(json.dumps(base))
    for key, value in zip(keys, values):
        _apply_path(doc, key, value)
    row = {key: value for key, value in zip(keys, values)}
    try:
        _tr, report = _run_and_analyze(doc)
        row.update({
            "error": None,
            "converged": report["converged"],
            "convergence_cycles": report.get("convergence_cycles"),
            "max_spread_ns": (report["tightness"]["max_spread"]
                              if report["converged"] else None),
            "cycle_violations": (len(report["cycle_bounds"]["violations"])
                                 if report["converged"] else None),
            "summation_ok": (report["summation"]["ok"]
                             if report.get("summation") else None),
            "ok": report["ok"],
        })
    except Exception as exc:  # per-run failures are recorded, not fatal
        row.update({"error": f"{type(exc).__name__}: {exc}", "ok": False})
    return row


@main.command("sweep")
@click.argument("sweep_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_base", default=None, help="output basename")
@click.option("--jobs", type=int, default=1, help="parallel workers")
@click.option("--strict", is_flag=True, help="exit 3 if any run fails")
def cmd_sweep(sweep_path, out_base, jobs, strict):
    """Run a grid of scenarios and aggregate the reports.

    The sweep file holds {"base": <scenario>, "grid": {<dotted.key>:
    [values...]}}; rows are the cartesian product of the grid in sorted
    key order.
    """
    try:
        spec = _load_json(sweep_path)
    except (OSError, json.JSONDecodeError) as exc:
        click.echo(f"cannot read sweep spec: {exc}", err=True)
        sys.exit(EXIT_IO)
    base = spec.get("base")
    grid = spec.get("grid", {})
    if not isinstance(base, dict):
        click.echo("sweep spec needs a 'base' scenario object", err=True)
        sys.exit(EXIT_INVALID)

    keys = sorted(grid)
    combos = [()]
    for key in keys:
        combos = [prev + (v,) for prev in combos for v in grid[key]]
    if not keys:
        combos = []
    tasks = [(keys, values, base) for values in combos]

    if jobs > 1 and tasks:
        with multiprocessing.Pool(jobs) as pool:
            rows = pool.map(_sweep_row, tasks)
    else:
        rows = [_sweep_row(t) for t in tasks]

    if out_base is None:
        out_base = _out_dir() / Path(sweep_path).stem
    out_base = Path(out_base)
    summary = {
        "runs": len(rows),
        "failures": sum(1 for r in rows if not r.get("ok")),
        "rows": rows,
    }
    try:
        out_base.with_suffix(".summary.json").write_text(
            json.dumps(summary, indent=2, sort_keys=True, default=str),
            encoding="utf-8")
        columns = keys + ["converged", "convergence_cycles", "max_spread_ns",
                          "cycle_violations", "summation_ok", "ok", "error"]
        lines = [",".join(columns)]
        for row in rows:
            lines.append(",".join("" if row.get(c) is None else str(row.get(c))
                                  for c in columns))
        out_base.with_suffix(".rows.csv").write_text(
            "\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        click.echo(f"cannot write output: {exc}", err=True)
        sys.exit(EXIT_IO)

    click.echo(f"{len(rows)} runs, {summary['failures']} failures -> "
               f"{out_base.with_suffix('.summary.json')}")
    if strict and summary["failures"]:
        sys.exit(EXIT_ASSERTION)
    sys.exit(EXIT_OK)


@main.command("analyze")
@click.argument("trace_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--report", "report_path", default=None, help="report output (JSON)")
@click.option("--csv", "csv_path", default=None, help="per-round spreads (CSV)")
def cmd_analyze(trace_path, report_path, csv_path):
    """Re-run the checkers over a stored trace."""
    try:
        tr = trace_mod.load(trace_path)
    except (OSError, ValueError) as exc:
        click.echo(f"cannot read trace: {exc}", err=True)
        sys.exit(EXIT_IO)
    try:
        report = analysis.analyze(tr)
    except (ParamsError, analysis.AnalysisError) as exc:
        click.echo(f"cannot analyze: {exc}", err=True)
        sys.exit(EXIT_INVALID)

    text = json.dumps(report, indent=2, sort_keys=True, default=str)
    if report_path:
        try:
            Path(report_path).write_text(text, encoding="utf-8")
        except OSError as exc:
            click.echo(f"cannot write report: {exc}", err=True)
            sys.exit(EXIT_IO)
        click.echo(f"report: {report_path}")
    else:
        click.echo(text)

    if csv_path and report["converged"]:
        ctx = analysis.context(tr)
        rounds = analysis.group_rounds(ctx, report["converged_at"])
        lines = ["round,start_ns,end_ns,spread_ns,fires"]
        for i, rnd in enumerate(rounds):
            lines.append(f"{i},{rnd[0][0]},{rnd[-1][0]},"
                         f"{rnd[-1][0] - rnd[0][0]},{len(rnd)}")
        try:
            Path(csv_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
        except OSError as exc:
            click.echo(f"cannot write csv: {exc}", err=True)
            sys.exit(EXIT_IO)

    sys.exit(EXIT_OK if report["ok"] else EXIT_ASSERTION)


if __name__ == "__main__":
    main()
