"""Command-line pipeline: validate / calibrate / bound / ratio / report.

Every machine-readable output carries a provenance block (input hashes, config,
tool version) so batch studies stay auditable; with a fixed single-worker
config two runs on the same inputs produce byte-identical JSON except for the
timestamp field.

Exit codes: 0 success, 1 malformed input (schema category), 2 solver failure,
3 internal-consistency error, 4 validation failed.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import hashlib
import io
import json
import os
import sys
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import __version__, lp_backend
from .bicausal_bnb import BnBConfig, solve_bicausal
from .calibration import (CalibrationError, calibrate, feasibility_diagnosis,
                          load_chain_csv)
from .lp_backend import SolverConfig, write_lp_text
from .marginals import load_system, validate_system
from .mccormick import (McCormickInstance, build_mccormick_lp, default_bounds,
                        load_bounds, solve_mccormick)
from .mot import MotInstance, build_mot_lp, solve_mot
from .payoffs import PayoffSpec, load_payoff_table

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_SOLVER = 2
EXIT_INTERNAL = 3
EXIT_VALIDATION = 4

SANDWICH_TOL = 1e-6
DEGENERATE_GAP = 1e-9


class InternalConsistencyError(Exception):
    """A solver result violates a structural guarantee (signals a bug)."""


@dataclass
class RunConfig:
    command: str
    marginals: Optional[str] = None
    chain: Optional[str] = None
    market: Optional[str] = None
    payoff: Optional[str] = None
    method: str = "mot"
    direction: str = "both"
    bounds_source: str = "default"
    bounds_path: Optional[str] = None
    batch: Optional[str] = None
    output: Optional[str] = None
    histogram: Optional[str] = None
    bins: int = 10
    asset_id: str = "S"
    export_lp: Optional[str] = None
    solver_tol: Optional[float] = None
    gap_tol: float = 1e-3
    node_budget: int = 10000
    time_budget: float = 300.0
    workers: int = 1

    def solver_config(self) -> SolverConfig:
        tol = self.solver_tol
        if tol is None:
            env = os.environ.get("MCMOT_SOLVER_TOL")
            tol = float(env) if env else None
        return SolverConfig(feasibility_tol=tol) if tol is not None else SolverConfig()

    def bnb_config(self) -> BnBConfig:
        return BnBConfig(gap_tol=self.gap_tol, node_budget=self.node_budget,
                         time_budget=self.time_budget, workers=self.workers,
                         solver=self.solver_config())


@dataclass
class RatioRecord:
    label: str
    mot_min: float
    mot_max: float
    mc_min: float
    mc_max: float
    ratio: float
    degenerate: bool = False


def compute_ratio(mot: tuple[float, float], mc: tuple[float, float]) -> float:
    """Width of the relaxed interval over the classical interval.

    Degenerate classical gaps map to 1 by convention. The relaxed interval must
    nest inside the classical one (up to tolerance); a violation signals a
    solver bug and raises. The numerator is clipped into [0, denominator] so a
    reported ratio never exceeds 1 by float noise.
    """
    mot_min, mot_max = mot
    mc_min, mc_max = mc
    if mot_max < mot_min - 1e-9:
        raise InternalConsistencyError(f"classical interval inverted: [{mot_min}, {mot_max}]")
    if mc_min < mot_min - SANDWICH_TOL or mc_max > mot_max + SANDWICH_TOL:
        raise InternalConsistencyError(
            f"relaxed interval [{mc_min}, {mc_max}] escapes classical "
            f"[{mot_min}, {mot_max}]")
    denom = mot_max - mot_min
    if denom <= DEGENERATE_GAP:
        return 1.0
    num = min(max(mc_max - mc_min, 0.0), denom)
    return num / denom


def emit_histogram(records: Sequence[RatioRecord], bins: int) -> tuple[str, str]:
    """Bin the ratios; returns (csv text of edges/counts, minimal SVG bars)."""
    if not records:
        raise ValueError("histogram needs at least one record")
    ratios = np.array([r.ratio for r in records])
    counts, edges = np.histogram(ratios, bins=bins)

    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["bin_left", "bin_right", "count"])
    for i, c in enumerate(counts):
        writer.writerow([f"{edges[i]:.10g}", f"{edges[i + 1]:.10g}", int(c)])
    csv_text = buf.getvalue()

    width, height, pad = 640, 360, 40
    peak = max(int(counts.max()), 1)
    bar_w = (width - 2 * pad) / bins
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    for i, c in enumerate(counts):
        h = (height - 2 * pad) * c / peak
        x = pad + i * bar_w
        y = height - pad - h
        parts.append(f'<rect x="{x:.2f}" y="{y:.2f}" width="{bar_w * 0.9:.2f}" '
                     f'height="{h:.2f}" fill="steelblue"/>')
    parts.append(f'<text x="{pad}" y="{height - pad + 16}" font-size="11">'
                 f'{edges[0]:.4g}</text>')
    parts.append(f'<text x="{width - pad - 30}" y="{height - pad + 16}" font-size="11">'
                 f'{edges[-1]:.4g}</text>')
    parts.append(f'<text x="{pad}" y="{pad - 10}" font-size="11">count (peak {peak})</text>')
    parts.append("</svg>")
    return csv_text, "\n".join(parts)


# ---------------- plumbing ----------------

def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _provenance(config: RunConfig, inputs: Sequence[str]) -> dict:
    return {
        "tool": "mcmot",
        "version": __version__,
        "command": config.command,
        "config": {k: v for k, v in vars(config).items() if v is not None},
        "inputs": {p: _sha256(p) for p in inputs if p},
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }


def _write_json(doc: dict, path: Optional[str]) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True)
    if path:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def _parse_payoff(spec: str) -> PayoffSpec:
    if spec == "max_squared_increment":
        return PayoffSpec.max_squared_increment()
    if spec.startswith("basket_asian_call:"):
        return PayoffSpec.basket_asian_call(float(spec.split(":", 1)[1]))
    if spec.startswith("table:"):
        return load_payoff_table(spec.split(":", 1)[1])
    raise ValueError(
        f"unknown payoff spec {spec!r}; use max_squared_increment, "
        "basket_asian_call:<strike>, or table:<path>")


def _resolve_bounds(config: RunConfig, system):
    if config.bounds_source == "file":
        if not config.bounds_path:
            raise ValueError("--bounds-source file needs --bounds <path>")
        return load_bounds(config.bounds_path)
    return default_bounds(system)


# ---------------- commands ----------------

def _cmd_validate(config: RunConfig) -> int:
    system = load_system(config.marginals)
    report = validate_system(system)
    doc = report.to_dict()
    doc["provenance"] = _provenance(config, [config.marginals])
    _write_json(doc, config.output)
    return EXIT_OK if report.passed else EXIT_VALIDATION


def _cmd_calibrate(config: RunConfig) -> int:
    slices = load_chain_csv(config.chain, config.market)
    result = calibrate(slices, asset_id=config.asset_id, config=config.solver_config())
    doc = result.to_dict()
    doc["diagnosis"] = feasibility_diagnosis(result, slices)
    doc["provenance"] = _provenance(config, [config.chain, config.market])
    _write_json(doc, config.output)
    return EXIT_OK


def _solve_one(config: RunConfig, system, payoff, direction: str) -> dict:
    solver = config.solver_config()
    if config.method == "mot":
        instance = MotInstance(system, payoff, direction)
        if config.export_lp:
            write_lp_text(build_mot_lp(instance), _suffixed(config.export_lp, direction))
        return solve_mot(instance, solver).to_dict()
    bounds = _resolve_bounds(config, system)
    instance = McCormickInstance(system, payoff, bounds, direction)
    if config.method == "mccormick":
        if config.export_lp:
            write_lp_text(build_mccormick_lp(instance), _suffixed(config.export_lp, direction))
        return solve_mccormick(instance, solver).to_dict()
    if config.method == "bicausal":
        return solve_bicausal(instance, config.bnb_config()).to_dict()
    raise ValueError(f"unknown method {config.method!r}")


def _suffixed(path: str, direction: str) -> str:
    stem, dot, ext = path.rpartition(".")
    return f"{stem}.{direction}.{ext}" if dot else f"{path}.{direction}"


def _cmd_bound(config: RunConfig) -> int:
    system = load_system(config.marginals)
    payoff = _parse_payoff(config.payoff)
    directions = ["min", "max"] if config.direction == "both" else [config.direction]
    results = {d: _solve_one(config, system, payoff, d) for d in directions}
    doc = {
        "method": config.method,
        "results": results,
        "provenance": _provenance(config, [config.marginals, config.bounds_path]),
    }
    _write_json(doc, config.output)
    return EXIT_OK


def _bounds_pair(config: RunConfig, system, payoff, method: str) -> tuple[float, float]:
    solver = config.solver_config()
    if method == "mot":
        lo = solve_mot(MotInstance(system, payoff, "min"), solver).value
        hi = solve_mot(MotInstance(system, payoff, "max"), solver).value
    else:
        bounds = default_bounds(system)
        lo = solve_mccormick(McCormickInstance(system, payoff, bounds, "min"), solver).value
        hi = solve_mccormick(McCormickInstance(system, payoff, bounds, "max"), solver).value
    return lo, hi


def ratio_records(config: RunConfig, instances: Sequence[dict]) -> list[RatioRecord]:
    records = []
    for entry in instances:
        system = load_system(entry["marginals"])
        payoff = _parse_payoff(entry["payoff"])
        mot_pair = _bounds_pair(config, system, payoff, "mot")
        mc_pair = _bounds_pair(config, system, payoff, "mccormick")
        records.append(RatioRecord(
            label=str(entry.get("label", entry["marginals"])),
            mot_min=mot_pair[0], mot_max=mot_pair[1],
            mc_min=mc_pair[0], mc_max=mc_pair[1],
            ratio=compute_ratio(mot_pair, mc_pair),
            degenerate=(mot_pair[1] - mot_pair[0]) <= DEGENERATE_GAP,
        ))
    return records


def _cmd_ratio(config: RunConfig) -> int:
    with open(config.batch) as fh:
        manifest = json.load(fh)
    instances = manifest["instances"]
    records = ratio_records(config, instances)
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["label", "mot_min", "mot_max", "mc_min", "mc_max", "ratio",
                     "degenerate"])
    for r in records:
        writer.writerow([r.label, f"{r.mot_min:.10g}", f"{r.mot_max:.10g}",
                         f"{r.mc_min:.10g}", f"{r.mc_max:.10g}", f"{r.ratio:.10g}",
                         int(r.degenerate)])
    if config.output:
        with open(config.output, "w", newline="") as fh:
            fh.write(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    if config.histogram:
        csv_text, svg_text = emit_histogram(records, config.bins)
        with open(config.histogram, "w") as fh:
            fh.write(svg_text + "\n")
        stem = config.histogram.rsplit(".", 1)[0]
        with open(stem + "_bins.csv", "w", newline="") as fh:
            fh.write(csv_text)
    return EXIT_OK


def _cmd_report(config: RunConfig) -> int:
    system = load_system(config.marginals)
    payoff = _parse_payoff(config.payoff)
    report = validate_system(system)
    lines = [f"mcmot report (v{__version__})", ""]
    lines.append(f"marginals: {config.marginals}")
    lines.append(f"payoff:    {payoff.describe()}")
    lines.append(f"validation: {'pass' if report.passed else 'FAIL'}")
    for e in report.entries:
        lines.append(f"  {e.asset} {e.earlier_maturity}->{e.later_maturity}: "
                     f"mean gap {e.mean_gap:.2e}, "
                     f"{'in convex order' if e.ordered else f'convex order broken by {e.worst_violation:.3e}'}")
    if not report.passed:
        _emit_text("\n".join(lines), config.output)
        return EXIT_VALIDATION
    mot_pair = _bounds_pair(config, system, payoff, "mot")
    mc_pair = _bounds_pair(config, system, payoff, "mccormick")
    lines.append(f"classical bounds:  [{mot_pair[0]:.4f}, {mot_pair[1]:.4f}]")
    lines.append(f"relaxation bounds: [{mc_pair[0]:.4f}, {mc_pair[1]:.4f}]")
    lines.append(f"gap ratio:         {compute_ratio(mot_pair, mc_pair):.5f}")
    bnb = config.bnb_config()
    inst = McCormickInstance(system, payoff, default_bounds(system), "min")
    lo_rep = solve_bicausal(inst, bnb)
    hi_rep = solve_bicausal(McCormickInstance(system, payoff, default_bounds(system), "max"), bnb)
    lines.append(f"bicausal certified min: [{lo_rep.lower_bound:.4f}, {lo_rep.upper_bound:.4f}] "
                 f"({lo_rep.nodes_explored} nodes, {lo_rep.terminated})")
    lines.append(f"bicausal certified max: [{hi_rep.lower_bound:.4f}, {hi_rep.upper_bound:.4f}] "
                 f"({hi_rep.nodes_explored} nodes, {hi_rep.terminated})")
    _emit_text("\n".join(lines), config.output)
    return EXIT_OK


def _emit_text(text: str, path: Optional[str]) -> None:
    if path:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


# ---------------- argument parsing ----------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcmot",
                                     description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--output", help="write the result here instead of stdout")
        p.add_argument("--solver-tol", type=float, dest="solver_tol",
                       help="feasibility tolerance (env MCMOT_SOLVER_TOL)")

    p = sub.add_parser("validate", help="check marginal feasibility conditions")
    p.add_argument("--marginals", required=True)
    common(p)

    p = sub.add_parser("calibrate", help="fit marginals to an option chain")
    p.add_argument("--chain", required=True, help="CSV: maturity_index,strike,bid,ask")
    p.add_argument("--market", required=True, help="JSON sidecar with forward/discount")
    p.add_argument("--asset-id", dest="asset_id", default="S")
    common(p)

    p = sub.add_parser("bound", help="compute price bounds")
    p.add_argument("--marginals", required=True)
    p.add_argument("--payoff", required=True,
                   help="max_squared_increment | basket_asian_call:<K> | table:<path>")
    p.add_argument("--method", choices=("mot", "mccormick", "bicausal"), default="mot")
    p.add_argument("--direction", choices=("min", "max", "both"), default="both")
    p.add_argument("--bounds-source", dest="bounds_source",
                   choices=("default", "file"), default="default")
    p.add_argument("--bounds", dest="bounds_path")
    p.add_argument("--export-lp", dest="export_lp",
                   help="also write the LP in text exchange format")
    p.add_argument("--gap-tol", dest="gap_tol", type=float, default=1e-3)
    p.add_argument("--node-budget", dest="node_budget", type=int, default=10000)
    p.add_argument("--time-budget", dest="time_budget", type=float, default=300.0)
    p.add_argument("--workers", type=int, default=1)
    common(p)

    p = sub.add_parser("ratio", help="batch gap-reduction ratios")
    p.add_argument("--batch", required=True,
                   help='JSON manifest {"instances": [{label, marginals, payoff}]}')
    p.add_argument("--histogram", help="write an SVG histogram here")
    p.add_argument("--bins", type=int, default=10)
    common(p)

    p = sub.add_parser("report", help="combined human-readable summary")
    p.add_argument("--marginals", required=True)
    p.add_argument("--payoff", required=True)
    p.add_argument("--gap-tol", dest="gap_tol", type=float, default=1e-3)
    p.add_argument("--node-budget", dest="node_budget", type=int, default=10000)
    p.add_argument("--time-budget", dest="time_budget", type=float, default=300.0)
    p.add_argument("--workers", type=int, default=1)
    common(p)
    return parser


_COMMANDS = {
    "validate": _cmd_validate,
    "calibrate": _cmd_calibrate,
    "bound": _cmd_bound,
    "ratio": _cmd_ratio,
    "report": _cmd_report,
}


def run(config: RunConfig) -> int:
    """Dispatch one command; returns the exit status."""
    try:
        return _COMMANDS[config.command](config)
    except (FileNotFoundError, ValueError, KeyError, CalibrationError) as exc:
        print(f"mcmot: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except lp_backend.LPError as exc:
        print(f"mcmot: solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except InternalConsistencyError as exc:
        print(f"mcmot: internal consistency error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    fields = {f: getattr(args, f) for f in vars(args) if f in RunConfig.__dataclass_fields__}
    return run(RunConfig(**fields))


if __name__ == "__main__":
    sys.exit(main())
