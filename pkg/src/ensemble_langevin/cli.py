"""Command-line experiment harness.

Subcommands:

* ``run``       execute an ensemble of runs from a JSON config or a named
                preset; writes per-run CSVs, an aggregate CSV, the resolved
                config, and a manifest with a content hash.
* ``compare``   join the aggregate CSVs of several result directories on a
                common forward-call grid and on the time grid.
* ``reference`` draw posterior reference samples for a problem id and write
                them to a text table.

Exit codes: 0 on success, 1 on runtime failure, 2 on usage or config errors.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__
from .core import SeedSpec
from .enrichment import (
    BackwardSlice,
    DiffusionPropagation,
    EnrichmentPlan,
    ForwardSlice,
    GaussianTransport,
    RandomKick,
)
from .homotopy import HomotopySchedule, enrichment_times_from_switch
from .metrics import HeuristicConfig, SinkhornConfig, pp_baseline
from .problems import PROBLEM_IDS, make_problem
from .propagators import PropagatorKind
from .runner import AdaptivePlan, RunConfig, run_many

SCHEMA_VERSION = 1

AGGREGATE_COLUMNS = ("t", "step", "fc", "free_fc", "batch_size", "s",
                     "mean_ep", "std_ep", "pp_mean", "pp_std",
                     "double_sinkhorn")


class ConfigError(ValueError):
    pass


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.17g}"


# ---------------------------------------------------------------------------
# config parsing


def _require_keys(d: dict, allowed: set, required: set, where: str):
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    missing = required - set(d)
    if missing:
        raise ConfigError(f"{where}: missing keys {sorted(missing)}")


def _parse_scheme(d: dict):
    _require_keys(d, {"type", "delta_steps", "jitter"}, {"type"}, "plan.scheme")
    kind = d["type"]
    if kind == "diffusion":
        return DiffusionPropagation(delta_steps=int(d.get("delta_steps", 1)))
    if kind == "kick":
        return RandomKick()
    if kind == "forward-slice":
        return ForwardSlice(delta_steps=int(d.get("delta_steps", 1)))
    if kind == "backward-slice":
        return BackwardSlice(delta_steps=int(d.get("delta_steps", 1)))
    if kind == "gaussian":
        return GaussianTransport(jitter=d.get("jitter"))
    raise ConfigError(f"plan.scheme: unknown type {kind!r}")


def _parse_plan(d: dict):
    if d.get("type") == "adaptive":
        _require_keys(d, {"type", "b0", "batch_sizes", "scheme", "kind",
                          "heuristic"}, {"type", "b0", "batch_sizes", "scheme"},
                      "plan")
        h = d.get("heuristic", {})
        _require_keys(h, {"N1", "N2", "tol", "ref", "check_every"}, set(),
                      "plan.heuristic")
        return AdaptivePlan(b0=int(d["b0"]),
                            batch_sizes=tuple(int(b) for b in d["batch_sizes"]),
                            scheme=_parse_scheme(d["scheme"]),
                            heuristic=HeuristicConfig(**h),
                            kind=d.get("kind", "diff"))
    _require_keys(d, {"type", "b0", "events"}, {"b0"}, "plan")
    if d.get("type", "fixed") != "fixed":
        raise ConfigError(f"plan: unknown type {d.get('type')!r}")
    events = []
    for i, ev in enumerate(d.get("events", [])):
        _require_keys(ev, {"t", "b", "scheme"}, {"t", "b", "scheme"},
                      f"plan.events[{i}]")
        events.append((float(ev["t"]), int(ev["b"]), _parse_scheme(ev["scheme"])))
    return EnrichmentPlan(b0=int(d["b0"]), events=tuple(events))


def _parse_schedule(d):
    if d is None:
        return None
    _require_keys(d, {"kind", "horizon", "t_start", "t_end", "order"},
                  {"kind", "horizon"}, "schedule")
    kind = d["kind"]
    T = float(d["horizon"])
    if kind == "constant":
        return HomotopySchedule.constant(T)
    if kind == "linear":
        return HomotopySchedule.linear(T, d.get("t_start"), d.get("t_end"))
    if kind == "concave":
        return HomotopySchedule.concave(T, d.get("t_start"), d.get("t_end"))
    if kind == "convex":
        if "t_start" not in d or "t_end" not in d:
            raise ConfigError("schedule: convex needs explicit t_start/t_end")
        return HomotopySchedule.convex(T, float(d["t_start"]), float(d["t_end"]))
    raise ConfigError(f"schedule: unknown kind {kind!r}")


TOP_KEYS = {"schema_version", "problem", "propagator", "n_iter", "plan",
            "schedule", "aux_cov_scale", "record_every", "ep_every",
            "posterior_samples", "sinkhorn", "seed", "n_runs", "pp_pairs"}


def parse_config(doc: dict) -> tuple:
    """Validate a config document; returns (RunConfig, pp_pairs)."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    _require_keys(doc, TOP_KEYS,
                  {"schema_version", "problem", "propagator", "n_iter", "plan"},
                  "config")
    if doc["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {doc['schema_version']!r}")
    if doc["problem"] not in PROBLEM_IDS:
        raise ConfigError(f"unknown problem {doc['problem']!r}")
    pd = doc["propagator"]
    _require_keys(pd, {"variant", "dt", "scale_matrix"}, {"variant", "dt"},
                  "propagator")
    if pd["variant"] == "scaled":
        kind = PropagatorKind.scaled(float(pd["dt"]), np.array(pd["scale_matrix"]))
    else:
        try:
            kind = PropagatorKind(pd["variant"], float(pd["dt"]))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    sk = doc.get("sinkhorn", {})
    _require_keys(sk, {"epsilon", "max_iters", "tol"}, set(), "sinkhorn")
    try:
        cfg = RunConfig(
            problem_id=doc["problem"],
            propagator=kind,
            plan=_parse_plan(doc["plan"]),
            n_iter=int(doc["n_iter"]),
            schedule=_parse_schedule(doc.get("schedule")),
            aux_cov_scale=float(doc.get("aux_cov_scale", 8.0)),
            record_every=int(doc.get("record_every", 1)),
            ep_every=int(doc.get("ep_every", 5)),
            posterior_samples=doc.get("posterior_samples"),
            sinkhorn=SinkhornConfig(**sk),
            seed=int(doc.get("seed", 0)),
            n_runs=int(doc.get("n_runs", 1)),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg, int(doc.get("pp_pairs", 10))


# ---------------------------------------------------------------------------
# presets


def _unimodal_base(with_enrichment: bool) -> dict:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "problem": "mixture-k1",
        "propagator": {"variant": "aldi", "dt": 0.05},
        "n_iter": 200,
        "plan": {"type": "fixed", "b0": 400, "events": []},
        "ep_every": 2,
        "seed": 0,
        "n_runs": 20,
        "pp_pairs": 10,
    }
    if with_enrichment:
        doc["plan"] = {
            "type": "fixed", "b0": 100,
            "events": [{"t": float(t), "b": 100, "scheme": {"type": "diffusion"}}
                       for t in (1, 2, 3)],
        }
    return doc


def _homotopy_base(schedule: dict | None) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "problem": "mixture-k4",
        "propagator": {"variant": "aldi", "dt": 0.01},
        "n_iter": 4000,
        "plan": {"type": "fixed", "b0": 200, "events": []},
        "schedule": schedule,
        "aux_cov_scale": 8.0,
        "record_every": 10,
        "ep_every": 40,
        "seed": 0,
        "n_runs": 10,
        "pp_pairs": 10,
    }


def _concave_enrich_preset() -> dict:
    T = 60.0
    dt = 0.01
    sched = HomotopySchedule.concave(T)
    times = enrichment_times_from_switch(sched, K_parts=4, gamma=1.0, dt=dt)
    doc = _homotopy_base({"kind": "concave", "horizon": T})
    doc["n_iter"] = int(round(T / dt))
    doc["plan"] = {
        "type": "fixed", "b0": 50,
        "events": [{"t": t, "b": 50, "scheme": {"type": "diffusion"}}
                   for t in times],
    }
    doc["ep_every"] = 60
    return doc


def build_preset(name: str) -> dict:
    if name == "fig-unimodal-basic":
        return _unimodal_base(True)
    if name == "fig-unimodal-aldi":
        return _unimodal_base(False)
    if name == "fig-plateaus":
        doc = _unimodal_base(False)
        doc["plan"] = {
            "type": "fixed", "b0": 50,
            "events": [{"t": 3.0, "b": 50,
                        "scheme": {"type": "diffusion", "delta_steps": k}}
                       for k in range(1, 8)],
        }
        return doc
    if name == "fig-adaptive":
        doc = _unimodal_base(False)
        doc["plan"] = {
            "type": "adaptive", "b0": 100, "batch_sizes": [100, 100, 100],
            "scheme": {"type": "diffusion"}, "kind": "diff",
        }
        return doc
    # the three switch-design presets share one switch window so that only
    # the shape of s(t) differs between them
    if name == "fig-homotopy-linear":
        return _homotopy_base({"kind": "linear", "horizon": 40.0,
                               "t_start": 2.0, "t_end": 18.0})
    if name == "fig-homotopy-convex":
        return _homotopy_base({"kind": "convex", "horizon": 40.0,
                               "t_start": 2.0, "t_end": 18.0})
    if name == "fig-homotopy-concave":
        return _homotopy_base({"kind": "concave", "horizon": 40.0,
                               "t_start": 2.0, "t_end": 18.0})
    if name == "fig-homotopy-enrich-linear":
        doc = _homotopy_base({"kind": "linear", "horizon": 40.0})
        doc["plan"] = {
            "type": "fixed", "b0": 20,
            "events": [{"t": 12.0, "b": 40, "scheme": {"type": "forward-slice"}},
                       {"t": 15.0, "b": 60, "scheme": {"type": "forward-slice"}},
                       {"t": 18.0, "b": 80, "scheme": {"type": "forward-slice"}}],
        }
        return doc
    if name == "fig-homotopy-enrich-concave":
        return _concave_enrich_preset()
    if name == "fig-darcy":
        return {
            "schema_version": SCHEMA_VERSION,
            "problem": "darcy-d20",
            "propagator": {"variant": "aldi", "dt": 0.01},
            "n_iter": 800,
            "plan": {"type": "fixed", "b0": 30,
                     "events": [{"t": 1.0, "b": 30, "scheme": {"type": "diffusion"}},
                                {"t": 1.5, "b": 30, "scheme": {"type": "diffusion"}},
                                {"t": 1.75, "b": 30, "scheme": {"type": "diffusion"}}]},
            "record_every": 4,
            "ep_every": 25,
            "seed": 0,
            "n_runs": 10,
            "pp_pairs": 10,
        }
    raise ConfigError(f"unknown preset {name!r}")


PRESET_NAMES = ("fig-unimodal-basic", "fig-unimodal-aldi", "fig-plateaus",
                "fig-adaptive", "fig-homotopy-linear", "fig-homotopy-convex",
                "fig-homotopy-concave", "fig-homotopy-enrich-linear",
                "fig-homotopy-enrich-concave", "fig-darcy")


# ---------------------------------------------------------------------------
# commands


def _canonical(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def cmd_run(args) -> int:
    if args.preset is not None:
        doc = build_preset(args.preset)
    elif args.config is not None:
        with open(args.config) as fh:
            doc = json.load(fh)
        if "resolved_config" in doc:  # accept a manifest for re-running
            doc = doc["resolved_config"]
    else:
        raise ConfigError("give a config path or --preset NAME")
    if args.seed is not None:
        doc["seed"] = args.seed
    cfg, pp_pairs = parse_config(doc)

    out_dir = args.out or "results"
    os.makedirs(out_dir, exist_ok=True)

    problem = make_problem(cfg.problem_id)
    b_bar = cfg.plan.total_batch
    pp_values = pp_baseline(
        problem.reference_sampler, b_bar, pp_pairs, cfg.sinkhorn,
        seeds=SeedSpec(cfg.seed + 1),
        cache_path=os.path.join(out_dir, "pp-cache.txt"),
        problem_id=cfg.problem_id)

    records, report = run_many(cfg, workers=args.workers, pp_values=pp_values)

    for rec in records:
        path = os.path.join(out_dir, f"run_{rec.run_index:03d}.csv")
        fc_map = {round(t / cfg.propagator.dt): (f, fr)
                  for t, f, fr in rec.fc_series}
        batch_map = dict(rec.batch_series())
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "step", "ep", "fc", "free_fc", "batch_size"])
            for t, ep in rec.ep_series:
                s_i = round(t / cfg.propagator.dt)
                f, fr = fc_map.get(s_i, (0, 0))
                w.writerow([_fmt(t), s_i, _fmt(ep), f, fr,
                            batch_map.get(s_i, 0)])

    agg_path = os.path.join(out_dir, "aggregate.csv")
    pp_mean = float(np.mean(report.pp_values)) if report.pp_values else float("nan")
    pp_std = float(np.std(report.pp_values)) if report.pp_values else float("nan")
    with open(agg_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(AGGREGATE_COLUMNS)
        for j in range(len(report.times)):
            w.writerow([
                _fmt(report.times[j]), int(report.steps[j]),
                int(report.fc[j]), int(report.free_fc[j]),
                int(report.batch_size[j]), _fmt(report.s[j]),
                _fmt(report.mean_ep[j]), _fmt(report.std_ep[j]),
                _fmt(pp_mean), _fmt(pp_std),
                _fmt(report.double_sinkhorn[j]),
            ])

    resolved = dict(doc)
    manifest = {
        "version": __version__,
        "problem": cfg.problem_id,
        "seed": cfg.seed,
        "n_runs": cfg.n_runs,
        "n_failed": report.n_failed,
        "resolved_config": resolved,
        "content_hash": hashlib.sha256(_canonical(resolved).encode()).hexdigest(),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if report.n_failed:
        print(f"warning: {report.n_failed} runs diverged", file=sys.stderr)
        return 1
    return 0


def _load_result_dir(path: str) -> tuple:
    man_path = os.path.join(path, "manifest.json")
    agg_path = os.path.join(path, "aggregate.csv")
    if not os.path.exists(man_path) or not os.path.exists(agg_path):
        raise ConfigError(f"{path}: not a result directory")
    with open(man_path) as fh:
        manifest = json.load(fh)
    rows = []
    with open(agg_path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append({k: float(v) for k, v in row.items()})
    return manifest, rows


def cmd_compare(args) -> int:
    if len(args.dirs) < 2:
        raise ConfigError("compare needs at least two result directories")
    loaded = [(_label(d), *_load_result_dir(d)) for d in args.dirs]
    problems = {man["problem"] for _, man, _ in loaded}
    if len(problems) != 1:
        raise ConfigError(f"mismatched problems: {sorted(problems)}")

    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)

    # common forward-call grid: union of all recorded fc values
    fc_grid = sorted({row["fc"] for _, _, rows in loaded for row in rows})
    with open(os.path.join(out_dir, "compare_by_fc.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fc"] + [f"mean_ep_{lbl}" for lbl, _, _ in loaded])
        for fc in fc_grid:
            vals = []
            for _, _, rows in loaded:
                xs = [r["fc"] for r in rows]
                ys = [r["mean_ep"] for r in rows]
                if fc < xs[0]:
                    vals.append("")
                else:
                    vals.append(_fmt(float(np.interp(fc, xs, ys))))
            w.writerow([_fmt(fc)] + vals)

    t_grid = sorted({row["t"] for _, _, rows in loaded for row in rows})
    with open(os.path.join(out_dir, "compare_by_time.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["t"]
        for lbl, _, _ in loaded:
            header += [f"mean_ep_{lbl}", f"double_sinkhorn_{lbl}"]
        w.writerow(header)
        for t in t_grid:
            row_out = [_fmt(t)]
            for _, _, rows in loaded:
                match = [r for r in rows if abs(r["t"] - t) < 1e-12]
                if match:
                    row_out += [_fmt(match[0]["mean_ep"]),
                                _fmt(match[0]["double_sinkhorn"])]
                else:
                    row_out += ["", ""]
            w.writerow(row_out)
    return 0


def _label(path: str) -> str:
    return os.path.basename(os.path.normpath(path))


def cmd_reference(args) -> int:
    problem = make_problem(args.problem)
    measure = problem.reference_sampler(args.n, SeedSpec(args.seed))
    with open(args.out, "w") as fh:
        fh.write("# posterior-samples v1 problem=%s n=%d\n" % (args.problem, args.n))
        for row in measure.atoms:
            fh.write(" ".join(_fmt(v) for v in row) + "\n")
    if measure.quality_warning:
        print("warning: reference sampler quality is low", file=sys.stderr)
    return 0


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ensemble-langevin")
    sub = p.add_subparsers(dest="command", required=True)

    pr = sub.add_parser("run", help="execute an experiment config or preset")
    pr.add_argument("config", nargs="?", help="JSON config path (or a manifest)")
    pr.add_argument("--preset", choices=PRESET_NAMES)
    pr.add_argument("--seed", type=int)
    pr.add_argument("--workers", type=int, default=1)
    pr.add_argument("--out", help="output directory (default: results)")
    pr.set_defaults(func=cmd_run)

    pc = sub.add_parser("compare", help="join aggregate CSVs of result dirs")
    pc.add_argument("dirs", nargs="+")
    pc.add_argument("--out")
    pc.set_defaults(func=cmd_compare)

    pf = sub.add_parser("reference", help="draw posterior reference samples")
    pf.add_argument("problem", choices=PROBLEM_IDS)
    pf.add_argument("--n", type=int, required=True)
    pf.add_argument("--out", required=True)
    pf.add_argument("--seed", type=int, default=0)
    pf.set_defaults(func=cmd_reference)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
