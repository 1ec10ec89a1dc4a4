"""Command-line experiment runner.

Subcommands ``adapt-demo``, ``filter``, ``compare-families`` and
``selftest``.  Tables are written as CSV (or JSON with ``--format json``);
each table gets a ``<name>.config.json`` sidecar holding the resolved
configuration.  Exit codes: 0 ok, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import experiments as ex
from .diagnostics import fraction_for_mass, null_weight_fraction
from .errors import AmoeError

log = logging.getLogger("amoe_smc.cli")

DEFAULT_MODEL = {"adapt-demo": "lg", "filter": "bessel", "compare-families": "tobit"}


def _plain(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


class UsageError(Exception):
    pass


class Writer:
    """Writes tables and sidecars into one output directory."""

    def __init__(self, out: Path, fmt: str, config: dict):
        self.out = out
        self.fmt = fmt
        self.config = config
        out.mkdir(parents=True, exist_ok=True)

    def table(self, name: str, header: list[str], rows) -> Path:
        rows = [list(r) for r in rows]
        if self.fmt == "json":
            path = self.out / f"{name}.json"
            path.write_text(json.dumps([dict(zip(header, r)) for r in rows], indent=1, default=_plain))
        else:
            path = self.out / f"{name}.csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(header)
                w.writerows(rows)
        self.sidecar(name)
        return path

    def sidecar(self, name: str) -> None:
        (self.out / f"{name}.config.json").write_text(json.dumps(self.config, indent=1, sort_keys=True, default=_plain))

    def json(self, name: str, payload) -> Path:
        path = self.out / f"{name}.json"
        path.write_text(json.dumps(payload, indent=1, default=_plain))
        return path


def _kld_rows(trace):
    return [
        (i, k, s, c)
        for i, (k, s, c) in enumerate(zip(trace.kld, trace.kld_stderr, trace.kld_up_to_constant))
    ]


KLD_HEADER = ["iteration", "kld", "stderr", "kld_up_to_constant"]


def _proportion_tables(writer: Writer, label_weights: dict) -> dict:
    summary = {}
    for label, w in label_weights.items():
        frac, mass = ex.proportions(w)
        writer.table(f"proportions_{label}", ["particle_fraction", "mass_fraction"], zip(frac, mass))
        lo, hi, counts = ex.weight_histogram(w)
        writer.table(f"weights_hist_{label}", ["bin_left", "bin_right", "count"], zip(lo, hi, counts))
        summary[label] = {
            "fraction_for_80pct_mass": fraction_for_mass(w, 0.8),
            "fraction_for_90pct_mass": fraction_for_mass(w, 0.9),
            "null_weight_fraction": null_weight_fraction(w),
        }
    return summary


def cmd_adapt_demo(cfg: ex.ExperimentConfig, writer: Writer, threads: int) -> int:
    res = ex.run_single_step(cfg)
    writer.table("kld_trace", KLD_HEADER, _kld_rows(res.trace))
    writer.json("params_trace", res.trace.to_dict())
    writer.sidecar("params_trace")
    summary = _proportion_tables(writer, res.eval_weights)
    summary["pilot_null_weight_fraction"] = null_weight_fraction(res.pilot_weights)
    writer.json("summary", summary)
    print(f"kld: iteration 0 {res.trace.kld[0]:.4f}, final {res.trace.kld[-1]:.4f}")
    return 0


def cmd_filter(cfg: ex.ExperimentConfig, writer: Writer, threads: int) -> int:
    comp = ex.run_filter_comparison(cfg, threads)
    for r, (b, a) in enumerate(zip(comp.bootstrap, comp.adaptive)):
        for name, tr in (("bootstrap", b), ("adaptive", a)):
            recs = tr.to_records()
            writer.table(f"{name}_trace_rep{r}", list(recs[0]), [list(x.values()) for x in recs])
            if tr.error:
                log.warning("%s replicate %d stopped early: %s", name, r, tr.error)
    rows = comp.summary()
    writer.table("summary", list(rows[0]), [list(x.values()) for x in rows])
    writer.json("observations", comp.observations)
    for name in ("bootstrap", "adaptive"):
        sel = [x for x in rows if x["filter"] == name]
        print(
            f"{name}: mean relative ESS {np.mean([x['mean_relative_ess'] for x in sel]):.3f}, "
            f"mean negated entropy {np.mean([x['mean_entropy'] for x in sel]):.3f}"
        )
    return 0


def cmd_compare_families(cfg: ex.ExperimentConfig, writer: Writer, threads: int) -> int:
    results, refs = ex.run_family_comparison(cfg, threads)
    for fam, res in results.items():
        writer.table(f"kld_trace_{fam}", KLD_HEADER, _kld_rows(res.trace))
        writer.json(f"params_trace_{fam}", res.trace.to_dict())
    writer.table(
        "reference_levels",
        ["level", "kld", "stderr", "kld_up_to_constant"],
        [(k, v.absolute, v.absolute_stderr, v.value_up_to_constant) for k, v in refs.items()],
    )
    for fam, res in results.items():
        tail = np.mean(res.trace.kld[-min(100, len(res.trace.kld)):])
        print(f"{fam}: kld iteration 0 {res.trace.kld[0]:.4f}, tail average {tail:.4f}")
    for k, v in refs.items():
        print(f"reference {k}: {v.absolute:.4f} +/- {v.absolute_stderr:.4f}")
    return 0


def cmd_selftest(args) -> int:
    root = Path(__file__).resolve().parents[2]
    target = root / "tests" / "test_acceptance.py"
    if not target.exists():
        print(f"acceptance suite not found at {target}", file=sys.stderr)
        return 1
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-s", str(target)], cwd=root)
    return 0 if proc.returncode == 0 else 1


COMMANDS = {
    "adapt-demo": cmd_adapt_demo,
    "filter": cmd_filter,
    "compare-families": cmd_compare_families,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="amoe-smc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in (*COMMANDS, "selftest"):
        s = sub.add_parser(name)
        if name == "selftest":
            continue
        s.add_argument("--config", type=Path, help="JSON file overriding preset fields")
        s.add_argument("--model", help="model id (lg, bessel, tobit)")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", type=Path, default=Path("out"))
        s.add_argument("--format", choices=("csv", "json"), default="csv")
        s.add_argument("--threads", type=int)
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "filter":
            s.add_argument("--observations", type=Path, help="CSV of observations, one row per step")
        if name == "adapt-demo":
            s.add_argument("--family", choices=("gaussian", "student_t"))
            s.add_argument("--iterations", type=int)
    return p


def _threads(args) -> int:
    if args.threads is not None:
        n = args.threads
    else:
        env = os.environ.get("AMOE_SMC_THREADS")
        try:
            n = int(env) if env else 1
        except ValueError:
            raise UsageError(f"AMOE_SMC_THREADS must be an integer, got {env!r}")
    if n < 1:
        raise UsageError("--threads must be positive")
    return n


def _read_observations(path: Path) -> list:
    data = np.loadtxt(path, delimiter=",", ndmin=2)
    return [row.tolist() if row.size > 1 else float(row[0]) for row in data]


def resolve_config(args) -> ex.ExperimentConfig:
    data = {}
    if args.config is not None:
        try:
            data = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config: {exc}")
        if not isinstance(data, dict):
            raise UsageError("config file must hold a JSON object")
    model = args.model or data.get("model") or DEFAULT_MODEL[args.command]
    data["model"] = model
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise UsageError("--seed must be an unsigned 64-bit integer")
        data["seed"] = args.seed
    for key in ("family", "iterations"):
        if getattr(args, key, None) is not None:
            data[key] = getattr(args, key)
    if getattr(args, "observations", None) is not None:
        try:
            data["observations"] = _read_observations(args.observations)
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read observations: {exc}")
    try:
        cfg = ex.ExperimentConfig.from_dict(data)
        cfg.validate()
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc))
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command == "selftest":
        return cmd_selftest(args)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        threads = _threads(args)
        cfg = resolve_config(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"amoe-smc: error: {exc}", file=sys.stderr)
        return 2
    resolved = {**cfg.to_dict(), "command": args.command, "format": args.format, "out": str(args.out)}
    start = time.perf_counter()
    try:
        writer = Writer(args.out, args.format, resolved)
        code = COMMANDS[args.command](cfg, writer, threads)
    except (AmoeError, ValueError, np.linalg.LinAlgError, OSError) as exc:
        print(f"amoe-smc: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(f"done in {time.perf_counter() - start:.1f} s; output in {args.out}")
    return code


if __name__ == "__main__":
    sys.exit(main())
