"""Command-line driver: ``generate`` streams, ``run`` experiment matrices, ``report`` rankings.

Exit codes: 0 success, 1 configuration or input error, 2 failure while running.
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

import yaml

from .attacks import AttackPlan, LabeledStream, apply_attack, sparsify_labels, write_audit
from .evaluation import (
    RLR_COLUMNS,
    RUN_COLUMNS,
    ExperimentConfig,
    RlrCell,
    atomic_write,
    csv_text,
    rank_table,
    read_csv,
    rlr_cells,
    run_matrix,
    write_results,
)
from .streams import BENCHMARKS, generate, make_benchmark

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class ConfigError(ValueError):
    pass


def load_config(path: str | Path) -> dict:
    """JSON or YAML mapping; the format follows the file suffix."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text) if path.suffix in (".yaml", ".yml") else json.loads(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: not parseable: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def resolve_config(data: dict, seed: int | None = None, scale: float | None = None) -> ExperimentConfig:
    data = dict(data)
    if seed is not None:
        data["master_seed"] = seed
    if scale is not None:
        data["length_scale"] = scale
    try:
        return ExperimentConfig.from_dict(data)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def format_rank_table(table: dict[str, dict[str, float]]) -> str:
    kinds = sorted(table)
    dets = sorted({d for k in kinds for d in table[k]})
    width = max([len(d) for d in dets] + [8])
    lines = ["avg. rank".ljust(width) + "".join(f"{k:>16}" for k in kinds)]
    for d in dets:
        lines.append(d.ljust(width) + "".join(
            f"{table[k][d]:>16.2f}" if d in table[k] else f"{'-':>16}" for k in kinds))
    return "\n".join(lines)


# --- commands ----------------------------------------------------------------

def cmd_generate(args) -> int:
    try:
        spec = make_benchmark(args.stream, args.scale, seed=args.seed, drift_kind=args.drift)
        plan = None
        if args.flip:
            plan = AttackPlan("instance_based", args.flip, seed=args.seed)
        elif args.inject:
            plan = AttackPlan("concept_based", args.inject, args.concept_size, seed=args.seed)
        if not 0 < args.budget <= 1:
            raise ValueError("--budget must lie in (0, 1]")
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    X, y = generate(spec)
    stream = LabeledStream.from_arrays(X, y, spec.n_classes)
    if plan is not None:
        stream = apply_attack(stream, plan, spec)
    if args.budget < 1:
        stream = sparsify_labels(stream, args.budget, args.seed)
    out = Path(args.out)
    try:
        header = [f"x{i}" for i in range(spec.n_features)] + ["class", "labeled"]
        rows = [[repr(v) for v in x] + [str(c), str(int(lab))]
                for x, c, lab in zip(stream.X.tolist(), stream.y.tolist(), stream.labeled.tolist())]
        atomic_write(out, csv_text(header, [dict(zip(header, r)) for r in rows]))
        audit = out.with_name(out.stem + ".audit.csv")
        n_mod = write_audit(stream, audit)
    except OSError as exc:
        print(f"error: cannot write {out}: {exc.strerror}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"wrote {len(stream)} instances to {out} ({n_mod} modified, audit in {audit.name})")
    return EXIT_OK


def cmd_run(args) -> int:
    try:
        cfg = resolve_config(load_config(args.config), args.seed, args.scale)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    resolved = json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"
    print(resolved, end="")
    done = []

    def progress(i, n, res):
        done.append(res)
        if not args.quiet:
            k = res.key
            print(f"[{i}/{n}] {k.stream} {k.detector} {k.attack_kind} {k.attack_level:g} "
                  f"budget={k.budget:g} repeat={k.repeat} M={res.report.M:.4f}", file=sys.stderr)

    try:
        atomic_write(out / "resolved_config.json", resolved)
        results = run_matrix(cfg, jobs=args.jobs, progress=progress)
        cells = rlr_cells(results, cfg)
        write_results(results, cells, out)
    except Exception as exc:  # noqa: BLE001 - any failure must leave a manifest behind
        try:
            write_results(done, [], out)
            atomic_write(out / "failure.json", json.dumps({
                "error": repr(exc), "completed_runs": len(done), "traceback": traceback.format_exc(),
            }, indent=2) + "\n")
        except OSError:
            pass
        print(f"run failed after {len(done)} runs: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(format_rank_table(rank_table(cells)))
    return EXIT_OK


def _cells_from_rows(rows: list[dict]) -> list[RlrCell]:
    return [RlrCell(r["stream"], r["detector"], r["attack_kind"], float(r["budget"]), int(r["repeat"]),
                    float(r["M0"]), [float(v) for v in r["levels"].split(";") if v],
                    [float(v) for v in r["rlr_levels"].split(";") if v], float(r["rlr"])) for r in rows]


def accuracy_series(runs: list[dict]) -> dict[tuple, list[tuple[float, float]]]:
    """(stream, detector, attack kind, budget) -> sorted (level, mean M over repeats); clean runs sit at level 0."""
    acc: dict[tuple, dict[float, list[float]]] = {}
    kinds = sorted({r["attack_kind"] for r in runs if r["attack_kind"] != "none"}) or ["none"]
    for r in runs:
        targets = kinds if r["attack_kind"] == "none" else [r["attack_kind"]]
        for kind in targets:
            key = (r["stream"], r["detector"], kind, float(r["budget"]))
            acc.setdefault(key, {}).setdefault(float(r["attack_level"]), []).append(float(r["M"]))
    return {k: sorted((lv, sum(v) / len(v)) for lv, v in pts.items()) for k, pts in sorted(acc.items())}


def cmd_report(args) -> int:
    try:
        runs = read_csv(args.runs)
        cells = read_csv(args.rlr) if args.rlr else []
    except OSError as exc:
        print(f"error: cannot read input: {exc.strerror}", file=sys.stderr)
        return EXIT_CONFIG
    for name, rows, cols in (("runs", runs, RUN_COLUMNS), ("rlr", cells, RLR_COLUMNS)):
        if rows and tuple(rows[0]) != cols:
            print(f"error: {name} CSV columns {list(rows[0])} do not match {list(cols)}", file=sys.stderr)
            return EXIT_CONFIG
    out = Path(args.out)
    series = accuracy_series(runs)
    series_rows = [{"stream": s, "detector": d, "attack_kind": k, "budget": b, "level": lv, "M": m}
                   for (s, d, k, b), pts in series.items() for lv, m in pts]
    atomic_write(out / "accuracy_series.csv",
                 csv_text(("stream", "detector", "attack_kind", "budget", "level", "M"), series_rows))
    table = rank_table(_cells_from_rows(cells)) if cells else {}
    rank_rows = [{"attack_kind": k, "detector": d, "mean_rank": r} for k, dets in table.items() for d, r in dets.items()]
    atomic_write(out / "ranks.csv", csv_text(("attack_kind", "detector", "mean_rank"), rank_rows))
    print(f"{len(series)} accuracy series written to {out / 'accuracy_series.csv'}")
    if table:
        print(format_rank_table(table))
    return EXIT_OK


# --- entry point ---------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rrbmdd", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic (optionally attacked) stream as CSV")
    g.add_argument("stream", choices=sorted(BENCHMARKS))
    g.add_argument("--out", required=True, help="CSV path; the audit sidecar lands next to it")
    g.add_argument("--scale", type=float, default=0.01, help="fraction of the benchmark's full length")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--drift", choices=["sudden", "gradual", "incremental", "none"], default=None)
    g.add_argument("--flip", type=float, default=0.0, help="label-flip ratio")
    g.add_argument("--inject", type=int, default=0, help="number of injected adversarial concepts")
    g.add_argument("--concept-size", type=int, default=250)
    g.add_argument("--budget", type=float, default=1.0, help="fraction of labels left visible")
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="execute an experiment matrix from a JSON or YAML config")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--jobs", type=int, default=1)
    r.add_argument("--seed", type=int, default=None, help="override master_seed")
    r.add_argument("--scale", type=float, default=None, help="override length_scale")
    r.add_argument("--quiet", action="store_true", help="no per-run progress lines")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("report", help="accuracy-vs-level series and the mean-rank table")
    s.add_argument("--runs", required=True, help="runs.csv from a previous run")
    s.add_argument("--rlr", default=None, help="rlr.csv from a previous run")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
