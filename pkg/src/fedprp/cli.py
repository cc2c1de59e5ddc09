"""Command line front end: ``fedprp run | compare | newclients``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

from .errors import ComparisonError, FedPRPError, LoadError
from .experiment import (
    load_plan,
    read_records,
    run_newcomers,
    run_plan,
)
from .federation import RECORD_FIELDS, load_checkpoint

log = logging.getLogger("fedprp")

METRICS = RECORD_FIELDS[1:]


def _overrides(args) -> dict:
    return {
        "seed": args.seed,
        "out": args.out,
        "algorithm": args.algo,
        "gamma": args.gamma,
        "alpha": args.alpha,
        "shards": args.shards,
        "beta": args.beta,
        "lambda": args.lam,
        "rounds": args.rounds,
    }


def _verify_run_dir(out: Path, expected_rounds: int) -> None:
    # exit 0 only when every artifact parses back
    records = read_records(out / "metrics.jsonl")
    if len(records) != expected_rounds:
        raise LoadError(f"{out}/metrics.jsonl has {len(records)} records, expected {expected_rounds}")
    json.loads((out / "summary.json").read_text())
    load_checkpoint(out / "checkpoint.bin")


def cmd_run(args) -> int:
    plan = load_plan(args.config, _overrides(args))
    if not plan.out:
        raise FedPRPError("no output directory: pass --out or set 'out' in the config")
    out = Path(plan.out)
    run_plan(plan, out, resume=args.resume)
    _verify_run_dir(out, plan.federation.rounds)
    sys.stdout.write((out / "summary.txt").read_text())
    log.info("wrote %s", out)
    return 0


def _load_run(path: Path) -> dict:
    try:
        summary = json.loads((path / "summary.json").read_text())
    except FileNotFoundError:
        raise LoadError(f"{path}: no summary.json (is this a finished run directory?)") from None
    return {"name": path.name or str(path), "path": path, "summary": summary}


def compare_table(runs: list[dict]) -> tuple[str, str]:
    """CSV (one row per run and metric) and aligned text for runs on one partition."""
    prints = {r["summary"].get("fingerprint") for r in runs}
    if len(prints) != 1 or None in prints:
        names = ", ".join(f"{r['name']}={str(r['summary'].get('fingerprint'))[:12]}" for r in runs)
        raise ComparisonError(f"runs were trained on different partitions: {names}")
    base = runs[0]["summary"]

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "algorithm", "seed", "metric", "value", "delta"])
    for r in runs:
        s = r["summary"]
        for m in METRICS:
            v, b = s.get(m), base.get(m)
            delta = "" if v is None or b is None else repr(v - b)
            w.writerow([r["name"], s.get("algorithm"), s.get("seed"), m,
                        "" if v is None else repr(v), delta])

    width = max(len(r["name"]) for r in runs) + 2
    lines = ["run".ljust(width) + "algorithm  " + " ".join(f"{m:>9}" for m in METRICS)]
    for r in runs:
        s = r["summary"]
        cells = " ".join(f"{'-':>9}" if s.get(m) is None else f"{s[m]:9.4f}" for m in METRICS)
        lines.append(r["name"].ljust(width) + f"{str(s.get('algorithm')):<11}" + cells)
    return buf.getvalue(), "\n".join(lines) + "\n"


def cmd_compare(args) -> int:
    if len(args.runs) < 2:
        raise ComparisonError("compare needs at least two run directories")
    runs = [_load_run(Path(p)) for p in args.runs]
    csv_text, pretty = compare_table(runs)
    if args.csv:
        Path(args.csv).write_text(csv_text)
    sys.stdout.write(pretty)
    return 0


def cmd_newclients(args) -> int:
    state, _ = load_checkpoint(args.checkpoint)
    plan = load_plan(args.config, _overrides(args))
    n_new = plan.new_clients if args.n is None else args.n
    if n_new == 0:
        print(f"checkpoint {args.checkpoint} (round {state.round}) is valid; no new clients")
        return 0
    out = Path(plan.out) if plan.out else None
    arms = {"newclients": run_newcomers(plan, state, n_new)}
    if args.control:
        arms["control"] = run_newcomers(plan, state, n_new, random_mu=True)
    for name, records in arms.items():
        traj = " ".join(f"{r.acc_loc:.4f}" for r in records)
        print(f"{name}: A^loc by round {traj}")
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            (out / f"{name}.jsonl").write_text("".join(r.to_json() + "\n" for r in records))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedprp", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat 'key = value' plan file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--algo", choices=("fedprp", "fedavg", "proto"))
        p.add_argument("--gamma", type=float, help="imbalance ratio")
        p.add_argument("--alpha", type=float, help="Dirichlet concentration")
        p.add_argument("--shards", type=int, help="shards per client")
        p.add_argument("--beta", type=float, help="prototype moving-average decay")
        p.add_argument("--lambda", dest="lam", type=float, help="ID vs IC weight")
        p.add_argument("--rounds", type=int)

    p = sub.add_parser("run", help="run one experiment")
    common(p)
    p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.bin")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="tabulate finished runs")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--csv", help="also write the comparison as CSV here")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("newclients", help="add new clients to a trained checkpoint")
    p.add_argument("checkpoint")
    common(p)
    p.add_argument("-n", type=int, help="number of new clients (default: plan's new_clients)")
    p.add_argument("--control", action="store_true", help="also run random-extractor controls")
    p.set_defaults(func=cmd_newclients)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.ERROR,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (FedPRPError, OSError) as exc:
        print(f"fedprp {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
