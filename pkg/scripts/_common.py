"""Shared plumbing for the experiment scripts."""

import argparse
import csv
import sys
import time
from pathlib import Path

from fedmpq.config import ExperimentSpec
from fedmpq.harness import run_spec


def base_parser(description: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--seeds", type=int, default=5, help="number of seeds (0..n-1)")
    p.add_argument("--rounds", type=int, default=400, help="round cap per run")
    p.add_argument("--out", type=Path, default=Path("results"))
    return p


def base_spec(args, **changes) -> ExperimentSpec:
    return ExperimentSpec(seeds=tuple(range(args.seeds)), rounds=args.rounds, stop_at_target=True, **changes)


def run_rows(label_specs, columns):
    """Run each (label dict, spec) pair and yield one row per pair."""
    for labels, spec in label_specs:
        t0 = time.perf_counter()
        results, agg = run_spec(spec)
        row = {**labels, **{k: agg[k] for k in columns}}
        row["seconds"] = round(time.perf_counter() - t0, 1)
        print(", ".join(f"{k}={v}" for k, v in row.items()), file=sys.stderr, flush=True)
        yield row


def write_csv(path: Path, rows):
    rows = list(rows)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("inf" if v is None else v) for k, v in r.items()})
    print(f"wrote {path}")
