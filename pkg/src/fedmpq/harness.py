"""Multi-seed experiment driver and result files.

Output layout for one run::

    <output_dir>/<run_id>/metrics.csv    one row per (seed, round)
    <output_dir>/<run_id>/summary.json   per-seed summaries + aggregate
    <output_dir>/<run_id>/config.txt     resolved spec, key = value

``run_id`` is a digest of the resolved spec, so rerunning the same spec
rewrites the same files with the same bytes.
"""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import math
import tempfile
from dataclasses import fields
from pathlib import Path

from .config import ExperimentSpec
from .learning import build_model, gen_synthetic_federation
from .simulator import RoundMetrics, aggregate_summaries, metrics_row, run_experiment

METRICS_COLUMNS = ["seed"] + [f.name for f in fields(RoundMetrics)]
SWEEP_AXES = ("M", "K", "D", "residual")


class OutputError(OSError):
    pass


def run_id(spec: ExperimentSpec) -> str:
    return hashlib.sha256(spec.to_text().encode()).hexdigest()[:12]


def check_writable(directory) -> Path:
    """Create ``directory`` if needed and prove a file can be written there."""
    path = Path(directory)
    try:
        path.mkdir(parents=True, exist_ok=True)
        with tempfile.NamedTemporaryFile(dir=path, prefix=".probe-"):
            pass
    except OSError as exc:
        raise OutputError(f"output directory {path} is not writable: {exc}") from exc
    return path


def run_spec(spec: ExperimentSpec):
    """Run every seed of ``spec``; returns ``(per-seed results, aggregate summary)``."""
    model = build_model(spec.model, spec.dim, spec.classes, spec.hidden)
    results = []
    for seed in spec.seeds:
        fed = gen_synthetic_federation(**spec.federation_kwargs(seed))
        results.append((seed, run_experiment(spec.round_config(seed), model, fed, spec.stop_at_target)))
    return results, aggregate_summaries([r.summary for _, r in results])


def _fmt(v):
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(v)
    return v


def metrics_csv(results) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=METRICS_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for seed, res in results:
        for m in res.metrics:
            writer.writerow({"seed": seed, **{k: _fmt(v) for k, v in metrics_row(m).items()}})
    return buf.getvalue()


def write_outputs(results, aggregate: dict, spec: ExperimentSpec, directory) -> Path:
    out = check_writable(Path(directory) / run_id(spec))
    (out / "metrics.csv").write_text(metrics_csv(results))
    summary = {
        "run_id": run_id(spec),
        "aggregate": aggregate,
        "seeds": [res.summary for _, res in results],
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (out / "config.txt").write_text(spec.to_text())
    return out


def sweep_specs(base: ExperimentSpec, grid: dict) -> list[ExperimentSpec]:
    """Cartesian product over the axes in ``grid`` (missing axes keep the base value)."""
    axes = [a for a in SWEEP_AXES if a in grid]
    return [base.replace(**dict(zip(axes, combo))) for combo in itertools.product(*(grid[a] for a in axes))]


def sweep_csv(rows) -> str:
    cols = ["run_id", *SWEEP_AXES, "strategy", "rounds_to_target_mean", "rounds_to_target_std",
            "reached", "n_seeds", "peak_accuracy_mean", "weighted_total_mean"]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    writer.writeheader()
    for spec, agg in rows:
        row = {"run_id": run_id(spec), "strategy": spec.strategy, **{a: getattr(spec, a) for a in SWEEP_AXES}}
        for k in cols[6:]:
            v = agg.get(k)
            row[k] = "inf" if v is None and k.startswith("rounds_to_target") else _fmt(v)
        writer.writerow(row)
    return buf.getvalue()

