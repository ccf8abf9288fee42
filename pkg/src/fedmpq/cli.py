"""Command-line entry point.

    fedmpq run     [--config FILE] [--<key> VALUE ...]
    fedmpq sweep   [--config FILE] --M 4,8 --K 8,16,32 [--D ..] [--residual ..]
    fedmpq verify  [--trials N] [--seed S]
    fedmpq inspect-packet FILE --layers L1,L2 [--kind pq] [--K 8 --D 4 --M 4]

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import wire
from .config import FIELD_TYPES, ExperimentSpec, convert, parse_pairs
from .harness import (
    SWEEP_AXES,
    OutputError,
    check_writable,
    run_spec,
    sweep_csv,
    sweep_specs,
    write_outputs,
)
from .pq_codec import is_power_of_two
from .simulator import ConfigError
from .verification import run_all

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
OUTPUT_ENV = "FEDMPQ_OUTPUT_DIR"

log = logging.getLogger("fedmpq")


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_spec_flags(p: argparse.ArgumentParser, listy: tuple = ()):
    p.add_argument("--config", help="flat key = value file; flags override it")
    for f in fields(ExperimentSpec):
        names = [_flag(f.name)] if f.name == f.name.replace("_", "-") else [_flag(f.name), "--" + f.name]
        help_ = "comma-separated grid" if f.name in listy else None
        p.add_argument(*names, dest=f.name, default=None, metavar="V", help=help_)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedmpq", description="FedMPQ desk-scale simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_spec_flags(sub.add_parser("run", help="run one experiment over its seeds"))
    _add_spec_flags(sub.add_parser("sweep", help="grid over M/K/D/residual"), listy=SWEEP_AXES)
    v = sub.add_parser("verify", help="randomized oracle self-checks")
    v.add_argument("--trials", type=int, default=200)
    v.add_argument("--seed", type=int, default=0)
    ip = sub.add_parser("inspect-packet", help="decode a serialized client packet")
    ip.add_argument("path")
    ip.add_argument("--layers", required=True, help="comma-separated layer lengths L")
    ip.add_argument("--kind", choices=wire.KINDS, default="pq")
    ip.add_argument("--K", type=int, default=8)
    ip.add_argument("--D", type=int, default=4)
    ip.add_argument("--M", type=int, default=None)
    return parser


def _base_values(args) -> dict:
    values = {}
    if args.config:
        try:
            values.update(parse_pairs(Path(args.config).read_text()))
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from None
    if OUTPUT_ENV in os.environ:
        values["output_dir"] = os.environ[OUTPUT_ENV]
    return values


def parse_cli(argv=None):
    """Parse ``argv`` into ``(command, payload)``.

    For ``run`` the payload is one :class:`ExperimentSpec`; for ``sweep`` a
    list of them. Other commands return the argparse namespace. Raises
    :class:`ConfigError` for invalid values.
    """
    args = build_parser().parse_args(argv)
    if args.command == "inspect-packet":
        try:
            args.layers = [int(x) for x in args.layers.split(",") if x.strip()]
        except ValueError:
            raise ConfigError(f"bad --layers value {args.layers!r}") from None
        if not args.layers or min(args.layers) < 1:
            raise ConfigError("--layers needs positive lengths")
        if args.kind == "pq" and not is_power_of_two(args.K):
            raise ConfigError(f"K must be a power of two, got {args.K}")
    if args.command not in ("run", "sweep"):
        return args.command, args
    values = _base_values(args)
    grid = {}
    for name in FIELD_TYPES:
        raw = getattr(args, name)
        if raw is None:
            continue
        if args.command == "sweep" and name in SWEEP_AXES:
            grid[name] = [convert(name, part) for part in raw.split(",") if part.strip()]
        else:
            values[name] = convert(name, raw)
    spec = ExperimentSpec(**values)
    if args.command == "run":
        return "run", spec
    specs = sweep_specs(spec, grid)
    for s in specs:
        s.validate()
    return "sweep", specs


def _cmd_run(spec: ExperimentSpec) -> int:
    check_writable(spec.output_dir)
    results, agg = run_spec(spec)
    out = write_outputs(results, agg, spec, spec.output_dir)
    print(json.dumps(agg, indent=2, sort_keys=True))
    print(f"wrote {out}")
    return EXIT_OK


def _cmd_sweep(specs) -> int:
    base_dir = check_writable(specs[0].output_dir)
    rows = []
    for spec in specs:
        results, agg = run_spec(spec)
        write_outputs(results, agg, spec, spec.output_dir)
        rows.append((spec, agg))
        rtt = agg["rounds_to_target_mean"]
        print(f"M={spec.M} K={spec.K} D={spec.D} residual={spec.residual}: "
              f"rounds_to_target={'inf' if rtt is None else f'{rtt:.1f}'}")
    (base_dir / "sweep.csv").write_text(sweep_csv(rows))
    print(f"wrote {base_dir / 'sweep.csv'}")
    return EXIT_OK


def _cmd_verify(args) -> int:
    ok = True
    for r in run_all(args.trials, args.seed):
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name:24s} trials={r.trials} {r.seconds:.2f}s {r.detail}")
        ok &= r.passed
    return EXIT_OK if ok else EXIT_RUNTIME


def describe_packet(data: bytes, kind: str, lengths, K: int, D: int, M=None) -> dict:
    schema = [wire.LayerSchema(i, L, K if kind == "pq" else 1, D if kind == "pq" else 1)
              for i, L in enumerate(lengths)]
    layers = []
    if kind == "pq":
        for u in wire.decode_packet(data, schema, M).layers:
            layers.append({
                "layer_id": u.code.layer_id,
                "codebook_index": u.code.codebook_index,
                "L": u.code.original_length,
                "codes": u.code.codes.tolist(),
                "residual": [[p, float(np.float32(v))] for p, v in u.residual.entries],
                "pseudo_centroids": u.pseudo.centroids.tolist(),
                "usage_counts": u.pseudo.usage_counts.tolist(),
            })
    elif kind == "topk":
        for s, r in zip(schema, wire.decode_topk(data, schema)):
            layers.append({"layer_id": s.layer_id, "L": s.L, "residual": r.entries})
    elif kind == "sq":
        for q in wire.decode_sq(data, schema):
            layers.append({"layer_id": q.layer_id, "bits": q.bits, "min": q.lo, "max": q.hi,
                           "levels": q.levels.tolist()})
    else:
        for s, v in zip(schema, wire.decode_dense(data, schema)):
            layers.append({"layer_id": s.layer_id, "L": s.L, "values": v.tolist()})
    return {"kind": kind, "bytes": len(data), "layers": layers}


def _cmd_inspect(args) -> int:
    data = Path(args.path).read_bytes()
    print(json.dumps(describe_packet(data, args.kind, args.layers, args.K, args.D, args.M), indent=2))
    return EXIT_OK


def main(argv=None) -> int:
    raw = sys.argv[1:] if argv is None else argv
    verbose = "-v" in raw or "--verbose" in raw
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        command, payload = parse_cli(argv)
    except ConfigError as exc:
        print(f"fedmpq: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        if command == "run":
            return _cmd_run(payload)
        if command == "sweep":
            return _cmd_sweep(payload)
        if command == "verify":
            return _cmd_verify(payload)
        return _cmd_inspect(payload)
    except (OutputError, ConfigError) as exc:
        print(f"fedmpq: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"fedmpq: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
