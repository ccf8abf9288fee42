"""Rounds to 90% accuracy across codebook shapes, plus SPQ and the no-public mode."""

from _common import base_parser, base_spec, run_rows, write_csv

ROWS = [
    ("uncompressed", dict(strategy="uncompressed")),
    ("spq", dict(strategy="spq", M=1, K=32, D=2)),
    ("fedmpq", dict(M=8, K=4, D=4)),
    ("fedmpq", dict(M=8, K=8, D=4)),
    ("fedmpq", dict(M=8, K=16, D=4)),
    ("fedmpq", dict(M=4, K=32, D=2)),
    ("fedmpq w/o public", dict(M=7, K=8, D=4, use_public=False)),
]


def main():
    args = base_parser(__doc__).parse_args()
    specs = []
    for name, geom in ROWS:
        spec = base_spec(args, residual=0.001, **geom)
        specs.append(({"method": name, "M": spec.M, "K": spec.K, "D": spec.D}, spec))
    cols = ["rounds_to_target_mean", "rounds_to_target_std", "reached", "n_seeds", "weighted_total_mean"]
    write_csv(args.out / "shape_sweep.csv", run_rows(specs, cols))


if __name__ == "__main__":
    main()
