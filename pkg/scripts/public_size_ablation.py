"""Effect of the server's public-set size (and its absence) on convergence."""

from _common import base_parser, base_spec, run_rows, write_csv


def main():
    p = base_parser(__doc__)
    p.add_argument("--sizes", default="5,20,100,500")
    p.add_argument("--mismatch", type=float, default=0.8)
    args = p.parse_args()
    geom = dict(M=8, K=8, D=4, residual=0.001)
    specs = [({"public_size": 0, "use_public": False}, base_spec(args, use_public=False, M=7, K=8, D=4))]
    for n in (int(v) for v in args.sizes.split(",")):
        spec = base_spec(args, public_size=n, public_mismatch=args.mismatch, **geom)
        specs.append(({"public_size": n, "use_public": True}, spec))
    cols = ["rounds_to_target_mean", "rounds_to_target_std", "reached", "peak_accuracy_mean"]
    write_csv(args.out / "public_size_ablation.csv", run_rows(specs, cols))


if __name__ == "__main__":
    main()
