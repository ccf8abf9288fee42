"""Rounds to target as a function of the pruned-residual ratio."""

from _common import base_parser, base_spec, run_rows, write_csv


def main():
    p = base_parser(__doc__)
    p.add_argument("--ratios", default="0,0.001,0.01,0.05")
    p.add_argument("--geometry", default="8,8,4", help="M,K,D")
    args = p.parse_args()
    M, K, D = (int(v) for v in args.geometry.split(","))
    specs = []
    for rho in (float(v) for v in args.ratios.split(",")):
        specs.append(({"residual": rho, "M": M, "K": K, "D": D}, base_spec(args, M=M, K=K, D=D, residual=rho)))
    cols = ["rounds_to_target_mean", "rounds_to_target_std", "reached", "weighted_total_mean"]
    write_csv(args.out / "residual_ablation.csv", run_rows(specs, cols))


if __name__ == "__main__":
    main()
