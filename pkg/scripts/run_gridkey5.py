"""All variants on the discrete gridkey-5 sequence; prints NormAvg / AvgF per run."""
from _common import method_grid, parser, report, run_all

VARIANTS = ("affinity_a", "affinity_l", "affinity_h", "replay_kl", "tsn_core", "naive", "cumulative")

if __name__ == "__main__":
    p = parser(__doc__, "gridkey5")
    p.add_argument("--variants", nargs="+", default=list(VARIANTS))
    args = p.parse_args()
    paths = run_all("gridkey5", method_grid(args.variants, tau_index=0), args.seeds, args.out, args.epochs, args.n_trajectories)
    report(paths, args.out)
