"""Continuous pointreach-3 sequence (mixed 2-D / 3-D action spaces); prints AvgGap / AvgF."""
from _common import method_grid, parser, report, run_all

VARIANTS = ("affinity_l", "affinity_a", "tsn_core", "naive", "cumulative")

if __name__ == "__main__":
    p = parser(__doc__, "pointreach3")
    p.add_argument("--variants", nargs="+", default=list(VARIANTS))
    args = p.parse_args()
    paths = run_all("pointreach3", method_grid(args.variants), args.seeds, args.out, args.epochs, args.n_trajectories)
    report(paths, args.out)
