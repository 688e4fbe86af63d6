"""Threshold sweep for one routed variant: copies spawned and routing modes per tau."""
from corl_tsn.runner import DEFAULT_ALPHA, TAU_GRIDS

from _common import parser, report, run_all

if __name__ == "__main__":
    p = parser(__doc__, "tau_sweep")
    p.add_argument("--benchmark", default="gridkey5")
    p.add_argument("--variant", default="affinity_a", choices=sorted(TAU_GRIDS))
    p.add_argument("--taus", type=float, nargs="+", default=None)
    args = p.parse_args()
    taus = args.taus or TAU_GRIDS[args.variant]
    grid = [dict(variant=args.variant, tau=t, **({"alpha": DEFAULT_ALPHA} if args.variant == "affinity_h" else {})) for t in taus]
    paths = run_all(args.benchmark, grid, args.seeds, args.out, args.epochs, args.n_trajectories)
    report(paths, args.out)
