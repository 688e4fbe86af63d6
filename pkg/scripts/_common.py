"""Shared helpers for the experiment scripts."""
import argparse
import time
from pathlib import Path

import torch

from corl_tsn.bench import build_benchmark, bundled_manifest
from corl_tsn.cli import main as cli_main
from corl_tsn.runner import DEFAULT_ALPHA, TAU_GRIDS, MethodConfig, RunAborted, run_sequence, write_results


def parser(description, default_out):
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--out", type=Path, default=Path("runs") / default_out)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--n-trajectories", type=int, default=None)
    return p


def method_grid(variants, tau_index=1):
    """One MethodConfig kwargs dict per variant, with tau picked from its grid."""
    grid = []
    for v in variants:
        kw = {"variant": v}
        if v in TAU_GRIDS:
            kw["tau"] = TAU_GRIDS[v][tau_index]
        if v == "affinity_h":
            kw["alpha"] = DEFAULT_ALPHA
        grid.append(kw)
    return grid


def run_all(benchmark, grid, seeds, out: Path, epochs=None, n_trajectories=None):
    torch.set_num_threads(1)
    written = []
    for seed in seeds:
        tasks = build_benchmark(bundled_manifest(benchmark), seed=seed, n_trajectories=n_trajectories)
        for kw in grid:
            extra = {"epochs": epochs} if epochs else {}
            method = MethodConfig(seed=seed, **kw, **extra)
            tag = f"{kw['variant']}" + (f"_tau{kw['tau']:g}" if "tau" in kw else "") + f"_s{seed}"
            start = time.perf_counter()
            try:
                res = run_sequence(tasks, method)
            except RunAborted as exc:
                res = exc.partial
            path = write_results(res, out / tag, save_checkpoint=False)
            m = res.metrics()
            print(f"{tag:32s} {res.status:20s} copies={res.copy_count} {m} ({time.perf_counter() - start:.0f}s)", flush=True)
            written.append(path)
    return written


def report(paths, out: Path):
    code = cli_main(["report", *map(str, paths), "--out", str(out / "report")])
    print((out / "report" / "metrics.txt").read_text() if code == 0 else f"report failed with exit code {code}")
