"""corl-tsn command line: generate, validate, run, report."""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .bench import BenchmarkError, BenchmarkManifest, MANIFEST_DIR, load_manifest, make_env, task_specs, generate_expert_dataset
from .data import DatasetError, load_dataset, save_dataset, validate_by_replay
from .metrics import avg_forgetting, avg_gap, norm_avg
from .runner import ConfigError, MethodConfig, RunAborted, run_sequence, write_results

log = logging.getLogger("corl_tsn")

OUT_ENV = "CORL_TSN_OUT"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# configuration


def resolve_manifest(ref: str, base: Path | None = None) -> tuple[BenchmarkManifest, Path]:
    """A bundled benchmark name or a path to a manifest file."""
    candidates = [Path(ref)]
    if base is not None:
        candidates.insert(0, base / ref)
    candidates.append(MANIFEST_DIR / f"{ref}.ini")
    for p in candidates:
        if p.is_file():
            return load_manifest(p), p.resolve()
    raise UsageError(f"benchmark manifest not found: {ref}")


def _coerce(type_name: str, raw: str):
    raw = raw.strip()
    if "None" in type_name and raw.lower() in ("none", ""):
        return None
    if type_name.startswith("bool"):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if type_name.startswith("int"):
        return int(raw)
    if type_name.startswith("float"):
        return float(raw)
    return raw


def method_from_mapping(values: dict) -> MethodConfig:
    fields = {f.name: f for f in dataclasses.fields(MethodConfig)}
    kwargs = {}
    for key, raw in values.items():
        if key not in fields:
            raise ConfigError(f"unknown method option {key!r}")
        if raw is None:
            continue
        try:
            kwargs[key] = _coerce(str(fields[key].type), raw) if isinstance(raw, str) else raw
        except ValueError as exc:
            raise ConfigError(f"option {key}: {exc}") from exc
    if "variant" not in kwargs:
        raise ConfigError("method needs a variant")
    return MethodConfig(**kwargs)


@dataclasses.dataclass
class RunConfig:
    manifest: BenchmarkManifest
    manifest_path: Path
    method: MethodConfig
    out_dir: Path
    seed: int
    data_dir: Path | None = None
    n_trajectories: int | None = None

    def to_dict(self) -> dict:
        return {
            "benchmark": str(self.manifest_path),
            "data": str(self.data_dir) if self.data_dir else None,
            "n_trajectories": self.n_trajectories,
            "seed": self.seed,
            "out": str(self.out_dir),
        }


def output_root(path: str | None, default_name: str) -> Path:
    root = os.environ.get(OUT_ENV)
    if path is None:
        return Path(root or "runs") / default_name
    p = Path(path)
    return p if p.is_absolute() or not root else Path(root) / p


def read_run_config(args) -> RunConfig:
    cp = configparser.ConfigParser()
    base = None
    if args.config:
        cfg_path = Path(args.config)
        if not cfg_path.is_file():
            raise UsageError(f"config file not found: {cfg_path}")
        cp.read(cfg_path)
        base = cfg_path.parent
    run = dict(cp["run"]) if cp.has_section("run") else {}
    method = dict(cp["method"]) if cp.has_section("method") else {}
    overrides = {"variant": args.variant, "tau": args.tau, "alpha": args.alpha, "max_copies": args.max_copies}
    method.update({k: (str(v) if not isinstance(v, str) else v) for k, v in overrides.items() if v is not None})
    seed = args.seed if args.seed is not None else int(run.get("seed", method.get("seed", 0)))
    method["seed"] = str(seed)
    manifest, manifest_path = resolve_manifest(args.benchmark or run.get("benchmark", "gridkey5"), base)
    data_dir = None
    data_ref = args.data or run.get("data")
    if data_ref:
        data_dir = Path(data_ref) if (base is None or Path(data_ref).is_absolute()) else base / data_ref
        if not data_dir.is_dir():
            raise UsageError(f"dataset directory not found: {data_dir}")
    if data_dir is not None and not (args.benchmark or run.get("benchmark")) and (data_dir / "manifest.ini").is_file():
        manifest, manifest_path = load_manifest(data_dir / "manifest.ini"), (data_dir / "manifest.ini").resolve()
    mc = method_from_mapping(method)
    n_traj = run.get("n_trajectories")
    out = output_root(args.out or run.get("out"), f"{manifest_path.stem}-{mc.variant}-s{seed}")
    return RunConfig(manifest, manifest_path, mc, out, seed, data_dir, int(n_traj) if n_traj else None)


# ---------------------------------------------------------------------------
# commands


def _write_tree(manifest_path: Path, manifest: BenchmarkManifest, out: Path, seed: int, n_traj: int | None) -> list:
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.ini").write_text(manifest_path.read_text())
    n = n_traj or manifest.n_trajectories
    written = []
    for idx, spec in enumerate(task_specs(manifest, seed)):
        env = make_env(spec)
        ds = generate_expert_dataset(env, n, seed=seed * 1000 + idx)
        report = validate_by_replay(ds, make_env(ds.task_spec))
        if not report.ok:
            raise DatasetError(f"generated data failed replay: {report.summary()}")
        save_dataset(ds, out / spec.task_id)
        written.append((ds, report))
    (out / "generation.json").write_text(json.dumps({"seed": seed, "n_trajectories": n, "tasks": manifest.task_ids}, indent=1))
    return written


def cmd_generate(args) -> int:
    manifest, mpath = resolve_manifest(args.config or args.benchmark or "gridkey5")
    seed = args.seed or 0
    out = output_root(args.out, f"data-{mpath.stem}-s{seed}")
    for ds, report in _write_tree(mpath, manifest, out, seed, args.n_trajectories):
        print(f"{ds.task_id}: {len(ds)} trajectories, {ds.n_steps} steps, target {ds.task_spec.target_return:.6g}; {report.summary()}")
    print(f"wrote {out}")
    return EXIT_OK


def _dataset_dirs(path: Path) -> list[Path]:
    if (path / "task_spec.txt").is_file():
        return [path]
    if (path / "manifest.ini").is_file():
        order = load_manifest(path / "manifest.ini").task_ids
        return [path / t for t in order]
    dirs = sorted(p for p in path.iterdir() if (p / "task_spec.txt").is_file())
    if not dirs:
        raise UsageError(f"no datasets under {path}")
    return dirs


def cmd_validate(args) -> int:
    if not args.paths:
        raise UsageError("validate needs at least one dataset path")
    bad = 0
    for p in args.paths:
        p = Path(p)
        if not p.exists():
            raise UsageError(f"path not found: {p}")
        for d in _dataset_dirs(p):
            ds = load_dataset(d)
            report = validate_by_replay(ds, make_env(ds.task_spec), tolerance=args.tolerance)
            print(report.summary())
            bad += not report.ok
    return EXIT_RUNTIME if bad else EXIT_OK


def load_tasks(cfg: RunConfig):
    if cfg.data_dir is not None:
        out = []
        for d in _dataset_dirs(cfg.data_dir):
            ds = load_dataset(d)
            out.append((ds, make_env(ds.task_spec)))
        return out
    n = cfg.n_trajectories or cfg.manifest.n_trajectories
    out = []
    for idx, spec in enumerate(task_specs(cfg.manifest, cfg.seed)):
        env = make_env(spec)
        out.append((generate_expert_dataset(env, n, seed=cfg.seed * 1000 + idx), env))
    return out


def cmd_run(args) -> int:
    cfg = read_run_config(args)
    torch.set_num_threads(args.threads)
    tasks = load_tasks(cfg)
    extra = {"run": cfg.to_dict()}
    try:
        result = run_sequence(tasks, cfg.method, metric_kind=cfg.manifest.metric)
    except RunAborted as exc:
        write_results(exc.partial, cfg.out_dir, save_checkpoint=not args.no_checkpoint, extra=extra)
        print(f"run aborted: {exc}; partial results in {cfg.out_dir}", file=sys.stderr)
        return EXIT_RUNTIME
    write_results(result, cfg.out_dir, save_checkpoint=not args.no_checkpoint, extra=extra)
    m = result.metrics()
    key = "norm_avg" if "norm_avg" in m else "avg_gap"
    print(f"{cfg.method.variant} seed {cfg.seed}: {key} {m[key]:.4f}, avg forgetting {m['avg_forgetting']:.4f}, copies {result.copy_count}")
    print(f"wrote {cfg.out_dir}")
    return EXIT_OK


def _load_record(path: Path) -> dict:
    f = path / "results.json" if path.is_dir() else path
    if not f.is_file():
        raise UsageError(f"results file not found: {f}")
    try:
        rec = json.loads(f.read_text())
        rec["_P"] = np.asarray(rec["performance"], dtype=np.float64)
        rec["_targets"] = np.asarray(rec["targets"], dtype=np.float64)
        T = len(rec["task_ids"])
        if rec["_P"].shape != (T, T) or rec["_targets"].shape != (T,) or rec["metric_kind"] not in ("norm_avg", "avg_gap"):
            raise ValueError("incomplete performance matrix")
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"malformed results file {f}: {exc}") from exc
    rec["_source"] = str(f)
    return rec


def _label(rec: dict) -> str:
    c = rec["config"]
    parts = [c["variant"]]
    if c.get("tau") is not None:
        parts.append(f"tau={c['tau']:g}")
    if c.get("alpha") is not None:
        parts.append(f"alpha={c['alpha']:g}")
    parts.append(f"seed={c['seed']}")
    return " ".join(parts)


def cmd_report(args) -> int:
    if not args.results:
        raise UsageError("report needs at least one results file")
    records = [_load_record(Path(p)) for p in args.results]
    out = output_root(args.out, "report")
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for rec in records:
        P, R = rec["_P"], rec["_targets"]
        kind = rec["metric_kind"]
        value = norm_avg(P, R) if kind == "norm_avg" else avg_gap(P, R)
        rows.append([_label(rec), kind, value, avg_forgetting(P) if len(R) >= 2 else 0.0, rec.get("copies", ""), rec["_source"]])
    header = ["run", "metric", "value", "avg_forgetting", "copies", "source"]
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([r[0], r[1], repr(r[2]), repr(r[3]), r[4], r[5]])
    width = max(len(r[0]) for r in rows)
    lines = [f"{'run':<{width}}  {'metric':<8}  {'value':>10}  {'AvgF':>8}  copies"]
    for r in rows:
        lines.append(f"{r[0]:<{width}}  {r[1]:<8}  {r[2]:>10.4f}  {r[3]:>8.4f}  {r[4]}")
    table = "\n".join(lines)
    (out / "metrics.txt").write_text(table + "\n")
    with open(out / "curves.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "task", "stage", "return", "score", "score_kind"])
        for rec in records:
            P, R = rec["_P"], rec["_targets"]
            for j, task in enumerate(rec["task_ids"]):
                for i in range(P.shape[0]):
                    if rec["metric_kind"] == "norm_avg":
                        score, kind = 100.0 * P[i, j] / R[j], "percent_of_target"
                    else:
                        score, kind = abs(P[i, j] - R[j]), "abs_gap"
                    w.writerow([_label(rec), task, i + 1, repr(float(P[i, j])), repr(float(score)), kind])
    print(table)
    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="corl-tsn", description="Continual offline RL with task-specific sparse subnetworks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write expert datasets for a benchmark manifest")
    g.add_argument("--config", help="manifest file or bundled benchmark name")
    g.add_argument("--benchmark", help=argparse.SUPPRESS)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")
    g.add_argument("--n-trajectories", type=int)
    g.set_defaults(func=cmd_generate)

    v = sub.add_parser("validate", help="replay datasets through their environments")
    v.add_argument("paths", nargs="*")
    v.add_argument("--tolerance", type=float, default=1e-6)
    v.set_defaults(func=cmd_validate)

    r = sub.add_parser("run", help="train and evaluate one method over a task sequence")
    r.add_argument("--config", help="run config with [run] and [method] sections")
    r.add_argument("--benchmark", help="manifest file or bundled name (overrides the config)")
    r.add_argument("--data", help="dataset tree from `generate` (default: generate in memory)")
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.add_argument("--variant")
    r.add_argument("--tau", type=float)
    r.add_argument("--alpha", type=float)
    r.add_argument("--max-copies", type=int)
    r.add_argument("--threads", type=int, default=1)
    r.add_argument("--no-checkpoint", action="store_true")
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="metric table and learning-curve data from results files")
    rep.add_argument("results", nargs="*")
    rep.add_argument("--out")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help, or a usage error already printed
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, BenchmarkError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, OSError, RuntimeError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
