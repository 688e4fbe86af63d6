"""Acceptance gate: one test per criterion, each emitting a PASS/FAIL line."""
import json
import math
import time

import numpy as np
import pytest
import torch

from corl_tsn import sparse
from corl_tsn.bench import build_benchmark, bundled_manifest
from corl_tsn.data import collate, make_batches, make_pooled_batches
from corl_tsn.metrics import avg_gap, norm_avg
from corl_tsn.model import DtConfig, build_model, loss_continuous, loss_discrete, task_loss
from corl_tsn.routing import kl_diag_gaussian, replay_kl, symmetric_kl
from corl_tsn.data import TaskMemory
from corl_tsn.runner import DEFAULT_ALPHA, TAU_GRIDS, MethodConfig, protected_step, run_sequence

_RUNS = {}


def cached_run(benchmark, seed, n_tasks=None, **method):
    key = (benchmark, seed, n_tasks, tuple(sorted(method.items())))
    if key not in _RUNS:
        tasks = build_benchmark(bundled_manifest(benchmark), seed=seed)
        _RUNS[key] = run_sequence(tasks[:n_tasks] if n_tasks else tasks, MethodConfig(seed=seed, **method))
    return _RUNS[key]


def contract_violations(reports):
    """Decisions that break reuse <=> min score <= tau, or fall back with budget left."""
    bad = []
    for r in reports:
        if "scores" not in r:
            continue
        best = min(r["scores"].values())
        reuse = r["mode"] == "reuse"
        if reuse != (best <= r["threshold"]):
            bad.append(r)
        if r["mode"] == "fallback" and (r["max_copies"] is None or r["copies_before"] < r["max_copies"]):
            bad.append(r)
        if r["mode"] == "spawn" and r["max_copies"] is not None and r["copies_before"] >= r["max_copies"]:
            bad.append(r)
    return bad


# ---------------------------------------------------------------------------
# 1


def test_c01_metric_arithmetic(verdict):
    targets_a = [114, 86, 1556, 97, 135]
    targets_p = [-0.00032, -0.436, -0.001]

    def row(finals):
        P = np.zeros((len(finals), len(finals)))
        P[-1] = finals
        return P

    na_tsn = norm_avg(row([97, 73, 1511, 92, 117]), targets_a)
    na_cum = norm_avg(row([57, 52, 1492, 92, 108]), targets_a)
    gap_tsn = avg_gap(row([-0.189, -0.949, -1.308]), targets_p)
    gap_cum = avg_gap(row([-0.189, -1.120, -1.314]), targets_p)
    ok = abs(na_tsn - 89.7) <= 0.05 and abs(na_cum - 76.2) <= 0.05 and abs(gap_tsn - 0.670) <= 0.001 and abs(gap_cum - 0.729) <= 0.001
    verdict(1, "metric arithmetic", ok, f"norm_avg {na_tsn:.3f}/{na_cum:.3f}, avg_gap {gap_tsn:.5f}/{gap_cum:.5f}")


# ---------------------------------------------------------------------------
# 2


def _sequential_occupancy(rho, n_tasks, n=100_000, seed=0):
    state = sparse.TsnLayerState(torch.zeros(n))
    g = torch.Generator().manual_seed(seed)
    for t in range(n_tasks):
        sparse.init_scores(state, g)
        sparse.allocate_mask(state, f"t{t}", rho, sparse.feasibility(state, reuse_enabled=False))
    return 100.0 * float(state.occupancy().double().mean())


def test_c02_occupancy(verdict):
    start = time.perf_counter()
    o5 = _sequential_occupancy(0.5, 5)
    o3 = _sequential_occupancy(0.33, 3)
    took = time.perf_counter() - start
    ok = abs(o5 - 96.9) <= 0.1 and abs(o3 - 69.9) <= 0.2 and took < 1.0
    verdict(2, "occupancy", ok, f"rho=0.5 x5: {o5:.3f}%, rho=0.33 x3: {o3:.3f}%, {took:.2f}s")


# ---------------------------------------------------------------------------
# 3


def test_c03_strict_protection(verdict):
    start = time.perf_counter()
    problems = []

    # (a) 100 adaptive steps on a new task sharing a copy with an old one
    tasks = build_benchmark(bundled_manifest("gridkey5"), seed=0, n_trajectories=40)
    cfg = DtConfig(obs_dim=38, action_dim=4, discrete=True, embed_dim=32, n_layers=1, n_heads=2, context_length=10)
    model = build_model(cfg, 0)
    g = torch.Generator().manual_seed(0)
    for st_ in model.tsn_states().values():
        sparse.init_scores(st_, g)
        sparse.allocate_mask(st_, "old", 0.5, sparse.feasibility(st_, False))
        sparse.init_scores(st_, g)
        sparse.allocate_mask(st_, "new", 0.5, sparse.feasibility(st_, True))  # reuse: overlaps "old"
    before = {n: (s.weight.detach().clone(), sparse.effective_weights(s, "old")) for n, s in model.tsn_states().items()}
    opt = torch.optim.AdamW(model.parameters(), lr=1e-2, weight_decay=0.1)
    model.train()
    model.activate("new")
    ds = tasks[3][0].normalized(*tasks[3][0].observation_stats())
    steps = 0
    while steps < 100:
        for batch in make_batches(ds, 10, 16, seed=steps):
            protected_step(model, opt, task_loss(model, batch), "new")
            steps += 1
            if steps == 100:
                break
    moved = 0
    for n, s in model.tsn_states().items():
        w0, eff0 = before[n]
        occ = s.task_masks["old"]
        if not torch.equal(s.weight.detach()[occ], w0[occ]):
            problems.append(f"{n}: occupied weights moved")
        if not torch.equal(sparse.effective_weights(s, "old"), eff0):
            problems.append(f"{n}: old effective weights changed")
        moved += int((s.weight.detach() != w0).sum())
    if moved == 0:
        problems.append("training did not move any free weight")

    # (b) a whole run: every task's effective weights stay fixed after its stage
    snapshots = {}

    def capture(runner, i):
        reg = runner.registry
        for t in reg.task_order:
            model_t = reg.model_for(t)
            eff = {n: sparse.effective_weights(s, t).clone() for n, s in model_t.tsn_states().items()}
            dense = [p.detach().clone() for p in model_t.dense_parameters()]
            if t not in snapshots:
                snapshots[t] = (eff, dense)
            else:
                eff0, dense0 = snapshots[t]
                if any(not torch.equal(eff[n], eff0[n]) for n in eff0):
                    problems.append(f"stage {i + 1}: effective weights of {t} changed")
                if any(not torch.equal(a, b) for a, b in zip(dense, dense0)):
                    problems.append(f"stage {i + 1}: dense parameters used by {t} changed")

    small = build_benchmark(bundled_manifest("gridkey5"), seed=1, n_trajectories=40)
    run_sequence(small, MethodConfig("affinity_a", tau=1e9, seed=1, epochs=3, eval_episodes=2), on_stage=capture)
    took = time.perf_counter() - start
    ok = not problems and took < 30
    verdict(3, "strict protection", ok, f"100 AdamW steps + 5-stage shared-copy run, {took:.1f}s" + (f"; {problems[:3]}" if problems else ""))


# ---------------------------------------------------------------------------
# 4


ZERO_FORGET_VARIANTS = [
    dict(variant="affinity_a", tau=TAU_GRIDS["affinity_a"][0]),
    dict(variant="affinity_l", tau=TAU_GRIDS["affinity_l"][1]),
    dict(variant="affinity_h", tau=TAU_GRIDS["affinity_h"][1], alpha=DEFAULT_ALPHA),
    dict(variant="replay_kl", tau=TAU_GRIDS["replay_kl"][1]),
    dict(variant="tsn_core"),
]


@pytest.mark.slow
def test_c04_zero_forgetting(verdict):
    start = time.perf_counter()
    details, ok = [], True
    for m in ZERO_FORGET_VARIANTS:
        res = cached_run("gridkey5", 0, **m)
        F = res.metrics()["forgetting"]
        ok &= all(f == 0.0 for f in F) and res.status == "ok"
        details.append(f"{m['variant']} F={F} copies={res.copy_count}")
    naive = cached_run("gridkey5", 0, variant="naive")
    avgf = naive.metrics()["avg_forgetting"]
    ok &= avgf > 0
    took = time.perf_counter() - start
    ok &= took < 15 * 60
    verdict(4, "zero forgetting", ok, "; ".join(details) + f"; naive AvgF={avgf:.3f}; {took:.0f}s")


# ---------------------------------------------------------------------------
# 5


def _fd_check(discrete, n_samples=60, eps=1e-5, seed=0):
    cfg = DtConfig(obs_dim=5, action_dim=3, discrete=discrete, embed_dim=8, n_layers=2, n_heads=2,
                   context_length=4, dropout=0.0, dtype="float64")
    model = build_model(cfg, seed)
    g = torch.Generator().manual_seed(seed)
    for st_ in model.tsn_states().values():
        sparse.init_scores(st_, g)
        sparse.allocate_mask(st_, "t", 0.7, sparse.feasibility(st_, False))
    model.activate("t")
    model.train()
    r = np.random.default_rng(seed)
    B, L = 3, 4
    valid = np.ones((B, L), np.float32)
    valid[0, 3:] = 0
    amask = np.tile(np.array([1, 1, 0], np.float32), (B, 1))
    batch = collate_like(cfg, r, B, L, valid, amask)

    def loss_fn():
        out = model.forward_batch(batch)
        return loss_discrete(out, batch) if discrete else loss_continuous(out, batch)

    model.zero_grad()
    loss_fn().backward()
    params = [(n, p) for n, p in model.named_parameters() if not n.endswith("scores")]
    candidates = [(n, p, idx) for n, p in params for idx in np.ndindex(*p.shape) if abs(float(p.grad[idx])) > 1e-8]
    pick = r.choice(len(candidates), size=min(n_samples, len(candidates)), replace=False)
    worst = 0.0
    with torch.no_grad():
        for k in pick:
            n, p, idx = candidates[k]
            analytic = float(p.grad[idx])
            orig = float(p[idx])
            p[idx] = orig + eps
            up = float(loss_fn())
            p[idx] = orig - eps
            down = float(loss_fn())
            p[idx] = orig
            numeric = (up - down) / (2 * eps)
            worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric)))
    return worst, len(pick)


def collate_like(cfg, r, B, L, valid, amask):
    from corl_tsn.data import Batch

    act = r.integers(0, cfg.action_dim, size=(B, L)) if cfg.discrete else r.normal(size=(B, L, cfg.action_dim)).astype(np.float32)
    if not cfg.discrete:
        act[..., 2] = 0.0
    return Batch(
        observations=r.normal(size=(B, L, cfg.obs_dim)).astype(np.float32),
        actions=act,
        returns_to_go=r.normal(size=(B, L)).astype(np.float32),
        timesteps=np.tile(np.arange(L), (B, 1)),
        valid_mask=valid,
        action_mask=amask,
    )


def test_c05_gradient_check(verdict):
    start = time.perf_counter()
    wd, nd = _fd_check(True)
    wc, nc = _fd_check(False)
    took = time.perf_counter() - start
    ok = wd < 1e-4 and wc < 1e-4 and nd >= 50 and nc >= 50 and took < 60
    verdict(5, "gradient check", ok, f"max rel err discrete {wd:.2e} ({nd} params), continuous {wc:.2e} ({nc} params), {took:.1f}s")


# ---------------------------------------------------------------------------
# 6


def test_c06_kl_oracles(verdict):
    gauss = symmetric_kl(([0.0], [1.0]), ([1.0], [1.0]))
    errs = [abs(gauss - 0.5)]
    r = np.random.default_rng(0)
    for _ in range(50):
        xs, xt = r.normal(size=(4, 2)) * 2, r.normal(size=(4, 2)) * 2
        ref = 0.0
        for a, b in zip(xs, xt):
            ps = 1 / (1 + math.exp(a[0] - a[1]))  # second coordinate's softmax weight
            pt = 1 / (1 + math.exp(b[0] - b[1]))
            ref += ps * math.log(ps / pt) + (1 - ps) * math.log((1 - ps) / (1 - pt))
        errs.append(abs(replay_kl(TaskMemory("t", xt), TaskMemory("s", xs)) - ref / 4))
    one_way = kl_diag_gaussian([0.0], [1.0], [1.0], [1.0])
    errs.append(abs(one_way - 0.5))
    ok = max(errs) <= 1e-9
    verdict(6, "KL oracles", ok, f"symmetric KL {gauss:.12f}, max error {max(errs):.2e}")


# ---------------------------------------------------------------------------
# 7


@pytest.mark.slow
def test_c07_routing_behavior(verdict):
    start = time.perf_counter()
    hits, per_seed, bad = 0, [], []
    for seed in range(10):
        got = None
        for tau in TAU_GRIDS["affinity_a"]:
            res = cached_run("gridkey5", seed, n_tasks=4, variant="affinity_a", tau=tau)
            bad += contract_violations(res.routing_reports)
            modes = {r["task"]: r["mode"] for r in res.routing_reports}
            if modes["gk3"] == "reuse" and modes["gk4"] == "spawn":
                got = tau
                break
        hits += got is not None
        per_seed.append(got)
    for res in _RUNS.values():
        bad += contract_violations(res.routing_reports)
    took = time.perf_counter() - start
    ok = hits >= 8 and not bad
    verdict(7, "routing behavior", ok, f"{hits}/10 seeds (tau per seed {per_seed}), {len(bad)} contract violations, {took:.0f}s")


# ---------------------------------------------------------------------------
# 8


def test_c08_masked_loss_contract(verdict):
    tasks = build_benchmark(bundled_manifest("pointreach3"), seed=0, n_trajectories=3)
    cfg = DtConfig(obs_dim=6, action_dim=3, discrete=False, embed_dim=16, n_layers=1, n_heads=2, context_length=60)
    model = build_model(cfg, 0).eval()
    checks = []
    r = np.random.default_rng(0)
    datasets = [ds for ds, _ in tasks[:3]]
    batch = next(make_pooled_batches(datasets, 60, 9, seed=0))  # long window: every row is padded at the tail
    out = model.forward_batch(batch)
    base = loss_continuous(out, batch).item()
    for _ in range(20):
        acts = batch.actions.copy()
        pad_dims = batch.action_mask[:, None, :].repeat(acts.shape[1], 1) == 0
        acts[pad_dims] = r.normal(size=int(pad_dims.sum())) * 100
        acts[batch.valid_mask == 0] = r.normal(size=(int((batch.valid_mask == 0).sum()), 3)) * 100
        b2 = type(batch)(batch.observations, acts, batch.returns_to_go, batch.timesteps, batch.valid_mask, batch.action_mask)
        checks.append(loss_continuous(out, b2).item() == base)
    g_tasks = build_benchmark(bundled_manifest("gridkey5"), seed=0, n_trajectories=5)
    gcfg = DtConfig(obs_dim=38, action_dim=4, discrete=True, embed_dim=16, n_layers=1, n_heads=2, context_length=20)
    gmodel = build_model(gcfg, 0).eval()
    gb = next(make_batches(g_tasks[0][0], 20, 5, seed=0))
    gout = gmodel.forward_batch(gb)
    gbase = loss_discrete(gout, gb).item()
    n_pad = int((gb.valid_mask == 0).sum())
    for _ in range(20):
        acts = gb.actions.copy()
        acts[gb.valid_mask == 0] = r.integers(0, 4, size=n_pad)
        b2 = type(gb)(gb.observations, acts, gb.returns_to_go, gb.timesteps, gb.valid_mask, gb.action_mask)
        checks.append(loss_discrete(gout, b2).item() == gbase)
    ok = all(checks) and n_pad > 0 and bool((batch.valid_mask == 0).any())
    verdict(8, "masked-loss contract", ok, f"{sum(checks)}/{len(checks)} perturbations bit-identical")


# ---------------------------------------------------------------------------
# 9


@pytest.mark.slow
def test_c09_determinism(verdict):
    cfg = dict(variant="affinity_h", tau=TAU_GRIDS["affinity_h"][1], alpha=DEFAULT_ALPHA)
    first = cached_run("gridkey5", 0, **cfg)
    tasks = build_benchmark(bundled_manifest("gridkey5"), seed=0)
    second = run_sequence(tasks, MethodConfig(seed=0, **cfg))
    same_p = first.performance.values.tobytes() == second.performance.values.tobytes()
    same_r = json.dumps(first.routing_reports, sort_keys=True) == json.dumps(second.routing_reports, sort_keys=True)
    verdict(9, "determinism", same_p and same_r, f"P identical: {same_p}, routing reports identical: {same_r}")


# ---------------------------------------------------------------------------
# 10


PR_SEEDS = (0, 1)


@pytest.mark.slow
def test_c10_heterogeneous_actions(verdict):
    start = time.perf_counter()
    gaps = {"affinity_l": [], "naive": []}
    problems = []
    for seed in PR_SEEDS:
        tasks = build_benchmark(bundled_manifest("pointreach3"), seed=seed)
        if [ds.task_spec.native_action_dim for ds, _ in tasks] != [2, 2, 3] or {ds.task_spec.action_dim for ds, _ in tasks} != {3}:
            problems.append("unexpected action dims")
        for variant in gaps:
            kw = {"tau": TAU_GRIDS["affinity_l"][1]} if variant == "affinity_l" else {}
            res = run_sequence(tasks, MethodConfig(variant, seed=seed, **kw))
            gaps[variant].append(res.metrics()["avg_gap"])
            for ds, env in tasks:
                ctx = res.registry.activate_for_inference(ds.task_id)
                ctx.rollout(env, 0)
                if env.last_action.shape != (ds.task_spec.native_action_dim,):
                    problems.append(f"{variant}/{ds.task_id}: emitted action shape {env.last_action.shape}")
    tsn, naive = float(np.mean(gaps["affinity_l"])), float(np.mean(gaps["naive"]))
    took = time.perf_counter() - start
    ok = not problems and tsn < naive
    verdict(10, "heterogeneous actions", ok,
            f"AvgGap affinity_l {tsn:.3f} vs naive {naive:.3f} over seeds {PR_SEEDS} (per seed {np.round(gaps['affinity_l'], 3).tolist()} / {np.round(gaps['naive'], 3).tolist()}), {took:.0f}s"
            + (f"; {problems}" if problems else ""))
