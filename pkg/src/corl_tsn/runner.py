"""Task-sequence orchestration for every method variant."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import sparse
from .data import DISCRETE, TrajectoryDataset, make_batches, make_mixed_batches, make_pooled_batches, sample_task_memory
from .metrics import PerformanceMatrix
from .model import DtConfig, task_loss
from .registry import CopyRegistry, TaskState, fit_latent_stats
from .routing import (
    AffinityScore,
    RoutingDecision,
    action_affinity,
    hybrid_affinity,
    latent_affinity,
    replay_kl,
    route,
    routing_batches,
)

log = logging.getLogger(__name__)

ROUTED = {"affinity_a": "action", "affinity_l": "latent", "affinity_h": "hybrid", "replay_kl": "replay_kl"}
TSN_VARIANTS = tuple(ROUTED) + ("tsn_core",)
DENSE_VARIANTS = ("naive", "cumulative")
VARIANTS = TSN_VARIANTS + DENSE_VARIANTS

# threshold grids per routed variant (scales differ by orders of magnitude between scores)
TAU_GRIDS = {
    "affinity_a": (0.1, 0.3, 1.0),
    "affinity_l": (0.5, 1.0, 5.0),
    "affinity_h": (0.25, 0.5, 0.75),
    "replay_kl": (0.01, 0.038, 0.1),
}
DEFAULT_ALPHA = 0.7


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MethodConfig:
    variant: str
    tau: float | None = None
    alpha: float | None = None
    keep_ratio: float | None = None  # None: 0.5 for discrete families, 0.33 for continuous
    schedule: str = "constant"
    max_copies: int | None = None
    reuse: bool | None = None  # None: on for routed variants, off for tsn_core
    warm_start: bool = False
    warm_start_strength: float = 1.0
    warm_start_noise: float = 0.01
    replay_mix: float | None = None
    replay_capacity: int | None = None
    memory_size: int = 256
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 64
    seed: int = 0
    freeze_non_tsn_after_first: bool = True
    eval_episodes: int = 20
    routing_batches: int = 8
    embed_dim: int = 64
    n_layers: int = 2
    n_heads: int = 2
    context_length: int = 20
    dropout: float = 0.1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")
        if self.variant in ROUTED and self.tau is None:
            raise ConfigError(f"variant {self.variant} needs a routing threshold tau")
        if self.variant == "affinity_h" and self.alpha is None:
            raise ConfigError("affinity_h needs alpha")
        if self.alpha is not None and not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        if self.replay_mix is not None and self.replay_capacity is not None:
            raise ConfigError("set either replay_mix or replay_capacity, not both")
        if self.replay_mix is not None and not 0.0 <= self.replay_mix <= 1.0:
            raise ConfigError("replay_mix must lie in [0, 1]")
        if self.replay_capacity is not None and self.replay_capacity < 1:
            raise ConfigError("replay_capacity must be positive")
        if self.max_copies is not None and self.max_copies < 1:
            raise ConfigError("max_copies must be positive")
        if self.keep_ratio is not None and not 0.0 < self.keep_ratio <= 1.0:
            raise ConfigError("keep_ratio must lie in (0, 1]")
        if self.schedule not in ("constant", "equal_remaining"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if min(self.memory_size, self.epochs, self.batch_size, self.eval_episodes, self.routing_batches) < 1:
            raise ConfigError("sizes and counts must be positive")

    def resolved(self, control_kind: str) -> "MethodConfig":
        """Fill family-dependent defaults."""
        discrete = control_kind == DISCRETE
        changes = {}
        if self.keep_ratio is None:
            changes["keep_ratio"] = 0.5 if discrete else 0.33
        if self.reuse is None:
            changes["reuse"] = self.variant in ROUTED
        if self.variant == "cumulative" and self.replay_mix is None and self.replay_capacity is None:
            if discrete:
                changes["replay_mix"] = 0.5
            else:
                changes["replay_capacity"] = 5000
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class RunResult:
    method: MethodConfig
    performance: PerformanceMatrix
    routing_reports: list[dict]
    registry: CopyRegistry
    metric_kind: str
    wall_clock: float
    status: str = "ok"
    message: str = ""
    stages_completed: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def copy_count(self) -> int:
        return self.registry.n_copies

    def metrics(self) -> dict:
        if self.stages_completed < self.performance.n_tasks:
            return {}
        return self.performance.summary(self.metric_kind)

    def to_record(self) -> dict:
        P = self.performance
        return {
            "config": self.method.to_dict(),
            "status": self.status,
            "message": self.message,
            "metric_kind": self.metric_kind,
            "task_ids": P.task_ids,
            "targets": P.targets.tolist(),
            "performance": [row.tolist() for row in P.values[: self.stages_completed]],
            "routing": self.routing_reports,
            "copies": self.copy_count,
            "assignment": dict(self.registry.assignment),
            "metrics": self.metrics(),
            "wall_clock_s": self.wall_clock,
            **self.extra,
        }


class RunAborted(RuntimeError):
    def __init__(self, message: str, partial: RunResult):
        super().__init__(message)
        self.partial = partial


class RehearsalBuffer:
    """Trajectory store with an equal per-task share of a fixed step budget."""

    def __init__(self, capacity: int, seed: int):
        self.capacity = capacity
        self.seed = seed
        self._sources: list[TrajectoryDataset] = []
        self.datasets: list[TrajectoryDataset] = []

    @property
    def n_steps(self) -> int:
        return sum(ds.n_steps for ds in self.datasets)

    def add_task(self, dataset: TrajectoryDataset) -> None:
        self._sources.append(dataset)
        share = self.capacity // len(self._sources)
        self.datasets = []
        for k, src in enumerate(self._sources):
            order = np.random.default_rng([self.seed, k]).permutation(len(src))
            keep, used = [], 0
            for i in order:
                n = len(src.trajectories[i])
                if used + n <= share:
                    keep.append(int(i))
                    used += n
            if keep:
                self.datasets.append(src.subset(sorted(keep)))


def _trim(batch):
    """Drop trailing all-padding columns (exact under the causal mask)."""
    n = int(batch.valid_mask.sum(axis=1).max())
    if n == batch.context_length:
        return batch
    return dataclasses.replace(
        batch,
        observations=batch.observations[:, :n],
        actions=batch.actions[:, :n],
        returns_to_go=batch.returns_to_go[:, :n],
        timesteps=batch.timesteps[:, :n],
        valid_mask=batch.valid_mask[:, :n],
    )


def protected_step(model, opt, loss, task_id: str) -> None:
    """One optimizer step that leaves weights owned by other tasks bit-identical.

    Gradients on occupied entries are zeroed first; the restore afterwards
    undoes whatever the optimizer still does there (momentum, weight decay).
    """
    states = model.tsn_states()
    opt.zero_grad(set_to_none=True)
    loss.backward()
    snapshot = {}
    for name, st in states.items():
        if st.weight.grad is not None:
            st.weight.grad = sparse.protect_gradients(st, st.weight.grad, task_id)
        snapshot[name] = st.weight.detach().clone()
    opt.step()
    for name, st in states.items():
        sparse.restore_protected(st, snapshot[name], task_id)


class ContinualRunner:
    def __init__(self, tasks, method: MethodConfig, metric_kind: str | None = None, on_stage=None):
        self.on_stage = on_stage  # optional callback(runner, stage_index) after each evaluated stage
        if not tasks:
            raise ConfigError("need at least one task")
        kinds = {ds.task_spec.control_kind for ds, _ in tasks}
        if len(kinds) != 1:
            raise ConfigError("all tasks in a sequence must share one control kind")
        self.tasks = tasks
        self.kind = kinds.pop()
        self.method = method.resolved(self.kind)
        self.metric_kind = metric_kind or ("norm_avg" if self.kind == DISCRETE else "avg_gap")
        spec0 = tasks[0][0].task_spec
        m = self.method
        self.model_cfg = DtConfig(
            obs_dim=spec0.obs_dim,
            action_dim=spec0.action_dim,
            discrete=self.kind == DISCRETE,
            embed_dim=m.embed_dim,
            n_layers=m.n_layers,
            n_heads=m.n_heads,
            context_length=m.context_length,
            dropout=m.dropout,
            max_timestep=max(256, max(ds.task_spec.max_horizon for ds, _ in tasks)),
        )
        dense = m.variant in DENSE_VARIANTS
        max_copies = 1 if (dense or m.variant == "tsn_core") else m.max_copies
        self.registry = CopyRegistry(self.model_cfg, max_copies=max_copies, dense=dense)
        self.schedule = sparse.KeepRatioSchedule(m.schedule, m.keep_ratio, len(tasks) if m.schedule == "equal_remaining" else None)
        T = len(tasks)
        self.P = np.full((T, T), np.nan)
        self.reports: list[dict] = []
        self.normalized: dict[str, TrajectoryDataset] = {}
        self.rehearsal = RehearsalBuffer(m.replay_capacity, m.seed) if m.replay_capacity else None
        self.stages = 0

    # -- public ------------------------------------------------------------

    def run(self) -> RunResult:
        start = time.perf_counter()
        status, message = "ok", ""
        for i in range(len(self.tasks)):
            try:
                self.learn_task(i)
            except sparse.CapacityExhausted as exc:
                status, message = "capacity_exhausted", f"stage {i + 1}: {exc}"
                log.error("run aborted: %s", message)
                break
            self.P[i] = self.evaluate_stage(i)
            self.stages = i + 1
            if self.on_stage is not None:
                self.on_stage(self, i)
            log.info("stage %d/%d %s: %s", i + 1, len(self.tasks), self.tasks[i][0].task_id, np.round(self.P[i], 4).tolist())
        result = RunResult(
            method=self.method,
            performance=PerformanceMatrix(self.P, [ds.task_spec.target_return for ds, _ in self.tasks], [ds.task_id for ds, _ in self.tasks]),
            routing_reports=self.reports,
            registry=self.registry,
            metric_kind=self.metric_kind,
            wall_clock=time.perf_counter() - start,
            status=status,
            message=message,
            stages_completed=self.stages,
        )
        if status != "ok":
            raise RunAborted(message, result)
        return result

    # -- per-task ----------------------------------------------------------

    def learn_task(self, i: int) -> None:
        m = self.method
        ds, _ = self.tasks[i]
        t = ds.task_id
        mean, std = ds.observation_stats()
        state = TaskState.from_spec(ds.task_spec, mean, std)
        normed = ds.normalized(mean, std)
        self.normalized[t] = normed
        memory = sample_task_memory(ds, m.memory_size, seed=m.seed * 7919 + i)

        if m.variant in DENSE_VARIANTS:
            if not self.registry.copies:
                self.registry.spawn_copy(seed=m.seed * 10007)
            self.registry.assign(t, 0)
            self.registry.task_state[t] = state
            self.registry.memories[t] = memory
            self._train_dense(i, normed)
            return

        decision = self._choose_copy(i, memory, state)
        copy_id = decision.copy_id if decision is not None else 0
        model = self.registry.copies[copy_id]
        first_in_copy = not self.registry.copy_tasks(copy_id)
        self.registry.assign(t, copy_id)
        self.registry.task_state[t] = state
        self.registry.memories[t] = memory
        source = decision.chosen_source if decision is not None and decision.mode != "spawn" else None
        self._train_tsn(i, model, normed, first_in_copy, source)
        self.registry.latent_stats[t] = fit_latent_stats(model, memory, t, state)

    def _choose_copy(self, i: int, memory, state) -> RoutingDecision | None:
        m = self.method
        t = self.tasks[i][0].task_id
        reg = self.registry
        if i == 0 or m.variant == "tsn_core":
            if not reg.copies:
                reg.spawn_copy(seed=m.seed * 10007)
            self.reports.append({"task": t, "stage": i + 1, "mode": "initial" if i == 0 else "single_copy", "copy_id": 0, "copies_after": reg.n_copies})
            return None
        sources = list(reg.task_order)
        kind = ROUTED[m.variant]
        components = {}
        if kind in ("action", "hybrid"):
            ds = self.tasks[i][0]
            batches = routing_batches(ds, self.model_cfg.context_length, m.routing_batches, m.batch_size, seed=m.seed * 17 + 5)
            d_a = [action_affinity(reg, s, batches, ds.task_spec) for s in sources]
            components["action"] = dict(zip(sources, d_a))
        if kind in ("latent", "hybrid"):
            d_l = [latent_affinity(reg, s, memory, state) for s in sources]
            components["latent"] = dict(zip(sources, d_l))
        if kind == "action":
            values = d_a
        elif kind == "latent":
            values = d_l
        elif kind == "hybrid":
            values = hybrid_affinity(d_a, d_l, m.alpha)
        else:
            values = [replay_kl(memory, reg.memories[s]) for s in sources]
        scores = [AffinityScore(kind, s, float(v)) for s, v in zip(sources, values)]
        copies_before = reg.n_copies
        decision = route(reg, scores, m.tau)
        decision.alpha = m.alpha if kind == "hybrid" else None
        decision.components = components
        if decision.mode == "spawn":
            decision.copy_id = reg.spawn_copy(seed=m.seed * 10007 + copies_before)
        record = {"task": t, "stage": i + 1, **decision.to_record(), "copies_before": copies_before,
                  "copies_after": reg.n_copies, "max_copies": reg.max_copies}
        self.reports.append(record)
        log.info("routing %s: %s -> copy %s (best %s = %.4g, tau %.4g)", t, decision.mode, decision.copy_id,
                 decision.chosen_source, min(s.value for s in scores), m.tau)
        return decision

    def _batch_stream(self, i: int, epoch: int):
        m = self.method
        seed = m.seed * 1_000_003 + i * 1009 + epoch
        normed = self.normalized[self.tasks[i][0].task_id]
        L = self.model_cfg.context_length
        if m.variant == "cumulative" and i > 0:
            if self.rehearsal is not None:
                return make_pooled_batches([normed] + self.rehearsal.datasets, L, m.batch_size, seed)
            past = [self.normalized[ds.task_id] for ds, _ in self.tasks[:i]]
            return make_mixed_batches(normed, past, L, m.batch_size, seed, m.replay_mix)
        return make_batches(normed, L, m.batch_size, seed)

    def _train_tsn(self, i: int, model, normed: TrajectoryDataset, first_in_copy: bool, source: str | None) -> None:
        m = self.method
        t = normed.task_id
        states = model.tsn_states()
        freeze = m.freeze_non_tsn_after_first and not first_in_copy
        for p in model.dense_parameters():
            p.requires_grad_(not freeze)
        gen = torch.Generator().manual_seed(m.seed * 31 + i)
        ws = sparse.WarmStartConfig(m.warm_start_strength, m.warm_start_noise)
        for st in states.values():
            if m.warm_start and source is not None:
                sparse.warm_start_scores(st, st.task_masks[source], ws, gen)
            else:
                sparse.init_scores(st, gen)
        rho = self.schedule.rho_for(i + 1)
        params = [p for p in model.parameters() if p.requires_grad]
        opt = torch.optim.Adam(params, lr=m.lr)
        torch.manual_seed(m.seed * 131 + i)
        model.train()
        for epoch in range(m.epochs):
            # masks follow the scores at every epoch start; the last epoch's mask is the stored one
            for st in states.values():
                sparse.allocate_mask(st, t, rho, sparse.feasibility(st, m.reuse, exclude=t))
            model.activate(t)
            for batch in self._batch_stream(i, epoch):
                protected_step(model, opt, task_loss(model, _trim(batch)), t)
        model.eval()

    def _train_dense(self, i: int, normed: TrajectoryDataset) -> None:
        m = self.method
        model = self.registry.copies[0]
        model.activate(None)
        opt = torch.optim.Adam(model.parameters(), lr=m.lr)
        torch.manual_seed(m.seed * 131 + i)
        model.train()
        for epoch in range(m.epochs):
            for batch in self._batch_stream(i, epoch):
                loss = task_loss(model, _trim(batch))
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
        model.eval()
        if self.rehearsal is not None:
            self.rehearsal.add_task(normed)

    # -- evaluation --------------------------------------------------------

    def evaluate_stage(self, i: int) -> np.ndarray:
        """Row i of P; tasks not yet learned run under the newest task's context."""
        latest = self.tasks[i][0].task_id
        row = np.zeros(len(self.tasks))
        for j, (ds, env) in enumerate(self.tasks):
            spec = ds.task_spec
            ctx = self.registry.activate_for_inference(ds.task_id if j <= i else latest)
            returns = [
                ctx.rollout(env, e, target_return=spec.target_return, native_action_dim=spec.native_action_dim)
                for e in range(self.method.eval_episodes)
            ]
            row[j] = float(np.mean(returns))
        return row


def run_sequence(tasks, method: MethodConfig, metric_kind: str | None = None, on_stage=None) -> RunResult:
    return ContinualRunner(tasks, method, metric_kind, on_stage).run()


# ---------------------------------------------------------------------------
# outputs


def write_results(result: RunResult, out_dir, save_checkpoint: bool = True, extra: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    record = result.to_record()
    if extra:
        record.update(extra)
    (out / "results.json").write_text(json.dumps(record, indent=1))
    with open(out / "performance.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage"] + result.performance.task_ids)
        for i in range(result.stages_completed):
            w.writerow([i + 1] + [repr(float(v)) for v in result.performance.values[i]])
    if save_checkpoint:
        result.registry.save(out / "checkpoint")
    return out
