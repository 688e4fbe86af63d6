"""Affinity scores between a new task and learned tasks, and the reuse/spawn rule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .data import DISCRETE, TaskMemory, TrajectoryDataset, make_batches
from .model import loss_continuous, loss_discrete
from .registry import CopyRegistry, TaskState, fit_latent_stats

KINDS = ("action", "latent", "hybrid", "replay_kl")


class RoutingError(ValueError):
    pass


@dataclass(frozen=True)
class AffinityScore:
    kind: str
    source_task: str
    value: float


@dataclass
class RoutingDecision:
    mode: str  # reuse | spawn | fallback
    chosen_source: str
    copy_id: int | None
    scores: list[AffinityScore]
    threshold: float
    alpha: float | None = None
    components: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        return {
            "mode": self.mode,
            "chosen_source": self.chosen_source,
            "copy_id": self.copy_id,
            "kind": self.scores[0].kind,
            "scores": {s.source_task: s.value for s in self.scores},
            "threshold": self.threshold,
            "alpha": self.alpha,
            "components": self.components,
        }


# ---------------------------------------------------------------------------
# action affinity


def routing_batches(dataset: TrajectoryDataset, context_length: int, n_batches: int, batch_size: int, seed: int):
    """Fixed scoring batches, normalized with the incoming task's own statistics."""
    mean, std = dataset.observation_stats()
    normed = dataset.normalized(mean, std)
    out = []
    for batch in make_batches(normed, context_length, batch_size, seed):
        out.append(batch)
        if len(out) == n_batches:
            break
    return out


@torch.no_grad()
def action_affinity(registry: CopyRegistry, source_task: str, batches, new_spec) -> float:
    """Teacher-forced loss of the source subnetwork on the new task's batches."""
    model = registry.model_for(source_task)
    if model.cfg.discrete != (new_spec.control_kind == DISCRETE):
        raise RoutingError(f"control kind of {new_spec.task_id!r} does not match source {source_task!r}")
    was_training = model.training
    model.eval()
    model.activate(None if registry.dense else source_task)
    total, count = 0.0, 0
    for batch in batches:
        out = model.forward_batch(batch)
        n = int(batch.valid_mask.sum())
        if model.cfg.discrete:
            loss = loss_discrete(out, batch)
        else:
            loss = loss_continuous(out, batch, new_spec.action_mask)
        total += float(loss) * n
        count += n
    model.train(was_training)
    return total / count


# ---------------------------------------------------------------------------
# latent affinity


def kl_diag_gaussian(mu_a, var_a, mu_b, var_b) -> float:
    """KL(N_a || N_b) for diagonal covariances."""
    mu_a, var_a, mu_b, var_b = (np.asarray(x, dtype=np.float64) for x in (mu_a, var_a, mu_b, var_b))
    return float(0.5 * np.sum(var_a / var_b + (mu_b - mu_a) ** 2 / var_b - 1.0 + np.log(var_b / var_a)))


def symmetric_kl(stats_a, stats_b) -> float:
    (mu_a, var_a), (mu_b, var_b) = stats_a, stats_b
    return 0.5 * (kl_diag_gaussian(mu_a, var_a, mu_b, var_b) + kl_diag_gaussian(mu_b, var_b, mu_a, var_a))


def latent_affinity(registry: CopyRegistry, source_task: str, new_memory: TaskMemory, new_state: TaskState) -> float:
    if source_task not in registry.latent_stats:
        raise RoutingError(f"no latent statistics stored for {source_task!r}")
    model = registry.model_for(source_task)
    projected = fit_latent_stats(model, new_memory, None if registry.dense else source_task, new_state)
    return symmetric_kl(projected, registry.latent_stats[source_task])


# ---------------------------------------------------------------------------
# hybrid and replay-memory KL


def minmax(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    span = v.max() - v.min()
    if span == 0:
        return np.zeros_like(v)
    return (v - v.min()) / span


def hybrid_affinity(action_scores, latent_scores, alpha: float) -> list[float]:
    if len(action_scores) == 0 or len(action_scores) != len(latent_scores):
        raise RoutingError("hybrid affinity needs two non-empty aligned score lists")
    if not 0.0 <= alpha <= 1.0:
        raise RoutingError("alpha must lie in [0, 1]")
    a = np.asarray(action_scores, dtype=np.float64)
    l = np.asarray(latent_scores, dtype=np.float64)
    if len(a) >= 2:
        a, l = minmax(a), minmax(l)
    return (alpha * a + (1.0 - alpha) * l).tolist()


def _log_softmax(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def replay_kl(memory_t: TaskMemory, memory_s: TaskMemory) -> float:
    """Mean KL(softmax(x_s) || softmax(x_t)) over the first min(|M_t|, |M_s|) paired samples."""
    k = min(len(memory_t), len(memory_s))
    if k == 0:
        raise RoutingError("replay_kl needs non-empty memories")
    log_t = _log_softmax(memory_t.observations[:k].reshape(k, -1))
    log_s = _log_softmax(memory_s.observations[:k].reshape(k, -1))
    return float(np.mean(np.sum(np.exp(log_s) * (log_s - log_t), axis=-1)))


# ---------------------------------------------------------------------------
# decision


def route(registry: CopyRegistry, scores: list[AffinityScore], tau: float) -> RoutingDecision:
    """argmin over candidates (first listed wins ties), then threshold, budget and fallback."""
    if not scores:
        raise RoutingError("routing needs at least one candidate score")
    best = min(range(len(scores)), key=lambda i: (scores[i].value, i))
    s_star = scores[best].source_task
    if scores[best].value <= tau:
        return RoutingDecision("reuse", s_star, registry.assignment[s_star], list(scores), tau)
    if registry.budget_left():
        return RoutingDecision("spawn", s_star, None, list(scores), tau)
    return RoutingDecision("fallback", s_star, registry.assignment[s_star], list(scores), tau)
