"""Task-specific sparse masks over dense weight tensors.

Each converted tensor keeps its dense weights ``W``, a score tensor ``S`` of
the same shape and one binary mask per task. Occupancy is the OR of the
masks recorded in this copy; occupied weights are frozen for later tasks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F


class CapacityExhausted(RuntimeError):
    """No feasible weights left for a new task mask."""


@dataclass(frozen=True)
class KeepRatioSchedule:
    kind: str = "constant"
    rho: float = 0.5
    total_tasks: int | None = None

    def __post_init__(self):
        if self.kind not in ("constant", "equal_remaining"):
            raise ValueError(f"unknown keep-ratio schedule {self.kind!r}")
        if self.kind == "constant" and not 0.0 < self.rho <= 1.0:
            raise ValueError("rho must lie in (0, 1]")
        if self.kind == "equal_remaining" and (self.total_tasks is None or self.total_tasks < 1):
            raise ValueError("equal_remaining needs total_tasks >= 1")

    def rho_for(self, task_index: int) -> float:
        """Keep ratio for the 1-based task index."""
        if self.kind == "constant":
            return self.rho
        if not 1 <= task_index <= self.total_tasks:
            raise ValueError(f"task index {task_index} outside 1..{self.total_tasks}")
        return 1.0 / (self.total_tasks - task_index + 1)


@dataclass(frozen=True)
class WarmStartConfig:
    strength: float = 1.0
    noise_scale: float = 0.01

    def __post_init__(self):
        if self.strength <= 0 or self.noise_scale <= 0:
            raise ValueError("warm-start strength and noise scale must be positive")


class TsnLayerState(nn.Module):
    """Dense tensor + scores + per-task masks for one converted parameter."""

    def __init__(self, weight: torch.Tensor):
        super().__init__()
        self.weight = nn.Parameter(weight.detach().clone())
        self.scores = nn.Parameter(torch.zeros_like(self.weight))
        self.task_masks: dict[str, torch.Tensor] = {}
        self.active_task: str | None = None

    @property
    def shape(self) -> torch.Size:
        return self.weight.shape

    def occupancy(self, exclude: str | None = None) -> torch.Tensor:
        occ = torch.zeros(self.shape, dtype=torch.bool)
        for task, mask in self.task_masks.items():
            if task != exclude:
                occ |= mask
        return occ

    def effective(self) -> torch.Tensor:
        """Weights used in forward for the active task (dense when none is set)."""
        if self.active_task is None:
            return self.weight
        mask = self.task_masks.get(self.active_task)
        if mask is None:
            raise KeyError(f"no mask for task {self.active_task!r}")
        w = torch.where(mask, self.weight, torch.zeros((), dtype=self.weight.dtype))
        if self.training and self.scores.requires_grad:
            # straight-through: value unchanged, d/dS = dL/dW_eff * W
            w = w + (self.scores - self.scores.detach()) * self.weight.detach()
        return w


def init_scores(state: TsnLayerState, generator: torch.Generator, high: float = 0.01) -> None:
    with torch.no_grad():
        state.scores.copy_(torch.rand(state.shape, generator=generator, dtype=state.scores.dtype) * high)


def feasibility(state: TsnLayerState, reuse_enabled: bool, exclude: str | None = None) -> torch.Tensor:
    if reuse_enabled:
        return torch.ones(state.shape, dtype=torch.bool)
    return ~state.occupancy(exclude=exclude)


def mask_count(rho: float, n_feasible: int) -> int:
    # round away float noise such as 0.1 * 30 = 3.0000000000000004 before the ceiling
    return math.ceil(round(rho * n_feasible, 9))


def topk_mask(scores: torch.Tensor, rho: float, feasible: torch.Tensor) -> torch.Tensor:
    """Largest-|score| selection inside ``feasible``; ties go to the lowest flat index."""
    if not 0.0 < rho <= 1.0:
        raise ValueError("rho must lie in (0, 1]")
    n_feasible = int(feasible.sum())
    if n_feasible == 0:
        raise CapacityExhausted("feasible set is empty")
    k = mask_count(rho, n_feasible)
    mag = scores.detach().abs().flatten().to(torch.float64)
    mag = torch.where(feasible.flatten(), mag, torch.full_like(mag, -math.inf))
    order = torch.argsort(mag, descending=True, stable=True)
    flat = torch.zeros(mag.numel(), dtype=torch.bool)
    flat[order[:k]] = True
    return flat.reshape(scores.shape)


def allocate_mask(state: TsnLayerState, task_id: str, rho: float, feasible: torch.Tensor) -> torch.Tensor:
    """Select and record the mask of ``task_id`` (replaces an earlier draft for the same task)."""
    mask = topk_mask(state.scores, rho, feasible)
    state.task_masks[task_id] = mask
    return mask


def effective_weights(state: TsnLayerState, task_id: str) -> torch.Tensor:
    mask = state.task_masks.get(task_id)
    if mask is None:
        raise KeyError(f"no mask for task {task_id!r}")
    return torch.where(mask, state.weight.detach(), torch.zeros((), dtype=state.weight.dtype))


def protect_gradients(state: TsnLayerState, grad: torch.Tensor, task_id: str | None = None) -> torch.Tensor:
    """Zero the gradient on weights occupied by tasks other than ``task_id``."""
    if grad.shape != state.shape:
        raise ValueError(f"gradient shape {tuple(grad.shape)} != weight shape {tuple(state.shape)}")
    protected = state.occupancy(exclude=task_id)
    return torch.where(protected, torch.zeros((), dtype=grad.dtype), grad)


def restore_protected(state: TsnLayerState, before: torch.Tensor, task_id: str | None = None) -> None:
    protected = state.occupancy(exclude=task_id)
    with torch.no_grad():
        state.weight.copy_(torch.where(protected, before, state.weight))


def warm_start_scores(
    state: TsnLayerState,
    source_mask: torch.Tensor,
    cfg: WarmStartConfig,
    generator: torch.Generator,
) -> None:
    if source_mask.shape != state.shape:
        raise ValueError("source mask shape mismatch")
    with torch.no_grad():
        noise = torch.rand(state.shape, generator=generator, dtype=state.scores.dtype) * cfg.noise_scale
        state.scores.copy_(cfg.strength * source_mask.to(state.scores.dtype) + noise)


class TsnLinear(nn.Module):
    """Linear layer whose weight (and optionally bias) carry task masks."""

    def __init__(self, in_features: int, out_features: int, bias: bool = True, tsn_bias: bool = True):
        super().__init__()
        ref = nn.Linear(in_features, out_features, bias=bias)
        self.in_features = in_features
        self.out_features = out_features
        self.w = TsnLayerState(ref.weight.data)
        self.b = None
        self.dense_bias = None
        if bias:
            if tsn_bias:
                self.b = TsnLayerState(ref.bias.data)
            else:
                self.dense_bias = nn.Parameter(ref.bias.data.clone())

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        bias = self.b.effective() if self.b is not None else self.dense_bias
        return F.linear(x, self.w.effective(), bias)


def tsn_states(module: nn.Module) -> dict[str, TsnLayerState]:
    return {name: m for name, m in module.named_modules() if isinstance(m, TsnLayerState)}
