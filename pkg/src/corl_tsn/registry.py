"""Model copies, task-to-copy assignment and per-task inference state."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import TaskMemory, TaskSpec, read_array, write_array
from .model import DecisionTransformer, DtConfig, build_model, load_model, rollout, save_model

VARIANCE_FLOOR = 1e-6


class RegistryError(RuntimeError):
    pass


@dataclass
class TaskState:
    obs_mean: np.ndarray
    obs_std: np.ndarray
    native_action_dim: int
    action_mask: np.ndarray
    target_return: float
    control_kind: str

    @classmethod
    def from_spec(cls, spec: TaskSpec, obs_mean, obs_std) -> "TaskState":
        return cls(
            obs_mean=np.asarray(obs_mean, dtype=np.float64),
            obs_std=np.asarray(obs_std, dtype=np.float64),
            native_action_dim=spec.native_action_dim,
            action_mask=spec.action_mask,
            target_return=float(spec.target_return),
            control_kind=spec.control_kind,
        )

    def normalize(self, obs: np.ndarray) -> np.ndarray:
        return ((np.asarray(obs) - self.obs_mean) / self.obs_std).astype(np.float32)


@dataclass
class InferenceContext:
    """A copy with one task's mask and normalization switched on."""

    model: DecisionTransformer
    task_id: str
    copy_id: int
    state: TaskState

    def rollout(self, env, episode: int, target_return: float | None = None, native_action_dim: int | None = None) -> float:
        spec = env.task_spec
        return rollout(
            self.model,
            env,
            self.state.target_return if target_return is None else target_return,
            spec.max_horizon,
            episode=episode,
            obs_mean=self.state.obs_mean,
            obs_std=self.state.obs_std,
            native_action_dim=native_action_dim or self.state.native_action_dim,
        )

    @torch.no_grad()
    def predict(self, batch):
        return self.model.forward_batch(batch)


class CopyRegistry:
    def __init__(self, template: DtConfig, max_copies: int | None = None, dense: bool = False):
        if max_copies is not None and max_copies < 1:
            raise ValueError("max_copies must be positive")
        self.template = template
        self.max_copies = max_copies
        self.dense = dense
        self.copies: dict[int, DecisionTransformer] = {}
        self.assignment: dict[str, int] = {}
        self.task_order: list[str] = []
        self.task_state: dict[str, TaskState] = {}
        self.latent_stats: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.memories: dict[str, TaskMemory] = {}

    @property
    def n_copies(self) -> int:
        return len(self.copies)

    def budget_left(self) -> bool:
        return self.max_copies is None or self.n_copies < self.max_copies

    def copy_tasks(self, copy_id: int) -> list[str]:
        return [t for t in self.task_order if self.assignment[t] == copy_id]

    def spawn_copy(self, seed: int) -> int:
        if not self.budget_left():
            raise RegistryError(f"copy budget of {self.max_copies} exhausted")
        copy_id = self.n_copies
        self.copies[copy_id] = build_model(self.template, seed)
        return copy_id

    def assign(self, task_id: str, copy_id: int) -> None:
        if task_id in self.assignment:
            raise RegistryError(f"task {task_id!r} is already assigned to copy {self.assignment[task_id]}")
        if copy_id not in self.copies:
            raise RegistryError(f"unknown copy {copy_id}")
        self.assignment[task_id] = copy_id
        self.task_order.append(task_id)

    def model_for(self, task_id: str) -> DecisionTransformer:
        if task_id not in self.assignment:
            raise RegistryError(f"unknown task {task_id!r}")
        return self.copies[self.assignment[task_id]]

    def activate_for_inference(self, task_id: str) -> InferenceContext:
        if task_id not in self.assignment or task_id not in self.task_state:
            raise RegistryError(f"task {task_id!r} has not been trained")
        model = self.model_for(task_id)
        model.activate(None if self.dense else task_id)
        model.eval()
        return InferenceContext(model, task_id, self.assignment[task_id], self.task_state[task_id])

    # -- serialization -----------------------------------------------------

    def save(self, path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        for cid, model in self.copies.items():
            save_model(model, path / f"copy_{cid}")
        arrays = path / "arrays"
        arrays.mkdir(exist_ok=True)
        tasks = {}
        for t in self.task_order:
            st = self.task_state.get(t)
            entry = {"copy": self.assignment[t]}
            if st is not None:
                write_array(arrays / f"{t}.obs_mean.bin", st.obs_mean.astype(np.float64))
                write_array(arrays / f"{t}.obs_std.bin", st.obs_std.astype(np.float64))
                entry.update(
                    native_action_dim=st.native_action_dim,
                    action_mask=st.action_mask.tolist(),
                    target_return=st.target_return,
                    control_kind=st.control_kind,
                )
            if t in self.latent_stats:
                mu, var = self.latent_stats[t]
                write_array(arrays / f"{t}.latent_mu.bin", mu.astype(np.float64))
                write_array(arrays / f"{t}.latent_var.bin", var.astype(np.float64))
                entry["latent_stats"] = True
            if t in self.memories:
                write_array(arrays / f"{t}.memory.bin", self.memories[t].observations.astype(np.float32))
                entry["memory"] = True
            tasks[t] = entry
        manifest = {
            "template": self.template.to_dict(),
            "max_copies": self.max_copies,
            "dense": self.dense,
            "copies": sorted(self.copies),
            "task_order": self.task_order,
            "tasks": tasks,
        }
        (path / "registry.json").write_text(json.dumps(manifest, indent=1))
        return path

    @classmethod
    def load(cls, path) -> "CopyRegistry":
        path = Path(path)
        manifest = json.loads((path / "registry.json").read_text())
        reg = cls(DtConfig.from_dict(manifest["template"]), manifest["max_copies"], manifest["dense"])
        for cid in manifest["copies"]:
            reg.copies[cid] = load_model(path / f"copy_{cid}")
        arrays = path / "arrays"
        for t in manifest["task_order"]:
            entry = manifest["tasks"][t]
            reg.assign(t, entry["copy"])
            if "control_kind" in entry:
                reg.task_state[t] = TaskState(
                    obs_mean=read_array(arrays / f"{t}.obs_mean.bin"),
                    obs_std=read_array(arrays / f"{t}.obs_std.bin"),
                    native_action_dim=entry["native_action_dim"],
                    action_mask=np.array(entry["action_mask"], dtype=np.float32),
                    target_return=entry["target_return"],
                    control_kind=entry["control_kind"],
                )
            if entry.get("latent_stats"):
                reg.latent_stats[t] = (read_array(arrays / f"{t}.latent_mu.bin"), read_array(arrays / f"{t}.latent_var.bin"))
            if entry.get("memory"):
                reg.memories[t] = TaskMemory(t, read_array(arrays / f"{t}.memory.bin"))
        return reg


@torch.no_grad()
def encoder_latents(model: DecisionTransformer, observations: np.ndarray, task_id: str | None) -> np.ndarray:
    """Observation-encoder outputs for already-normalized observations."""
    was_training = model.training
    model.eval()
    model.activate(task_id)
    z = model.encode(torch.as_tensor(observations, dtype=model.cfg.torch_dtype))
    model.train(was_training)
    return z.double().numpy()


def fit_latent_stats(
    model: DecisionTransformer,
    memory: TaskMemory,
    task_id: str | None,
    state: TaskState,
    floor: float = VARIANCE_FLOOR,
) -> tuple[np.ndarray, np.ndarray]:
    """Diagonal-Gaussian fit (mean, floored variance) of latents over a memory."""
    z = encoder_latents(model, state.normalize(memory.observations), task_id)
    return z.mean(axis=0), np.maximum(z.var(axis=0), floor)
