"""Offline trajectory data model, on-disk container and mini-batch assembly.

A dataset directory holds ``task_spec.txt`` plus one flat binary file per
field. Each binary file starts with a single ASCII header line
``<dtype> <dim0> [<dim1> ...]`` followed by the raw little-endian payload.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

DISCRETE = "discrete"
CONTINUOUS = "continuous"

_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8"), "i8": np.dtype("<i8"), "u1": np.dtype("u1")}
_FIELDS = ("observations", "actions", "rewards", "timesteps", "offsets")


class DatasetError(ValueError):
    """Malformed container or trajectory invariant violation."""


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    control_kind: str
    native_action_dim: int
    native_obs_dim: int
    obs_dim: int
    action_dim: int
    target_return: float
    max_horizon: int
    env: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.control_kind not in (DISCRETE, CONTINUOUS):
            raise DatasetError(f"unknown control_kind {self.control_kind!r}")
        if min(self.native_action_dim, self.native_obs_dim, self.obs_dim, self.action_dim, self.max_horizon) < 1:
            raise DatasetError("task dimensions must be positive")
        if self.native_obs_dim > self.obs_dim or self.native_action_dim > self.action_dim:
            raise DatasetError("native dims exceed shared dims")

    @property
    def action_mask(self) -> np.ndarray:
        """Binary mask over the shared action slot (all ones for discrete tasks)."""
        m = np.zeros(self.action_dim, dtype=np.float32)
        if self.control_kind == DISCRETE:
            m[:] = 1.0
        else:
            m[: self.native_action_dim] = 1.0
        return m

    def to_text(self) -> str:
        lines = [
            f"task_id = {self.task_id}",
            f"control_kind = {self.control_kind}",
            f"native_action_dim = {self.native_action_dim}",
            f"native_obs_dim = {self.native_obs_dim}",
            f"obs_dim = {self.obs_dim}",
            f"action_dim = {self.action_dim}",
            f"target_return = {self.target_return!r}",
            f"max_horizon = {self.max_horizon}",
        ]
        lines += [f"env.{k} = {v!r}" for k, v in sorted(self.env.items())]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TaskSpec":
        kv, env = {}, {}
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DatasetError(f"bad task_spec line: {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key.startswith("env."):
                env[key[4:]] = _parse_scalar(value)
            else:
                kv[key] = value
        try:
            return cls(
                task_id=kv["task_id"],
                control_kind=kv["control_kind"],
                native_action_dim=int(kv["native_action_dim"]),
                native_obs_dim=int(kv["native_obs_dim"]),
                obs_dim=int(kv["obs_dim"]),
                action_dim=int(kv["action_dim"]),
                target_return=float(kv["target_return"]),
                max_horizon=int(kv["max_horizon"]),
                env=env,
            )
        except (KeyError, ValueError) as exc:
            raise DatasetError(f"invalid task_spec: {exc}") from exc


def _parse_scalar(value: str):
    for conv in (int, float):
        try:
            return conv(value)
        except ValueError:
            pass
    return value.strip("'\"")


@dataclass(frozen=True)
class Trajectory:
    observations: np.ndarray  # (T, obs_dim) float32
    actions: np.ndarray  # (T,) int64 or (T, action_dim) float32
    rewards: np.ndarray  # (T,) float32
    timesteps: np.ndarray  # (T,) int64
    task_id: str

    def __len__(self) -> int:
        return len(self.rewards)


def returns_to_go(rewards: np.ndarray) -> np.ndarray:
    """Undiscounted suffix sums, accumulated in float64."""
    r = np.asarray(rewards, dtype=np.float64)
    return np.cumsum(r[::-1])[::-1].copy()


def check_trajectory(traj: Trajectory, spec: TaskSpec) -> None:
    n = len(traj.rewards)
    if n < 1:
        raise DatasetError("empty trajectory")
    if not (len(traj.observations) == len(traj.actions) == len(traj.timesteps) == n):
        raise DatasetError("trajectory fields have unequal lengths")
    if traj.observations.shape[1:] != (spec.obs_dim,):
        raise DatasetError(f"observation dim {traj.observations.shape[1:]} != ({spec.obs_dim},)")
    if not np.array_equal(traj.timesteps, np.arange(n)):
        raise DatasetError("timesteps must be 0, 1, 2, ...")
    if traj.task_id != spec.task_id:
        raise DatasetError(f"trajectory task {traj.task_id!r} != dataset task {spec.task_id!r}")
    if spec.control_kind == DISCRETE:
        if traj.actions.ndim != 1 or traj.actions.min() < 0 or traj.actions.max() >= spec.action_dim:
            raise DatasetError("discrete actions out of range")
    else:
        if traj.actions.shape[1:] != (spec.action_dim,):
            raise DatasetError("continuous actions must be padded to the shared action dim")
        if np.any(traj.actions[:, spec.native_action_dim:] != 0):
            raise DatasetError("padded action coordinates must be zero")


class TrajectoryDataset:
    """All trajectories of one task plus their returns-to-go."""

    def __init__(self, trajectories: list[Trajectory], task_spec: TaskSpec):
        if not trajectories:
            raise DatasetError("empty dataset")
        for traj in trajectories:
            check_trajectory(traj, task_spec)
        self.trajectories = list(trajectories)
        self.task_spec = task_spec
        self.returns_to_go = [returns_to_go(t.rewards) for t in self.trajectories]

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def task_id(self) -> str:
        return self.task_spec.task_id

    @property
    def n_steps(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def episode_returns(self) -> np.ndarray:
        return np.array([rtg[0] for rtg in self.returns_to_go])

    def all_observations(self) -> np.ndarray:
        return np.concatenate([t.observations for t in self.trajectories])

    def observation_stats(self, floor: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
        obs = self.all_observations().astype(np.float64)
        return obs.mean(axis=0), np.maximum(obs.std(axis=0), floor)

    def normalized(self, mean: np.ndarray, std: np.ndarray) -> "TrajectoryDataset":
        trajs = [
            Trajectory(
                observations=((t.observations - mean) / std).astype(np.float32),
                actions=t.actions,
                rewards=t.rewards,
                timesteps=t.timesteps,
                task_id=t.task_id,
            )
            for t in self.trajectories
        ]
        return TrajectoryDataset(trajs, self.task_spec)

    def subset(self, indices) -> "TrajectoryDataset":
        return TrajectoryDataset([self.trajectories[i] for i in indices], self.task_spec)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TrajectoryDataset) or self.task_spec != other.task_spec:
            return False
        if len(self) != len(other):
            return False
        return all(
            np.array_equal(a.observations, b.observations)
            and np.array_equal(a.actions, b.actions)
            and np.array_equal(a.rewards, b.rewards)
            and np.array_equal(a.timesteps, b.timesteps)
            and a.observations.dtype == b.observations.dtype
            and a.actions.dtype == b.actions.dtype
            for a, b in zip(self.trajectories, other.trajectories)
        )


# ---------------------------------------------------------------------------
# container IO


def write_array(path: Path, arr: np.ndarray) -> None:
    code = {np.float32: "f4", np.float64: "f8", np.int64: "i8", np.uint8: "u1"}.get(arr.dtype.type)
    if code is None:
        raise DatasetError(f"unsupported dtype {arr.dtype}")
    header = " ".join([code] + [str(d) for d in arr.shape]) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def read_array(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii", errors="replace").split()
        payload = fh.read()
    if not header or header[0] not in _DTYPES:
        raise DatasetError(f"{path}: bad header")
    try:
        shape = tuple(int(d) for d in header[1:])
    except ValueError as exc:
        raise DatasetError(f"{path}: bad shape in header") from exc
    dtype = _DTYPES[header[0]]
    if len(payload) != dtype.itemsize * math.prod(shape):
        raise DatasetError(f"{path}: payload size does not match header shape {shape}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="), copy=True)


def save_dataset(dataset: TrajectoryDataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "task_spec.txt").write_text(dataset.task_spec.to_text())
    trajs = dataset.trajectories
    offsets = np.cumsum([0] + [len(t) for t in trajs]).astype(np.int64)
    write_array(path / "observations.bin", np.concatenate([t.observations for t in trajs]).astype(np.float32))
    act = np.concatenate([t.actions for t in trajs])
    write_array(path / "actions.bin", act.astype(np.int64 if dataset.task_spec.control_kind == DISCRETE else np.float32))
    write_array(path / "rewards.bin", np.concatenate([t.rewards for t in trajs]).astype(np.float32))
    write_array(path / "timesteps.bin", np.concatenate([t.timesteps for t in trajs]).astype(np.int64))
    write_array(path / "offsets.bin", offsets)
    return path


def load_dataset(path) -> TrajectoryDataset:
    path = Path(path)
    spec_file = path / "task_spec.txt"
    if not spec_file.is_file():
        raise DatasetError(f"{path}: missing task_spec.txt")
    spec = TaskSpec.from_text(spec_file.read_text())
    arrays = {}
    for name in _FIELDS:
        f = path / f"{name}.bin"
        if not f.is_file():
            raise DatasetError(f"{path}: missing {f.name}")
        arrays[name] = read_array(f)
    offsets = arrays["offsets"]
    total = len(arrays["rewards"])
    if offsets.ndim != 1 or len(offsets) < 2 or offsets[0] != 0 or offsets[-1] != total or np.any(np.diff(offsets) < 0):
        raise DatasetError(f"{path}: inconsistent trajectory offsets")
    for name in ("observations", "actions", "timesteps"):
        if len(arrays[name]) != total:
            raise DatasetError(f"{path}: {name} length {len(arrays[name])} != rewards length {total}")
    trajs = []
    for lo, hi in zip(offsets[:-1], offsets[1:]):
        trajs.append(
            Trajectory(
                observations=arrays["observations"][lo:hi],
                actions=arrays["actions"][lo:hi],
                rewards=arrays["rewards"][lo:hi],
                timesteps=arrays["timesteps"][lo:hi],
                task_id=spec.task_id,
            )
        )
    return TrajectoryDataset(trajs, spec)


# ---------------------------------------------------------------------------
# shared interface padding


def pad_vector(raw, size: int) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float32).reshape(-1)
    if raw.size > size:
        raise DatasetError(f"vector of length {raw.size} exceeds shared dimension {size}")
    out = np.zeros(size, dtype=np.float32)
    out[: raw.size] = raw
    return out


def pad_to_shared_interface(raw_obs, raw_action, spec: TaskSpec, d_obs: int | None = None, d_max: int | None = None):
    """Zero-pad observation and action to the shared dims (trailing coordinates)."""
    d_obs = spec.obs_dim if d_obs is None else d_obs
    d_max = spec.action_dim if d_max is None else d_max
    return pad_vector(raw_obs, d_obs), pad_vector(raw_action, d_max)


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    observations: np.ndarray  # (B, L, obs_dim) float32
    actions: np.ndarray  # (B, L) int64 or (B, L, action_dim) float32
    returns_to_go: np.ndarray  # (B, L) float32
    timesteps: np.ndarray  # (B, L) int64
    valid_mask: np.ndarray  # (B, L) float32, 1 on real steps
    action_mask: np.ndarray | None = None  # (B, action_dim), per-row action-dim mask

    @property
    def batch_size(self) -> int:
        return self.observations.shape[0]

    @property
    def context_length(self) -> int:
        return self.observations.shape[1]


def window_index(dataset: TrajectoryDataset, context_length: int) -> np.ndarray:
    """All (trajectory, start) pairs; windows never start later than len - L."""
    pairs = [
        (i, s)
        for i, t in enumerate(dataset.trajectories)
        for s in range(max(1, len(t) - context_length + 1))
    ]
    return np.array(pairs, dtype=np.int64)


def collate(items, context_length: int) -> Batch:
    """``items`` is a sequence of (dataset, traj_index, start)."""
    L = context_length
    first = items[0][0].task_spec
    B = len(items)
    obs = np.zeros((B, L, first.obs_dim), dtype=np.float32)
    if first.control_kind == DISCRETE:
        act = np.zeros((B, L), dtype=np.int64)
    else:
        act = np.zeros((B, L, first.action_dim), dtype=np.float32)
    rtg = np.zeros((B, L), dtype=np.float32)
    ts = np.zeros((B, L), dtype=np.int64)
    valid = np.zeros((B, L), dtype=np.float32)
    amask = np.zeros((B, first.action_dim), dtype=np.float32)
    for b, (ds, i, s) in enumerate(items):
        traj = ds.trajectories[i]
        n = min(L, len(traj) - s)
        obs[b, :n] = traj.observations[s : s + n]
        act[b, :n] = traj.actions[s : s + n]
        rtg[b, :n] = ds.returns_to_go[i][s : s + n]
        ts[b, :n] = traj.timesteps[s : s + n]
        valid[b, :n] = 1.0
        amask[b] = ds.task_spec.action_mask
    return Batch(obs, act, rtg, ts, valid, amask)


def make_batches(dataset: TrajectoryDataset, context_length: int, batch_size: int, seed: int) -> Iterator[Batch]:
    """One pass over every window in a seeded random order."""
    if context_length < 1 or batch_size < 1:
        raise ValueError("context_length and batch_size must be >= 1")
    if len(dataset) == 0:
        raise DatasetError("empty dataset")
    index = window_index(dataset, context_length)
    order = np.random.default_rng(seed).permutation(len(index))
    for lo in range(0, len(order), batch_size):
        chunk = index[order[lo : lo + batch_size]]
        yield collate([(dataset, int(i), int(s)) for i, s in chunk], context_length)


def make_pooled_batches(datasets: list[TrajectoryDataset], context_length: int, batch_size: int, seed: int) -> Iterator[Batch]:
    """One pass over the union of all windows of several datasets."""
    items = [(ds, int(i), int(s)) for ds in datasets for i, s in window_index(ds, context_length)]
    if not items:
        raise DatasetError("empty dataset")
    order = np.random.default_rng(seed).permutation(len(items))
    for lo in range(0, len(order), batch_size):
        yield collate([items[k] for k in order[lo : lo + batch_size]], context_length)


def make_mixed_batches(
    current: TrajectoryDataset,
    past: list[TrajectoryDataset],
    context_length: int,
    batch_size: int,
    seed: int,
    replay_mix: float,
) -> Iterator[Batch]:
    """Batches whose rows come from past data with probability ``replay_mix``.

    The pass length is set by the current dataset; past windows are drawn
    uniformly over the pooled past (trajectory, start) pairs.
    """
    if not past:
        yield from make_batches(current, context_length, batch_size, seed)
        return
    rng = np.random.default_rng(seed)
    cur_index = window_index(current, context_length)
    past_index = [(ds, i, s) for ds in past for i, s in window_index(ds, context_length)]
    order = rng.permutation(len(cur_index))
    for lo in range(0, len(order), batch_size):
        chunk = cur_index[order[lo : lo + batch_size]]
        items = []
        for i, s in chunk:
            if rng.random() < replay_mix:
                items.append(past_index[rng.integers(len(past_index))])
            else:
                items.append((current, int(i), int(s)))
        yield collate(items, context_length)


@dataclass(frozen=True)
class TaskMemory:
    """Observation samples kept for routing only."""

    task_id: str
    observations: np.ndarray  # (K, obs_dim)

    def __len__(self) -> int:
        return len(self.observations)


def sample_task_memory(dataset: TrajectoryDataset, size: int, seed: int) -> TaskMemory:
    if size <= 0:
        raise ValueError("memory size must be positive")
    obs = dataset.all_observations()
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(obs), size=size, replace=len(obs) < size)
    return TaskMemory(dataset.task_id, obs[idx].copy())


# ---------------------------------------------------------------------------
# replay validation


@dataclass
class ValidationReport:
    task_id: str
    gaps: np.ndarray
    tolerance: float

    @property
    def flagged(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.gaps > self.tolerance)]

    @property
    def ok(self) -> bool:
        return not self.flagged

    def summary(self) -> str:
        status = "ok" if self.ok else f"{len(self.flagged)} mismatched"
        return f"{self.task_id}: {len(self.gaps)} trajectories, max gap {self.gaps.max():.3g}, {status}"


def validate_by_replay(dataset: TrajectoryDataset, env, tolerance: float = 1e-6) -> ValidationReport:
    """Replay recorded actions from each trajectory's first observation."""
    spec = dataset.task_spec
    if env.task_spec.task_id != spec.task_id or env.task_spec.control_kind != spec.control_kind:
        raise DatasetError(f"environment {env.task_spec.task_id!r} does not match dataset {spec.task_id!r}")
    gaps = np.zeros(len(dataset))
    for i, traj in enumerate(dataset.trajectories):
        env.reset_to_observation(traj.observations[0][: spec.native_obs_dim])
        total = 0.0
        for a in traj.actions:
            native = a if spec.control_kind == DISCRETE else a[: spec.native_action_dim]
            _, r, done = env.step(native)
            total += float(np.float32(r))
            if done:
                break
        gaps[i] = abs(total - dataset.returns_to_go[i][0])
    return ValidationReport(spec.task_id, gaps, tolerance)
