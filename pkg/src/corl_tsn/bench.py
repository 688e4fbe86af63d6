"""Desk-scale benchmark families with scripted experts.

gridkey: a walled N x N grid with a fixed goal and four moves. A fraction
theta of the cells remaps the action meanings through a fixed derangement,
so theta dials how far a task's expert policy is from the theta=0 task on
the same layout.

pointreach: a point mass in [-1, 1]^d driven by velocity actions through a
per-task sign pattern, with reward -||pos - goal|| every step. Dynamics run
in float32 so replaying stored float32 actions is bit-exact.
"""
from __future__ import annotations

import configparser
import dataclasses
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import CONTINUOUS, DISCRETE, TaskSpec, Trajectory, TrajectoryDataset, pad_vector

MOVES = np.array([(-1, 0), (0, 1), (1, 0), (0, -1)])  # up, right, down, left


class BenchmarkError(ValueError):
    pass


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng([int(k) & 0xFFFFFFFF for k in key])


# ---------------------------------------------------------------------------
# gridkey


@dataclass(frozen=True)
class GridLayout:
    size: int
    walls: frozenset
    goal: tuple[int, int]

    @property
    def free_cells(self) -> list[tuple[int, int]]:
        return [(r, c) for r in range(self.size) for c in range(self.size) if (r, c) not in self.walls]

    def blocked(self, cell) -> bool:
        r, c = cell
        return not (0 <= r < self.size and 0 <= c < self.size) or (r, c) in self.walls

    def distances(self) -> dict:
        """BFS distance from every reachable cell to the goal."""
        dist = {self.goal: 0}
        queue = deque([self.goal])
        while queue:
            cell = queue.popleft()
            for dr, dc in MOVES:
                nxt = (cell[0] + dr, cell[1] + dc)
                if not self.blocked(nxt) and nxt not in dist:
                    dist[nxt] = dist[cell] + 1
                    queue.append(nxt)
        return dist


def make_layout(size: int, n_walls: int, layout_seed: int) -> GridLayout:
    rng = _rng(layout_seed, 11)
    cells = [(r, c) for r in range(size) for c in range(size)]
    for _ in range(1000):
        pick = rng.permutation(len(cells))
        goal = cells[pick[0]]
        walls = frozenset(cells[i] for i in pick[1 : 1 + n_walls])
        layout = GridLayout(size, walls, goal)
        if len(layout.distances()) == len(layout.free_cells):
            return layout
    raise BenchmarkError(f"no connected layout for seed {layout_seed}")


def derangement(n: int, seed: int) -> np.ndarray:
    rng = _rng(seed, 13)
    while True:
        p = rng.permutation(n)
        if np.all(p != np.arange(n)):
            return p


class GridKeyEnv:
    """Deterministic grid task; see module docstring."""

    def __init__(self, task_spec: TaskSpec):
        p = task_spec.env
        self.task_spec = task_spec
        self.size = int(p["grid_size"])
        self.theta = float(p["theta"])
        if not 0.0 <= self.theta <= 1.0:
            raise BenchmarkError(f"theta must lie in [0, 1], got {self.theta}")
        self.layout = make_layout(self.size, int(p["n_walls"]), int(p["layout_seed"]))
        self.seed = int(p["seed"])
        self.perm = derangement(4, int(p["perm_seed"]))
        noise = _rng(int(p["perm_seed"]), 17).random((self.size, self.size))
        self.permuted = noise < self.theta
        self._dist = self.layout.distances()
        self.pos = None
        self.t = 0

    # state machine -------------------------------------------------------

    def observe(self) -> np.ndarray:
        obs = np.zeros(self.size * self.size + 2, dtype=np.float32)
        obs[self.pos[0] * self.size + self.pos[1]] = 1.0
        obs[-2:] = np.array(self.layout.goal, dtype=np.float32) / (self.size - 1)
        return obs

    def reset(self, episode: int = 0) -> np.ndarray:
        starts = [c for c in self.layout.free_cells if c != self.layout.goal]
        self.pos = starts[_rng(self.seed, episode, 19).integers(len(starts))]
        self.t = 0
        return self.observe()

    def reset_to_observation(self, obs) -> np.ndarray:
        idx = int(np.argmax(np.asarray(obs)[: self.size * self.size]))
        self.pos = (idx // self.size, idx % self.size)
        self.t = 0
        return self.observe()

    def applied_move(self, action: int, cell=None) -> int:
        cell = self.pos if cell is None else cell
        return int(self.perm[action]) if self.permuted[cell] else int(action)

    def step(self, action):
        action = int(action)
        if not 0 <= action < 4:
            raise BenchmarkError(f"invalid gridkey action {action}")
        dr, dc = MOVES[self.applied_move(action)]
        nxt = (self.pos[0] + dr, self.pos[1] + dc)
        if not self.layout.blocked(nxt):
            self.pos = nxt
        self.t += 1
        if self.pos == self.layout.goal:
            return self.observe(), 1.0, True
        return self.observe(), 0.0, self.t >= self.task_spec.max_horizon

    # expert ---------------------------------------------------------------

    def expert_action(self) -> int:
        """Shortest-path move (lowest move index on ties) expressed in this task's action labels."""
        best = None
        for m, (dr, dc) in enumerate(MOVES):
            nxt = (self.pos[0] + dr, self.pos[1] + dc)
            if not self.layout.blocked(nxt) and (best is None or self._dist[nxt] < self._dist[best[1]]):
                best = (m, nxt)
        move = best[0]
        if self.permuted[self.pos]:
            return int(np.flatnonzero(self.perm == move)[0])
        return move


def gridkey_spec(
    task_id: str,
    layout_seed: int,
    theta: float,
    *,
    grid_size: int = 6,
    n_walls: int = 5,
    perm_seed: int | None = None,
    seed: int = 0,
    obs_dim: int | None = None,
    max_horizon: int = 40,
    target_return: float = 1.0,
) -> TaskSpec:
    native_obs = grid_size * grid_size + 2
    return TaskSpec(
        task_id=task_id,
        control_kind=DISCRETE,
        native_action_dim=4,
        native_obs_dim=native_obs,
        obs_dim=obs_dim or native_obs,
        action_dim=4,
        target_return=target_return,
        max_horizon=max_horizon,
        env={
            "family": "gridkey",
            "grid_size": grid_size,
            "n_walls": n_walls,
            "layout_seed": layout_seed,
            "perm_seed": layout_seed + 7919 if perm_seed is None else perm_seed,
            "theta": float(theta),
            "seed": seed,
        },
    )


def make_gridkey_task(layout_seed: int, theta: float, task_id: str = "gridkey", **kwargs) -> GridKeyEnv:
    if not 0.0 <= theta <= 1.0:
        raise BenchmarkError(f"theta must lie in [0, 1], got {theta}")
    return GridKeyEnv(gridkey_spec(task_id, layout_seed, theta, **kwargs))


# ---------------------------------------------------------------------------
# pointreach


class PointReachEnv:
    """Velocity-controlled point mass; see module docstring."""

    step_size = np.float32(0.5)

    def __init__(self, task_spec: TaskSpec):
        p = task_spec.env
        self.task_spec = task_spec
        self.dim = int(p["goal_dim"])
        if self.dim not in (2, 3) or self.dim > task_spec.action_dim:
            raise BenchmarkError(f"invalid goal_dim {self.dim}")
        rng = _rng(int(p["dynamics_seed"]), 23)
        self.goal = rng.uniform(-0.8, 0.8, self.dim).astype(np.float32)
        self.signs = rng.choice(np.array([-1.0, 1.0], dtype=np.float32), self.dim)
        self.seed = int(p["seed"])
        self.pos = None
        self.t = 0
        self.last_action = None

    def observe(self) -> np.ndarray:
        return np.concatenate([self.pos, self.goal]).astype(np.float32)

    def reset(self, episode: int = 0) -> np.ndarray:
        self.pos = _rng(self.seed, episode, 29).uniform(-1.0, 1.0, self.dim).astype(np.float32)
        self.t = 0
        return self.observe()

    def reset_to_observation(self, obs) -> np.ndarray:
        self.pos = np.asarray(obs, dtype=np.float32)[: self.dim].copy()
        self.t = 0
        return self.observe()

    def step(self, action):
        a = np.asarray(action, dtype=np.float32).reshape(-1)
        if a.shape != (self.dim,):
            raise BenchmarkError(f"expected a {self.dim}-dim action, got shape {a.shape}")
        self.last_action = a.copy()
        a = np.clip(a, np.float32(-1), np.float32(1))
        self.pos = np.clip(self.pos + self.step_size * self.signs * a, np.float32(-1), np.float32(1))
        reward = -np.float32(np.linalg.norm(self.pos - self.goal))
        self.t += 1
        return self.observe(), float(reward), self.t >= self.task_spec.max_horizon

    def expert_action(self) -> np.ndarray:
        """Proportional controller that lands on the goal once within one step of it."""
        return np.clip(self.signs * (self.goal - self.pos) / self.step_size, -1.0, 1.0).astype(np.float32)


def pointreach_spec(
    task_id: str,
    goal_dim: int,
    dynamics_seed: int,
    *,
    seed: int = 0,
    obs_dim: int = 6,
    action_dim: int = 3,
    max_horizon: int = 50,
    target_return: float = 0.0,
) -> TaskSpec:
    if goal_dim not in (2, 3) or goal_dim > action_dim:
        raise BenchmarkError(f"invalid goal_dim {goal_dim}")
    return TaskSpec(
        task_id=task_id,
        control_kind=CONTINUOUS,
        native_action_dim=goal_dim,
        native_obs_dim=2 * goal_dim,
        obs_dim=obs_dim,
        action_dim=action_dim,
        target_return=target_return,
        max_horizon=max_horizon,
        env={"family": "pointreach", "goal_dim": goal_dim, "dynamics_seed": dynamics_seed, "seed": seed},
    )


def make_pointreach_task(goal_dim: int, dynamics_seed: int, task_id: str = "pointreach", **kwargs) -> PointReachEnv:
    return PointReachEnv(pointreach_spec(task_id, goal_dim, dynamics_seed, **kwargs))


def make_env(task_spec: TaskSpec):
    family = task_spec.env.get("family")
    if family == "gridkey":
        return GridKeyEnv(task_spec)
    if family == "pointreach":
        return PointReachEnv(task_spec)
    raise BenchmarkError(f"unknown benchmark family {family!r}")


# ---------------------------------------------------------------------------
# datasets


def expert_episode(env, episode: int):
    spec = env.task_spec
    raw = env.reset(episode)
    obs, acts, rews = [], [], []
    for _ in range(spec.max_horizon):
        a = env.expert_action()
        obs.append(pad_vector(raw, spec.obs_dim))
        acts.append(a if spec.control_kind == DISCRETE else pad_vector(a, spec.action_dim))
        raw, r, done = env.step(a)
        rews.append(r)
        if done:
            break
    return obs, acts, rews


def generate_expert_dataset(env, n_trajectories: int, seed: int) -> TrajectoryDataset:
    """Scripted-expert rollouts; the target return is set to the mean expert return."""
    spec = env.task_spec
    trajs = []
    for i in range(n_trajectories):
        obs, acts, rews = expert_episode(env, episode=10_000_000 + seed * 100_003 + i)
        if spec.env.get("family") == "gridkey" and rews[-1] != 1.0:
            raise BenchmarkError(f"expert failed to reach the goal on {spec.task_id}")
        trajs.append(
            Trajectory(
                observations=np.stack(obs).astype(np.float32),
                actions=np.array(acts, dtype=np.int64) if spec.control_kind == DISCRETE else np.stack(acts).astype(np.float32),
                rewards=np.array(rews, dtype=np.float32),
                timesteps=np.arange(len(rews), dtype=np.int64),
                task_id=spec.task_id,
            )
        )
    probe = TrajectoryDataset(trajs, spec)
    spec = dataclasses.replace(spec, target_return=float(np.mean(probe.episode_returns())))
    env.task_spec = spec
    return TrajectoryDataset(trajs, spec)


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class BenchmarkManifest:
    family: str
    metric: str
    obs_dim: int
    action_dim: int
    n_trajectories: int
    tasks: list  # list of (task_id, params dict)
    options: dict

    @property
    def task_ids(self) -> list[str]:
        return [t for t, _ in self.tasks]


def parse_manifest(text: str) -> BenchmarkManifest:
    cp = configparser.ConfigParser()
    cp.read_string(text)
    if "benchmark" not in cp:
        raise BenchmarkError("manifest lacks a [benchmark] section")
    b = dict(cp["benchmark"])
    try:
        family = b.pop("family")
        metric = b.pop("metric")
        obs_dim = int(b.pop("obs_dim"))
        action_dim = int(b.pop("action_dim"))
        n_traj = int(b.pop("n_trajectories"))
    except KeyError as exc:
        raise BenchmarkError(f"manifest missing key {exc}") from exc
    if family not in ("gridkey", "pointreach"):
        raise BenchmarkError(f"unknown family {family!r}")
    if metric not in ("norm_avg", "avg_gap"):
        raise BenchmarkError(f"unknown metric kind {metric!r}")
    tasks = []
    for section in cp.sections():
        if section.startswith("task "):
            tasks.append((section[5:].strip(), dict(cp[section])))
    if not tasks:
        raise BenchmarkError("manifest lists no tasks")
    return BenchmarkManifest(family, metric, obs_dim, action_dim, n_traj, tasks, b)


def load_manifest(path) -> BenchmarkManifest:
    path = Path(path)
    if not path.is_file():
        raise BenchmarkError(f"manifest not found: {path}")
    return parse_manifest(path.read_text())


MANIFEST_DIR = Path(__file__).parent / "manifests"


def bundled_manifest(name: str) -> BenchmarkManifest:
    return load_manifest(MANIFEST_DIR / f"{name}.ini")


def task_specs(manifest: BenchmarkManifest, seed: int) -> list[TaskSpec]:
    opts = manifest.options
    specs = []
    for idx, (task_id, params) in enumerate(manifest.tasks):
        eval_seed = seed * 1000 + idx
        if manifest.family == "gridkey":
            specs.append(
                gridkey_spec(
                    task_id,
                    layout_seed=int(params.get("layout_seed", seed)),
                    theta=float(params["theta"]),
                    grid_size=int(opts.get("grid_size", 6)),
                    n_walls=int(opts.get("n_walls", 5)),
                    seed=eval_seed,
                    obs_dim=manifest.obs_dim,
                    max_horizon=int(opts.get("max_horizon", 40)),
                )
            )
        else:
            specs.append(
                pointreach_spec(
                    task_id,
                    goal_dim=int(params["goal_dim"]),
                    dynamics_seed=int(params["dynamics_seed"]) + 1000 * seed,
                    seed=eval_seed,
                    obs_dim=manifest.obs_dim,
                    action_dim=manifest.action_dim,
                    max_horizon=int(opts.get("max_horizon", 50)),
                )
            )
    return specs


def build_benchmark(manifest: BenchmarkManifest, seed: int, n_trajectories: int | None = None):
    """In-memory (dataset, env) pairs in manifest order."""
    n = n_trajectories or manifest.n_trajectories
    out = []
    for idx, spec in enumerate(task_specs(manifest, seed)):
        env = make_env(spec)
        out.append((generate_expert_dataset(env, n, seed=seed * 1000 + idx), env))
    return out
