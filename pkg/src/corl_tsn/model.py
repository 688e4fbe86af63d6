"""Small Decision Transformer with task-maskable linear layers."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .data import DISCRETE, Batch, pad_vector, read_array, write_array
from .sparse import TsnLayerState, TsnLinear, tsn_states

_TORCH_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class DtConfig:
    obs_dim: int
    action_dim: int  # vocabulary size (discrete) or shared action dim (continuous)
    discrete: bool
    embed_dim: int = 64
    n_layers: int = 2
    n_heads: int = 2
    context_length: int = 20
    dropout: float = 0.1
    max_timestep: int = 256
    exclude_from_tsn: tuple[str, ...] = ("timestep_embedding", "action_head.bias")
    dtype: str = "float32"

    def __post_init__(self):
        if min(self.obs_dim, self.action_dim, self.embed_dim, self.n_layers, self.n_heads, self.context_length) < 1:
            raise ValueError("all model dimensions must be positive")
        if self.embed_dim % self.n_heads:
            raise ValueError("embed_dim must be divisible by n_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.dtype not in _TORCH_DTYPES:
            raise ValueError(f"unsupported dtype {self.dtype!r}")
        object.__setattr__(self, "exclude_from_tsn", tuple(self.exclude_from_tsn))

    @property
    def torch_dtype(self) -> torch.dtype:
        return _TORCH_DTYPES[self.dtype]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["exclude_from_tsn"] = list(self.exclude_from_tsn)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DtConfig":
        d = dict(d)
        d["exclude_from_tsn"] = tuple(d.get("exclude_from_tsn", ()))
        return cls(**d)


@dataclass
class ForwardOutput:
    actions: torch.Tensor  # logits (B, L, vocab) or predictions (B, L, action_dim)
    latents: torch.Tensor  # observation-encoder outputs (B, L, H)


def _linear(cfg: DtConfig, name: str, n_in: int, n_out: int) -> nn.Module:
    if name in cfg.exclude_from_tsn:
        return nn.Linear(n_in, n_out)
    return TsnLinear(n_in, n_out, tsn_bias=f"{name}.bias" not in cfg.exclude_from_tsn)


class CausalSelfAttention(nn.Module):
    def __init__(self, cfg: DtConfig, prefix: str):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.qkv = _linear(cfg, f"{prefix}.attn.qkv", cfg.embed_dim, 3 * cfg.embed_dim)
        self.proj = _linear(cfg, f"{prefix}.attn.proj", cfg.embed_dim, cfg.embed_dim)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, T, H = x.shape
        q, k, v = self.qkv(x).split(H, dim=-1)
        q, k, v = (t.view(B, T, self.n_heads, H // self.n_heads).transpose(1, 2) for t in (q, k, v))
        att = (q @ k.transpose(-2, -1)) / math.sqrt(H // self.n_heads)
        causal = torch.ones(T, T, dtype=torch.bool).tril()
        att = att.masked_fill(~causal, float("-inf")).softmax(dim=-1)
        y = (self.drop(att) @ v).transpose(1, 2).reshape(B, T, H)
        return self.drop(self.proj(y))


class Block(nn.Module):
    def __init__(self, cfg: DtConfig, prefix: str):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.embed_dim)
        self.attn = CausalSelfAttention(cfg, prefix)
        self.ln2 = nn.LayerNorm(cfg.embed_dim)
        self.fc = _linear(cfg, f"{prefix}.mlp.fc", cfg.embed_dim, 4 * cfg.embed_dim)
        self.out = _linear(cfg, f"{prefix}.mlp.out", 4 * cfg.embed_dim, cfg.embed_dim)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.drop(self.out(F.gelu(self.fc(self.ln2(x)))))


class DecisionTransformer(nn.Module):
    """Interleaves (return-to-go, observation, action) tokens per timestep.

    The action at step l is read off the output of observation token l, so
    it sees returns and observations up to l and actions strictly before l.
    """

    def __init__(self, cfg: DtConfig):
        super().__init__()
        self.cfg = cfg
        H = cfg.embed_dim
        self.timestep_embedding = nn.Embedding(cfg.max_timestep, H)
        self.embed_return = _linear(cfg, "embed_return", 1, H)
        self.embed_obs = _linear(cfg, "embed_obs", cfg.obs_dim, H)
        self.embed_action = _linear(cfg, "embed_action", cfg.action_dim, H)
        self.embed_ln = nn.LayerNorm(H)
        self.drop = nn.Dropout(cfg.dropout)
        self.blocks = nn.ModuleList(Block(cfg, f"blocks.{i}") for i in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(H)
        self.action_head = _linear(cfg, "action_head", H, cfg.action_dim)
        self.to(cfg.torch_dtype)

    # -- task masks --------------------------------------------------------

    def tsn_states(self) -> dict[str, TsnLayerState]:
        return tsn_states(self)

    def dense_parameters(self) -> list[nn.Parameter]:
        """Parameters that live outside the converted tensors."""
        owned = {id(p) for s in self.tsn_states().values() for p in s.parameters()}
        return [p for p in self.parameters() if id(p) not in owned]

    def activate(self, task_id: str | None) -> None:
        """Route every converted tensor through ``task_id``'s mask (None = dense)."""
        for state in self.tsn_states().values():
            if task_id is not None and task_id not in state.task_masks:
                raise KeyError(f"task {task_id!r} has no mask in this model")
            state.active_task = task_id

    @property
    def active_task(self) -> str | None:
        states = list(self.tsn_states().values())
        return states[0].active_task if states else None

    # -- forward -----------------------------------------------------------

    def encode(self, obs: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.embed_obs(obs))

    def forward(self, obs, actions, rtg, timesteps) -> ForwardOutput:
        cfg = self.cfg
        dt = cfg.torch_dtype
        obs = torch.as_tensor(obs, dtype=dt)
        rtg = torch.as_tensor(rtg, dtype=dt)
        timesteps = torch.as_tensor(timesteps, dtype=torch.long).clamp(0, cfg.max_timestep - 1)
        B, L, d = obs.shape
        if d != cfg.obs_dim:
            raise ValueError(f"observation dim {d} != config obs_dim {cfg.obs_dim}")
        if L > cfg.context_length:
            raise ValueError(f"sequence length {L} exceeds context length {cfg.context_length}")
        if cfg.discrete:
            act_in = F.one_hot(torch.as_tensor(actions, dtype=torch.long), cfg.action_dim).to(dt)
        else:
            act_in = torch.as_tensor(actions, dtype=dt)
            if act_in.shape[-1] != cfg.action_dim:
                raise ValueError(f"action dim {act_in.shape[-1]} != config action_dim {cfg.action_dim}")
        t_emb = self.timestep_embedding(timesteps)
        z = self.encode(obs)
        tokens = torch.stack(
            [self.embed_return(rtg.unsqueeze(-1)) + t_emb, z + t_emb, self.embed_action(act_in) + t_emb],
            dim=2,
        ).reshape(B, 3 * L, cfg.embed_dim)
        x = self.drop(self.embed_ln(tokens))
        for block in self.blocks:
            x = block(x)
        x = self.ln_f(x).reshape(B, L, 3, cfg.embed_dim)
        return ForwardOutput(actions=self.action_head(x[:, :, 1]), latents=z)

    def forward_batch(self, batch: Batch) -> ForwardOutput:
        return self(batch.observations, batch.actions, batch.returns_to_go, batch.timesteps)

    @torch.no_grad()
    def act(self, obs, actions, rtg, timesteps):
        """Next action given context arrays of length n <= L (last action slot is ignored)."""
        out = self(obs[None], actions[None], rtg[None], timesteps[None]).actions[0, -1]
        if self.cfg.discrete:
            return int(torch.argmax(out))
        return out.detach().cpu().numpy().astype(np.float64)


def build_model(cfg: DtConfig, seed: int) -> DecisionTransformer:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return DecisionTransformer(cfg)


# ---------------------------------------------------------------------------
# objectives


def _valid(batch: Batch) -> torch.Tensor:
    valid = torch.as_tensor(batch.valid_mask) > 0
    if not bool(valid.any()):
        raise ValueError("batch has no valid positions")
    return valid


def loss_discrete(output: ForwardOutput, batch: Batch) -> torch.Tensor:
    """Mean cross-entropy over valid positions."""
    valid = _valid(batch)
    logits = output.actions[valid]
    targets = torch.as_tensor(batch.actions, dtype=torch.long)[valid]
    return F.cross_entropy(logits, targets, reduction="sum") / valid.sum()


def loss_continuous(output: ForwardOutput, batch: Batch, action_mask=None) -> torch.Tensor:
    """Squared error over active action dims, divided by their count, averaged over valid positions.

    ``action_mask`` may be one vector for the whole batch or one row per batch element;
    it defaults to ``batch.action_mask``.
    """
    valid = _valid(batch)
    pred = output.actions
    target = torch.as_tensor(batch.actions, dtype=pred.dtype)
    m = torch.as_tensor(batch.action_mask if action_mask is None else action_mask, dtype=pred.dtype)
    if m.ndim == 1:
        m = m.expand(pred.shape[0], -1)
    active = m.sum(-1)
    if bool((active <= 0).any()):
        raise ValueError("action-dimension mask has no active entries")
    m = m[:, None, :].expand_as(pred) > 0
    sq = torch.where(m, (pred - target) ** 2, torch.zeros((), dtype=pred.dtype))
    per_pos = sq.sum(-1) / active[:, None]
    return per_pos[valid].sum() / valid.sum()


def task_loss(model: DecisionTransformer, batch: Batch, action_mask=None) -> torch.Tensor:
    out = model.forward_batch(batch)
    if model.cfg.discrete:
        return loss_discrete(out, batch)
    return loss_continuous(out, batch, action_mask)


def backward(model: DecisionTransformer, loss: torch.Tensor) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients for every trainable tensor, keyed by parameter name."""
    if not model.training:
        raise RuntimeError("backward requires a forward pass in train mode")
    loss.backward()
    return {n: p.grad for n, p in model.named_parameters() if p.requires_grad and p.grad is not None}


# ---------------------------------------------------------------------------
# rollout


def rollout(
    model,
    env,
    target_return: float,
    max_horizon: int,
    episode: int = 0,
    obs_mean=None,
    obs_std=None,
    context_length: int | None = None,
    native_action_dim: int | None = None,
) -> float:
    """Greedy return-conditioned episode; ``model`` needs ``act`` and ``cfg``.

    Returns-to-go start at ``target_return`` and are decremented by observed
    rewards. Continuous actions are truncated to the native dimensionality.
    """
    spec = env.task_spec
    L = context_length or model.cfg.context_length
    native = native_action_dim or spec.native_action_dim
    discrete = spec.control_kind == DISCRETE
    mean = np.zeros(spec.obs_dim) if obs_mean is None else np.asarray(obs_mean)
    std = np.ones(spec.obs_dim) if obs_std is None else np.asarray(obs_std)

    obs_hist, act_hist, rtg_hist = [], [], []
    raw = env.reset(episode)
    remaining = float(target_return)
    total = 0.0
    for t in range(max_horizon):
        obs_hist.append(((pad_vector(raw, spec.obs_dim) - mean) / std).astype(np.float32))
        act_hist.append(0 if discrete else np.zeros(spec.action_dim, dtype=np.float32))
        rtg_hist.append(remaining)
        lo = max(0, len(obs_hist) - L)
        action = model.act(
            np.stack(obs_hist[lo:]),
            np.array(act_hist[lo:]) if discrete else np.stack(act_hist[lo:]),
            np.array(rtg_hist[lo:], dtype=np.float32),
            np.arange(lo, t + 1),
        )
        if discrete:
            act_hist[-1] = int(action)
            env_action = int(action)
        else:
            vec = np.asarray(action, dtype=np.float64)[:native]
            act_hist[-1] = pad_vector(vec, spec.action_dim)
            env_action = vec
        raw, reward, done = env.step(env_action)
        reward = float(np.float32(reward))
        total += reward
        remaining -= reward
        if done:
            break
    return total


# ---------------------------------------------------------------------------
# checkpoints


def _mask_key(name: str, task: str) -> str:
    return f"mask__{name}__{task}"


def save_model(model: DecisionTransformer, path) -> Path:
    """Dense tensors as flat binaries, masks bit-packed, plus ``model.json``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().numpy()
        fname = f"{name}.bin"
        write_array(path / fname, arr)
        tensors[name] = fname
    masks = {}
    for name, state in model.tsn_states().items():
        entry = {"shape": list(state.shape), "tasks": {}}
        for task, mask in state.task_masks.items():
            fname = f"{_mask_key(name, task)}.bin"
            write_array(path / fname, np.packbits(mask.numpy().reshape(-1)))
            entry["tasks"][task] = fname
        occ = f"occupancy__{name}.bin"
        write_array(path / occ, np.packbits(state.occupancy().numpy().reshape(-1)))
        entry["occupancy"] = occ
        masks[name] = entry
    meta = {
        "config": model.cfg.to_dict(),
        "tensors": tensors,
        "tsn_layers": sorted(model.tsn_states()),
        "masks": masks,
        "requires_grad": {n: p.requires_grad for n, p in model.named_parameters()},
    }
    (path / "model.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return path


def load_model(path) -> DecisionTransformer:
    path = Path(path)
    meta = json.loads((path / "model.json").read_text())
    cfg = DtConfig.from_dict(meta["config"])
    model = DecisionTransformer(cfg)
    state = {name: torch.from_numpy(read_array(path / fname)) for name, fname in meta["tensors"].items()}
    model.load_state_dict(state)
    states = model.tsn_states()
    if sorted(states) != meta["tsn_layers"]:
        raise ValueError("checkpoint TSN layers do not match the model layout")
    for name, entry in meta["masks"].items():
        st = states[name]
        n = math.prod(entry["shape"])
        for task, fname in entry["tasks"].items():
            bits = np.unpackbits(read_array(path / fname))[:n].astype(bool)
            st.task_masks[task] = torch.from_numpy(bits.reshape(entry["shape"]))
        stored = np.unpackbits(read_array(path / entry["occupancy"]))[:n].astype(bool)
        if not np.array_equal(stored.reshape(entry["shape"]), st.occupancy().numpy()):
            raise ValueError(f"occupancy of {name} disagrees with its masks")
    for n, p in model.named_parameters():
        p.requires_grad_(meta["requires_grad"].get(n, True))
    return model
