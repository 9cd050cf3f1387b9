"""Actor, critic and target networks with the DDPG update rules.

Both networks read the current platform state ``s`` (flattened per-cell driver
and order counts) and the memory ``h`` of the last ``L`` encoded snapshots. The
memory goes through a ConvLSTM; its final hidden state is concatenated with
``s`` (and, for the critic, the action) and fed through two ReLU layers.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .errors import ConfigError, ShapeError
from .hexgrid import N_CHANNELS, N_ORDER_TYPES, GridMap
from .neural import (
    DTYPE,
    HexConv,
    ParamSet,
    adam_step,
    check_finite,
    convlstm_params,
    convlstm_sequence,
    dense,
    init_glorot,
    init_he_normal,
    init_uniform_bounded,
    load_checkpoint,
    save_checkpoint,
)

STATE_FEATURES_PER_CELL = 2 + N_ORDER_TYPES
NET_DTYPES = {"float64": torch.float64, "float32": torch.float32}


@dataclass(frozen=True)
class NetConfig:
    hidden_channels: int = 8
    dense_units: tuple = (128, 64)
    memory_length: int = 4
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "dense_units", tuple(int(u) for u in self.dense_units))
        if self.dtype not in NET_DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(NET_DTYPES)}, got {self.dtype!r}")
        if self.hidden_channels < 1 or len(self.dense_units) != 2 or min(self.dense_units) < 1:
            raise ConfigError(f"invalid network config {self}")
        if self.memory_length < 0:
            raise ConfigError("memory_length must be >= 0")

    def to_dict(self):
        d = asdict(self)
        d["dense_units"] = list(self.dense_units)
        return d


@dataclass
class Batch:
    s: torch.Tensor
    h: torch.Tensor
    a: torch.Tensor
    r: torch.Tensor
    s2: torch.Tensor
    h2: torch.Tensor
    terminal: torch.Tensor
    weights: torch.Tensor | None = None
    indices: np.ndarray | None = None

    def __len__(self):
        return int(self.s.shape[0])


def _trunk_params(rng, in_dim, units, prefix=""):
    d1, d2 = units
    return {
        f"{prefix}fc1.w": init_he_normal((in_dim, d1), in_dim, rng),
        f"{prefix}fc1.b": torch.zeros(d1, dtype=DTYPE),
        f"{prefix}fc2.w": init_he_normal((d1, d2), d1, rng),
        f"{prefix}fc2.b": torch.zeros(d2, dtype=DTYPE),
    }


def _cast(tensors: dict, config: NetConfig) -> ParamSet:
    dtype = NET_DTYPES[config.dtype]
    return ParamSet({k: v.to(dtype) for k, v in tensors.items()})


class _Net:
    kind = ""

    def __init__(self, grid: GridMap, config: NetConfig, params: ParamSet, geom: HexConv | None = None):
        self.grid = grid
        self.config = config
        self.params = params
        self.geom = geom or HexConv(grid)
        self.n = grid.n_cells
        self.dtype = NET_DTYPES[config.dtype]

    @property
    def state_dim(self):
        return STATE_FEATURES_PER_CELL * self.n

    def memory_cells(self, h: torch.Tensor) -> torch.Tensor:
        """Accept ``(B, L, 9, rows, cols)`` grid memory or ``(B, L, 9, n)`` cell memory."""
        if h.dim() == 5:
            h = self.geom.to_cells(h)
        L = self.config.memory_length
        if h.dim() != 4 or h.shape[1:] != (L, N_CHANNELS, self.n):
            raise ShapeError(f"memory has shape {tuple(h.shape)}, expected (B, {L}, {N_CHANNELS}, {self.n})")
        return h

    def features(self, s: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        if s.dim() != 2 or s.shape[1] != self.state_dim:
            raise ShapeError(f"state has shape {tuple(s.shape)}, expected (B, {self.state_dim})")
        p = self.params
        s = s.to(self.dtype)
        hid = convlstm_sequence(
            self.memory_cells(h.to(self.dtype)), p["convlstm.wx"], p["convlstm.wh"], p["convlstm.b"], self.geom,
            self.config.hidden_channels,
        )
        return torch.cat([hid.flatten(1), s], dim=1)

    def clone(self):
        return type(self)(self.grid, self.config, self.params.copy(), self.geom)


class ActorNet(_Net):
    kind = "actor"

    @classmethod
    def create(cls, grid: GridMap, config: NetConfig, rng: np.random.Generator, geom=None) -> "ActorNet":
        n = grid.n_cells
        hc = config.hidden_channels
        in_dim = hc * n + STATE_FEATURES_PER_CELL * n
        d2 = config.dense_units[1]
        tensors = {}
        tensors.update(convlstm_params(N_CHANNELS, hc, rng))
        tensors.update(_trunk_params(rng, in_dim, config.dense_units))
        tensors["out.w"] = init_glorot((d2, n), d2, n, rng)
        tensors["out.b"] = torch.zeros(n, dtype=DTYPE)
        return cls(grid, config, _cast(tensors, config), geom)

    def forward(self, s: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        p = self.params
        z = dense(self.features(s, h), p["fc1.w"], p["fc1.b"], "relu")
        z = dense(z, p["fc2.w"], p["fc2.b"], "relu")
        return (dense(z, p["out.w"], p["out.b"], "tanh") + 1.0) / 2.0


class CriticNet(_Net):
    kind = "critic"

    @classmethod
    def create(cls, grid: GridMap, config: NetConfig, rng: np.random.Generator, geom=None) -> "CriticNet":
        n = grid.n_cells
        hc = config.hidden_channels
        in_dim = hc * n + STATE_FEATURES_PER_CELL * n + n
        d2 = config.dense_units[1]
        tensors = {}
        tensors.update(convlstm_params(N_CHANNELS, hc, rng))
        tensors.update(_trunk_params(rng, in_dim, config.dense_units))
        tensors["out.w"] = init_uniform_bounded((d2, 1), rng)
        tensors["out.b"] = torch.zeros(1, dtype=DTYPE)
        return cls(grid, config, _cast(tensors, config), geom)

    def head(self, feats: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
        if a.dim() != 2 or a.shape[1] != self.n or a.shape[0] != feats.shape[0]:
            raise ShapeError(f"action has shape {tuple(a.shape)}, expected ({feats.shape[0]}, {self.n})")
        p = self.params
        z = dense(torch.cat([feats, a.to(feats.dtype)], dim=1), p["fc1.w"], p["fc1.b"], "relu")
        z = dense(z, p["fc2.w"], p["fc2.b"], "relu")
        return dense(z, p["out.w"], p["out.b"], "linear")[:, 0]

    def forward(self, s: torch.Tensor, h: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(s, h), a)


def _batched(s, h):
    s = torch.as_tensor(np.asarray(s, dtype=np.float64))
    h = torch.as_tensor(np.asarray(h, dtype=np.float64))
    if s.dim() == 1:
        s, h = s[None], h[None]
    return s, h


def act(actor: ActorNet, s, h) -> np.ndarray:
    """Deterministic action in ``[0, 1]^n`` for one state/memory pair."""
    s_t, h_t = _batched(s, h)
    with torch.no_grad():
        a = actor.forward(s_t, h_t)
    check_finite(a, "actor output")
    return a[0].numpy().astype(np.float64)


def q_value(critic: CriticNet, s, h, a) -> float:
    a = np.asarray(a, dtype=np.float64)
    if np.any(a < 0) or np.any(a > 1):
        raise ShapeError("q_value: action components must lie in [0, 1]")
    s_t, h_t = _batched(s, h)
    with torch.no_grad():
        q = critic.forward(s_t, h_t, torch.as_tensor(a)[None])
    check_finite(q, "critic output")
    return float(q[0])


def td_targets(batch: Batch, target_actor: ActorNet, target_critic: CriticNet, gamma: float) -> torch.Tensor:
    with torch.no_grad():
        a2 = target_actor.forward(batch.s2, batch.h2)
        q2 = target_critic.forward(batch.s2, batch.h2, a2)
        y = batch.r.to(q2.dtype) + gamma * (1.0 - batch.terminal.to(q2.dtype)) * q2
    return check_finite(y, "TD targets")


def critic_update(critic: CriticNet, batch: Batch, y: torch.Tensor, weights, lr: float):
    """One Adam step on the importance-weighted squared TD error.

    Returns ``(loss, td_errors)`` evaluated before the step.
    """
    w = torch.ones(len(batch), dtype=critic.dtype) if weights is None else torch.as_tensor(np.asarray(weights, dtype=np.float64)).to(critic.dtype)
    if not (len(batch) == y.shape[0] == w.shape[0]):
        raise ShapeError("batch, targets and weights must have the same length")
    ps = critic.params
    q = critic.forward(batch.s, batch.h, batch.a)
    td = y - q
    loss = (w * td**2).mean()
    check_finite(loss, "critic loss")
    grads = torch.autograd.grad(loss, ps.values())
    adam_step(ps, grads, lr)
    return float(loss.detach()), td.detach()


def actor_update(actor: ActorNet, critic: CriticNet, batch: Batch, lr: float) -> float:
    """Deterministic policy gradient step: descend on ``-mean Q(s, h, mu(s, h))``.

    Only actor tensors are differentiated, so the critic is left untouched.
    """
    with torch.no_grad():
        cfeat = critic.features(batch.s, batch.h)
    a = actor.forward(batch.s, batch.h)
    objective = -critic.head(cfeat, a).mean()
    check_finite(objective, "actor objective")
    grads = torch.autograd.grad(objective, actor.params.values())
    norm = float(torch.sqrt(sum((g**2).sum() for g in grads)))
    adam_step(actor.params, grads, lr)
    return norm


def soft_update(target: _Net, online: _Net, tau: float) -> None:
    if not 0.0 < tau <= 1.0:
        raise ConfigError(f"tau must lie in (0, 1], got {tau}")
    with torch.no_grad():
        for name in online.params.names():
            t = target.params[name]
            if tau == 1.0:
                t.copy_(online.params[name])
            else:
                t.mul_(1.0 - tau).add_(online.params[name], alpha=tau)


@dataclass
class DDPGAgent:
    grid: GridMap
    config: NetConfig
    actor: ActorNet
    critic: CriticNet
    target_actor: ActorNet
    target_critic: CriticNet

    @classmethod
    def create(cls, grid: GridMap, config: NetConfig, rng: np.random.Generator) -> "DDPGAgent":
        geom = HexConv(grid)
        actor = ActorNet.create(grid, config, rng, geom)
        critic = CriticNet.create(grid, config, rng, geom)
        return cls(grid, config, actor, critic, actor.clone(), critic.clone())

    def param_sets(self) -> dict:
        return {
            "actor": self.actor.params,
            "critic": self.critic.params,
            "target_actor": self.target_actor.params,
            "target_critic": self.target_critic.params,
        }

    def save(self, path, meta: dict | None = None):
        info = {"net": self.config.to_dict(), "map": self.grid.to_spec(), **(meta or {})}
        return save_checkpoint(path, self.param_sets(), info)

    @classmethod
    def load(cls, path) -> tuple["DDPGAgent", dict]:
        from .hexgrid import map_from_spec

        sets, meta = load_checkpoint(path)
        grid = map_from_spec(meta["map"])
        config = NetConfig(**meta["net"])
        geom = HexConv(grid)
        agent = cls(
            grid,
            config,
            ActorNet(grid, config, sets["actor"], geom),
            CriticNet(grid, config, sets["critic"], geom),
            ActorNet(grid, config, sets["target_actor"], geom),
            CriticNet(grid, config, sets["target_critic"], geom),
        )
        return agent, meta
