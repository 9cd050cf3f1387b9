"""Training and evaluation loops for DDPG, pi-DDPG and fixed-ratio baselines."""
from __future__ import annotations

import time
from collections import deque
from dataclasses import asdict, dataclass, field, fields, replace
from statistics import median
from typing import Callable, Iterable, Sequence

import numpy as np

from .agent import DDPGAgent, NetConfig, act, actor_update, critic_update, soft_update, td_targets
from .errors import ConfigError, DomainError
from .hexgrid import GridMap, N_CHANNELS, encode_snapshot
from .market import MarketEnv, ScenarioProfile, snapshot_from
from .refiner import refine, refinement_schedule
from .replay import PerBuffer, Transition

ALGOS = ("ddpg", "pi-ddpg")


@dataclass
class TrainConfig:
    algo: str = "pi-ddpg"
    episodes: int = 100
    seed: int = 0
    memory_length: int = 4
    gamma: float = 0.99
    reward_scale: float = 1.0
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    tau: float = 0.005
    sigma0: float = 0.1
    batch_size: int = 128
    per_alpha: float = 0.7
    per_beta: float = 0.5
    buffer_capacity: int = 50_000
    k_max: int = 10
    eta: float = 0.1
    refine_fallback: bool = False
    hidden_channels: int = 8
    dense_units: tuple = (128, 64)
    net_dtype: str = "float64"
    eval_every: int = 1
    eval_refine: bool = False
    checkpoint_every: int = 0

    def __post_init__(self):
        self.dense_units = tuple(int(u) for u in self.dense_units)
        self.validate()

    @property
    def fixed_ratio(self) -> float | None:
        if self.algo.startswith("fixed:"):
            return float(self.algo.split(":", 1)[1])
        return None

    def validate(self):
        problems = []
        if self.algo not in ALGOS and not self.algo.startswith("fixed:"):
            problems.append(f"algo: expected ddpg, pi-ddpg or fixed:<ratio>, got {self.algo!r}")
        elif self.algo.startswith("fixed:"):
            try:
                r = self.fixed_ratio
                if not 0.0 <= r <= 1.0:
                    problems.append(f"algo: fixed ratio must lie in [0, 1], got {r}")
            except ValueError:
                problems.append(f"algo: cannot parse ratio in {self.algo!r}")
        if self.episodes < 1:
            problems.append("episodes: must be >= 1")
        for name in ("actor_lr", "critic_lr", "tau", "eta", "reward_scale"):
            if not getattr(self, name) > 0:
                problems.append(f"{name}: must be > 0")
        if not 0 < self.tau <= 1:
            problems.append("tau: must lie in (0, 1]")
        if self.sigma0 < 0:
            problems.append("sigma0: must be >= 0")
        if not 0 <= self.gamma <= 1:
            problems.append("gamma: must lie in [0, 1]")
        if self.batch_size < 1 or self.buffer_capacity < 1:
            problems.append("batch_size and buffer_capacity must be >= 1")
        if self.k_max < 0 or self.memory_length < 0:
            problems.append("k_max and memory_length must be >= 0")
        if problems:
            raise ConfigError("invalid training config", problems)

    @property
    def net(self) -> NetConfig:
        return NetConfig(self.hidden_channels, self.dense_units, self.memory_length, self.net_dtype)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dense_units"] = list(self.dense_units)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError("unknown training config keys", [f"config.{k}: not recognized" for k in unknown])
        return cls(**d)


def derive_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1)[0])


TRAIN_STREAM, EVAL_STREAM = 1, 2


def train_env_seed(seed: int, episode: int) -> int:
    return derive_seed(seed, TRAIN_STREAM, episode)


def eval_env_seed(seed: int, episode: int) -> int:
    return derive_seed(seed, EVAL_STREAM, episode)


def noise_schedule(episode: int, total_episodes: int, sigma0: float) -> float:
    """Linear decay from ``sigma0`` at episode 1 towards zero after the last episode."""
    if not 1 <= episode <= total_episodes:
        raise DomainError(f"episode {episode} outside 1..{total_episodes}")
    return max(0.0, sigma0 * (1.0 - (episode - 1) / total_episodes))


class MemoryWindow:
    """Rolling encoded memory of the last ``L`` snapshots, zero padded at the front."""

    def __init__(self, grid: GridMap, length: int, count_scale: float):
        self.grid = grid
        self.length = length
        self.count_scale = count_scale
        self.frames = deque(maxlen=max(length, 1))
        self._zero = np.zeros((N_CHANNELS, grid.axial_rows, grid.axial_cols))

    def push(self, snapshot) -> None:
        if self.length:
            self.frames.append(encode_snapshot(snapshot, self.grid, self.count_scale))

    def tensor(self) -> np.ndarray:
        out = np.zeros((self.length, N_CHANNELS, self.grid.axial_rows, self.grid.axial_cols))
        if self.length:
            frames = list(self.frames)
            out[self.length - len(frames):] = frames if frames else out[:0]
        return out


class FixedRatioPolicy:
    def __init__(self, ratio: float):
        if not 0.0 <= ratio <= 1.0:
            raise DomainError(f"ratio must lie in [0, 1], got {ratio}")
        self.ratio = float(ratio)

    def __call__(self, s, h, n_cells):
        return np.full(n_cells, self.ratio)


def fixed_ratio_policy(ratio: float) -> FixedRatioPolicy:
    return FixedRatioPolicy(ratio)


class ActorPolicy:
    """Noise-free actor, optionally followed by refinement against the critic."""

    def __init__(self, agent: DDPGAgent, refine_steps: int = 0, eta: float = 0.1):
        self.agent = agent
        self.refine_steps = refine_steps
        self.eta = eta

    def __call__(self, s, h, n_cells):
        a = act(self.agent.actor, s, h)
        if self.refine_steps:
            a = refine(a, s, h, self.agent.critic, self.refine_steps, self.eta).action
        return a


@dataclass
class EpisodeMetrics:
    episode: int
    total_reward: float
    step_rewards: list
    critic_loss_mean: float | None = None
    actor_gradnorm_mean: float | None = None
    q_gains: list = field(default_factory=list)
    refine_records: list = field(default_factory=list)
    sigma: float = 0.0
    k_refine: int = 0
    eval_reward: float | None = None
    env_fee_total: float = 0.0
    wall_ms: float = 0.0

    @property
    def q_gain_median(self) -> float | None:
        return median(self.q_gains) if self.q_gains else None

    def row(self) -> dict:
        """Deterministic CSV row; wall-clock time is kept out on purpose."""
        return {
            "episode": self.episode,
            "total_reward": self.total_reward,
            "critic_loss_mean": self.critic_loss_mean,
            "actor_gradnorm_mean": self.actor_gradnorm_mean,
            "refiner_q_gain_median": self.q_gain_median,
            "sigma": self.sigma,
            "k_refine": self.k_refine,
            "eval_reward": self.eval_reward,
        }


@dataclass
class RolloutRecord:
    total: float
    step_rewards: list
    fee_total: float


def rollout(
    env: MarketEnv,
    seed: int,
    choose: Callable,
    memory_length: int,
    on_step: Callable | None = None,
) -> RolloutRecord:
    """One episode. ``choose(t, s, h)`` returns the executed action for the controlled platform.

    ``on_step(t, s, h, a, r, s2, h2, done)`` sees every transition.
    """
    prof = env.profile
    ctrl = prof.controlled_platform
    n = prof.n_cells
    obs = env.reset(seed)
    mem = MemoryWindow(prof.grid, memory_length, prof.count_scale)
    s = obs[ctrl].as_vector(prof.count_scale)
    h = mem.tensor()
    rewards = []
    fee_total = 0.0
    t = 0
    while True:
        a = np.asarray(choose(t, s, h), dtype=np.float64)
        if a.shape != (n,):
            raise ConfigError(f"policy returned action of shape {a.shape}, expected ({n},)")
        res = env.step({ctrl: a})
        r = float(res.rewards[ctrl])
        fee_total += sum(m.fee for m in res.matches if m.platform == ctrl)
        mem.push(snapshot_from(obs[ctrl], a, res.fulfilled[ctrl]))
        obs = res.observations
        s2 = obs[ctrl].as_vector(prof.count_scale)
        h2 = mem.tensor()
        rewards.append(r)
        if on_step is not None:
            on_step(t, s, h, a, r, s2, h2, res.done)
        s, h = s2, h2
        t += 1
        if res.done:
            break
    return RolloutRecord(float(sum(rewards)), rewards, fee_total)


@dataclass
class EvalStats:
    mean: float
    min: float
    max: float
    rewards: list


def evaluate(policy, profile: ScenarioProfile, n_episodes: int, seeds: Sequence[int], memory_length: int = 4) -> EvalStats:
    """Noise-free, learning-free episodes of ``policy`` on the given env seeds."""
    if n_episodes < 1:
        raise DomainError("n_episodes must be >= 1")
    seeds = list(seeds)
    if len(seeds) < n_episodes:
        raise DomainError(f"need {n_episodes} seeds, got {len(seeds)}")
    env = MarketEnv(profile)
    n = profile.n_cells
    totals = []
    for k in range(n_episodes):
        rec = rollout(env, seeds[k], lambda t, s, h: policy(s, h, n), memory_length)
        totals.append(rec.total)
    return EvalStats(float(np.mean(totals)), float(min(totals)), float(max(totals)), totals)


class Learner:
    """Owns env, agent and buffer for one experiment and runs Algorithm-style episodes."""

    def __init__(self, config: TrainConfig, profile: ScenarioProfile):
        self.config = config
        self.profile = profile.validate()
        self.env = MarketEnv(profile)
        root = np.random.SeedSequence(config.seed)
        init_ss, noise_ss, buffer_ss = root.spawn(3)
        self.agent = DDPGAgent.create(profile.grid, config.net, np.random.default_rng(init_ss))
        self.noise_rng = np.random.default_rng(noise_ss)
        self.buffer = PerBuffer(config.buffer_capacity, config.per_alpha, config.per_beta, np.random.default_rng(buffer_ss))

    def learn(self) -> tuple[float, float]:
        cfg = self.config
        ag = self.agent
        batch = self.buffer.sample_batch(max_batch=cfg.batch_size)
        y = td_targets(batch, ag.target_actor, ag.target_critic, cfg.gamma)
        loss, td = critic_update(ag.critic, batch, y, batch.weights, cfg.critic_lr)
        self.buffer.update_priorities(batch.indices, td.abs().numpy())
        gnorm = actor_update(ag.actor, ag.critic, batch, cfg.actor_lr)
        soft_update(ag.target_critic, ag.critic, cfg.tau)
        soft_update(ag.target_actor, ag.actor, cfg.tau)
        return loss, gnorm

    def run_episode(self, episode: int, refine_on: bool) -> EpisodeMetrics:
        cfg = self.config
        started = time.perf_counter()
        sigma = noise_schedule(episode, cfg.episodes, cfg.sigma0)
        k_refine = refinement_schedule(episode, cfg.k_max) if refine_on else 0
        n = self.profile.n_cells
        losses, gnorms, gains, records = [], [], [], []

        def choose(t, s, h):
            a = act(self.agent.actor, s, h)
            if k_refine:
                res = refine(a, s, h, self.agent.critic, k_refine, cfg.eta, cfg.refine_fallback)
                a = res.action
                gains.append(res.q_gain)
                records.append((episode, t, k_refine, res.q_before, res.q_after))
            return np.clip(a + self.noise_rng.normal(0.0, sigma, size=n), 0.0, 1.0)

        def on_step(t, s, h, a, r, s2, h2, done):
            self.buffer.insert(Transition(s, h, a, r * cfg.reward_scale, s2, h2, done))
            loss, gnorm = self.learn()
            losses.append(loss)
            gnorms.append(gnorm)

        rec = rollout(self.env, train_env_seed(cfg.seed, episode), choose, cfg.memory_length, on_step)
        return EpisodeMetrics(
            episode=episode,
            total_reward=rec.total,
            step_rewards=rec.step_rewards,
            critic_loss_mean=float(np.mean(losses)),
            actor_gradnorm_mean=float(np.mean(gnorms)),
            q_gains=gains,
            refine_records=records,
            sigma=sigma,
            k_refine=k_refine,
            env_fee_total=rec.fee_total,
            wall_ms=(time.perf_counter() - started) * 1e3,
        )

    def policy(self) -> ActorPolicy:
        steps = self.config.k_max if self.config.eval_refine else 0
        return ActorPolicy(self.agent, steps, self.config.eta)

    def evaluate_episode(self, episode: int) -> float:
        return evaluate(self.policy(), self.profile, 1, [eval_env_seed(self.config.seed, episode)], self.config.memory_length).mean


def run_episode_ddpg(learner: Learner, episode: int) -> EpisodeMetrics:
    return learner.run_episode(episode, refine_on=False)


def run_episode_pi_ddpg(learner: Learner, episode: int) -> EpisodeMetrics:
    return learner.run_episode(episode, refine_on=True)


def run_fixed_episode(config: TrainConfig, profile: ScenarioProfile, episode: int) -> EpisodeMetrics:
    started = time.perf_counter()
    policy = FixedRatioPolicy(config.fixed_ratio)
    n = profile.n_cells
    env = MarketEnv(profile)
    rec = rollout(env, train_env_seed(config.seed, episode), lambda t, s, h: policy(s, h, n), config.memory_length)
    return EpisodeMetrics(
        episode=episode,
        total_reward=rec.total,
        step_rewards=rec.step_rewards,
        env_fee_total=rec.fee_total,
        wall_ms=(time.perf_counter() - started) * 1e3,
    )


@dataclass
class TrainResult:
    config: TrainConfig
    metrics: list
    learner: Learner | None


def train(
    config: TrainConfig,
    profile: ScenarioProfile,
    on_episode: Callable[[EpisodeMetrics, "Learner | None"], None] | None = None,
) -> TrainResult:
    """Run ``config.episodes`` episodes of the configured algorithm."""
    history = []
    if config.fixed_ratio is not None:
        fixed = FixedRatioPolicy(config.fixed_ratio)
        for ep in range(1, config.episodes + 1):
            m = run_fixed_episode(config, profile, ep)
            if config.eval_every and ep % config.eval_every == 0:
                m.eval_reward = evaluate(fixed, profile, 1, [eval_env_seed(config.seed, ep)], config.memory_length).mean
            history.append(m)
            if on_episode:
                on_episode(m, None)
        return TrainResult(config, history, None)
    learner = Learner(config, profile)
    refine_on = config.algo == "pi-ddpg"
    for ep in range(1, config.episodes + 1):
        m = learner.run_episode(ep, refine_on)
        if config.eval_every and ep % config.eval_every == 0:
            m.eval_reward = learner.evaluate_episode(ep)
        history.append(m)
        if on_episode:
            on_episode(m, learner)
    return TrainResult(config, history, learner)


SWEEP_PARAMS = ("actor_lr", "sigma0", "k_max")


def sweep_jobs(config: TrainConfig, parameter: str, values: Iterable, runs: int) -> list[TrainConfig]:
    if parameter not in SWEEP_PARAMS:
        raise ConfigError(f"sweep parameter must be one of {SWEEP_PARAMS}, got {parameter!r}")
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    cast = int if parameter == "k_max" else float
    jobs = []
    for v in values:
        for r in range(runs):
            jobs.append(replace(config, **{parameter: cast(v), "seed": config.seed + r}))
    return jobs


def sweep_rows(parameter: str, job: TrainConfig, result: TrainResult) -> tuple[list, list]:
    value = getattr(job, parameter)
    rows = [
        {"parameter": parameter, "value": value, "seed": job.seed, "episode": m.episode, "reward": m.total_reward}
        for m in result.metrics
    ]
    gains = [
        {"parameter": parameter, "value": value, "seed": job.seed, "episode": m.episode, "q_gain": g}
        for m in result.metrics
        for g in m.q_gains
    ]
    return rows, gains


def _sweep_worker(args):
    parameter, job, profile = args
    return sweep_rows(parameter, job, train(job, profile))


def sweep(config: TrainConfig, profile: ScenarioProfile, parameter: str, values, runs: int, workers: int = 1):
    """Train every ``value x seed`` combination; returns long-format reward and Q-gain rows."""
    jobs = sweep_jobs(config, parameter, values, runs)
    args = [(parameter, j, profile) for j in jobs]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_worker, args))
    else:
        results = [_sweep_worker(a) for a in args]
    rows, gains = [], []
    for r, g in results:
        rows.extend(r)
        gains.extend(g)
    return rows, gains
