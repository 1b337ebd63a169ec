"""Twin-critic actor-critic agent (TD3 style) under a cost convention.

Everything is minimized: the critics learn expected discounted cumulative
cost, so the usual twin-critic *min* becomes a *max* (pessimism means
overestimating cost), and the actor descends its critic. Observations and
controls are normalized before entering networks: angles divided by
alpha_max, controls mapped to [-1, 1] via u -> 2u/u_max - 1. Costs are
scaled by 1/alpha_max inside the critic updates and scaled back in
q_value, so the replay buffer and all public surfaces stay in degrees.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, asdict, replace

import numpy as np

from .env import Observation, ValveEnv
from .nn import (
    Mlp,
    adam_init,
    adam_step,
    load_arrays,
    mlp_backward,
    mlp_forward,
    mlp_forward_cache,
    mlp_from_arrays,
    mlp_gradient,
    mlp_init,
    mlp_to_arrays,
    save_arrays,
    soft_update,
)

__all__ = [
    "Td3Config",
    "Batch",
    "ReplayBuffer",
    "Td3Agent",
    "TrainResult",
    "critic_targets",
    "normalize_obs",
    "denormalize_obs",
    "action_to_control",
    "control_to_action",
    "train_td3",
    "run_training",
    "save_td3_checkpoint",
    "load_td3_checkpoint",
]

OBS_DIM = 4


@dataclass(frozen=True)
class Td3Config:
    gamma: float = 0.99
    batch_size: int = 256
    tau: float = 0.005
    policy_delay: int = 2
    target_noise_std: float = 0.2
    target_noise_clip: float = 0.5
    explore_noise_std: float = 0.1
    warmup_steps: int = 1000
    capacity: int = 1_000_000
    lr: float = 3e-4
    hidden: tuple = (64, 64)

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must be in [0, 1)")
        if self.policy_delay < 1:
            raise ValueError("policy_delay must be >= 1")
        if min(self.target_noise_std, self.target_noise_clip,
               self.explore_noise_std) < 0.0:
            raise ValueError("noise levels must be non-negative")
        if self.batch_size < 1 or self.capacity < 1:
            raise ValueError("batch_size and capacity must be positive")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be non-negative")
        if self.lr <= 0.0:
            raise ValueError("lr must be positive")
        if len(self.hidden) < 1 or min(self.hidden) < 1:
            raise ValueError("hidden must name at least one positive width")


def normalize_obs(obs: Observation, alpha_max: float, u_max: float) -> np.ndarray:
    return np.array([
        obs.alpha_ref / alpha_max,
        obs.alpha_prev / alpha_max,
        obs.alpha / alpha_max,
        obs.u_prev / u_max,
    ])


def denormalize_obs(x: np.ndarray, alpha_max: float, u_max: float) -> Observation:
    return Observation(
        alpha_ref=float(x[0]) * alpha_max,
        alpha_prev=float(x[1]) * alpha_max,
        alpha=float(x[2]) * alpha_max,
        u_prev=float(x[3]) * u_max,
    )


def control_to_action(u, u_max: float):
    return 2.0 * u / u_max - 1.0


def action_to_control(a, u_max: float):
    return (a + 1.0) / 2.0 * u_max


@dataclass
class Batch:
    """Sampled transitions, already normalized except the cost (degrees)."""

    x: np.ndarray
    u: np.ndarray
    c: np.ndarray
    x_next: np.ndarray
    done: np.ndarray


class ReplayBuffer:
    """Preallocated ring buffer of normalized transitions.

    Oldest entries are overwritten first once capacity is reached;
    sampling is uniform with replacement over the stored items.
    """

    def __init__(self, capacity: int, obs_dim: int = OBS_DIM):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.x = np.zeros((capacity, obs_dim))
        self.u = np.zeros((capacity, 1))
        self.c = np.zeros(capacity)
        self.x_next = np.zeros((capacity, obs_dim))
        self.done = np.zeros(capacity)
        self.cursor = 0
        self.size = 0

    def __len__(self):
        return self.size

    def add(self, x, u_norm: float, cost: float, x_next, done: bool) -> None:
        # normalization audit: angles land in [0,1] and controls in [-1,1];
        # a small epsilon absorbs float round-off from the mappings
        eps = 1e-9
        if np.max(np.abs(x)) > 1.0 + eps or np.max(np.abs(x_next)) > 1.0 + eps:
            raise ValueError("observation fields escape [-1, 1]; not normalized?")
        if abs(u_norm) > 1.0 + eps:
            raise ValueError(f"normalized control {u_norm} escapes [-1, 1]")
        if cost < 0.0:
            raise ValueError("cost must be non-negative")
        i = self.cursor
        self.x[i] = x
        self.u[i, 0] = u_norm
        self.c[i] = cost
        self.x_next[i] = x_next
        self.done[i] = 1.0 if done else 0.0
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, self.size, size=batch_size)
        return Batch(
            x=self.x[idx].copy(),
            u=self.u[idx].copy(),
            c=self.c[idx].copy(),
            x_next=self.x_next[idx].copy(),
            done=self.done[idx].copy(),
        )


def critic_targets(
    batch: Batch,
    actor_target: Mlp,
    critics_target: tuple,
    cfg: Td3Config,
    rng: np.random.Generator,
) -> np.ndarray:
    """Bellman targets y = c + gamma*(1-done)*max(Q1', Q2') at the smoothed
    target action clip(pi'(x') + eps, -1, 1).

    Pure over its inputs and unit-agnostic: the costs in `batch` set the
    scale of the returned targets.
    """
    if batch.x.shape[0] == 0:
        raise ValueError("batch is empty")
    a_next = mlp_forward(actor_target, batch.x_next)
    if cfg.target_noise_std > 0.0:
        eps = cfg.target_noise_std * rng.standard_normal(a_next.shape)
        np.clip(eps, -cfg.target_noise_clip, cfg.target_noise_clip, out=eps)
        a_next = a_next + eps
    np.clip(a_next, -1.0, 1.0, out=a_next)
    xu = np.hstack([batch.x_next, a_next])
    q1t, q2t = critics_target
    qn = np.maximum(mlp_forward(q1t, xu), mlp_forward(q2t, xu))[:, 0]
    return batch.c + cfg.gamma * (1.0 - batch.done) * qn


class Td3Agent:
    """Actor, twin critics, their targets and optimizers, plus the buffer."""

    kind = "td3"

    def __init__(self, cfg: Td3Config, alpha_max: float, u_max: float,
                 rng: np.random.Generator):
        self.cfg = cfg
        self.alpha_max = alpha_max
        self.u_max = u_max
        self.rng = rng
        hidden = list(cfg.hidden)
        self.actor = mlp_init([OBS_DIM, *hidden, 1], rng, out_squash="tanh",
                              final_scale=0.01)
        self.q1 = mlp_init([OBS_DIM + 1, *hidden, 1], rng)
        self.q2 = mlp_init([OBS_DIM + 1, *hidden, 1], rng)
        self.actor_target = self.actor.copy()
        self.q1_target = self.q1.copy()
        self.q2_target = self.q2.copy()
        self.opt_actor = adam_init(self.actor.parameters(), lr=cfg.lr)
        self.opt_q1 = adam_init(self.q1.parameters(), lr=cfg.lr)
        self.opt_q2 = adam_init(self.q2.parameters(), lr=cfg.lr)
        self.buffer = ReplayBuffer(cfg.capacity)
        self.critic_steps = 0
        self.actor_steps = 0

    # --- acting ----------------------------------------------------------

    def normalize(self, obs: Observation) -> np.ndarray:
        return normalize_obs(obs, self.alpha_max, self.u_max)

    def select_control(self, obs: Observation, explore: bool = False,
                       rng: np.random.Generator | None = None) -> float:
        """Deterministic actor output in percent; optional Gaussian
        exploration noise on the normalized action, then clamped."""
        a = float(mlp_forward(self.actor, self.normalize(obs))[0])
        if explore and self.cfg.explore_noise_std > 0.0:
            r = rng if rng is not None else self.rng
            a += self.cfg.explore_noise_std * r.standard_normal()
        a = min(max(a, -1.0), 1.0)
        return float(action_to_control(a, self.u_max))

    def behavior_control(self, obs: Observation, total_steps: int) -> float:
        """Training-time behavior: uniform random during warmup, then the
        noisy actor."""
        if total_steps < self.cfg.warmup_steps:
            return float(self.rng.uniform(0.0, self.u_max))
        return self.select_control(obs, explore=True)

    def observe(self, obs: Observation, u: float, cost: float,
                obs_next: Observation, done: bool) -> None:
        self.buffer.add(
            self.normalize(obs),
            float(control_to_action(u, self.u_max)),
            cost,
            self.normalize(obs_next),
            done,
        )

    # --- learning --------------------------------------------------------

    def q_values(self, obs: Observation, u: float) -> tuple:
        """Twin critic estimates for one pair, converted back to degrees."""
        xu = np.concatenate([self.normalize(obs),
                             [control_to_action(u, self.u_max)]])
        return (
            float(mlp_forward(self.q1, xu)[0]) * self.alpha_max,
            float(mlp_forward(self.q2, xu)[0]) * self.alpha_max,
        )

    def q_value(self, obs: Observation, u: float) -> float:
        """Pessimistic (max) twin estimate, degrees."""
        return max(self.q_values(obs, u))

    def critic_update(self, batch: Batch) -> float:
        """One Adam step for both critics on the shared targets; returns
        the pre-step summed mean-squared residual."""
        n = batch.x.shape[0]
        scaled = replace(batch, c=batch.c / self.alpha_max)
        y = critic_targets(scaled, self.actor_target,
                           (self.q1_target, self.q2_target), self.cfg, self.rng)
        xu = np.hstack([batch.x, batch.u])
        loss = 0.0
        for net, opt in ((self.q1, self.opt_q1), (self.q2, self.opt_q2)):
            pred, cache = mlp_forward_cache(net, xu)
            err = pred[:, 0] - y
            loss += float(np.mean(err**2))
            grads, _ = mlp_backward(net, cache, (2.0 / n) * err[:, None])
            adam_step(opt, net.parameters(), grads)
        self.critic_steps += 1
        return loss

    def actor_update(self, batch: Batch) -> float:
        """One Adam step on mean Q1(x, pi(x)) through the actor only, then
        soft-update all targets; returns the pre-step objective."""
        n = batch.x.shape[0]
        a, cache_a = mlp_forward_cache(self.actor, batch.x)
        xu = np.hstack([batch.x, a])
        q, _ = mlp_forward_cache(self.q1, xu)
        objective = float(np.mean(q[:, 0]))
        _, dxu = mlp_gradient(self.q1, xu, np.full((n, 1), 1.0 / n))
        grads, _ = mlp_backward(self.actor, cache_a, dxu[:, OBS_DIM:])
        adam_step(self.opt_actor, self.actor.parameters(), grads)
        self._update_targets()
        self.actor_steps += 1
        return objective

    def _update_targets(self):
        soft_update(self.actor_target, self.actor, self.cfg.tau)
        soft_update(self.q1_target, self.q1, self.cfg.tau)
        soft_update(self.q2_target, self.q2, self.cfg.tau)

    def update(self) -> dict | None:
        """One training iteration: a critic step always, an actor step
        every cfg.policy_delay critic steps. None while data is short."""
        if len(self.buffer) < self.cfg.batch_size:
            return None
        batch = self.buffer.sample(self.cfg.batch_size, self.rng)
        out = {"critic_loss": self.critic_update(batch)}
        if self.critic_steps % self.cfg.policy_delay == 0:
            out["actor_objective"] = self.actor_update(batch)
        return out


@dataclass
class TrainResult:
    """Learning curve plus everything needed to reproduce the run."""

    curve: np.ndarray
    agent: object
    seed: int
    episodes: int
    total_steps: int
    wall_time: float


def run_training(env: ValveEnv, agent, episodes: int) -> TrainResult:
    """Generic episodic training loop shared by both agents.

    Gathers with agent.behavior_control, stores transitions, and calls
    agent.update() once per step after the warmup gate (buffer must hold
    at least max(warmup_steps, batch_size) transitions). The curve entry
    per episode is the cumulative (undiscounted) true cost.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    gate = max(agent.cfg.warmup_steps, agent.cfg.batch_size)
    curve = np.empty(episodes)
    total_steps = 0
    t0 = time.perf_counter()
    for ep in range(episodes):
        obs = env.reset()
        ep_cost = 0.0
        done = False
        while not done:
            u = agent.behavior_control(obs, total_steps)
            obs_next, cost, done = env.step(u)
            agent.observe(obs, u, cost, obs_next, done)
            total_steps += 1
            if total_steps >= gate:
                agent.update()
            obs = obs_next
            ep_cost += cost
        curve[ep] = ep_cost
    return TrainResult(
        curve=curve,
        agent=agent,
        seed=-1,  # filled by the caller that derived the streams
        episodes=episodes,
        total_steps=total_steps,
        wall_time=time.perf_counter() - t0,
    )


def derive_streams(seed: int) -> tuple:
    """Split one user seed into independent env and agent generators.

    The env stream is agent-independent, so different controllers trained
    or evaluated under the same seed see identical references and noise.
    """
    ss = np.random.SeedSequence(seed)
    env_ss, agent_ss = ss.spawn(2)
    return np.random.default_rng(env_ss), np.random.default_rng(agent_ss)


def train_td3(env_factory, cfg: Td3Config, episodes: int, seed: int) -> TrainResult:
    """Train a fresh TD3 agent; env_factory(rng) must build the environment."""
    env_rng, agent_rng = derive_streams(seed)
    env = env_factory(env_rng)
    agent = Td3Agent(cfg, env.valve.alpha_max, env.valve.u_max, agent_rng)
    result = run_training(env, agent, episodes)
    result.seed = seed
    return result


# --- checkpointing --------------------------------------------------------

def _agent_nets(agent) -> dict:
    return {
        "actor": agent.actor, "q1": agent.q1, "q2": agent.q2,
        "actor_target": agent.actor_target,
        "q1_target": agent.q1_target, "q2_target": agent.q2_target,
    }


def save_td3_checkpoint(path, agent: Td3Agent, seed: int | None = None,
                        extra: dict | None = None) -> None:
    arrays = {}
    for name, net in _agent_nets(agent).items():
        arrays.update(mlp_to_arrays(net, name))
    meta = {
        "kind": agent.kind,
        "config": asdict(agent.cfg),
        "alpha_max": agent.alpha_max,
        "u_max": agent.u_max,
        "seed": seed,
    }
    if extra:
        meta.update(extra)
    save_arrays(path, arrays, meta)


def load_td3_checkpoint(path) -> Td3Agent:
    """Rebuild the agent for evaluation/resume; buffer starts empty."""
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "td3":
        raise ValueError(f"{path}: not a td3 checkpoint (kind={meta.get('kind')!r})")
    cfg_fields = dict(meta["config"])
    cfg_fields["hidden"] = tuple(cfg_fields["hidden"])
    cfg = Td3Config(**cfg_fields)
    agent = Td3Agent(cfg, meta["alpha_max"], meta["u_max"],
                     np.random.default_rng(0))
    for name, net in _agent_nets(agent).items():
        loaded = mlp_from_arrays(arrays, name, net.out_squash)
        if [w.shape for w in loaded.weights] != [w.shape for w in net.weights]:
            raise ValueError(f"{path}: stored {name} shapes do not match config")
        net.weights = loaded.weights
        net.biases = loaded.biases
    return agent
