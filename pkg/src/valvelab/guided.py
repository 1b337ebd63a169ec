"""PI-guided reinforcement learning: a frozen PI controller plus a learned
bounded perturbation.

The applied control is

    u = clamp(pi(obs) + scale(xi(obs)), u_min, u_max)

where xi is a tanh network and scale maps [-1, 1] onto the perturbation
interval of width eta*u_max. The guide's gains are never trained; only xi
is. Training mirrors the twin-critic agent, but both the behavior policy
and the bootstrap policy in the critic targets are the guided sum, and the
actor step differentiates only through xi.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, replace

import numpy as np

from .env import Observation
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
from .pi_control import PiGains, pi_control
from .td3 import (
    OBS_DIM,
    Batch,
    ReplayBuffer,
    Td3Config,
    TrainResult,
    control_to_action,
    derive_streams,
    normalize_obs,
    run_training,
)

__all__ = [
    "GuidedPolicy",
    "PirlAgent",
    "perturbation_range",
    "guided_control",
    "train_pirl",
    "save_pirl_checkpoint",
    "load_pirl_checkpoint",
]


def perturbation_range(u_max: float, eta: float, one_sided: bool = False):
    """Additive perturbation interval: symmetric (-eta*u_max/2, +eta*u_max/2)
    by default, or the literal one-sided (0, eta*u_max) variant. Both have
    width eta*u_max."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError("eta must be in [0, 1]")
    if u_max <= 0.0:
        raise ValueError("u_max must be positive")
    if one_sided:
        return 0.0, eta * u_max
    half = eta * u_max / 2.0
    return -half, half


@dataclass(frozen=True)
class GuidedPolicy:
    """Frozen guide gains plus the trainable perturbation network."""

    gains: PiGains
    perturb_net: Mlp
    eta: float = 0.5
    alpha_max: float = 90.0
    one_sided: bool = False

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must be in [0, 1]")

    @property
    def bounds(self):
        return self.gains.u_min, self.gains.u_max


def _scale_perturbation(xi, u_max: float, eta: float, one_sided: bool):
    lo, hi = perturbation_range(u_max, eta, one_sided)
    half = (hi - lo) / 2.0
    center = (hi + lo) / 2.0
    return xi * half + center


def guided_control(
    policy: GuidedPolicy,
    obs: Observation,
    explore: bool = False,
    rng: np.random.Generator | None = None,
    noise_std: float = 0.1,
) -> float:
    """PI output plus the scaled perturbation, clamped to the bounds.

    Exploration noise lands on the tanh output *before* scaling and is
    clipped back to [-1, 1], so the perturbation never leaves its interval
    and the guided control never strays farther than eta*u_max/2 from the
    guide (clamping only shrinks that distance).
    """
    base = pi_control(obs, policy.gains)
    u_min, u_max = policy.bounds
    xi = float(mlp_forward(
        policy.perturb_net, normalize_obs(obs, policy.alpha_max, u_max))[0])
    if explore and noise_std > 0.0:
        if rng is None:
            raise ValueError("exploration requires an rng")
        xi += noise_std * rng.standard_normal()
    xi = min(max(xi, -1.0), 1.0)
    u = base + _scale_perturbation(xi, u_max, policy.eta, policy.one_sided)
    return min(max(u, u_min), u_max)


def _pi_batch(x: np.ndarray, gains: PiGains, alpha_max: float, u_max: float):
    """Vectorized PI law over normalized observation rows."""
    alpha_ref = x[:, 0] * alpha_max
    alpha_prev = x[:, 1] * alpha_max
    alpha = x[:, 2] * alpha_max
    u_prev = x[:, 3] * u_max
    u = (u_prev
         + gains.r0 * (alpha_ref - alpha)
         + gains.r1 * (alpha_ref - alpha_prev))
    return np.clip(u, gains.u_min, gains.u_max)


class PirlAgent:
    """Guided agent: twin critics over the applied control, actor step
    through the perturbation network only."""

    kind = "pirl"

    def __init__(self, cfg: Td3Config, gains: PiGains, alpha_max: float,
                 rng: np.random.Generator, eta: float = 0.5,
                 one_sided: bool = False):
        self.cfg = cfg
        self.gains = gains
        self.alpha_max = alpha_max
        self.u_max = gains.u_max
        self.eta = eta
        self.one_sided = one_sided
        self.rng = rng
        hidden = list(cfg.hidden)
        self.perturb = mlp_init([OBS_DIM, *hidden, 1], rng, out_squash="tanh",
                                final_scale=0.01)
        self.q1 = mlp_init([OBS_DIM + 1, *hidden, 1], rng)
        self.q2 = mlp_init([OBS_DIM + 1, *hidden, 1], rng)
        self.perturb_target = self.perturb.copy()
        self.q1_target = self.q1.copy()
        self.q2_target = self.q2.copy()
        self.opt_perturb = adam_init(self.perturb.parameters(), lr=cfg.lr)
        self.opt_q1 = adam_init(self.q1.parameters(), lr=cfg.lr)
        self.opt_q2 = adam_init(self.q2.parameters(), lr=cfg.lr)
        self.buffer = ReplayBuffer(cfg.capacity)
        self.critic_steps = 0
        self.actor_steps = 0

    @property
    def policy(self) -> GuidedPolicy:
        return GuidedPolicy(gains=self.gains, perturb_net=self.perturb,
                            eta=self.eta, alpha_max=self.alpha_max,
                            one_sided=self.one_sided)

    def _target_policy(self) -> GuidedPolicy:
        return GuidedPolicy(gains=self.gains, perturb_net=self.perturb_target,
                            eta=self.eta, alpha_max=self.alpha_max,
                            one_sided=self.one_sided)

    # --- acting ----------------------------------------------------------

    def normalize(self, obs: Observation) -> np.ndarray:
        return normalize_obs(obs, self.alpha_max, self.u_max)

    def select_control(self, obs: Observation, explore: bool = False,
                       rng: np.random.Generator | None = None) -> float:
        r = rng if rng is not None else self.rng
        return guided_control(self.policy, obs, explore=explore, rng=r,
                              noise_std=self.cfg.explore_noise_std)

    def behavior_control(self, obs: Observation, total_steps: int) -> float:
        # no uniform warmup: the guide is informative from the first step
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

    def q_value(self, obs: Observation, u: float) -> float:
        xu = np.concatenate([self.normalize(obs),
                             [control_to_action(u, self.u_max)]])
        return max(
            float(mlp_forward(self.q1, xu)[0]),
            float(mlp_forward(self.q2, xu)[0]),
        ) * self.alpha_max

    def _guided_targets(self, batch: Batch) -> np.ndarray:
        """Bellman targets bootstrapping with the guided target policy:
        u' = clamp(pi(x') + scale(clip(xi'(x') + eps, -1, 1))), evaluated
        by the pessimistic (max) target critic pair."""
        cfg = self.cfg
        xi = mlp_forward(self.perturb_target, batch.x_next)
        if cfg.target_noise_std > 0.0:
            eps = cfg.target_noise_std * self.rng.standard_normal(xi.shape)
            np.clip(eps, -cfg.target_noise_clip, cfg.target_noise_clip, out=eps)
            xi = xi + eps
        np.clip(xi, -1.0, 1.0, out=xi)
        base = _pi_batch(batch.x_next, self.gains, self.alpha_max, self.u_max)
        u_next = base + _scale_perturbation(xi[:, 0], self.u_max, self.eta,
                                            self.one_sided)
        np.clip(u_next, self.gains.u_min, self.gains.u_max, out=u_next)
        a_next = control_to_action(u_next, self.u_max)[:, None]
        xu = np.hstack([batch.x_next, a_next])
        qn = np.maximum(mlp_forward(self.q1_target, xu),
                        mlp_forward(self.q2_target, xu))[:, 0]
        return batch.c + cfg.gamma * (1.0 - batch.done) * qn

    def critic_update(self, batch: Batch) -> float:
        n = batch.x.shape[0]
        scaled = replace(batch, c=batch.c / self.alpha_max)
        y = self._guided_targets(scaled)
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
        """Descend mean Q1(x, a(xi)) through xi only.

        The composition u = pi(x) + scale(xi) is left unclamped here so the
        gradient d a/d xi = 2*half_range/u_max never dies at the actuation
        rails; stored transitions and critic targets use the clamped
        control.
        """
        n = batch.x.shape[0]
        xi, cache_xi = mlp_forward_cache(self.perturb, batch.x)
        base = _pi_batch(batch.x, self.gains, self.alpha_max, self.u_max)
        u = base + _scale_perturbation(xi[:, 0], self.u_max, self.eta,
                                       self.one_sided)
        a = control_to_action(u, self.u_max)[:, None]
        xu = np.hstack([batch.x, a])
        q, _ = mlp_forward_cache(self.q1, xu)
        objective = float(np.mean(q[:, 0]))
        _, dxu = mlp_gradient(self.q1, xu, np.full((n, 1), 1.0 / n))
        lo, hi = perturbation_range(self.u_max, self.eta, self.one_sided)
        da = dxu[:, OBS_DIM:] * (2.0 / self.u_max) * ((hi - lo) / 2.0)
        grads, _ = mlp_backward(self.perturb, cache_xi, da)
        adam_step(self.opt_perturb, self.perturb.parameters(), grads)
        self._update_targets()
        self.actor_steps += 1
        return objective

    def _update_targets(self):
        soft_update(self.perturb_target, self.perturb, self.cfg.tau)
        soft_update(self.q1_target, self.q1, self.cfg.tau)
        soft_update(self.q2_target, self.q2, self.cfg.tau)

    def update(self) -> dict | None:
        if len(self.buffer) < self.cfg.batch_size:
            return None
        batch = self.buffer.sample(self.cfg.batch_size, self.rng)
        out = {"critic_loss": self.critic_update(batch)}
        if self.critic_steps % self.cfg.policy_delay == 0:
            out["actor_objective"] = self.actor_update(batch)
        return out


def train_pirl(env_factory, gains: PiGains, cfg: Td3Config, episodes: int,
               seed: int, eta: float = 0.5, one_sided: bool = False) -> TrainResult:
    """Train a guided agent; env streams match train_td3 for equal seeds."""
    env_rng, agent_rng = derive_streams(seed)
    env = env_factory(env_rng)
    if env.valve.u_max != gains.u_max:
        raise ValueError(
            f"gain bounds u_max={gains.u_max} disagree with the valve's "
            f"u_max={env.valve.u_max}"
        )
    agent = PirlAgent(cfg, gains, env.valve.alpha_max, agent_rng, eta=eta,
                      one_sided=one_sided)
    result = run_training(env, agent, episodes)
    result.seed = seed
    return result


def _agent_nets(agent: PirlAgent) -> dict:
    return {
        "perturb": agent.perturb, "q1": agent.q1, "q2": agent.q2,
        "perturb_target": agent.perturb_target,
        "q1_target": agent.q1_target, "q2_target": agent.q2_target,
    }


def save_pirl_checkpoint(path, agent: PirlAgent, seed: int | None = None,
                         extra: dict | None = None) -> None:
    """Checkpoint with the guide gains and eta in the manifest, so the file
    alone reproduces the guided policy."""
    arrays = {}
    for name, net in _agent_nets(agent).items():
        arrays.update(mlp_to_arrays(net, name))
    meta = {
        "kind": agent.kind,
        "config": asdict(agent.cfg),
        "gains": asdict(agent.gains),
        "alpha_max": agent.alpha_max,
        "eta": agent.eta,
        "one_sided": agent.one_sided,
        "seed": seed,
    }
    if extra:
        meta.update(extra)
    save_arrays(path, arrays, meta)


def load_pirl_checkpoint(path) -> PirlAgent:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "pirl":
        raise ValueError(f"{path}: not a pirl checkpoint (kind={meta.get('kind')!r})")
    cfg_fields = dict(meta["config"])
    cfg_fields["hidden"] = tuple(cfg_fields["hidden"])
    cfg = Td3Config(**cfg_fields)
    agent = PirlAgent(cfg, PiGains(**meta["gains"]), meta["alpha_max"],
                      np.random.default_rng(0), eta=meta["eta"],
                      one_sided=meta["one_sided"])
    for name, net in _agent_nets(agent).items():
        loaded = mlp_from_arrays(arrays, name, net.out_squash)
        if [w.shape for w in loaded.weights] != [w.shape for w in net.weights]:
            raise ValueError(f"{path}: stored {name} shapes do not match config")
        net.weights = loaded.weights
        net.biases = loaded.biases
    return agent
