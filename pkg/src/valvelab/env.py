"""Episodic control environment around the valve simulator.

Observations are (alpha_ref, alpha_prev, alpha, u_prev); the per-step cost
is the absolute tracking error |alpha - alpha_ref| measured on the true
plant angle. Sensor noise corrupts only what the controller sees, actuator
noise corrupts only what the plant receives; neither touches the cost.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .valve import ValveParams, ValveState, initial_state, step

__all__ = [
    "Observation",
    "EpisodeConfig",
    "EpisodeTrace",
    "ValveEnv",
    "inject_noise",
    "discounted_return",
    "export_episode_csv",
]


@dataclass(frozen=True)
class Observation:
    """Controller-facing state: reference, two angle lags, last command.

    Angle fields are measurements: with sensor noise configured they
    deviate from the true plant angle.
    """

    alpha_ref: float
    alpha_prev: float
    alpha: float
    u_prev: float

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha_ref, self.alpha_prev, self.alpha, self.u_prev])


@dataclass(frozen=True)
class EpisodeConfig:
    horizon: int = 100
    dt: float = 0.05
    ref_range: tuple[float, float] = (5.0, 85.0)
    gamma: float = 0.99
    output_noise_std: float = 0.0
    control_noise_std: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        lo, hi = self.ref_range
        if not lo <= hi:
            raise ValueError(f"ref_range low {lo} above high {hi}")
        if self.output_noise_std < 0.0 or self.control_noise_std < 0.0:
            raise ValueError("noise levels must be non-negative")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")


def inject_noise(
    value: float,
    std: float,
    rng: np.random.Generator,
    bounds: tuple[float, float],
) -> float:
    """Add N(0, std^2) and clamp to bounds; std=0 is the identity."""
    if std < 0.0:
        raise ValueError("std must be non-negative")
    if std > 0.0:
        value = value + std * rng.standard_normal()
    return min(max(value, bounds[0]), bounds[1])


class ValveEnv:
    """One plant plus reference, driven step by step.

    All randomness (reference draw, initial angle, process/sensor/actuator
    noise) comes from the single generator handed to the constructor, so a
    fixed seed reproduces a run exactly. Controllers keep their own
    generators.
    """

    def __init__(self, cfg: EpisodeConfig, valve: ValveParams,
                 rng: np.random.Generator | None = None):
        lo, hi = cfg.ref_range
        if not (0.0 <= lo and hi <= valve.alpha_max):
            raise ValueError("ref_range must lie within [0, alpha_max]")
        self.cfg = cfg
        self.valve = valve
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.state: ValveState | None = None
        self.alpha_ref = 0.0
        self.steps = 0
        self.last_u_applied = 0.0
        self._meas = 0.0
        self._meas_prev = 0.0

    def _measure(self, alpha_true: float) -> float:
        return inject_noise(
            alpha_true, self.cfg.output_noise_std, self.rng,
            (0.0, self.valve.alpha_max),
        )

    def reset(self) -> Observation:
        """Start a fresh episode: new reference, random initial angle."""
        lo, hi = self.cfg.ref_range
        self.alpha_ref = float(self.rng.uniform(lo, hi))
        alpha0 = float(self.rng.uniform(0.0, self.valve.alpha_max))
        self.state = initial_state(self.valve, alpha=alpha0)
        self.steps = 0
        self.last_u_applied = 0.0
        self._meas = self._measure(alpha0)
        self._meas_prev = self._meas
        return self._observation()

    def new_reference(self) -> Observation:
        """Redraw the reference without touching the plant (for chained
        multi-segment tracking runs). Resets the step counter."""
        if self.state is None:
            raise RuntimeError("reset() must run before new_reference()")
        lo, hi = self.cfg.ref_range
        self.alpha_ref = float(self.rng.uniform(lo, hi))
        self.steps = 0
        return self._observation()

    def _observation(self) -> Observation:
        assert self.state is not None
        return Observation(
            alpha_ref=self.alpha_ref,
            alpha_prev=self._meas_prev,
            alpha=self._meas,
            u_prev=self.state.u_prev,
        )

    def step(self, u: float) -> tuple[Observation, float, bool]:
        """Apply a command; returns (observation, cost, done).

        Actuator noise perturbs the applied control; the cost is the
        absolute error of the resulting true angle; done after horizon
        steps since the last reset or reference change.
        """
        if self.state is None:
            raise RuntimeError("reset() must run before step()")
        if not (0.0 <= u <= self.valve.u_max):
            raise ValueError(f"control {u} outside [0, {self.valve.u_max}]")
        u_applied = inject_noise(
            u, self.cfg.control_noise_std, self.rng, (0.0, self.valve.u_max)
        )
        self.state = step(self.valve, self.state, u_applied, self.rng)
        # the observation reports the *commanded* u as u_prev: the
        # controller cannot see actuator noise
        self.state = replace(self.state, u_prev=u)
        self.last_u_applied = u_applied
        self._meas_prev = self._meas
        self._meas = self._measure(self.state.alpha)
        self.steps += 1
        cost = abs(self.state.alpha - self.alpha_ref)
        done = self.steps >= self.cfg.horizon
        return self._observation(), cost, done

    @property
    def alpha_true(self) -> float:
        if self.state is None:
            raise RuntimeError("reset() must run first")
        return self.state.alpha


@dataclass
class EpisodeTrace:
    """Per-step log of one rollout plus identifying metadata."""

    valve_id: int
    controller_id: str
    seed: int
    t: list[float] = field(default_factory=list)
    alpha_ref: list[float] = field(default_factory=list)
    alpha: list[float] = field(default_factory=list)
    u_applied: list[float] = field(default_factory=list)
    u_commanded: list[float] = field(default_factory=list)
    cost: list[float] = field(default_factory=list)

    def append(self, t, alpha_ref, alpha, u_applied, u_commanded, cost):
        self.t.append(t)
        self.alpha_ref.append(alpha_ref)
        self.alpha.append(alpha)
        self.u_applied.append(u_applied)
        self.u_commanded.append(u_commanded)
        self.cost.append(cost)

    def __len__(self):
        return len(self.t)


def discounted_return(trace: EpisodeTrace, gamma: float) -> float:
    """Sum of gamma^k * cost_k over the trace."""
    return float(sum(c * gamma**k for k, c in enumerate(trace.cost)))


def export_episode_csv(path, traces: list[EpisodeTrace]) -> None:
    """Write rollouts as CSV.

    Columns (t, alpha_ref, alpha, u_applied, u_commanded, cost) plus the
    identifying (valve, controller, seed) triple per row. Floats are
    written with repr so values round-trip exactly and files from equal
    runs are byte-identical.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["valve", "controller", "seed", "t", "alpha_ref", "alpha",
                    "u_applied", "u_commanded", "cost"])
        for tr in traces:
            for i in range(len(tr)):
                w.writerow([
                    tr.valve_id,
                    tr.controller_id,
                    tr.seed,
                    repr(float(tr.t[i])),
                    repr(float(tr.alpha_ref[i])),
                    repr(float(tr.alpha[i])),
                    repr(float(tr.u_applied[i])),
                    repr(float(tr.u_commanded[i])),
                    repr(float(tr.cost[i])),
                ])
