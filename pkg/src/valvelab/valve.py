"""Throttle valve simulator.

A first-order auto-regressive core

    alpha[t] = a * alpha[t-1] + b1 * u[t-1] + b2 * u[t-2]

augmented with asymmetric input backlash, a spring-return bias toward the
rest angle, output clamping and Gaussian process noise. Angles are in
degrees, control inputs in PWM percent points on [0, 100]. Actuation is
inverted: more PWM closes the plate (b1, b2 < 0).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, asdict, replace

import numpy as np

__all__ = [
    "ValveParams",
    "ValveState",
    "StaircaseTrace",
    "BUILTIN_VALVES",
    "builtin_valve",
    "initial_state",
    "step_linear",
    "step",
    "staircase_experiment",
    "hysteresis_metrics",
    "load_valve_params",
    "save_valve_params",
    "export_staircase_csv",
]


@dataclass(frozen=True)
class ValveParams:
    """Identified coefficients and nonlinearity parameters of one valve.

    a: dimensionless pole of the AR core, 0 < a < 1.
    b1, b2: input gains in degrees per percent point, both negative.
    pwm_max: percent points at which the plate reaches 0 degrees.
    u_max: control bound in percent points.
    alpha_rest: plate angle at zero input (spring return), degrees.
    alpha_max: upper angle clamp, degrees.
    hyst_up, hyst_down: direction-dependent input dead-bands, percent points.
    noise_std: per-step Gaussian process noise, degrees.
    """

    id: int
    a: float
    b1: float
    b2: float
    pwm_max: float
    u_max: float
    alpha_rest: float = 90.0
    alpha_max: float = 90.0
    hyst_up: float = 4.0
    hyst_down: float = 2.0
    noise_std: float = 0.5

    def __post_init__(self):
        if not (0.0 < self.a < 1.0):
            raise ValueError(f"pole a must be in (0, 1), got {self.a}")
        if self.b1 >= 0.0 or self.b2 >= 0.0:
            raise ValueError("b1 and b2 must be negative (inverted actuation)")
        if not (0.0 < self.pwm_max <= self.u_max <= 100.0):
            raise ValueError("need 0 < pwm_max <= u_max <= 100")
        if not (0.0 <= self.alpha_rest <= self.alpha_max):
            raise ValueError("need 0 <= alpha_rest <= alpha_max")
        if self.hyst_up < 0.0 or self.hyst_down < 0.0:
            raise ValueError("dead-bands must be non-negative")
        if self.noise_std < 0.0:
            raise ValueError("noise_std must be non-negative")


@dataclass(frozen=True)
class ValveState:
    """Plant state carried between steps.

    alpha/alpha_prev are the current and previous angles; u_prev/u_prev2
    the raw commanded inputs; u_eff the backlash-lagged effective input
    actually driving the plate; direction the sign of its last motion.
    """

    alpha: float
    alpha_prev: float
    u_prev: float = 0.0
    u_prev2: float = 0.0
    u_eff: float = 0.0
    u_eff_prev: float = 0.0
    direction: int = 0


# Bench-identified constants per valve; nonlinearity defaults are simulator
# choices (see module docstring for units).
BUILTIN_VALVES: dict[str, ValveParams] = {
    "valve1": ValveParams(id=1, a=0.78, b1=-0.18, b2=-0.23, pwm_max=65.0, u_max=80.0),
    "valve2": ValveParams(id=2, a=0.74, b1=-0.25, b2=-0.41, pwm_max=70.0, u_max=80.0),
    "valve3": ValveParams(id=3, a=0.83, b1=-0.11, b2=-0.23, pwm_max=45.0, u_max=60.0),
}


def builtin_valve(name: str) -> ValveParams:
    """Return one of the built-in parameter sets ("valve1".."valve3")."""
    try:
        return BUILTIN_VALVES[name]
    except KeyError:
        raise KeyError(
            f"unknown valve {name!r}; built-ins: {sorted(BUILTIN_VALVES)}"
        ) from None


def initial_state(params: ValveParams, alpha: float | None = None) -> ValveState:
    """State at rest: both angle lags equal, zero input history."""
    a0 = params.alpha_rest if alpha is None else float(alpha)
    if not (0.0 <= a0 <= params.alpha_max):
        raise ValueError(f"initial angle {a0} outside [0, {params.alpha_max}]")
    return ValveState(alpha=a0, alpha_prev=a0)


def step_linear(params: ValveParams, alpha: float, u1: float, u2: float) -> float:
    """Pure AR-core evaluation: a*alpha + b1*u1 + b2*u2.

    No clamp, no noise, no rest-angle term. Total function over finite inputs.
    """
    return params.a * alpha + params.b1 * u1 + params.b2 * u2


def _backlash(u: float, u_eff: float, hyst_up: float, hyst_down: float) -> float:
    # Play operator: the effective input moves only once the commanded input
    # escapes the dead-band, then tracks it offset by the band edge.
    if u - u_eff > hyst_up:
        return u - hyst_up
    if u_eff - u > hyst_down:
        return u + hyst_down
    return u_eff


def step(
    params: ValveParams,
    state: ValveState,
    u: float,
    rng: np.random.Generator | None = None,
) -> ValveState:
    """Advance the plant one sampling period under command u.

    The new angle is
        clamp(a*alpha + b1*u_eff + b2*u_eff_prev + (1-a)*alpha_rest + w, 0, alpha_max)
    with w ~ N(0, noise_std^2) and u_eff the backlash-lagged input. Raises
    on commands outside [0, u_max]. With noise_std == 0 no random draw is
    made, so noise-free runs consume no randomness.
    """
    if not (0.0 <= u <= params.u_max):
        raise ValueError(f"control {u} outside [0, {params.u_max}]")

    u_eff = _backlash(u, state.u_eff, params.hyst_up, params.hyst_down)
    if u_eff > state.u_eff:
        direction = 1
    elif u_eff < state.u_eff:
        direction = -1
    else:
        direction = state.direction

    alpha_new = (
        params.a * state.alpha
        + params.b1 * u_eff
        + params.b2 * state.u_eff
        + (1.0 - params.a) * params.alpha_rest
    )
    if params.noise_std > 0.0:
        if rng is None:
            raise ValueError("noise_std > 0 requires an rng")
        alpha_new += params.noise_std * rng.standard_normal()
    alpha_new = min(max(alpha_new, 0.0), params.alpha_max)

    return ValveState(
        alpha=alpha_new,
        alpha_prev=state.alpha,
        u_prev=u,
        u_prev2=state.u_prev,
        u_eff=u_eff,
        u_eff_prev=state.u_eff,
        direction=direction,
    )


@dataclass
class StaircaseTrace:
    """One up-then-down staircase sweep.

    Full time series (t, u, u_eff, alpha, branch, repeat) plus the per-level
    steady-state branch curves used for hysteresis metrics. branch is +1 on
    the rising sweep, -1 on the falling sweep; the apex level belongs to
    both branches.
    """

    repeat: int
    levels: np.ndarray
    up_angles: np.ndarray
    down_angles: np.ndarray
    t: np.ndarray
    u: np.ndarray
    u_eff: np.ndarray
    alpha: np.ndarray
    branch: np.ndarray


def staircase_experiment(
    params: ValveParams,
    rng: np.random.Generator,
    repeats: int = 5,
    *,
    level_step: float = 5.0,
    settle_steps: int = 40,
    dt: float = 0.05,
    steady_window: int = 10,
) -> list[StaircaseTrace]:
    """Sweep the input 0 -> pwm_max -> 0 in level_step increments.

    Each level is held settle_steps samples; the steady angle per level is
    the mean of the last steady_window samples of the hold. Returns one
    trace per repeat.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    if settle_steps < steady_window:
        raise ValueError("settle_steps must cover the steady window")

    n_up = int(round(params.pwm_max / level_step))
    up_levels = [i * level_step for i in range(n_up + 1)]
    down_levels = up_levels[-2::-1]
    sequence = [(u, +1) for u in up_levels] + [(u, -1) for u in down_levels]

    traces = []
    for rep in range(repeats):
        state = initial_state(params)
        ts, us, ueffs, alphas, branches = [], [], [], [], []
        steady: dict[tuple[float, int], float] = {}
        k = 0
        for level, branch in sequence:
            window: list[float] = []
            for _ in range(settle_steps):
                state = step(params, state, level, rng)
                ts.append(k * dt)
                us.append(level)
                ueffs.append(state.u_eff)
                alphas.append(state.alpha)
                branches.append(branch)
                window.append(state.alpha)
                k += 1
            steady[(level, branch)] = float(np.mean(window[-steady_window:]))
        # apex is sampled once, on the rising branch, and shared
        apex = up_levels[-1]
        steady[(apex, -1)] = steady[(apex, +1)]
        levels = np.asarray(up_levels)
        traces.append(
            StaircaseTrace(
                repeat=rep,
                levels=levels,
                up_angles=np.array([steady[(u, +1)] for u in up_levels]),
                down_angles=np.array([steady[(u, -1)] for u in up_levels]),
                t=np.asarray(ts),
                u=np.asarray(us),
                u_eff=np.asarray(ueffs),
                alpha=np.asarray(alphas),
                branch=np.asarray(branches),
            )
        )
    return traces


def hysteresis_metrics(trace: StaircaseTrace) -> tuple[float, float]:
    """Quantify the steady-state loop of one staircase trace.

    Returns (loop_area, asymmetry): the trapezoidal area enclosed between
    the up/down branch curves (degrees * percent points), and the spread
    max-min of the absolute branch gap across levels (degrees).
    """
    if trace.levels.size < 2:
        raise ValueError("trace lacks enough levels to span both branches")
    if np.all(trace.branch > 0) or np.all(trace.branch < 0):
        raise ValueError("trace lacks one of the two sweep branches")
    gap = np.abs(trace.up_angles - trace.down_angles)
    loop_area = float(np.trapezoid(gap, trace.levels))
    asymmetry = float(gap.max() - gap.min())
    return loop_area, asymmetry


# --- configuration and CSV surfaces -------------------------------------

def save_valve_params(path, params: ValveParams) -> None:
    """Write a parameter set as JSON under {"valves": {<name>: {...}}}."""
    doc = {"valves": {f"valve{params.id}": asdict(params)}}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_valve_params(path, name: str | None = None) -> ValveParams:
    """Load a valve parameter set from a JSON config file.

    The file holds {"valves": {name: {field: value, ...}}}. Unknown fields
    are rejected. With a single entry, name may be omitted.
    """
    with open(path) as fh:
        doc = json.load(fh)
    valves = doc.get("valves")
    if not isinstance(valves, dict) or not valves:
        raise ValueError(f"{path}: no 'valves' table found")
    if name is None:
        if len(valves) != 1:
            raise ValueError(f"{path}: several valves present, pick one of {sorted(valves)}")
        name = next(iter(valves))
    if name not in valves:
        raise ValueError(f"{path}: no valve named {name!r}")
    fields = valves[name]
    known = set(ValveParams.__dataclass_fields__)
    unknown = set(fields) - known
    if unknown:
        raise ValueError(f"{path}: unknown valve fields {sorted(unknown)}")
    return ValveParams(**fields)


def valve_variant(params: ValveParams, **overrides) -> ValveParams:
    """Copy a parameter set with some fields replaced (validated)."""
    return replace(params, **overrides)


def export_staircase_csv(path, traces: list[StaircaseTrace]) -> None:
    """Write staircase time series with columns (t, u, u_eff, alpha, branch, repeat)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "u", "u_eff", "alpha", "branch", "repeat"])
        for tr in traces:
            for i in range(tr.t.size):
                w.writerow(
                    [
                        repr(float(tr.t[i])),
                        repr(float(tr.u[i])),
                        repr(float(tr.u_eff[i])),
                        repr(float(tr.alpha[i])),
                        int(tr.branch[i]),
                        tr.repeat,
                    ]
                )
