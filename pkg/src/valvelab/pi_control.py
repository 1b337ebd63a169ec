"""Discrete-time PI controller with saturation.

Velocity (incremental) form around the previous applied control:

    u[t] = clamp(u[t-1] + r0*(alpha_ref - alpha[t]) + r1*(alpha_ref - alpha[t-1]))

which expands to u[t-1] - r0*alpha[t] - r1*alpha[t-1] + (r0+r1)*alpha_ref.
The incremental form is kept deliberately: because it integrates on top of
the previous *clamped* control, the integrator cannot wind up during
saturation, and at alpha == alpha_prev == alpha_ref the error terms are
exactly zero so the output reproduces u[t-1] bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from .env import Observation

__all__ = ["PiGains", "BUILTIN_GAINS", "builtin_gains", "pi_control",
           "load_pi_gains", "save_pi_gains"]


@dataclass(frozen=True)
class PiGains:
    """PI gains in percent points per degree, plus actuation bounds."""

    r0: float
    r1: float
    u_min: float = 0.0
    u_max: float = 80.0

    def __post_init__(self):
        if not self.u_min < self.u_max:
            raise ValueError(f"need u_min < u_max, got [{self.u_min}, {self.u_max}]")


# Identified gain sets for the three built-in valves, keyed by valve id.
BUILTIN_GAINS: dict[int, PiGains] = {
    1: PiGains(r0=-2.28, r1=1.83, u_min=0.0, u_max=80.0),
    2: PiGains(r0=-1.31, r1=1.01, u_min=0.0, u_max=80.0),
    3: PiGains(r0=-2.33, r1=1.96, u_min=0.0, u_max=60.0),
}


def builtin_gains(valve_id: int) -> PiGains:
    try:
        return BUILTIN_GAINS[valve_id]
    except KeyError:
        raise KeyError(f"no built-in gains for valve id {valve_id}") from None


def pi_control(obs: "Observation", gains: PiGains) -> float:
    """One PI update from an observation; output clamped to the bounds."""
    u = (
        obs.u_prev
        + gains.r0 * (obs.alpha_ref - obs.alpha)
        + gains.r1 * (obs.alpha_ref - obs.alpha_prev)
    )
    return min(max(u, gains.u_min), gains.u_max)


def save_pi_gains(path, gains: PiGains) -> None:
    with open(path, "w") as fh:
        json.dump({"pi_gains": asdict(gains)}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_pi_gains(path) -> PiGains:
    with open(path) as fh:
        doc = json.load(fh)
    if "pi_gains" not in doc:
        raise ValueError(f"{path}: no 'pi_gains' table found")
    fields = doc["pi_gains"]
    unknown = set(fields) - set(PiGains.__dataclass_fields__)
    if unknown:
        raise ValueError(f"{path}: unknown gain fields {sorted(unknown)}")
    return PiGains(**fields)
