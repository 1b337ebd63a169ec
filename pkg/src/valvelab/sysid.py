"""Identification and PI tuning pipeline.

PRBS excitation, least-squares fit of the second-order-input AR model

    alpha[t] = a * alpha[t-1] + b1 * u[t-1] + b2 * u[t-2]

and PI gain synthesis by discrete pole placement from a damping ratio and
rise time.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .pi_control import PiGains
from .valve import ValveParams, valve_variant

__all__ = [
    "PrbsConfig",
    "ArxFit",
    "PiDesignSpec",
    "generate_prbs",
    "fit_arx",
    "design_pi_gains",
    "closed_loop_poles",
    "arx_to_valve_params",
    "export_identification_csv",
    "load_identification_csv",
]


@dataclass(frozen=True)
class PrbsConfig:
    """Two-level excitation taking values center +/- amplitude."""

    length: int = 1022
    center: float = 16.0
    amplitude: float = 8.0
    seed: int = 0

    def __post_init__(self):
        if self.length < 1:
            raise ValueError("length must be >= 1")
        if self.amplitude < 0.0:
            raise ValueError("amplitude must be non-negative")
        if self.center - self.amplitude < 0.0 or self.center + self.amplitude > 100.0:
            raise ValueError(
                f"levels {self.center}±{self.amplitude} escape [0, 100]"
            )


# Feedback tap positions (1-indexed) of maximal-length shift registers.
_LFSR_TAPS = {
    2: (2, 1), 3: (3, 2), 4: (4, 3), 5: (5, 3), 6: (6, 5), 7: (7, 6),
    8: (8, 6, 5, 4), 9: (9, 5), 10: (10, 7), 11: (11, 9), 12: (12, 6, 4, 1),
    13: (13, 4, 3, 1), 14: (14, 5, 3, 1), 15: (15, 14), 16: (16, 15, 13, 4),
}


def _max_length_bits(order: int, state: int, count: int) -> np.ndarray:
    """count output bits of the order-n maximal-length register.

    state is the nonzero initial register content (low bit = stage 1).
    The output is stage n; feedback is the XOR of the tap stages.
    """
    if order not in _LFSR_TAPS:
        raise ValueError(f"no tap table for register order {order}")
    if not 0 < state < 2**order:
        raise ValueError("initial register state must be a nonzero n-bit value")
    taps = _LFSR_TAPS[order]
    bits = np.empty(count, dtype=np.int8)
    for i in range(count):
        bits[i] = (state >> (order - 1)) & 1
        fb = 0
        for t in taps:
            fb ^= (state >> (t - 1)) & 1
        state = ((state << 1) | fb) & (2**order - 1)
    return bits


def generate_prbs(cfg: PrbsConfig) -> np.ndarray:
    """Maximal-length binary excitation of exactly cfg.length samples.

    The register order is the smallest whose full period covers the
    requested length; the seed picks the starting register state.
    """
    order = 2
    while 2**order - 1 < cfg.length and order < max(_LFSR_TAPS):
        order += 1
    rng = np.random.default_rng(cfg.seed)
    state = int(rng.integers(1, 2**order))
    bits = _max_length_bits(order, state, cfg.length)
    return np.where(bits > 0, cfg.center + cfg.amplitude, cfg.center - cfg.amplitude)


_COLUMN_NAMES = ("alpha[t-1]", "u[t-1]", "u[t-2]")


@dataclass(frozen=True)
class ArxFit:
    a: float
    b1: float
    b2: float
    residual_rms: float

    def __post_init__(self):
        if self.residual_rms < 0.0:
            raise ValueError("residual_rms must be non-negative")


def fit_arx(u, alpha) -> ArxFit:
    """Ordinary least squares for (a, b1, b2) from aligned input/angle data.

    Rows are alpha[t] ~ a*alpha[t-1] + b1*u[t-1] + b2*u[t-2] for t >= 2.
    Solved through the normal equations; falls back to an SVD solve when
    their conditioning exceeds 1e8. A rank-deficient regressor (for
    example a constant input, which makes the two u columns collinear)
    raises with the most involved column named.
    """
    u = np.asarray(u, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    if u.shape != alpha.shape or u.ndim != 1:
        raise ValueError("u and alpha must be aligned 1-d sequences")
    if u.size < 10:
        raise ValueError(f"need at least 10 samples, got {u.size}")

    X = np.column_stack([alpha[1:-1], u[1:-1], u[:-2]])
    y = alpha[2:]

    _, sv, vt = np.linalg.svd(X, full_matrices=False)
    if sv[0] == 0.0 or sv[-1] / sv[0] < 1e-10:
        worst = int(np.argmax(np.abs(vt[-1])))
        raise ValueError(
            "rank-deficient regressor matrix; most involved column: "
            f"{_COLUMN_NAMES[worst]} (constant or collinear input?)"
        )

    G = X.T @ X
    if np.linalg.cond(G) <= 1e8:
        theta = np.linalg.solve(G, X.T @ y)
    else:
        theta, *_ = np.linalg.lstsq(X, y, rcond=None)

    resid = y - X @ theta
    rms = float(np.sqrt(np.mean(resid**2)))
    return ArxFit(a=float(theta[0]), b1=float(theta[1]), b2=float(theta[2]),
                  residual_rms=rms)


@dataclass(frozen=True)
class PiDesignSpec:
    """Target closed-loop behavior: damping ratio and 10-90% rise time."""

    zeta: float = 1.0
    t_rise: float = 0.8
    ts: float = 0.05

    def __post_init__(self):
        if self.zeta <= 0.0 or self.t_rise <= 0.0 or self.ts <= 0.0:
            raise ValueError("zeta, t_rise and ts must all be positive")


def _characteristic(fit_a, fit_b1, fit_b2, r0, r1) -> np.ndarray:
    # 1 + (-a-1+b1*r0) q^-1 + (a+b1*r1+b2*r0) q^-2 + (b2*r1) q^-3
    return np.array([
        1.0,
        -fit_a - 1.0 + fit_b1 * r0,
        fit_a + fit_b1 * r1 + fit_b2 * r0,
        fit_b2 * r1,
    ])


def design_pi_gains(
    fit: ArxFit,
    spec: PiDesignSpec = PiDesignSpec(),
    *,
    u_min: float = 0.0,
    u_max: float = 80.0,
) -> PiGains:
    """Place a double closed-loop pole at p = exp(-wn*ts), wn = 2.2/(zeta*t_rise).

    The loop of the AR model under the incremental PI law has the cubic
    characteristic polynomial assembled in closed_loop_poles; two gains can
    match only two of its three coefficients, so the q^-1 and q^-2 terms
    are matched to (1 - p*q^-1)^2 and the actual closed-loop spectrum is
    audited afterwards: a warning is issued when any root falls on or
    outside the unit circle.
    """
    if fit.b1 == 0.0:
        raise ValueError("b1 = 0: control has no first-step authority, gains unsolvable")
    wn = 2.2 / (spec.zeta * spec.t_rise)
    p = float(np.exp(-wn * spec.ts))
    r0 = (1.0 + fit.a - 2.0 * p) / fit.b1
    r1 = (p * p - fit.a - fit.b2 * r0) / fit.b1
    # The constant coefficient b2*r1 is left unmatched, which displaces all
    # three actual roots away from the nominal double pole; audit the real
    # spectrum rather than trusting the placement.
    gains = PiGains(r0=r0, r1=r1, u_min=u_min, u_max=u_max)
    radius = max(abs(z) for z in closed_loop_poles(fit, gains))
    if radius >= 1.0:
        warnings.warn(
            f"two-coefficient placement leaves the loop unstable: spectral "
            f"radius {radius:.4f} >= 1 (unmatched constant term {fit.b2 * r1:.4f})",
            stacklevel=2,
        )
    return gains


def closed_loop_poles(fit: ArxFit, gains: PiGains) -> list[complex]:
    """Roots of the closed-loop characteristic cubic for (model, gains)."""
    return [complex(z) for z in np.roots(_characteristic(
        fit.a, fit.b1, fit.b2, gains.r0, gains.r1))]


def arx_to_valve_params(fit: ArxFit, base: ValveParams) -> ValveParams:
    """Graft fitted coefficients onto an existing parameter set (validated)."""
    return valve_variant(base, a=fit.a, b1=fit.b1, b2=fit.b2)


def export_identification_csv(path, t, u, alpha) -> None:
    """Write an identification record with columns (t, u, alpha)."""
    t = np.asarray(t, dtype=float)
    u = np.asarray(u, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    if not (t.shape == u.shape == alpha.shape):
        raise ValueError("t, u, alpha must be aligned")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "u", "alpha"])
        for i in range(t.size):
            w.writerow([repr(float(t[i])), repr(float(u[i])), repr(float(alpha[i]))])


def load_identification_csv(path):
    """Read (t, u, alpha) arrays back from an identification CSV."""
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header != ["t", "u", "alpha"]:
            raise ValueError(f"{path}: unexpected columns {header}")
        rows = [(float(a), float(b), float(c)) for a, b, c in r]
    if not rows:
        raise ValueError(f"{path}: empty identification record")
    t, u, alpha = (np.array(col) for col in zip(*rows))
    return t, u, alpha
