"""Experiment driver: scenario specifications, rollout and training runners,
metric aggregation, and CSV/JSON persistence.

Reports are reproducible from (spec, seeds, checkpoints) alone: every
environment stream is derived from the scenario seed and the valve, never
from the controller, so all controllers under one seed face identical
reference sequences and disturbance realizations. Wall-clock runtimes are
kept out of the CSV files (they go to JSON sidecars), which makes repeated
runs byte-identical.
"""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .env import EpisodeConfig, EpisodeTrace, ValveEnv
from .guided import load_pirl_checkpoint, save_pirl_checkpoint, train_pirl
from .nn import load_arrays
from .pi_control import builtin_gains, pi_control
from .td3 import Td3Config, load_td3_checkpoint, save_td3_checkpoint, train_td3
from .valve import BUILTIN_VALVES, ValveParams, builtin_valve

__all__ = [
    "PROFILES",
    "STANDARD_PERIODS",
    "ScenarioSpec",
    "MetricRow",
    "MetricReport",
    "LearningCurveSet",
    "mse",
    "mse_per_step",
    "moving_average",
    "make_controller",
    "run_episode",
    "run_tracking",
    "run_noise_robustness",
    "run_learning_curves",
    "noise_trend",
    "save_checkpoint",
    "load_checkpoint",
    "export_report_csv",
    "export_report_json",
    "export_curves_csv",
    "export_aggregate_curves_csv",
    "load_episode_csv",
]

# Named training profiles: "full" is the full-size configuration, "desk"
# a small-network variant for laptop-scale studies and the test suite.
PROFILES = {
    "full": Td3Config(),
    "desk": Td3Config(hidden=(32, 32), capacity=50_000),
}

# Reference-change periods used by the tracking scenarios (seconds); the
# faster one stresses controllers at twice their training rate.
STANDARD_PERIODS = (5.0, 2.5)

CONTROLLER_NAMES = ("pi", "td3", "pirl")
SCENARIO_KINDS = ("tracking", "noise-robustness", "staircase", "learning-curve")
NOISE_KINDS = ("output", "control")
RL_CONTROLLERS = ("td3", "pirl")


@dataclass(frozen=True)
class ScenarioSpec:
    """Declarative description of one experiment grid.

    Grid points (valve x controller x seed x condition) are independent
    jobs; `workers` bounds how many run concurrently. Results never depend
    on `workers` because each job derives its own random streams.
    """

    kind: str
    valves: tuple = ("valve1", "valve2", "valve3")
    controllers: tuple = ("pi",)
    period: float = 5.0
    segments: int = 8
    dt: float = 0.05
    ref_range: tuple = (10.0, 80.0)
    noise_kinds: tuple = NOISE_KINDS
    noise_stds: tuple = (0.0, 2.0, 5.0, 10.0, 20.0)
    seeds: tuple = (0,)
    episodes: int = 300
    smoothing_window: int = 25
    profile: str = "desk"
    eta: float = 0.5
    workers: int = 1

    def __post_init__(self):
        for name in ("valves", "controllers", "noise_kinds", "noise_stds",
                     "seeds", "ref_range"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.kind not in SCENARIO_KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if not self.valves or not self.controllers:
            raise ValueError("valve and controller sets must be non-empty")
        for v in self.valves:
            if v not in BUILTIN_VALVES:
                raise ValueError(f"unknown valve {v!r}")
        for c in self.controllers:
            if c not in CONTROLLER_NAMES:
                raise ValueError(f"unknown controller {c!r}")
        for k in self.noise_kinds:
            if k not in NOISE_KINDS:
                raise ValueError(f"unknown noise kind {k!r}")
        if min(self.noise_stds, default=0.0) < 0.0:
            raise ValueError("noise stds must be non-negative")
        if self.period <= 0.0 or self.dt <= 0.0:
            raise ValueError("period and dt must be positive")
        if self.segments < 1 or self.episodes < 1:
            raise ValueError("segments and episodes must be >= 1")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if self.smoothing_window < 1:
            raise ValueError("smoothing_window must be >= 1")
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must be in [0, 1]")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @property
    def segment_steps(self) -> int:
        steps = int(round(self.period / self.dt))
        if steps < 1:
            raise ValueError("period shorter than one control step")
        return steps


@dataclass(frozen=True)
class MetricRow:
    """One aggregated grid cell; `count` records how many rollouts the
    mean/std were computed over."""

    valve: str
    controller: str
    condition: str
    mse_mean: float
    mse_std: float
    count: int

    def __post_init__(self):
        if self.mse_std < 0.0 or self.count < 1:
            raise ValueError("std must be >= 0 and count >= 1")


@dataclass
class MetricReport:
    scenario: str
    rows: list = field(default_factory=list)
    seeds: tuple = ()
    runtime: float = 0.0


# --- metrics ----------------------------------------------------------------

def mse(trace: EpisodeTrace) -> float:
    """Tracking error as the Euclidean norm of the pointwise error sequence
    (degrees). This is the headline metric; note it is an L2 norm, not a
    per-step mean, so it grows with trace length."""
    if len(trace) == 0:
        raise ValueError("trace is empty")
    err = np.asarray(trace.alpha) - np.asarray(trace.alpha_ref)
    return float(np.linalg.norm(err))

def mse_per_step(trace: EpisodeTrace) -> float:
    """Per-step mean of squared errors (degrees squared): the conventional
    mean-squared-error, exposed separately so the two cannot be confused."""
    if len(trace) == 0:
        raise ValueError("trace is empty")
    err = np.asarray(trace.alpha) - np.asarray(trace.alpha_ref)
    return float(np.mean(err**2))


def moving_average(x, window: int) -> np.ndarray:
    """Trailing moving average with a warm-up ramp; same length as x."""
    if window < 1:
        raise ValueError("window must be >= 1")
    x = np.asarray(x, dtype=float)
    csum = np.concatenate([[0.0], np.cumsum(x)])
    out = np.empty(x.size)
    for i in range(x.size):
        j = max(0, i - window + 1)
        out[i] = (csum[i + 1] - csum[j]) / (i + 1 - j)
    return out


def _aggregate(values) -> tuple[float, float, int]:
    arr = np.asarray(values, dtype=float)
    # population std: the rows report spread of the recorded runs, not an
    # estimator of a hypothetical wider population
    return float(arr.mean()), float(arr.std()), int(arr.size)


# --- controllers and checkpoints --------------------------------------------

def save_checkpoint(path, agent, seed=None, extra=None) -> None:
    """Persist either agent kind; the manifest records which."""
    if agent.kind == "td3":
        save_td3_checkpoint(path, agent, seed=seed, extra=extra)
    elif agent.kind == "pirl":
        save_pirl_checkpoint(path, agent, seed=seed, extra=extra)
    else:
        raise ValueError(f"unknown agent kind {agent.kind!r}")


def load_checkpoint(path):
    """Load a checkpoint of either kind, dispatching on its manifest."""
    _, meta = load_arrays(path)
    kind = meta.get("kind")
    if kind == "td3":
        return load_td3_checkpoint(path)
    if kind == "pirl":
        return load_pirl_checkpoint(path)
    raise ValueError(f"{path}: unknown checkpoint kind {kind!r}")


def _resolve_agent(name: str, valve: ValveParams, source):
    if source is None:
        raise ValueError(f"missing checkpoint for {name} on valve{valve.id}")
    agent = load_checkpoint(source) if isinstance(source, (str, bytes)) or \
        hasattr(source, "__fspath__") else source
    if agent.kind != name:
        raise ValueError(f"checkpoint kind {agent.kind!r} does not match "
                         f"controller {name!r}")
    if agent.u_max != valve.u_max:
        raise ValueError(f"agent u_max {agent.u_max} does not match "
                         f"valve{valve.id} u_max {valve.u_max}")
    return agent


def make_controller(name: str, valve: ValveParams, checkpoint=None):
    """Build an evaluation policy (Observation -> control) for one valve.

    "pi" uses the built-in gain set for the valve. "td3" and "pirl" need
    `checkpoint`: a path or an already-loaded/trained agent. Evaluation is
    always deterministic (no exploration noise).
    """
    if name == "pi":
        gains = builtin_gains(valve.id)
        if gains.u_max != valve.u_max:
            raise ValueError("built-in gains do not match the valve bounds")
        return lambda obs: pi_control(obs, gains)
    if name in RL_CONTROLLERS:
        agent = _resolve_agent(name, valve, checkpoint)
        return lambda obs: agent.select_control(obs)
    raise ValueError(f"unknown controller {name!r}")


def _lookup_checkpoint(checkpoints, valve_name: str, controller: str):
    if not checkpoints:
        return None
    for key in ((valve_name, controller), f"{valve_name}:{controller}"):
        if key in checkpoints:
            return checkpoints[key]
    return None


# --- deterministic stream derivation -----------------------------------------

def _env_rng(seed: int, valve: ValveParams) -> np.random.Generator:
    """Environment stream for one (seed, valve) grid point. Deliberately
    independent of the controller so comparisons are paired."""
    return np.random.default_rng(np.random.SeedSequence([seed, valve.id]))


def _job_seed(seed: int, valve: ValveParams) -> int:
    """Integer training seed for one (seed, valve) point, shared by both
    agents so their environment streams match."""
    return int(np.random.SeedSequence([seed, valve.id]).generate_state(1)[0])


def _run_jobs(jobs, workers: int):
    """Execute callables, preserving submission order in the results."""
    if workers <= 1:
        return [job() for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return [f.result() for f in [pool.submit(job) for job in jobs]]


# --- rollout runners ----------------------------------------------------------

def run_episode(env: ValveEnv, controller, *, segments: int = 1,
                controller_id: str = "", seed: int = -1) -> EpisodeTrace:
    """Roll one (possibly multi-segment) episode; the trace records the
    true plant angle, the applied and the commanded control per step."""
    if segments < 1:
        raise ValueError("segments must be >= 1")
    obs = env.reset()
    trace = EpisodeTrace(valve_id=env.valve.id, controller_id=controller_id,
                         seed=seed)
    k = 0
    for seg in range(segments):
        if seg:
            obs = env.new_reference()
        done = False
        while not done:
            u = controller(obs)
            obs, cost, done = env.step(u)
            k += 1
            trace.append(k * env.cfg.dt, env.alpha_ref, env.alpha_true,
                         env.last_u_applied, u, cost)
    return trace


def _episode_config(spec: ScenarioSpec, output_noise_std: float = 0.0,
                    control_noise_std: float = 0.0) -> EpisodeConfig:
    return EpisodeConfig(
        horizon=spec.segment_steps,
        dt=spec.dt,
        ref_range=spec.ref_range,
        output_noise_std=output_noise_std,
        control_noise_std=control_noise_std,
    )


def _tracking_mses(spec: ScenarioSpec, valve: ValveParams, controller,
                   controller_id: str, cfg: EpisodeConfig,
                   collect: list | None = None) -> list:
    """MSE per scenario seed for one grid cell; optionally collects traces."""
    out = []
    for seed in spec.seeds:
        env = ValveEnv(cfg, valve, _env_rng(seed, valve))
        trace = run_episode(env, controller, segments=spec.segments,
                            controller_id=controller_id, seed=seed)
        if collect is not None:
            collect.append(trace)
        out.append(mse(trace))
    return out


def run_tracking(spec: ScenarioSpec, checkpoints=None):
    """Chained-reference tracking over the valve x controller grid.

    Returns (traces, MetricReport) with one aggregated row per grid cell;
    all controllers on one (valve, seed) face identical references.
    """
    if spec.kind != "tracking":
        raise ValueError(f"expected a tracking spec, got {spec.kind!r}")
    t0 = time.perf_counter()
    cfg = _episode_config(spec)
    cells = []
    for valve_name in spec.valves:
        valve = builtin_valve(valve_name)
        for name in spec.controllers:
            controller = make_controller(
                name, valve, _lookup_checkpoint(checkpoints, valve_name, name))
            cells.append((valve_name, valve, name, controller))

    def job(cell):
        valve_name, valve, name, controller = cell
        traces: list = []
        mses = _tracking_mses(spec, valve, controller, name, cfg, traces)
        return valve_name, name, traces, mses

    results = _run_jobs([lambda c=c: job(c) for c in cells], spec.workers)
    traces, rows = [], []
    for valve_name, name, cell_traces, mses in results:
        traces.extend(cell_traces)
        mean, std, count = _aggregate(mses)
        rows.append(MetricRow(valve=valve_name, controller=name,
                              condition=f"period={spec.period}",
                              mse_mean=mean, mse_std=std, count=count))
    report = MetricReport(scenario="tracking", rows=rows, seeds=spec.seeds,
                          runtime=time.perf_counter() - t0)
    return traces, report


def run_noise_robustness(spec: ScenarioSpec, checkpoints=None) -> MetricReport:
    """Tracking MSE over a noise kind x std grid, aggregated across valves
    and seeds (one row per kind x std x controller).

    The std=0 column reuses exactly the nominal environment streams, so it
    equals the nominal tracking MSE.
    """
    if spec.kind != "noise-robustness":
        raise ValueError(f"expected a noise-robustness spec, got {spec.kind!r}")
    t0 = time.perf_counter()
    controllers = {}
    for valve_name in spec.valves:
        valve = builtin_valve(valve_name)
        for name in spec.controllers:
            controllers[(valve_name, name)] = (valve, make_controller(
                name, valve, _lookup_checkpoint(checkpoints, valve_name, name)))

    grid = [(kind, std, name)
            for kind in spec.noise_kinds
            for std in spec.noise_stds
            for name in spec.controllers]

    def job(point):
        kind, std, name = point
        cfg = _episode_config(
            spec,
            output_noise_std=std if kind == "output" else 0.0,
            control_noise_std=std if kind == "control" else 0.0,
        )
        values = []
        for valve_name in spec.valves:
            valve, controller = controllers[(valve_name, name)]
            values.extend(_tracking_mses(spec, valve, controller, name, cfg))
        return point, values

    results = _run_jobs([lambda p=p: job(p) for p in grid], spec.workers)
    rows = []
    for (kind, std, name), values in results:
        mean, std_out, count = _aggregate(values)
        rows.append(MetricRow(valve="all", controller=name,
                              condition=f"{kind},std={std}",
                              mse_mean=mean, mse_std=std_out, count=count))
    return MetricReport(scenario="noise-robustness", rows=rows,
                        seeds=spec.seeds, runtime=time.perf_counter() - t0)


def noise_trend(report: MetricReport, kind: str, controller: str) -> float:
    """Spearman rank correlation between noise std and mean MSE for one
    noise kind and controller; positive means degradation with noise."""
    stds, means = [], []
    prefix = f"{kind},std="
    for row in report.rows:
        if row.controller == controller and row.condition.startswith(prefix):
            stds.append(float(row.condition[len(prefix):]))
            means.append(row.mse_mean)
    if len(stds) < 3:
        raise ValueError("need at least three grid points for a trend")
    return float(stats.spearmanr(stds, means).statistic)


# --- learning curves ----------------------------------------------------------

@dataclass
class LearningCurveSet:
    """Raw and smoothed per-run curves plus cross-valve aggregates.

    raw/smoothed are keyed (agent, valve, seed); aggregates are keyed by
    agent and average over every (valve, seed) run, matching the
    averaged-over-valves presentation of the learning curves.
    """

    agents: tuple
    episodes: int
    window: int
    raw: dict
    smoothed: dict
    aggregate: dict
    aggregate_smoothed: dict
    results: dict
    runtime: float = 0.0


def run_learning_curves(spec: ScenarioSpec) -> LearningCurveSet:
    """Train every RL controller in the spec on every valve and seed.

    Both agents at one (valve, seed) grid point train against identical
    environment streams (same derived seed), making their curves paired.
    """
    if spec.kind != "learning-curve":
        raise ValueError(f"expected a learning-curve spec, got {spec.kind!r}")
    agents = tuple(c for c in spec.controllers if c in RL_CONTROLLERS)
    if not agents:
        raise ValueError("learning-curve specs need td3 and/or pirl")
    t0 = time.perf_counter()
    cfg = PROFILES[spec.profile]

    def factory_for(valve: ValveParams):
        econf = _episode_config(spec)

        def make(rng):
            return ValveEnv(econf, valve, rng)

        return make

    points = [(agent, valve_name, seed)
              for agent in agents
              for valve_name in spec.valves
              for seed in spec.seeds]

    def job(point):
        agent, valve_name, seed = point
        valve = builtin_valve(valve_name)
        job_seed = _job_seed(seed, valve)
        if agent == "td3":
            res = train_td3(factory_for(valve), cfg, spec.episodes, job_seed)
        else:
            res = train_pirl(factory_for(valve), builtin_gains(valve.id), cfg,
                             spec.episodes, job_seed, eta=spec.eta)
        return point, res

    results_list = _run_jobs([lambda p=p: job(p) for p in points], spec.workers)
    raw, smoothed, results = {}, {}, {}
    for point, res in results_list:
        raw[point] = res.curve
        smoothed[point] = moving_average(res.curve, spec.smoothing_window)
        results[point] = res
    aggregate, aggregate_smoothed = {}, {}
    for agent in agents:
        stack = np.vstack([raw[(agent, v, s)]
                           for v in spec.valves for s in spec.seeds])
        aggregate[agent] = stack.mean(axis=0)
        aggregate_smoothed[agent] = moving_average(aggregate[agent],
                                                   spec.smoothing_window)
    return LearningCurveSet(
        agents=agents,
        episodes=spec.episodes,
        window=spec.smoothing_window,
        raw=raw,
        smoothed=smoothed,
        aggregate=aggregate,
        aggregate_smoothed=aggregate_smoothed,
        results=results,
        runtime=time.perf_counter() - t0,
    )


# --- persistence ---------------------------------------------------------------

def export_report_csv(path, report: MetricReport) -> None:
    """Columns: scenario,valve,controller,condition,mse_mean,mse_std,count.
    Row order follows the report; floats use repr so equal runs produce
    byte-identical files. Runtime is deliberately not included."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario", "valve", "controller", "condition",
                    "mse_mean", "mse_std", "count"])
        for r in report.rows:
            w.writerow([report.scenario, r.valve, r.controller, r.condition,
                        repr(r.mse_mean), repr(r.mse_std), r.count])


def export_report_json(path, report: MetricReport, extra: dict | None = None) -> None:
    """Sidecar with everything the CSV omits (runtime, seed list)."""
    payload = {
        "scenario": report.scenario,
        "seeds": list(report.seeds),
        "runtime_seconds": report.runtime,
        "rows": [
            {"valve": r.valve, "controller": r.controller,
             "condition": r.condition, "mse_mean": r.mse_mean,
             "mse_std": r.mse_std, "count": r.count}
            for r in report.rows
        ],
    }
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def export_curves_csv(path, curves: LearningCurveSet) -> None:
    """Columns: agent,valve,seed,episode,cost,smoothed (one row per
    episode of each run); episodes count from 1."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["agent", "valve", "seed", "episode", "cost", "smoothed"])
        for (agent, valve, seed), curve in curves.raw.items():
            smooth = curves.smoothed[(agent, valve, seed)]
            for ep in range(curve.size):
                w.writerow([agent, valve, seed, ep + 1,
                            repr(float(curve[ep])), repr(float(smooth[ep]))])


def export_aggregate_curves_csv(path, curves: LearningCurveSet) -> None:
    """Columns: agent,episode,mean_cost,smoothed (cross-valve averages)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["agent", "episode", "mean_cost", "smoothed"])
        for agent in curves.agents:
            curve = curves.aggregate[agent]
            smooth = curves.aggregate_smoothed[agent]
            for ep in range(curve.size):
                w.writerow([agent, ep + 1, repr(float(curve[ep])),
                            repr(float(smooth[ep]))])


def load_episode_csv(path) -> list[EpisodeTrace]:
    """Read traces written by export_episode_csv; values round-trip exactly
    (repr formatting), so recomputed metrics match the original run."""
    traces: list[EpisodeTrace] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = ["valve", "controller", "seed", "t", "alpha_ref", "alpha",
                    "u_applied", "u_commanded", "cost"]
        if header != expected:
            raise ValueError(f"{path}: unexpected header {header}")
        key = None
        for row in reader:
            row_key = (int(row[0]), row[1], int(row[2]))
            if row_key != key:
                traces.append(EpisodeTrace(valve_id=row_key[0],
                                           controller_id=row_key[1],
                                           seed=row_key[2]))
                key = row_key
            traces[-1].append(*(float(v) for v in row[3:9]))
    return traces
