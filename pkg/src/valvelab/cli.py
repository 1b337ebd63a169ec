"""Command-line surface.

Subcommands: staircase, identify, tune-pi, train, evaluate, curves. Every
subcommand accepts --config (a flat JSON object supplying values for any
flag left off the command line), --seed/--seeds, and --out (output
directory). Exit status is 0 on success and 2 on any failed precondition,
with a diagnostic on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .harness import (
    PROFILES,
    ScenarioSpec,
    export_aggregate_curves_csv,
    export_curves_csv,
    export_report_csv,
    export_report_json,
    run_learning_curves,
    run_noise_robustness,
    run_tracking,
    save_checkpoint,
)
from .env import export_episode_csv
from .pi_control import save_pi_gains
from .sysid import (
    ArxFit,
    PiDesignSpec,
    PrbsConfig,
    closed_loop_poles,
    design_pi_gains,
    export_identification_csv,
    fit_arx,
    generate_prbs,
)
from .valve import (
    builtin_valve,
    export_staircase_csv,
    hysteresis_metrics,
    initial_state,
    staircase_experiment,
    step as valve_step,
)

__all__ = ["main"]

RL_NAMES = ("td3", "pirl")


def _load_config(path) -> dict:
    with open(path) as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return cfg


def _opt(args, name, default):
    """Flag value if given, else the config file's, else the default."""
    value = getattr(args, name, None)
    if value is not None:
        return value
    if args.config_data and name in args.config_data:
        return args.config_data[name]
    return default


def _ints(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).split(","))


def _names(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(text)
    return tuple(v.strip() for v in str(text).split(",") if v.strip())


def _floats(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(float(v) for v in text)
    return tuple(float(v) for v in str(text).split(","))


def _out_dir(args) -> Path:
    out = Path(_opt(args, "out", "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _rng_for(seed: int, valve) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, valve.id]))


# --- subcommands -------------------------------------------------------------

def cmd_staircase(args) -> int:
    valve = builtin_valve(_opt(args, "valve", "valve1"))
    seed = int(_opt(args, "seed", 0))
    repeats = int(_opt(args, "repeats", 5))
    out = _out_dir(args)
    traces = staircase_experiment(valve, _rng_for(seed, valve), repeats=repeats)
    csv_path = out / f"staircase_valve{valve.id}.csv"
    export_staircase_csv(csv_path, traces)
    metrics = [hysteresis_metrics(tr) for tr in traces]
    areas = [m[0] for m in metrics]
    asyms = [m[1] for m in metrics]
    payload = {
        "valve": valve.id,
        "seed": seed,
        "repeats": repeats,
        "loop_area_mean": float(np.mean(areas)),
        "loop_area_std": float(np.std(areas)),
        "asymmetry_mean": float(np.mean(asyms)),
        "asymmetry_std": float(np.std(asyms)),
    }
    json_path = out / f"staircase_valve{valve.id}.json"
    with open(json_path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {csv_path} and {json_path}: loop area "
          f"{payload['loop_area_mean']:.2f} +- {payload['loop_area_std']:.2f}")
    return 0


def cmd_identify(args) -> int:
    valve = builtin_valve(_opt(args, "valve", "valve1"))
    seed = int(_opt(args, "seed", 0))
    length = int(_opt(args, "length", 1022))
    center = float(_opt(args, "center", 16.0))
    amplitude = float(_opt(args, "amplitude", 8.0))
    dt = float(_opt(args, "dt", 0.05))
    out = _out_dir(args)
    if not (0.0 <= center - amplitude and center + amplitude <= valve.u_max):
        raise ValueError("excitation levels escape the valve's control range")
    u = generate_prbs(PrbsConfig(length=length, center=center,
                                 amplitude=amplitude, seed=seed))
    rng = _rng_for(seed, valve)
    state = initial_state(valve)
    alphas = [state.alpha]
    for uk in u:
        state = valve_step(valve, state, float(uk), rng)
        alphas.append(state.alpha)
    alpha = np.array(alphas[:-1])
    fit = fit_arx(u, alpha)
    t = np.arange(length) * dt
    csv_path = out / f"identification_valve{valve.id}.csv"
    export_identification_csv(csv_path, t, u, alpha)
    fit_path = out / f"arx_valve{valve.id}.json"
    with open(fit_path, "w") as fh:
        json.dump({"a": fit.a, "b1": fit.b1, "b2": fit.b2,
                   "residual_rms": fit.residual_rms}, fh, indent=2,
                  sort_keys=True)
        fh.write("\n")
    print(f"wrote {csv_path} and {fit_path}: a={fit.a:.4f} b1={fit.b1:.4f} "
          f"b2={fit.b2:.4f} (residual rms {fit.residual_rms:.3f})")
    return 0


def cmd_tune_pi(args) -> int:
    valve = builtin_valve(_opt(args, "valve", "valve1"))
    fit_path = _opt(args, "fit", None)
    if fit_path is not None:
        with open(fit_path) as fh:
            data = json.load(fh)
        fit = ArxFit(a=data["a"], b1=data["b1"], b2=data["b2"],
                     residual_rms=data.get("residual_rms", 0.0))
    else:
        fit = ArxFit(a=valve.a, b1=valve.b1, b2=valve.b2, residual_rms=0.0)
    spec = PiDesignSpec(
        zeta=float(_opt(args, "zeta", 1.0)),
        t_rise=float(_opt(args, "t_rise", 0.8)),
        ts=float(_opt(args, "dt", 0.05)),
    )
    out = _out_dir(args)
    gains = design_pi_gains(fit, spec, u_min=0.0, u_max=valve.u_max)
    radius = max(abs(z) for z in closed_loop_poles(fit, gains))
    gains_path = out / f"pi_gains_valve{valve.id}.json"
    save_pi_gains(gains_path, gains)
    print(f"wrote {gains_path}: r0={gains.r0:.4f} r1={gains.r1:.4f} "
          f"(closed-loop spectral radius {radius:.4f})")
    return 0


def _scenario_from_args(args, kind: str, controllers, seeds,
                        valves=None) -> ScenarioSpec:
    return ScenarioSpec(
        kind=kind,
        valves=valves or _names(_opt(args, "valves", "valve1,valve2,valve3")),
        controllers=controllers,
        period=float(_opt(args, "period", 5.0)),
        segments=int(_opt(args, "segments", 8)),
        dt=float(_opt(args, "dt", 0.05)),
        ref_range=_floats(_opt(args, "ref_range", (10.0, 80.0))),
        noise_kinds=_names(_opt(args, "noise_kinds", ("output", "control"))),
        noise_stds=_floats(_opt(args, "noise_stds", (0.0, 2.0, 5.0, 10.0, 20.0))),
        seeds=seeds,
        episodes=int(_opt(args, "episodes", 300)),
        smoothing_window=int(_opt(args, "window", 25)),
        profile=_opt(args, "profile", "desk"),
        eta=float(_opt(args, "eta", 0.5)),
        workers=int(_opt(args, "workers", 1)),
    )


def _find_checkpoints(args, spec: ScenarioSpec) -> dict:
    """Collect {(valve, controller): path} from --checkpoint-dir using the
    {controller}_{valve}.ckpt naming convention the train command writes."""
    ckpt_dir = _opt(args, "checkpoint_dir", None)
    found = {}
    if ckpt_dir is None:
        return found
    base = Path(ckpt_dir)
    for valve_name in spec.valves:
        for name in spec.controllers:
            if name not in RL_NAMES:
                continue
            path = base / f"{name}_{valve_name}.ckpt"
            if path.exists():
                found[(valve_name, name)] = str(path)
    return found


def cmd_train(args) -> int:
    agent = args.agent
    valve_name = _opt(args, "valve", "valve1")
    seed = int(_opt(args, "seed", 0))
    spec = _scenario_from_args(args, "learning-curve", (agent,), (seed,),
                               valves=(valve_name,))
    out = _out_dir(args)
    curves = run_learning_curves(spec)
    res = curves.results[(agent, valve_name, seed)]
    ckpt_path = out / f"{agent}_{valve_name}.ckpt"
    save_checkpoint(ckpt_path, res.agent, seed=seed)
    csv_path = out / f"curve_{agent}_{valve_name}_seed{seed}.csv"
    export_curves_csv(csv_path, curves)
    meta_path = out / f"curve_{agent}_{valve_name}_seed{seed}.json"
    with open(meta_path, "w") as fh:
        json.dump({
            "agent": agent,
            "valve": valve_name,
            "seed": seed,
            "episodes": spec.episodes,
            "profile": spec.profile,
            "total_steps": res.total_steps,
            "wall_time_seconds": res.wall_time,
        }, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {ckpt_path}, {csv_path} and {meta_path}: final episode "
          f"cost {res.curve[-1]:.1f}")
    return 0


def cmd_evaluate(args) -> int:
    scenario = args.scenario
    controllers = _names(_opt(args, "controllers", "pi"))
    seeds = _ints(_opt(args, "seeds", "0"))
    kind = "tracking" if scenario == "tracking" else "noise-robustness"
    spec = _scenario_from_args(args, kind, controllers, seeds)
    checkpoints = _find_checkpoints(args, spec)
    out = _out_dir(args)
    if scenario == "tracking":
        traces, report = run_tracking(spec, checkpoints)
        traces_path = out / "tracking_traces.csv"
        export_episode_csv(traces_path, traces)
        csv_path = out / "tracking_report.csv"
        json_path = out / "tracking_report.json"
    else:
        report = run_noise_robustness(spec, checkpoints)
        csv_path = out / "noise_report.csv"
        json_path = out / "noise_report.json"
    export_report_csv(csv_path, report)
    export_report_json(json_path, report)
    print(f"wrote {csv_path} and {json_path}: {len(report.rows)} rows")
    return 0


def cmd_curves(args) -> int:
    controllers = _names(_opt(args, "controllers", "td3,pirl"))
    seeds = _ints(_opt(args, "seeds", "0"))
    spec = _scenario_from_args(args, "learning-curve", controllers, seeds)
    out = _out_dir(args)
    curves = run_learning_curves(spec)
    raw_path = out / "curves.csv"
    agg_path = out / "curves_aggregate.csv"
    export_curves_csv(raw_path, curves)
    export_aggregate_curves_csv(agg_path, curves)
    for (agent, valve_name, seed), res in curves.results.items():
        save_checkpoint(out / f"{agent}_{valve_name}_seed{seed}.ckpt",
                        res.agent, seed=seed)
    meta_path = out / "curves.json"
    with open(meta_path, "w") as fh:
        json.dump({
            "agents": list(curves.agents),
            "valves": list(spec.valves),
            "seeds": list(spec.seeds),
            "episodes": spec.episodes,
            "profile": spec.profile,
            "runtime_seconds": curves.runtime,
        }, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {raw_path}, {agg_path} and {meta_path}")
    return 0


# --- parser ---------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON object supplying flag values")
    common.add_argument("--out", help="output directory (default: .)")
    common.add_argument("--dt", type=float, help="control period, seconds")

    parser = argparse.ArgumentParser(
        prog="valvelab",
        description="Throttle-valve control experiments: simulation, "
                    "identification, PI tuning, RL training and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("staircase", parents=[common],
                       help="hysteresis staircase sweeps on one valve")
    p.add_argument("--valve", help="valve1|valve2|valve3")
    p.add_argument("--seed", type=int)
    p.add_argument("--repeats", type=int)
    p.set_defaults(func=cmd_staircase)

    p = sub.add_parser("identify", parents=[common],
                       help="binary excitation and least-squares model fit")
    p.add_argument("--valve")
    p.add_argument("--seed", type=int)
    p.add_argument("--length", type=int)
    p.add_argument("--center", type=float)
    p.add_argument("--amplitude", type=float)
    p.set_defaults(func=cmd_identify)

    p = sub.add_parser("tune-pi", parents=[common],
                       help="pole-placement PI gains from a model fit")
    p.add_argument("--valve")
    p.add_argument("--fit", help="JSON fit from the identify command")
    p.add_argument("--zeta", type=float)
    p.add_argument("--t-rise", dest="t_rise", type=float)
    p.set_defaults(func=cmd_tune_pi)

    p = sub.add_parser("train", parents=[common],
                       help="train one agent on one valve")
    p.add_argument("--agent", choices=RL_NAMES, required=True)
    p.add_argument("--valve")
    p.add_argument("--seed", type=int)
    p.add_argument("--episodes", type=int)
    p.add_argument("--profile", choices=sorted(PROFILES))
    p.add_argument("--eta", type=float)
    p.add_argument("--ref-range", dest="ref_range")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common],
                       help="tracking or noise-robustness evaluation")
    p.add_argument("--scenario", choices=("tracking", "noise"), required=True)
    p.add_argument("--valves", help="comma-separated valve names")
    p.add_argument("--controllers", help="comma-separated: pi,td3,pirl")
    p.add_argument("--seeds", help="comma-separated integers")
    p.add_argument("--period", type=float)
    p.add_argument("--segments", type=int)
    p.add_argument("--checkpoint-dir", dest="checkpoint_dir")
    p.add_argument("--noise-stds", dest="noise_stds")
    p.add_argument("--noise-kinds", dest="noise_kinds")
    p.add_argument("--ref-range", dest="ref_range")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("curves", parents=[common],
                       help="train both agents over a valve/seed grid")
    p.add_argument("--valves")
    p.add_argument("--controllers")
    p.add_argument("--seeds")
    p.add_argument("--episodes", type=int)
    p.add_argument("--profile", choices=sorted(PROFILES))
    p.add_argument("--eta", type=float)
    p.add_argument("--window", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--ref-range", dest="ref_range")
    p.set_defaults(func=cmd_curves)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        args.config_data = _load_config(args.config) if args.config else {}
        return args.func(args)
    except (ValueError, OSError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
