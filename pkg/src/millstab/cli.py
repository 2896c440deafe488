"""Command-line front end: ``millstab {sld,simulate,estimate,control-sim}``.

Configuration is a JSON file merged with ``--set dotted.key=value``
overrides (values are parsed as JSON when possible, otherwise kept as
strings). Exit codes:

    0  success / stabilized
    2  configuration or input error
    3  numerical failure threshold exceeded
    4  simulation diverged
    5  unidentifiable estimation window
    6  controller held on an infeasible speed set
"""
from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

import numpy as np

from millstab.closed_loop import Scenario, ScenarioError, run_scenario, shipped_scenario
from millstab.controller import ControllerConfig
from millstab.dynamics import (
    InvalidParameters,
    ProcessParameters,
    SimulationDiverged,
    TrajectoryFormatError,
    _atomic_write,
    read_trajectory_csv,
    simulate_dde,
    trajectory_to_csv_text,
)
from millstab.estimation import UnidentifiableWindow, estimate_parameters, window_from_trajectory
from millstab.roughness import RoughnessModel, default_calibration
from millstab.sdm import SdmNumericalError
from millstab.sld import GridSpec, SldComputationError, boundary_csv_text, compute_sld, extract_boundary

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_DIVERGED = 4
EXIT_UNIDENTIFIABLE = 5
EXIT_HELD = 6

VERDICT_EXIT = {"stabilized": EXIT_OK, "diverged": EXIT_DIVERGED, "held": EXIT_HELD}

DEFAULT_CONFIG = {
    "params": ProcessParameters().to_dict(),
    "grid": GridSpec().to_dict(),
    "controller": ControllerConfig().to_dict(),
    "roughness_calibration": None,
    "workers": 1,
    "seed": 0,
    "simulate": {
        "omega_rpm": 11500.0,
        "ap_mm": 1.0,
        "duration_s": 0.05,
        "schedule": None,
        "step_s": None,
        "noise_std": 0.0,
        "initial_perturbation_m": [1e-5, 1e-5],
    },
    "estimate": {"ap_mm": 1.0, "t0_s": None, "t1_s": None},
}


class ConfigError(ValueError):
    pass


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: dict, overrides: list[str]) -> dict:
    """Apply ``key.sub=value`` assignments to a copy of ``config``."""
    out = copy.deepcopy(config)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        parts = [p for p in key.strip().split(".") if p]
        if not parts:
            raise ConfigError(f"--set has an empty key: {item!r}")
        node = out
        for p in parts[:-1]:
            child = node.get(p)
            if child is None:
                child = node[p] = {}
            if not isinstance(child, dict):
                raise ConfigError(f"--set {key}: {p!r} is not a section")
            node = child
        node[parts[-1]] = _parse_value(value)
    return out


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _read_json(path: str) -> dict:
    try:
        data = json.loads(Path(path).read_text("utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def load_config(args) -> dict:
    config = copy.deepcopy(DEFAULT_CONFIG)
    if args.config:
        config = _merge(config, _read_json(args.config))
    config = apply_overrides(config, args.set or [])
    if args.workers is not None:
        config["workers"] = args.workers
    if args.seed is not None:
        config["seed"] = args.seed
    unknown = set(config) - set(DEFAULT_CONFIG)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    return config


def _resolve(config: dict):
    """Validate the shared sections before any compute."""
    try:
        params = ProcessParameters.from_dict(config["params"])
        grid = GridSpec.from_dict(config["grid"])
        controller = ControllerConfig.from_dict(config["controller"])
        roughness = RoughnessModel.from_dict(config["roughness_calibration"] or default_calibration())
    except (InvalidParameters, TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    workers = config["workers"]
    if not isinstance(workers, int) or workers < 1:
        raise ConfigError(f"workers must be a positive integer, got {workers!r}")
    return params, grid, controller, roughness


def _resolved_sidecar(config: dict, params, grid, controller, roughness) -> dict:
    return {
        **config,
        "params": params.to_dict(),
        "grid": grid.to_dict(),
        "controller": controller.to_dict(),
        "roughness_calibration": roughness.to_dict(),
    }


def _write_json(path: Path, data) -> None:
    _atomic_write(path, json.dumps(data, indent=2, sort_keys=True) + "\n")


def cmd_sld(args, config: dict) -> int:
    params, spec, controller, roughness = _resolve(config)
    out = Path(args.out)
    try:
        grid = compute_sld(params, spec, workers=config["workers"])
    except SldComputationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    boundary = extract_boundary(grid)
    _atomic_write(out / "sld.csv", grid.to_csv_text())
    _atomic_write(out / "boundary.csv", boundary_csv_text(boundary))
    sidecar = grid.sidecar()
    sidecar["config"] = _resolved_sidecar(config, params, spec, controller, roughness)
    _write_json(out / "sidecar.json", sidecar)
    stable = float(np.mean(grid.rho < 1.0))
    min_depth = min(a for _, a in boundary)
    print(f"grid {spec.speed_count}x{spec.depth_count}: stable fraction {stable:.4f}, "
          f"min boundary depth {min_depth:.4f} mm, failures {len(grid.failures)}")
    return EXIT_OK


def cmd_simulate(args, config: dict) -> int:
    params, spec, controller, roughness = _resolve(config)
    sim = config["simulate"]
    try:
        schedule = sim.get("schedule") or [[0.0, sim["omega_rpm"]]]
        schedule = [(float(t), float(w)) for t, w in schedule]
        ap = float(sim["ap_mm"])
        duration = float(sim["duration_s"])
        step = sim.get("step_s")
        q0 = tuple(float(x) for x in sim.get("initial_perturbation_m", (1e-5, 1e-5)))
        noise = float(sim.get("noise_std", 0.0))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"simulate section: {exc}") from exc
    out = Path(args.out)
    sidecar = {"config": _resolved_sidecar(config, params, spec, controller, roughness)}
    try:
        traj = simulate_dde(params, schedule, ap, duration, None if step is None else float(step),
                            q0, noise, config["seed"])
    except SimulationDiverged as exc:
        _atomic_write(out / "trajectory.csv", trajectory_to_csv_text(exc.trajectory))
        _write_json(out / "simulate.json", {**sidecar, "diverged_at": exc.time})
        print(f"diverged at t = {exc.time:.6g} s", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValueError, InvalidParameters) as exc:
        raise ConfigError(str(exc)) from exc
    _atomic_write(out / "trajectory.csv", trajectory_to_csv_text(traj))
    _write_json(out / "simulate.json", {**sidecar, "diverged_at": None})
    rms = np.sqrt(np.mean(np.sum(traj.q ** 2, axis=1)))
    print(f"{len(traj)} samples to t = {traj.t[-1]:.6g} s, rms displacement {rms:.4g} m")
    return EXIT_OK


def cmd_estimate(args, config: dict) -> int:
    params, spec, controller, roughness = _resolve(config)
    est_cfg = config["estimate"]
    path = args.trajectory
    if path is None:
        raise ConfigError("estimate needs --trajectory <file>")
    try:
        traj = read_trajectory_csv(path)
    except TrajectoryFormatError as exc:
        print(f"error: {path}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    t0 = args.t0 if args.t0 is not None else est_cfg.get("t0_s")
    t1 = args.t1 if args.t1 is not None else est_cfg.get("t1_s")
    t0 = float(traj.t[0]) if t0 is None else float(t0)
    t1 = float(traj.t[-1]) if t1 is None else float(t1)
    ap = float(args.ap if args.ap is not None else est_cfg.get("ap_mm", 1.0))
    try:
        window = window_from_trajectory(traj, t0, t1, ap, params.teeth_count)
    except ValueError as exc:
        raise ConfigError(f"window ({t0}, {t1}]: {exc}") from exc
    try:
        est = estimate_parameters(window, params)
    except UnidentifiableWindow as exc:
        print(f"unidentifiable window: {exc}", file=sys.stderr)
        return EXIT_UNIDENTIFIABLE
    result = {**est.to_dict(), "natural_frequency_hz": est.omega_n / (2 * np.pi), "ap_mm": ap,
              "trajectory": str(path)}
    _write_json(Path(args.out) / "estimate.json", result)
    print(f"zeta {est.zeta:.6g}, omega_n {est.omega_n:.6g} rad/s, K_t {est.kt:.6g}, K_r {est.kr:.6g}")
    return EXIT_OK


def cmd_control_sim(args, config: dict) -> int:
    data = _read_json(args.scenario) if args.scenario else shipped_scenario()
    data = apply_overrides(data, args.set or [])
    if args.seed is not None:
        data["seed"] = args.seed
    if args.mode:
        data["mode"] = args.mode
    try:
        scenario = Scenario.from_dict(data)
    except ScenarioError as exc:
        raise ConfigError(str(exc)) from exc
    report = run_scenario(scenario)
    report.write(args.out)
    changes = ", ".join(f"{w:.0f} rpm at {t:.3f} s" for t, w in report.applied_speeds()) or "none"
    tail = f" at {report.diverged_at:.4g} s" if report.diverged_at is not None else ""
    print(f"mode {scenario.mode}: verdict {report.verdict}{tail}; speed changes: {changes}")
    return VERDICT_EXIT[report.verdict]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--out", default=".", help="output directory (default: current)")
    common.add_argument("--workers", type=int, help="processes for the grid sweep")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config value, e.g. grid.speed_count=100 (repeatable)")

    parser = argparse.ArgumentParser(prog="millstab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sld", parents=[common], help="compute a stability lobe diagram")
    p.set_defaults(func=cmd_sld)

    p = sub.add_parser("simulate", parents=[common], help="time-domain simulation")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", parents=[common], help="identify parameters from a trajectory CSV")
    p.add_argument("--trajectory", help="trajectory CSV to read")
    p.add_argument("--t0", type=float, help="window start (exclusive), s")
    p.add_argument("--t1", type=float, help="window end (inclusive), s")
    p.add_argument("--ap", type=float, help="axial depth of the recorded cut, mm")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("control-sim", parents=[common], help="run a closed-loop scenario")
    p.add_argument("scenario", nargs="?", help="scenario JSON (default: shipped drift scenario)")
    p.add_argument("--mode", choices=["open_loop", "offline_control", "online_control"])
    p.set_defaults(func=cmd_control_sim)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = {} if args.command == "control-sim" else load_config(args)
        return args.func(args, config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SdmNumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
