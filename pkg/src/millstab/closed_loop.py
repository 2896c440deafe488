"""Timed simulate -> estimate -> lobe diagram -> speed decision loop with parameter drift.

Three modes share one decision schedule: decisions happen at
control_start + k * estimation_period (k >= 1), each looking back over the
preceding period. ``open_loop`` never acts, ``offline_control`` consults a
single lobe diagram built from the nominal parameters, ``online_control``
rebuilds it from parameters re-estimated on every window.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from millstab.controller import ControlDecision, ControllerConfig, decisions_csv_text, optimize_speed
from millstab.dynamics import (
    DelaySimulator,
    InvalidParameters,
    OperatingPoint,
    ProcessParameters,
    Trajectory,
    _atomic_write,
    perturbation_energy,
    tooth_period,
    trajectory_to_csv_text,
)
from millstab.estimation import (
    EstimatedParameters,
    LeastSquaresEstimator,
    UnidentifiableWindow,
    window_from_trajectory,
)
from millstab.roughness import (
    RoughnessEstimate,
    RoughnessModel,
    default_calibration,
    extract_features,
    roughness_map,
)
from millstab.sdm import SdmConfig
from millstab.sld import GridSpec, SldGrid, compute_rows, compute_sld

MODES = ("open_loop", "offline_control", "online_control")
VERDICT_TAIL = 0.2


class ScenarioError(ValueError):
    """Scenario file or field is invalid."""


@dataclass(frozen=True)
class DriftEvent:
    t: float
    params: ProcessParameters


@dataclass(frozen=True)
class Scenario:
    nominal: ProcessParameters
    initial: OperatingPoint
    mode: str = "online_control"
    drift_events: tuple[DriftEvent, ...] = ()
    control_start: float = 0.03
    estimation_period: float = 0.02
    duration: float = 0.3
    seed: int = 0
    noise_std: float = 0.0
    controller: ControllerConfig = ControllerConfig()
    roughness: RoughnessModel = field(default_factory=lambda: RoughnessModel.from_dict(default_calibration()))
    feed_rate: float = 8.5  # mm/s
    initial_perturbation: tuple[float, float] = (1e-5, 1e-5)
    step: float | None = None  # default tau(initial speed) / 1000
    depth_rows: int = 2  # controller grid: a_p plus this many rows either side
    depth_spacing: float = 0.025  # mm
    sdm: SdmConfig = SdmConfig()
    full_snapshots: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ScenarioError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.duration > 0:
            raise ScenarioError("duration_s must be positive")
        if not 0 <= self.control_start <= self.duration:
            raise ScenarioError("control_start_s must lie in [0, duration_s]")
        for ev in self.drift_events:
            if not 0 <= ev.t <= self.duration:
                raise ScenarioError(f"drift event at t = {ev.t} outside [0, {self.duration}]")
        if self.noise_std < 0:
            raise ScenarioError("noise_std must be non-negative")
        if self.depth_rows < 0 or not self.depth_spacing > 0:
            raise ScenarioError("depth_rows must be >= 0 and depth_spacing > 0")
        # every window must span two delays even at the slowest lattice speed
        slowest = tooth_period(self.nominal.teeth_count, self.controller.speed_bounds[0])
        slowest = max(slowest, self.initial.delay(self.nominal.teeth_count))
        if self.mode != "open_loop" and self.estimation_period < 4 * slowest:
            raise ScenarioError(
                f"estimation_period_s {self.estimation_period} shorter than four delays "
                f"at the slowest speed ({4 * slowest:.4g} s)")

    def decision_times(self) -> list[float]:
        if self.mode == "open_loop":
            return []
        out = []
        k = 1
        while True:
            t = self.control_start + k * self.estimation_period
            if t > self.duration + 1e-12:
                return out
            out.append(t)
            k += 1

    def to_dict(self) -> dict:
        return {
            "nominal_params": self.nominal.to_dict(),
            "drift_events": [{"t": ev.t, "params": ev.params.to_dict()} for ev in self.drift_events],
            "initial": {"omega_rpm": self.initial.spindle_speed, "ap_mm": self.initial.axial_depth},
            "mode": self.mode,
            "control_start_s": self.control_start,
            "estimation_period_s": self.estimation_period,
            "duration_s": self.duration,
            "seed": self.seed,
            "noise_std": self.noise_std,
            "controller": self.controller.to_dict(),
            "roughness_calibration": self.roughness.to_dict(),
            "feed_rate_mm_s": self.feed_rate,
            "initial_perturbation_m": list(self.initial_perturbation),
            "step_s": self.step,
            "online_grid": {"depth_rows": self.depth_rows, "depth_spacing_mm": self.depth_spacing,
                            "delay_resolution": self.sdm.delay_resolution,
                            "quadrature_nodes": self.sdm.quadrature_nodes,
                            "full_snapshots": self.full_snapshots},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        data = dict(data)
        known = {"nominal_params", "drift_events", "initial", "mode", "control_start_s",
                 "estimation_period_s", "duration_s", "seed", "noise_std", "controller",
                 "roughness_calibration", "feed_rate_mm_s", "initial_perturbation_m", "step_s",
                 "online_grid", "description"}
        unknown = set(data) - known
        if unknown:
            raise ScenarioError(f"unknown scenario field(s): {sorted(unknown)}")
        try:
            nominal = ProcessParameters.from_dict(data.get("nominal_params", {}))
            events = []
            for ev in data.get("drift_events", []):
                # omitted fields inherit the nominal values
                merged = {**nominal.to_dict(), **ev["params"]}
                events.append(DriftEvent(float(ev["t"]), ProcessParameters.from_dict(merged)))
            init = data.get("initial", {})
            initial = OperatingPoint(float(init["omega_rpm"]), float(init["ap_mm"]))
            ctrl = ControllerConfig.from_dict(data.get("controller", {}))
            rough = RoughnessModel.from_dict(data.get("roughness_calibration") or default_calibration())
            grid = dict(data.get("online_grid", {}))
            sdm = SdmConfig(int(grid.pop("delay_resolution", 40)), int(grid.pop("quadrature_nodes", 8)))
            extra = set(grid) - {"depth_rows", "depth_spacing_mm", "full_snapshots"}
            if extra:
                raise ScenarioError(f"unknown online_grid field(s): {sorted(extra)}")
            step = data.get("step_s")
            return cls(
                nominal=nominal,
                initial=initial,
                mode=str(data.get("mode", "online_control")),
                drift_events=tuple(sorted(events, key=lambda e: e.t)),
                control_start=float(data.get("control_start_s", 0.03)),
                estimation_period=float(data.get("estimation_period_s", 0.02)),
                duration=float(data.get("duration_s", 0.3)),
                seed=int(data.get("seed", 0)),
                noise_std=float(data.get("noise_std", 0.0)),
                controller=ctrl,
                roughness=rough,
                feed_rate=float(data.get("feed_rate_mm_s", 8.5)),
                initial_perturbation=tuple(float(x) for x in data.get("initial_perturbation_m", (1e-5, 1e-5))),
                step=None if step is None else float(step),
                depth_rows=int(grid.get("depth_rows", 2)),
                depth_spacing=float(grid.get("depth_spacing_mm", 0.025)),
                sdm=sdm,
                full_snapshots=bool(grid.get("full_snapshots", False)),
            )
        except ScenarioError:
            raise
        except (KeyError, TypeError, ValueError, InvalidParameters) as exc:
            raise ScenarioError(f"invalid scenario: {exc}") from exc


def load_scenario(path: str | Path) -> Scenario:
    try:
        data = json.loads(Path(path).read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: {exc}") from exc
    return Scenario.from_dict(data)


def shipped_scenario(name: str = "drift_scenario") -> dict:
    text = resources.files("millstab").joinpath(f"data/{name}.json").read_text("utf-8")
    return json.loads(text)


def inject_drift(params: ProcessParameters, event: DriftEvent) -> ProcessParameters:
    """Parameters in force after ``event``: a plain substitution."""
    return event.params


def controller_grid_spec(cfg: ControllerConfig, axial_depth: float, rows: int, spacing: float,
                         sdm: SdmConfig = SdmConfig()) -> GridSpec:
    """Lattice speeds by a few depth rows centred on the current depth (clipped at zero)."""
    below = min(rows, int(math.floor(axial_depth / spacing + 1e-9)))
    lo = axial_depth - below * spacing
    count = below + rows + 1
    hi = lo + (count - 1) * spacing  # count == 1 gives a single-row grid
    lattice = cfg.lattice()
    return GridSpec(speed_range=(float(lattice[0]), float(lattice[-1])), depth_range=(lo, hi),
                    speed_count=len(lattice), depth_count=count, sdm=sdm)


@dataclass
class RunReport:
    scenario: Scenario
    trajectory: Trajectory
    decisions: list[ControlDecision]
    sld_snapshots: list[tuple[float, SldGrid]]
    decision_snapshot: list[int]  # index into sld_snapshots used by each decision
    roughness_series: list[tuple[float, RoughnessEstimate]]
    estimates: list[tuple[float, EstimatedParameters]]
    events: list[dict]
    verdict: str
    diverged_at: float | None
    energy_slope: float

    @property
    def final_roughness(self) -> RoughnessEstimate | None:
        return self.roughness_series[-1][1] if self.roughness_series else None

    def applied_speeds(self) -> list[tuple[float, float]]:
        return [(d.t, d.omega_star) for d in self.decisions if d.changes_speed]

    def summary(self) -> dict:
        final = self.final_roughness
        return {
            "verdict": self.verdict,
            "diverged_at": self.diverged_at,
            "energy_slope_per_s": self.energy_slope,
            "final_roughness": None if final is None else {
                "r_um": final.r, "chatter": final.chatter, "confidence": final.confidence},
            "roughness_series": [{"t": t, "r_um": r.r, "chatter": r.chatter, "confidence": r.confidence}
                                 for t, r in self.roughness_series],
            "estimates": [{"t": t, **e.to_dict()} for t, e in self.estimates],
            "applied_speeds": [{"t": t, "omega_rpm": w} for t, w in self.applied_speeds()],
            "sld_snapshots": [{"file": f"sld_t{k}.csv", "t": t, "params": g.params_used.to_dict(),
                               "grid": g.spec.to_dict()}
                              for k, (t, g) in enumerate(self.sld_snapshots)],
            "events": self.events,
            "scenario": self.scenario.to_dict(),
        }

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        _atomic_write(out / "trajectory.csv", trajectory_to_csv_text(self.trajectory))
        _atomic_write(out / "decisions.csv", decisions_csv_text(self.decisions))
        for k, (_, grid) in enumerate(self.sld_snapshots):
            _atomic_write(out / f"sld_t{k}.csv", grid.to_csv_text())
        _atomic_write(out / "report.json", json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def energy_slope(traj: Trajectory, tail: float = VERDICT_TAIL) -> float:
    """Least-squares slope of log perturbation energy over the last ``tail`` of the run (1/s)."""
    t = traj.t
    start = t[-1] - tail * (t[-1] - t[0])
    mask = t >= start
    if mask.sum() < 2:
        return 0.0
    energy = perturbation_energy(traj)[mask]
    floor = np.finfo(float).tiny
    slope = np.polyfit(t[mask] - t[mask][0], np.log(np.maximum(energy, floor)), 1)[0]
    return float(slope)


def _verdict(diverged_at, slope: float, decisions: list[ControlDecision]) -> str:
    if diverged_at is not None:
        return "diverged"
    if slope < 0:
        return "stabilized"
    if any(not d.feasible for d in decisions):
        return "held"
    return "diverged"


def _build_grid(params: ProcessParameters, scenario: Scenario, axial_depth: float, t: float) -> SldGrid:
    if scenario.full_snapshots:
        lattice = scenario.controller.lattice()
        spec = GridSpec(speed_range=(float(lattice[0]), float(lattice[-1])), speed_count=len(lattice),
                        sdm=scenario.sdm)
        return compute_sld(params, spec, workers=1, timestamp=t)
    spec = controller_grid_spec(scenario.controller, axial_depth, scenario.depth_rows,
                                scenario.depth_spacing, scenario.sdm)
    return compute_rows(params, spec, timestamp=t)


def run_scenario(scenario: Scenario, estimator=None) -> RunReport:
    """Run one scenario to completion (or divergence) and collect the record."""
    estimator = estimator or LeastSquaresEstimator()
    cfg = scenario.controller
    a_p = scenario.initial.axial_depth
    n_teeth = scenario.nominal.teeth_count
    omega = scenario.initial.spindle_speed
    step = scenario.step or tooth_period(n_teeth, omega) / 1000.0
    slowest = max(cfg.speed_bounds[0], 1e-9)
    sim = DelaySimulator(scenario.nominal, omega, a_p, step, scenario.initial_perturbation,
                         scenario.noise_std, scenario.seed,
                         max_delay=max(tooth_period(n_teeth, slowest), tooth_period(n_teeth, omega)))

    decisions: list[ControlDecision] = []
    snapshots: list[tuple[float, SldGrid]] = []
    used: list[int] = []
    rough: list[tuple[float, RoughnessEstimate]] = []
    estimates: list[tuple[float, EstimatedParameters]] = []
    events: list[dict] = []
    last_change = None
    last_decision = None

    if scenario.mode == "offline_control":
        snapshots.append((0.0, _build_grid(scenario.nominal, scenario, a_p, 0.0)))

    # drift events sort before decisions at the same instant
    timeline = [(ev.t, 0, ev) for ev in scenario.drift_events]
    timeline += [(t, 1, None) for t in scenario.decision_times()]
    timeline.sort(key=lambda item: (item[0], item[1]))

    for t_event, kind, payload in timeline:
        sim.advance(t_event - sim.time)
        if sim.diverged_at is not None:
            break
        now = sim.time
        if kind == 0:
            sim.set_params(inject_drift(sim.params, payload))
            events.append({"t": now, "event": "drift", "params": payload.params.to_dict()})
            continue

        traj = sim.trajectory()
        # the step grid need not hit the nominal instants exactly; never let a
        # window reach back past the previous decision (a possible speed change)
        t0 = now - scenario.estimation_period
        if last_decision is not None:
            t0 = max(t0, last_decision)
        last_decision = now
        window = window_from_trajectory(traj, t0, now, a_p, n_teeth)
        feats = extract_features(window, n_teeth, scenario.feed_rate)
        rough.append((now, scenario.roughness.predict(feats)))

        if scenario.mode == "online_control":
            try:
                est = estimator.estimate(window, scenario.nominal)
            except UnidentifiableWindow as exc:
                events.append({"t": now, "event": "unidentifiable_window", "detail": str(exc)})
                decisions.append(ControlDecision(now, omega, omega, None, False, False, math.nan))
                used.append(len(snapshots) - 1)
                continue
            estimates.append((now, est))
            snapshots.append((now, _build_grid(est.apply_to(scenario.nominal), scenario, a_p, now)))
        grid = snapshots[-1][1]

        r_of = roughness_map(scenario.roughness, grid, a_p, cfg.lattice(), scenario.feed_rate, n_teeth,
                             feats.rms_displacement, cfg.min_interval)
        decision = optimize_speed(grid, a_p, omega, r_of, cfg, last_change, now)
        decisions.append(decision)
        used.append(len(snapshots) - 1)
        if not decision.feasible:
            events.append({"t": now, "event": "infeasible_hold", "omega_rpm": omega})
        if decision.changes_speed:
            omega = decision.omega_star
            sim.set_speed(omega)
            last_change = now
            events.append({"t": now, "event": "speed_change", "omega_rpm": omega})

    if sim.diverged_at is None:
        sim.advance(scenario.duration - sim.time)
    traj = sim.trajectory()
    if sim.diverged_at is not None:
        events.append({"t": sim.diverged_at, "event": "diverged"})
    slope = energy_slope(traj)
    return RunReport(
        scenario=scenario, trajectory=traj, decisions=decisions, sld_snapshots=snapshots,
        decision_snapshot=used, roughness_series=rough, estimates=estimates, events=events,
        verdict=_verdict(sim.diverged_at, slope, decisions), diverged_at=sim.diverged_at,
        energy_slope=slope,
    )


def with_mode(scenario: Scenario, mode: str) -> Scenario:
    return replace(scenario, mode=mode)
