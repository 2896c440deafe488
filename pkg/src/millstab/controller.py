"""Spindle-speed selection trading stability margin against roughness and speed jumps.

Each lattice speed is scored with

    L(w) = alpha log sigma_max(Gamma) - beta log(1 - rho) + gamma log max((w - w_now)^2, floor^2) + log r(w)

and speeds with rho >= 1 are excluded outright. The minimiser is found by
exhaustive search over the actuation lattice.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from millstab.sld import SldGrid

GAMMA_FLOOR = 1e-300
DECISION_HEADER = ("t,omega_current,omega_star,applied,feasible,rho_at_star,"
                   "cost_stability,cost_gamma,cost_speed,cost_roughness")


@dataclass(frozen=True)
class ControllerConfig:
    alpha: float = 0.1
    beta: float = 1.0
    gamma: float = 0.05
    speed_bounds: tuple[float, float] = (6000.0, 16000.0)
    speed_step: float = 100.0
    min_interval: float = 0.2
    delta_floor: float | None = None  # defaults to speed_step

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        lo, hi = self.speed_bounds
        if not lo < hi:
            raise ValueError("speed_bounds must satisfy min < max")
        if not self.speed_step > 0:
            raise ValueError("speed_step must be positive")
        if self.min_interval < 0:
            raise ValueError("min_interval must be non-negative")

    @property
    def floor(self) -> float:
        return self.speed_step if self.delta_floor is None else self.delta_floor

    def lattice(self) -> np.ndarray:
        lo, hi = self.speed_bounds
        count = int(math.floor((hi - lo) / self.speed_step + 1e-9)) + 1
        return lo + self.speed_step * np.arange(count)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha, "beta": self.beta, "gamma": self.gamma,
            "speed_bounds": list(self.speed_bounds), "speed_step": self.speed_step,
            "min_interval": self.min_interval, "delta_floor": self.delta_floor,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ControllerConfig":
        data = dict(data)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown controller field(s): {sorted(unknown)}")
        if "speed_bounds" in data:
            data["speed_bounds"] = tuple(float(x) for x in data["speed_bounds"])
        return cls(**data)


@dataclass(frozen=True)
class CostBreakdown:
    stability: float
    gamma: float
    speed: float
    roughness: float

    @property
    def total(self) -> float:
        return self.stability + self.gamma + self.speed + self.roughness


@dataclass(frozen=True)
class ControlDecision:
    t: float
    omega_current: float
    omega_star: float
    cost: CostBreakdown | None
    feasible: bool
    applied: bool
    rho_at_star: float

    @property
    def alarm(self) -> bool:
        return not self.feasible

    @property
    def changes_speed(self) -> bool:
        return self.applied and self.omega_star != self.omega_current


def _on_lattice(omega: float, cfg: ControllerConfig) -> bool:
    lo, hi = cfg.speed_bounds
    if omega < lo - 1e-9 or omega > hi + 1e-9:
        return False
    k = (omega - lo) / cfg.speed_step
    return abs(k - round(k)) < 1e-9


def _roughness(roughness_of, omega: float) -> float:
    if isinstance(roughness_of, Mapping):
        return float(roughness_of[float(omega)])
    return float(roughness_of(omega))


def cost_terms(omega: float, grid: SldGrid, axial_depth: float, omega_current: float,
               roughness_of: Mapping[float, float] | Callable[[float], float],
               cfg: ControllerConfig) -> CostBreakdown | None:
    """Cost components at one candidate, or None when the candidate is unstable."""
    if not _on_lattice(omega, cfg):
        raise ValueError(f"{omega} rpm is not on the {cfg.speed_step} rpm lattice within {cfg.speed_bounds}")
    rho = grid.rho_at(omega, axial_depth)
    if not rho < 1.0:
        return None
    gam = max(grid.gamma_at(omega, axial_depth), GAMMA_FLOOR)
    jump = max((omega - omega_current) ** 2, cfg.floor ** 2)
    return CostBreakdown(
        stability=-cfg.beta * math.log(1.0 - rho),
        gamma=cfg.alpha * math.log(gam),
        speed=cfg.gamma * math.log(jump),
        roughness=math.log(_roughness(roughness_of, omega)),
    )


def candidate_cost(omega: float, grid: SldGrid, axial_depth: float, omega_current: float,
                   roughness_of, cfg: ControllerConfig) -> float:
    terms = cost_terms(omega, grid, axial_depth, omega_current, roughness_of, cfg)
    return math.inf if terms is None else terms.total


def optimize_speed(grid: SldGrid, axial_depth: float, omega_current: float, roughness_of,
                   cfg: ControllerConfig, last_change_time: float | None = None,
                   now: float = 0.0, candidates: Sequence[float] | None = None) -> ControlDecision:
    """Exhaustive lattice search for the lowest-cost stable speed.

    Ties go to the candidate closest to the current speed, then to the lower
    speed. With no stable candidate the current speed is held and the
    decision is marked infeasible. A decision made less than
    ``min_interval`` after the previous change is reported but not applied.
    """
    best = None
    for omega in (cfg.lattice() if candidates is None else candidates):
        omega = float(omega)
        terms = cost_terms(omega, grid, axial_depth, omega_current, roughness_of, cfg)
        if terms is None:
            continue
        key = (terms.total, abs(omega - omega_current), omega)
        if best is None or key < best[0]:
            best = (key, omega, terms)
    rate_limited = last_change_time is not None and now - last_change_time < cfg.min_interval
    if best is None:
        try:
            rho_now = grid.rho_at(omega_current, axial_depth)
        except ValueError:
            rho_now = math.nan
        return ControlDecision(now, omega_current, omega_current, None, False, False, rho_now)
    _, omega_star, terms = best
    return ControlDecision(now, omega_current, omega_star, terms, True, not rate_limited,
                           grid.rho_at(omega_star, axial_depth))


def decisions_csv_text(decisions: Sequence[ControlDecision]) -> str:
    buf = io.StringIO(newline="")
    buf.write(DECISION_HEADER + "\n")
    for d in decisions:
        c = d.cost
        parts = [d.t, d.omega_current, d.omega_star, int(d.applied), int(d.feasible), d.rho_at_star]
        parts += [c.stability, c.gamma, c.speed, c.roughness] if c else [math.inf] * 4
        buf.write(",".join(str(int(x)) if isinstance(x, int) else repr(float(x)) for x in parts) + "\n")
    return buf.getvalue()
