"""Online identification of damping, natural frequency and cutting coefficients.

Both sides of the equation of motion are evaluated against the measured
force F:

    F_LHS = M q'' + C(zeta, omega_n) q' + K(omega_n) q
    F_RHS = -a_p H_d(K_t, K_r, t) [q - q(t - tau)]

F_LHS is linear in (c, k) = (2 zeta omega_n M, omega_n^2 M) and F_RHS is
linear in (K_t, K_r), so the force-residual loss separates into two small
linear least-squares problems with closed-form solutions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from millstab.dynamics import (
    OperatingPoint,
    ProcessParameters,
    Trajectory,
    _directional_parts,
    tooth_period,
)
from millstab.sld import GridSpec, SldGrid, compute_sld

CONDITION_LIMIT = 1e8
MIN_WINDOW = 50


class UnidentifiableWindow(ValueError):
    """The window does not excite the parameters enough to pin them down."""


@dataclass(frozen=True)
class SensorWindow:
    t: np.ndarray
    q: np.ndarray
    v: np.ndarray
    a: np.ndarray
    force: np.ndarray
    q_delayed: np.ndarray
    op: OperatingPoint

    def __post_init__(self):
        n = len(self.t)
        if n < MIN_WINDOW:
            raise ValueError(f"window needs at least {MIN_WINDOW} samples, got {n}")
        for name in ("q", "v", "a", "force", "q_delayed"):
            if getattr(self, name).shape != (n, 2):
                raise ValueError(f"{name} must have shape ({n}, 2)")

    @property
    def span(self) -> tuple[float, float]:
        return float(self.t[0]), float(self.t[-1])

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0])


@dataclass(frozen=True)
class ParameterBounds:
    zeta: tuple[float, float] = (1e-4, 0.5)
    omega_n: tuple[float, float] = (2 * math.pi * 10.0, 2 * math.pi * 1e5)
    kt: tuple[float, float] = (1e3, 1e12)
    kr: tuple[float, float] = (1e3, 1e12)


@dataclass(frozen=True)
class EstimatedParameters:
    zeta: float
    omega_n: float
    kt: float
    kr: float
    residual_lhs: float
    residual_rhs: float
    loss: float
    window: tuple[float, float] = (0.0, 0.0)
    low_confidence: bool = False

    def apply_to(self, fixed: ProcessParameters) -> ProcessParameters:
        return fixed.with_uncertain(self.zeta, self.omega_n, self.kt, self.kr)

    def to_dict(self) -> dict:
        return {
            "zeta": self.zeta,
            "omega_n_rad_s": self.omega_n,
            "kt": self.kt,
            "kr": self.kr,
            "loss": self.loss,
            "residual_lhs": self.residual_lhs,
            "residual_rhs": self.residual_rhs,
            "window": list(self.window),
            "low_confidence": self.low_confidence,
        }


def window_from_trajectory(traj: Trajectory, t0: float, t1: float, axial_depth: float,
                           teeth_count: int) -> SensorWindow:
    """Cut samples with t0 < t <= t1 out of a trajectory.

    The spindle speed must be constant over the window; the delayed
    displacement is interpolated from the recorded history.
    """
    mask = (traj.t > t0 + 1e-12) & (traj.t <= t1 + 1e-12)
    t = traj.t[mask]
    if len(t) == 0:
        raise ValueError(f"no samples in ({t0}, {t1}]")
    speeds = traj.speed_at(t)
    if np.any(speeds != speeds[0]):
        raise ValueError("spindle speed changes inside the window")
    op = OperatingPoint(float(speeds[0]), axial_depth)
    tau = tooth_period(teeth_count, op.spindle_speed)
    if t[-1] - t[0] < 2 * tau * (1 - 1e-9):
        raise ValueError(f"window spans {t[-1] - t[0]:.4g} s, shorter than two delays ({2 * tau:.4g} s)")
    return SensorWindow(t=t, q=traj.q[mask], v=traj.v[mask], a=traj.a[mask], force=traj.force[mask],
                        q_delayed=traj.displacement_at(t - tau), op=op)


def differentiate_displacement(t: np.ndarray, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference velocity and acceleration for displacement-only data.

    Lower fidelity than measured rates: second-order accurate in the step.
    """
    v = np.gradient(q, t, axis=0, edge_order=2)
    a = np.gradient(v, t, axis=0, edge_order=2)
    return v, a


def _rhs_columns(window: SensorWindow, fixed: ProcessParameters) -> tuple[np.ndarray, np.ndarray]:
    ht, hr = _directional_parts(fixed, window.op.spindle_speed, window.t)
    dq = window.q - window.q_delayed
    scale = -window.op.axial_depth * 1e-3
    col_t = scale * np.einsum("kij,kj->ki", ht, dq)
    col_r = scale * np.einsum("kij,kj->ki", hr, dq)
    return col_t, col_r


def residual_forces(window: SensorWindow, candidate, fixed: ProcessParameters):
    """Per-sample (F_LHS, F_RHS) for a candidate (zeta, omega_n, K_t, K_r)."""
    zeta, omega_n, kt, kr = candidate
    mass = fixed.modal_mass
    f_lhs = mass * window.a + 2 * zeta * omega_n * mass * window.v + omega_n ** 2 * mass * window.q
    col_t, col_r = _rhs_columns(window, fixed)
    return f_lhs, kt * col_t + kr * col_r


def total_loss(window: SensorWindow, candidate, fixed: ProcessParameters,
               corrections: tuple[np.ndarray, np.ndarray] | None = None,
               regularization: float = 0.0) -> float:
    """Mean over samples of |F_LHS + dL - F|^2 + |F_RHS + dR - F|^2 (+ reg * |d|^2)."""
    f_lhs, f_rhs = residual_forces(window, candidate, fixed)
    if corrections is not None:
        d_lhs, d_rhs = corrections
        f_lhs = f_lhs + d_lhs
        f_rhs = f_rhs + d_rhs
    loss = np.mean(np.sum((f_lhs - window.force) ** 2, axis=1)) + np.mean(
        np.sum((f_rhs - window.force) ** 2, axis=1))
    if corrections is not None and regularization:
        loss += regularization * (np.mean(np.sum(corrections[0] ** 2, axis=1))
                                  + np.mean(np.sum(corrections[1] ** 2, axis=1)))
    return float(loss)


def optimal_corrections(window: SensorWindow, candidate, fixed: ProcessParameters,
                        regularization: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample corrections minimising the regularised loss for a fixed candidate.

    Without regularisation the corrections absorb the whole residual and the
    loss is identically zero, so ``regularization`` must be positive.
    """
    if regularization <= 0:
        raise ValueError("regularization must be positive")
    f_lhs, f_rhs = residual_forces(window, candidate, fixed)
    shrink = 1.0 / (1.0 + regularization)
    return (window.force - f_lhs) * shrink, (window.force - f_rhs) * shrink


def _solve(columns: np.ndarray, target: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(columns, axis=0)
    if np.any(norms == 0) or not np.all(np.isfinite(columns)):
        raise UnidentifiableWindow(f"{what}: a regressor is identically zero")
    scaled = columns / norms
    cond = np.linalg.cond(scaled)
    if not cond < CONDITION_LIMIT:
        raise UnidentifiableWindow(f"{what}: normal equations ill-conditioned (cond = {cond:.3g})")
    coef, *_ = np.linalg.lstsq(scaled, target, rcond=None)
    return coef / norms


class ParameterEstimator(Protocol):
    def estimate(self, window: SensorWindow, fixed: ProcessParameters) -> EstimatedParameters: ...


@dataclass(frozen=True)
class LeastSquaresEstimator:
    """Separable linear least-squares fit of the force residuals."""

    bounds: ParameterBounds = ParameterBounds()
    excitation_floor: float = 1e-9  # m/s^2

    def estimate(self, window: SensorWindow, fixed: ProcessParameters) -> EstimatedParameters:
        return estimate_parameters(window, fixed, self.bounds, self.excitation_floor)


def estimate_parameters(window: SensorWindow, fixed: ProcessParameters,
                        bounds: ParameterBounds = ParameterBounds(),
                        excitation_floor: float = 1e-9) -> EstimatedParameters:
    """Recover (zeta, omega_n, K_t, K_r) from one window.

    Raises UnidentifiableWindow when the window carries no motion or the
    regression is rank deficient.
    """
    rms_acc = float(np.sqrt(np.mean(window.a ** 2)))
    if not rms_acc > excitation_floor:
        raise UnidentifiableWindow(f"insufficient excitation: RMS acceleration {rms_acc:.3g} m/s^2")
    mass = fixed.modal_mass
    force = window.force.reshape(-1)

    lhs_cols = np.column_stack([window.v.reshape(-1), window.q.reshape(-1)])
    c, k = _solve(lhs_cols, force - mass * window.a.reshape(-1), "damping/stiffness fit")
    col_t, col_r = _rhs_columns(window, fixed)
    kt, kr = _solve(np.column_stack([col_t.reshape(-1), col_r.reshape(-1)]), force, "cutting-coefficient fit")

    clamped = False

    def clamp(value, lo_hi):
        nonlocal clamped
        lo, hi = lo_hi
        if not (lo <= value <= hi):
            clamped = True
            return min(max(value, lo), hi)
        return value

    omega_n = clamp(math.sqrt(k / mass) if k > 0 else 0.0, bounds.omega_n)
    zeta = clamp(c / (2 * mass * omega_n), bounds.zeta)
    kt = clamp(float(kt), bounds.kt)
    kr = clamp(float(kr), bounds.kr)

    candidate = (zeta, omega_n, kt, kr)
    f_lhs, f_rhs = residual_forces(window, candidate, fixed)
    res_lhs = float(np.sqrt(np.mean(np.sum((window.force - f_lhs) ** 2, axis=1))))
    res_rhs = float(np.sqrt(np.mean(np.sum((window.force - f_rhs) ** 2, axis=1))))
    return EstimatedParameters(
        zeta=float(zeta), omega_n=float(omega_n), kt=float(kt), kr=float(kr),
        residual_lhs=res_lhs, residual_rhs=res_rhs,
        loss=total_loss(window, candidate, fixed),
        window=window.span, low_confidence=clamped,
    )


def online_sld(window: SensorWindow, fixed: ProcessParameters, spec: GridSpec = GridSpec(),
               workers: int = 1, estimator: ParameterEstimator | None = None) -> tuple[SldGrid, EstimatedParameters]:
    """Re-estimate the uncertain parameters and rebuild the lobe diagram from them."""
    estimator = estimator or LeastSquaresEstimator()
    est = estimator.estimate(window, fixed)
    grid = compute_sld(est.apply_to(fixed), spec, workers=workers, timestamp=window.span[1])
    return grid, est
