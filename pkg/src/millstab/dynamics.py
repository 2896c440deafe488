"""Two-DoF regenerative milling model and its time-domain simulator.

The tool is modelled as two identical, uncoupled modal oscillators in the
XY plane. The cutting force is the regenerative (dynamic) part only:

    M q'' + C q' + K q = -a_p H_d(t) [q(t) - q(t - tau)]

with H_d(t) the time-periodic directional matrix of the engaged teeth.
Lengths are SI internally; tool geometry and depth of cut are given in mm.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from millstab import _kernels

TWO_PI = 2.0 * math.pi
TRAJECTORY_HEADER = ("t", "qx", "qy", "vx", "vy", "ax", "ay", "Fx", "Fy", "omega_rpm")


class InvalidParameters(ValueError):
    """Raised when a parameter set violates its physical invariants."""


class SimulationDiverged(RuntimeError):
    """The simulated perturbation blew past the overflow guard.

    ``trajectory`` holds every sample up to the last finite state.
    """

    def __init__(self, message: str, time: float, trajectory: "Trajectory"):
        super().__init__(message)
        self.time = time
        self.trajectory = trajectory


@dataclass(frozen=True)
class ProcessParameters:
    teeth_count: int = 2
    modal_mass: float = 0.04  # kg
    tool_diameter: float = 6.35  # mm
    radial_depth: float = 3.175  # mm
    damping_ratio: float = 0.011
    natural_frequency: float = TWO_PI * 1435.0  # rad/s
    tangential_coeff: float = 6e8  # kg/(m s^2)
    radial_coeff: float = 2e8  # kg/(m s^2)

    def __post_init__(self):
        if int(self.teeth_count) != self.teeth_count or self.teeth_count < 1:
            raise InvalidParameters(f"teeth_count must be a positive integer, got {self.teeth_count}")
        for name in ("modal_mass", "tool_diameter", "radial_depth", "natural_frequency",
                     "tangential_coeff", "radial_coeff"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise InvalidParameters(f"{name} must be finite and > 0, got {value}")
        if not 0.0 < self.damping_ratio < 1.0:
            raise InvalidParameters(f"damping_ratio must lie in (0, 1), got {self.damping_ratio}")
        if self.radial_depth > self.tool_diameter:
            raise InvalidParameters(
                f"radial_depth {self.radial_depth} mm exceeds tool_diameter {self.tool_diameter} mm"
            )

    @property
    def damping(self) -> float:
        """Modal damping 2*zeta*omega_n*M (same for x and y)."""
        return 2.0 * self.damping_ratio * self.natural_frequency * self.modal_mass

    @property
    def stiffness(self) -> float:
        return self.natural_frequency ** 2 * self.modal_mass

    def matrices(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        eye = np.eye(2)
        return self.modal_mass * eye, self.damping * eye, self.stiffness * eye

    def with_uncertain(self, zeta=None, omega_n=None, kt=None, kr=None) -> "ProcessParameters":
        """Copy with any of the four uncertain parameters replaced."""
        return replace(
            self,
            damping_ratio=self.damping_ratio if zeta is None else float(zeta),
            natural_frequency=self.natural_frequency if omega_n is None else float(omega_n),
            tangential_coeff=self.tangential_coeff if kt is None else float(kt),
            radial_coeff=self.radial_coeff if kr is None else float(kr),
        )

    def to_dict(self) -> dict:
        return {
            "teeth_count": self.teeth_count,
            "modal_mass": self.modal_mass,
            "tool_diameter": self.tool_diameter,
            "radial_depth": self.radial_depth,
            "damping_ratio": self.damping_ratio,
            "natural_frequency": self.natural_frequency,
            "tangential_coeff": self.tangential_coeff,
            "radial_coeff": self.radial_coeff,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ProcessParameters":
        known = cls.__dataclass_fields__
        unknown = set(data) - set(known)
        if unknown:
            raise InvalidParameters(f"unknown process parameter(s): {sorted(unknown)}")
        values = dict(data)
        if "teeth_count" in values:
            values["teeth_count"] = int(values["teeth_count"])
        return cls(**values)


@dataclass(frozen=True)
class OperatingPoint:
    spindle_speed: float  # rpm
    axial_depth: float  # mm

    def __post_init__(self):
        if not (math.isfinite(self.spindle_speed) and self.spindle_speed > 0):
            raise InvalidParameters(f"spindle_speed must be > 0 rpm, got {self.spindle_speed}")
        if not (math.isfinite(self.axial_depth) and self.axial_depth >= 0):
            raise InvalidParameters(f"axial_depth must be >= 0 mm, got {self.axial_depth}")

    def delay(self, teeth_count: int) -> float:
        return tooth_period(teeth_count, self.spindle_speed)


@dataclass(frozen=True)
class StateSample:
    t: float
    q: np.ndarray
    v: np.ndarray
    a: np.ndarray
    force: np.ndarray


@dataclass
class Trajectory:
    """Uniformly sampled simulator output, stored column-wise.

    ``operating_history`` lists ``(t, omega_rpm)`` speed changes and always
    starts at t = 0.
    """

    t: np.ndarray
    q: np.ndarray  # (n, 2) m
    v: np.ndarray  # (n, 2) m/s
    a: np.ndarray  # (n, 2) m/s^2
    force: np.ndarray  # (n, 2) N
    sample_step: float
    operating_history: list[tuple[float, float]] = field(default_factory=list)

    def __post_init__(self):
        if len(self.t) == 0:
            raise ValueError("trajectory must contain at least one sample")
        if not self.sample_step > 0:
            raise ValueError("sample_step must be positive")
        if not self.operating_history or self.operating_history[0][0] != 0.0:
            raise ValueError("operating_history must start at t = 0")

    def __len__(self) -> int:
        return len(self.t)

    @property
    def samples(self) -> list[StateSample]:
        return [StateSample(float(self.t[k]), self.q[k], self.v[k], self.a[k], self.force[k])
                for k in range(len(self.t))]

    def speed_at(self, t) -> np.ndarray:
        """Spindle speed in effect at each time in ``t`` (rpm).

        A change logged at t_c governs samples with t > t_c; the sample at
        t_c itself was produced under the previous speed.
        """
        times = np.array([h[0] for h in self.operating_history])
        speeds = np.array([h[1] for h in self.operating_history])
        idx = np.searchsorted(times, np.asarray(t, dtype=float), side="left") - 1
        return speeds[np.clip(idx, 0, len(speeds) - 1)]

    def displacement_at(self, t) -> np.ndarray:
        """Linearly interpolated displacement; zero before the first sample."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.empty((len(t), 2))
        for c in range(2):
            out[:, c] = np.interp(t, self.t, self.q[:, c], left=0.0)
        out[t < self.t[0]] = 0.0
        return out

    def slice(self, t0: float, t1: float) -> "Trajectory":
        mask = (self.t >= t0 - 1e-12) & (self.t <= t1 + 1e-12)
        return Trajectory(self.t[mask], self.q[mask], self.v[mask], self.a[mask],
                          self.force[mask], self.sample_step, list(self.operating_history))

    def to_csv(self, path: str | Path) -> None:
        text = trajectory_to_csv_text(self)
        _atomic_write(Path(path), text)

    @classmethod
    def from_csv(cls, path: str | Path) -> "Trajectory":
        return read_trajectory_csv(path)


def tooth_period(teeth_count: int, spindle_speed: float) -> float:
    """Regenerative delay 60 / (N * omega_sp) in seconds."""
    return 60.0 / (teeth_count * spindle_speed)


def tooth_angle(params: ProcessParameters, spindle_speed: float, t: float, j: int) -> float:
    if not 0 <= j < params.teeth_count:
        raise IndexError(f"tooth index {j} outside 0..{params.teeth_count - 1}")
    angle = TWO_PI * spindle_speed / 60.0 * t + j * TWO_PI / params.teeth_count
    return angle % TWO_PI


def engagement_window(params: ProcessParameters) -> tuple[float, float]:
    """Entry and exit angles (down milling, exit at pi)."""
    ratio = 1.0 - 2.0 * params.radial_depth / params.tool_diameter
    if ratio < -1.0 or ratio > 1.0:
        raise InvalidParameters("radial depth outside (0, D]: entry angle undefined")
    return math.acos(ratio), math.pi


def _directional_parts(params: ProcessParameters, spindle_speed: float, t) -> tuple[np.ndarray, np.ndarray]:
    """Unit-coefficient directional matrices (H_t, H_r) at times ``t``.

    H_d = K_t * H_t + K_r * H_r.  Returns arrays of shape (len(t), 2, 2).
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    return _directional_parts_at_angle(params, TWO_PI * spindle_speed / 60.0 * t)


def _directional_parts_at_angle(params: ProcessParameters, base) -> tuple[np.ndarray, np.ndarray]:
    """(H_t, H_r) as functions of the rotation angle of tooth 0, in rad."""
    phi_in, phi_out = engagement_window(params)
    n = params.teeth_count
    ht = np.zeros((len(base), 2, 2))
    hr = np.zeros((len(base), 2, 2))
    for j in range(n):
        phi = np.mod(base + j * TWO_PI / n, TWO_PI)
        g = ((phi > phi_in) & (phi < phi_out)).astype(float)
        s2 = np.sin(2.0 * phi) * g
        c2 = np.cos(2.0 * phi)
        ht[:, 0, 0] += s2
        ht[:, 0, 1] += (1.0 + c2) * g
        ht[:, 1, 0] -= (1.0 - c2) * g
        ht[:, 1, 1] -= s2
        hr[:, 0, 0] += (1.0 - c2) * g
        hr[:, 0, 1] += s2
        hr[:, 1, 0] += s2
        hr[:, 1, 1] += (1.0 + c2) * g
    return 0.5 * ht, 0.5 * hr


def directional_matrices(params: ProcessParameters, spindle_speed: float, t) -> np.ndarray:
    """Vectorised H_d over an array of times, shape (len(t), 2, 2)."""
    ht, hr = _directional_parts(params, spindle_speed, t)
    return params.tangential_coeff * ht + params.radial_coeff * hr


def directional_matrix(params: ProcessParameters, spindle_speed: float, t: float) -> np.ndarray:
    return directional_matrices(params, spindle_speed, [t])[0]


def regenerative_force(params: ProcessParameters, spindle_speed: float, axial_depth: float,
                       t, q, q_delayed) -> np.ndarray:
    """Dynamic cutting force -a_p H_d(t) (q - q_tau) in N for arrays of samples."""
    h = directional_matrices(params, spindle_speed, t)
    dq = np.atleast_2d(q) - np.atleast_2d(q_delayed)
    return -axial_depth * 1e-3 * np.einsum("kij,kj->ki", h, dq)


class DelaySimulator:
    """Stateful fixed-step integrator for the regenerative model.

    Integration is classical RK4; the delayed displacement is looked up in a
    ring buffer of past step values with linear interpolation, and is zero
    for t < 0. Speed and parameters may change between ``advance`` calls.
    Recorded signals carry optional multiplicative Gaussian noise; the
    integrated state never does.
    """

    def __init__(self, params: ProcessParameters, spindle_speed: float, axial_depth: float,
                 step: float, initial_perturbation=(1e-5, 1e-5), noise_std: float = 0.0,
                 seed: int = 0, max_delay: float | None = None, guard_factor: float = 1e6):
        if not step > 0:
            raise ValueError("step must be positive")
        if noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        self.params = params
        self.spindle_speed = float(spindle_speed)
        self.axial_depth = float(axial_depth)
        self.step = float(step)
        self.noise_std = float(noise_std)
        self._rng = np.random.default_rng(seed)
        self._check_resolution(self.spindle_speed)
        max_delay = max_delay if max_delay is not None else tooth_period(params.teeth_count, self.spindle_speed)
        self._ring_len = int(math.ceil(max_delay / self.step)) + 4
        self._ring = np.zeros((self._ring_len, 2))
        q0 = np.asarray(initial_perturbation, dtype=float).reshape(2)
        self._ring[0] = q0
        self._state = np.array([q0[0], q0[1], 0.0, 0.0])
        self._n = 0  # index of the current step; time = n * step
        scale = float(np.linalg.norm(q0)) or 1e-12
        self._guard = guard_factor * scale
        self.operating_history: list[tuple[float, float]] = [(0.0, self.spindle_speed)]
        self._chunks: list[tuple[np.ndarray, ...]] = []
        self._record(self._sample_now())
        self.diverged_at: float | None = None

    @property
    def time(self) -> float:
        return self._n * self.step

    def _check_resolution(self, spindle_speed: float) -> None:
        tau = tooth_period(self.params.teeth_count, spindle_speed)
        if self.step > tau / 100.0 * (1 + 1e-9):
            raise ValueError(
                f"step {self.step:.3e} s under-resolves the delay {tau:.3e} s (need step <= tau/100)"
            )

    def set_speed(self, spindle_speed: float) -> None:
        spindle_speed = float(spindle_speed)
        if spindle_speed == self.spindle_speed:
            return
        self._check_resolution(spindle_speed)
        tau = tooth_period(self.params.teeth_count, spindle_speed)
        if tau / self.step + 4 > self._ring_len:
            self._grow_ring(int(math.ceil(tau / self.step)) + 4)
        self.spindle_speed = spindle_speed
        self.operating_history.append((self.time, spindle_speed))

    def set_params(self, params: ProcessParameters) -> None:
        self.params = params

    def _grow_ring(self, new_len: int) -> None:
        old = self._ring
        ordered = np.array([old[(self._n - k) % self._ring_len] for k in range(self._ring_len)])
        self._ring = np.zeros((new_len, 2))
        for k in range(min(self._ring_len, self._n + 1)):
            self._ring[(self._n - k) % new_len] = ordered[k]
        self._ring_len = new_len

    def _kernel_args(self):
        p = self.params
        phi_in, phi_out = engagement_window(p)
        return (p.teeth_count, p.modal_mass, p.damping, p.stiffness, p.tangential_coeff,
                p.radial_coeff, phi_in, phi_out, self.spindle_speed, self.axial_depth * 1e-3)

    def _sample_now(self):
        t = self.time
        out = np.empty((1, 9))
        _kernels.record_sample(self._state, self._ring, self._n, self.step, t, out[0],
                               *self._kernel_args())
        return out

    def _record(self, rows: np.ndarray) -> None:
        if self.noise_std > 0:
            noise = self._rng.standard_normal((rows.shape[0], 8))
            rows = rows.copy()
            rows[:, 1:] *= 1.0 + self.noise_std * noise
        self._chunks.append((rows, np.full(rows.shape[0], self.spindle_speed)))

    def advance(self, duration: float) -> None:
        """Integrate forward by ``duration`` seconds (rounded to whole steps)."""
        n_steps = int(round(duration / self.step))
        if n_steps <= 0 or self.diverged_at is not None:
            return
        out = np.empty((n_steps, 9))
        done = _kernels.integrate(self._state, self._ring, self._n, self.step, n_steps,
                                  self._guard, out, *self._kernel_args())
        self._n += done
        self._record(out[:done])
        if done < n_steps:
            self.diverged_at = self.time

    def trajectory(self) -> Trajectory:
        rows = np.concatenate([c[0] for c in self._chunks])
        return Trajectory(
            t=rows[:, 0].copy(), q=rows[:, 1:3].copy(), v=rows[:, 3:5].copy(),
            a=rows[:, 5:7].copy(), force=rows[:, 7:9].copy(), sample_step=self.step,
            operating_history=list(self.operating_history),
        )


def simulate_dde(params: ProcessParameters, schedule: Sequence[tuple[float, float]], axial_depth: float,
                 duration: float, step: float | None = None, initial_perturbation=(1e-5, 1e-5),
                 noise_std: float = 0.0, seed: int = 0) -> Trajectory:
    """Simulate the regenerative model over a spindle-speed schedule.

    ``schedule`` is a list of ``(t, omega_rpm)`` with the first entry at
    t = 0. The default step is tau/1000 at the fastest scheduled speed.

    Raises SimulationDiverged (carrying the partial trajectory) when the
    displacement exceeds 1e6 times the initial perturbation.
    """
    schedule = sorted((float(t), float(w)) for t, w in schedule)
    if not schedule or schedule[0][0] != 0.0:
        raise ValueError("schedule must start at t = 0")
    taus = [tooth_period(params.teeth_count, w) for _, w in schedule]
    if duration < max(taus):
        raise ValueError("duration must cover at least one delay period")
    if step is None:
        step = min(taus) / 1000.0
    sim = DelaySimulator(params, schedule[0][1], axial_depth, step, initial_perturbation,
                         noise_std, seed, max_delay=max(taus))
    bounds = [t for t, _ in schedule[1:]] + [duration]
    for (_, speed), t_end in zip(schedule, bounds):
        sim.set_speed(speed)
        sim.advance(t_end - sim.time)
        if sim.diverged_at is not None:
            traj = sim.trajectory()
            raise SimulationDiverged(
                f"perturbation diverged at t = {sim.diverged_at:.6g} s "
                f"(last finite sample t = {traj.t[-1]:.6g} s)", sim.diverged_at, traj)
    return sim.trajectory()


def perturbation_energy(traj: Trajectory) -> np.ndarray:
    """Squared displacement norm per sample (m^2)."""
    return np.einsum("ki,ki->k", traj.q, traj.q)


def trajectory_to_csv_text(traj: Trajectory) -> str:
    buf = io.StringIO(newline="")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRAJECTORY_HEADER)
    speeds = traj.speed_at(traj.t)
    for k in range(len(traj.t)):
        writer.writerow([repr(float(traj.t[k])), *(repr(float(x)) for x in traj.q[k]),
                         *(repr(float(x)) for x in traj.v[k]), *(repr(float(x)) for x in traj.a[k]),
                         *(repr(float(x)) for x in traj.force[k]), repr(float(speeds[k]))])
    return buf.getvalue()


class TrajectoryFormatError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


def read_trajectory_csv(path: str | Path) -> Trajectory:
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_trajectory_csv(fh)


def parse_trajectory_csv(lines: Iterable[str]) -> Trajectory:
    reader = csv.reader(lines)
    try:
        header = next(reader)
    except StopIteration:
        raise TrajectoryFormatError("empty file", 1) from None
    if tuple(h.strip() for h in header) != TRAJECTORY_HEADER:
        raise TrajectoryFormatError(f"expected header {','.join(TRAJECTORY_HEADER)}", 1)
    rows = []
    for row in reader:
        line = reader.line_num
        if not row:
            continue
        if len(row) != len(TRAJECTORY_HEADER):
            raise TrajectoryFormatError(f"expected {len(TRAJECTORY_HEADER)} fields, got {len(row)}", line)
        try:
            values = [float(x) for x in row]
        except ValueError as exc:
            raise TrajectoryFormatError(str(exc), line) from None
        if not all(math.isfinite(x) for x in values):
            raise TrajectoryFormatError("non-finite value", line)
        rows.append(values)
    if not rows:
        raise TrajectoryFormatError("no samples", 2)
    data = np.array(rows)
    t = data[:, 0]
    steps = np.diff(t)
    if len(steps) and (np.any(steps <= 0)):
        bad = int(np.argmax(steps <= 0)) + 3
        raise TrajectoryFormatError("time column must be strictly increasing", bad)
    step = float(np.median(steps)) if len(steps) else 1.0
    if len(steps) and np.max(np.abs(steps - step)) > 1e-6 * step:
        bad = int(np.argmax(np.abs(steps - step) > 1e-6 * step)) + 3
        raise TrajectoryFormatError("sampling step is not uniform", bad)
    omega = data[:, 9]
    history = [(0.0, float(omega[0]))]
    for k in np.flatnonzero(np.diff(omega) != 0) + 1:
        history.append((float(t[k - 1]), float(omega[k])))
    return Trajectory(t=t, q=data[:, 1:3], v=data[:, 3:5], a=data[:, 5:7], force=data[:, 7:9],
                      sample_step=step, operating_history=history)


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    tmp.replace(path)
