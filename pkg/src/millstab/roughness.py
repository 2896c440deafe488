"""Surface-roughness prediction and chatter flagging from windowed signals.

The predictor is pluggable. The shipped surrogate is

    r = r0 + c_kin * f_z^2 + c_vib * rms(q)

(kinematic feed marks plus a vibration term), with chatter flagged when
most displacement energy sits away from the tooth-passing harmonics and the
vibration is not dying out. Coefficients come from a calibration file.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from millstab.dynamics import ProcessParameters, simulate_dde, tooth_period
from millstab.estimation import EstimatedParameters, SensorWindow, window_from_trajectory

BAND_TOLERANCE = 0.02


class UncalibratedModel(ValueError):
    pass


@dataclass(frozen=True)
class FeatureVector:
    rms_displacement: float  # m
    rms_force: float  # N
    tooth_passing_energy_fraction: float
    offband_energy_fraction: float
    feed_per_tooth: float  # mm
    depth: float  # mm
    speed: float  # rpm
    envelope_growth: float = 0.0  # rms(second half) / rms(first half)


@dataclass(frozen=True)
class RoughnessEstimate:
    r: float  # um
    chatter: bool
    confidence: float


def feed_per_tooth(feed_rate: float, teeth_count: int, spindle_speed: float) -> float:
    """Chip load in mm from feed rate in mm/s."""
    return feed_rate * 60.0 / (teeth_count * spindle_speed)


def estimate_force(window: SensorWindow, params: ProcessParameters | EstimatedParameters,
                   mass: float | None = None) -> np.ndarray:
    """Force reconstructed from measured motion through the modal model, M q'' + C q' + K q."""
    if isinstance(params, EstimatedParameters):
        if mass is None:
            raise ValueError("mass is required with estimated parameters")
        zeta, omega_n = params.zeta, params.omega_n
    else:
        mass = params.modal_mass if mass is None else mass
        zeta, omega_n = params.damping_ratio, params.natural_frequency
    return mass * window.a + 2 * zeta * omega_n * mass * window.v + omega_n ** 2 * mass * window.q


def band_fractions(signal: np.ndarray, step: float, fundamental: float) -> tuple[float, float]:
    """Energy fractions (on-band, off-band) of ``signal`` around harmonics of ``fundamental`` Hz.

    A bin is on-band when it lies within 2 % of a harmonic, or is the bin
    nearest to it when the resolution is coarser than that. DC counts
    toward the total only.
    """
    n = len(signal)
    power = np.abs(np.fft.rfft(signal)) ** 2
    total = float(power.sum())
    if total == 0.0:
        return 0.0, 0.0
    freqs = np.fft.rfftfreq(n, step)
    df = freqs[1] - freqs[0]
    on = np.zeros(len(freqs), dtype=bool)
    harmonics = np.arange(1, int(freqs[-1] / fundamental) + 2) * fundamental
    for f in harmonics:
        tol = max(BAND_TOLERANCE * f, 0.5 * df)
        on |= np.abs(freqs - f) <= tol
    on[0] = False
    on_energy = float(power[on].sum())
    off_energy = float(power[1:].sum()) - on_energy
    return on_energy / total, max(off_energy, 0.0) / total


def extract_features(window: SensorWindow, teeth_count: int, feed_rate: float) -> FeatureVector:
    op = window.op
    tau = tooth_period(teeth_count, op.spindle_speed)
    n = len(window.t)
    step = window.duration / (n - 1)
    if n * step < 4 * tau * (1 - 1e-9):
        raise ValueError(f"window covers {n * step:.4g} s, need at least four tooth periods ({4 * tau:.4g} s)")
    qx = window.q[:, 0]
    on, off = band_fractions(qx, step, 1.0 / tau)
    disp = np.sqrt(np.sum(window.q ** 2, axis=1))
    half = n // 2
    first = float(np.sqrt(np.mean(disp[:half] ** 2)))
    second = float(np.sqrt(np.mean(disp[half:] ** 2)))
    growth = second / first if first > 0 else 0.0
    return FeatureVector(
        rms_displacement=float(np.sqrt(np.mean(disp ** 2))),
        rms_force=float(np.sqrt(np.mean(np.sum(window.force ** 2, axis=1)))),
        tooth_passing_energy_fraction=on,
        offband_energy_fraction=off,
        feed_per_tooth=feed_per_tooth(feed_rate, teeth_count, op.spindle_speed),
        depth=op.axial_depth,
        speed=op.spindle_speed,
        envelope_growth=growth,
    )


class RoughnessPredictor(Protocol):
    def predict(self, features: FeatureVector, distribution=None) -> RoughnessEstimate: ...


@dataclass(frozen=True)
class RoughnessModel:
    """Calibrated surrogate. ``c_vib`` is in um per m of RMS displacement."""

    r0_um: float | None = None
    c_kin: float | None = None  # um / mm^2
    c_vib: float | None = None
    chatter_offband_threshold: float = 0.3

    @property
    def calibrated(self) -> bool:
        return None not in (self.r0_um, self.c_kin, self.c_vib)

    def predict(self, features: FeatureVector, distribution=None) -> RoughnessEstimate:
        # ``distribution`` is the optional parameter-combination prior; the surrogate ignores it.
        return predict_roughness(features, self)

    def surface(self, feed_per_tooth_mm: float, rms_displacement: float) -> float:
        if not self.calibrated:
            raise UncalibratedModel("roughness model has not been calibrated")
        return self.r0_um + self.c_kin * feed_per_tooth_mm ** 2 + self.c_vib * rms_displacement

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RoughnessModel":
        fields = ("r0_um", "c_kin", "c_vib", "chatter_offband_threshold")
        return cls(**{k: data[k] for k in fields if k in data})


def predict_roughness(features: FeatureVector, model: RoughnessModel) -> RoughnessEstimate:
    r = model.surface(features.feed_per_tooth, features.rms_displacement)
    thr = model.chatter_offband_threshold
    off = features.offband_energy_fraction
    chatter = off > thr and features.envelope_growth >= 1.0
    confidence = min(1.0, abs(off - thr) / max(thr, 1.0 - thr))
    return RoughnessEstimate(r=float(r), chatter=bool(chatter), confidence=float(confidence))


_REGISTRY: dict[str, Callable[[dict], RoughnessPredictor]] = {"surrogate": RoughnessModel.from_dict}


def register_model(name: str, factory: Callable[[dict], RoughnessPredictor]) -> None:
    _REGISTRY[name] = factory


def load_model(data: dict, kind: str = "surrogate") -> RoughnessPredictor:
    try:
        factory = _REGISTRY[kind]
    except KeyError:
        raise ValueError(f"unknown roughness model {kind!r}; registered: {sorted(_REGISTRY)}") from None
    return factory(data)


def default_calibration() -> dict:
    text = resources.files("millstab").joinpath("data/roughness_calibration.json").read_text("utf-8")
    return json.loads(text)


def default_model() -> RoughnessModel:
    return RoughnessModel.from_dict(default_calibration())


def load_calibration(path: str | Path) -> RoughnessModel:
    return RoughnessModel.from_dict(json.loads(Path(path).read_text("utf-8")))


@dataclass(frozen=True)
class CalibrationAnchor:
    spindle_speed: float = 11500.0
    axial_depth: float = 1.0
    window_end: float = 0.03
    initial_perturbation: float = 1e-5
    feed_rate: float = 8.5
    target_um: float = 6.10


def anchor_features(params: ProcessParameters, anchor: CalibrationAnchor = CalibrationAnchor()) -> FeatureVector:
    """Features of the last four tooth periods of the open-loop anchor run."""
    tau = tooth_period(params.teeth_count, anchor.spindle_speed)
    traj = simulate_dde(params, [(0.0, anchor.spindle_speed)], anchor.axial_depth,
                        max(anchor.window_end, tau), initial_perturbation=(anchor.initial_perturbation,) * 2)
    window = window_from_trajectory(traj, anchor.window_end - 4 * tau, anchor.window_end,
                                    anchor.axial_depth, params.teeth_count)
    return extract_features(window, params.teeth_count, anchor.feed_rate)


def kinematic_coefficient(tool_diameter: float) -> float:
    """Feed-mark coefficient in um/mm^2: Ra ~ f_z^2 / (32 R) for a round cutting edge."""
    return 1000.0 / (32.0 * 0.5 * tool_diameter)


def calibrate(params: ProcessParameters, anchor: CalibrationAnchor = CalibrationAnchor(),
              r0_um: float = 0.5, threshold: float = 0.3) -> RoughnessModel:
    """Solve the vibration gain so the anchor run predicts ``anchor.target_um``."""
    feats = anchor_features(params, anchor)
    c_kin = kinematic_coefficient(params.tool_diameter)
    base = r0_um + c_kin * feats.feed_per_tooth ** 2
    if not feats.rms_displacement > 0 or anchor.target_um <= base:
        raise UncalibratedModel("anchor run cannot pin the vibration gain")
    c_vib = (anchor.target_um - base) / feats.rms_displacement
    return RoughnessModel(r0_um=r0_um, c_kin=c_kin, c_vib=c_vib, chatter_offband_threshold=threshold)


def expected_residual(rho: float, periods: float) -> float:
    """Mean amplitude factor of a vibration decaying by ``rho`` per period over ``periods`` periods."""
    if rho >= 1.0 or periods <= 1.0:
        return 1.0
    return (1.0 - rho ** periods) / (periods * (1.0 - rho))


def roughness_map(model: RoughnessModel, grid, axial_depth: float, speeds, feed_rate: float,
                  teeth_count: int, rms_now: float, horizon: float) -> dict[float, float]:
    """Predicted roughness at each candidate speed over the next ``horizon`` seconds.

    Feed marks follow the candidate's chip load; the present vibration level
    is assumed to decay (or persist) at the candidate's Floquet rate.
    """
    out = {}
    for w in speeds:
        rho = grid.rho_at(w, axial_depth)
        periods = horizon / tooth_period(teeth_count, w)
        x = rms_now * expected_residual(rho, periods)
        out[float(w)] = model.surface(feed_per_tooth(feed_rate, teeth_count, w), x)
    return out
