"""Stability lobe diagrams over a (spindle speed x axial depth) grid."""
from __future__ import annotations

import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from millstab.dynamics import OperatingPoint, ProcessParameters, _atomic_write
from millstab.sdm import SdmConfig, SdmNumericalError, period_transition, speed_column, speed_rows

FAILURE_LIMIT = 0.01


class SldComputationError(RuntimeError):
    def __init__(self, message: str, failures: list):
        super().__init__(message)
        self.failures = failures


class OutOfGridError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    speed_range: tuple[float, float] = (6000.0, 16000.0)
    depth_range: tuple[float, float] = (0.0, 2.5)
    speed_count: int = 200
    depth_count: int = 100
    sdm: SdmConfig = SdmConfig()

    def __post_init__(self):
        lo, hi = self.speed_range
        if not (lo > 0 and hi >= lo):
            raise ValueError(f"invalid speed_range {self.speed_range}")
        dlo, dhi = self.depth_range
        if not (dlo >= 0 and dhi >= dlo):
            raise ValueError(f"invalid depth_range {self.depth_range}")
        # a degenerate range is a single node; otherwise at least two nodes
        for name, (a, b) in (("speed_count", self.speed_range), ("depth_count", self.depth_range)):
            if a == b:
                object.__setattr__(self, name, 1)
            elif getattr(self, name) < 2:
                raise ValueError(f"{name} must be >= 2 for a non-degenerate range")

    @property
    def speeds(self) -> np.ndarray:
        return np.linspace(*self.speed_range, self.speed_count)

    @property
    def depths(self) -> np.ndarray:
        return np.linspace(*self.depth_range, self.depth_count)

    def to_dict(self) -> dict:
        return {
            "speed_range": list(self.speed_range),
            "depth_range": list(self.depth_range),
            "speed_count": self.speed_count,
            "depth_count": self.depth_count,
            "delay_resolution": self.sdm.delay_resolution,
            "quadrature_nodes": self.sdm.quadrature_nodes,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GridSpec":
        data = dict(data)
        sdm = SdmConfig(int(data.pop("delay_resolution", 40)), int(data.pop("quadrature_nodes", 8)))
        unknown = set(data) - {"speed_range", "depth_range", "speed_count", "depth_count"}
        if unknown:
            raise ValueError(f"unknown grid field(s): {sorted(unknown)}")
        return cls(
            speed_range=tuple(float(x) for x in data.get("speed_range", (6000.0, 16000.0))),
            depth_range=tuple(float(x) for x in data.get("depth_range", (0.0, 2.5))),
            speed_count=int(data.get("speed_count", 200)),
            depth_count=int(data.get("depth_count", 100)),
            sdm=sdm,
        )


@dataclass(frozen=True)
class Classification:
    stable: bool
    margin: float
    rho: float


@dataclass
class SldGrid:
    spec: GridSpec
    rho: np.ndarray  # (depth_count, speed_count)
    gamma_max: np.ndarray
    params_used: ProcessParameters
    timestamp: float = 0.0
    failures: list = field(default_factory=list)

    @property
    def speeds(self) -> np.ndarray:
        return self.spec.speeds

    @property
    def depths(self) -> np.ndarray:
        return self.spec.depths

    def interpolate(self, values: np.ndarray, spindle_speed: float, axial_depth: float) -> float:
        """Bilinear interpolation of a grid field; exact at nodes."""
        s_lo, s_hi = self.spec.speed_range
        d_lo, d_hi = self.spec.depth_range
        tol = 1e-9
        if not (s_lo - tol <= spindle_speed <= s_hi + tol and d_lo - tol <= axial_depth <= d_hi + tol):
            raise OutOfGridError(
                f"({spindle_speed} rpm, {axial_depth} mm) outside grid "
                f"[{s_lo}, {s_hi}] rpm x [{d_lo}, {d_hi}] mm")
        si, sf = _locate(self.speeds, spindle_speed)
        di, df = _locate(self.depths, axial_depth)
        v00 = values[di, si]
        v01 = values[di, si + 1] if sf else v00
        v10 = values[di + 1, si] if df else v00
        v11 = values[di + 1, si + 1] if (sf and df) else (v01 if sf else v10)
        return float((1 - df) * ((1 - sf) * v00 + sf * v01) + df * ((1 - sf) * v10 + sf * v11))

    def rho_at(self, spindle_speed: float, axial_depth: float) -> float:
        return self.interpolate(self.rho, spindle_speed, axial_depth)

    def gamma_at(self, spindle_speed: float, axial_depth: float) -> float:
        return self.interpolate(self.gamma_max, spindle_speed, axial_depth)

    def to_csv_text(self) -> str:
        buf = io.StringIO(newline="")
        buf.write("omega_rpm,ap_mm,rho,gamma_max,stable\n")
        speeds, depths = self.speeds, self.depths
        for d, depth in enumerate(depths):
            for s, speed in enumerate(speeds):
                r = float(self.rho[d, s])
                buf.write(f"{float(speed)!r},{float(depth)!r},{r!r},{float(self.gamma_max[d, s])!r},"
                          f"{int(r < 1.0)}\n")
        return buf.getvalue()

    def sidecar(self) -> dict:
        return {
            "grid": self.spec.to_dict(),
            "params": self.params_used.to_dict(),
            "timestamp": self.timestamp,
            "failures": [list(f) for f in self.failures],
        }

    def write(self, out_dir: str | Path, stem: str = "sld") -> None:
        out_dir = Path(out_dir)
        _atomic_write(out_dir / f"{stem}.csv", self.to_csv_text())
        _atomic_write(out_dir / f"{stem}.json", json.dumps(self.sidecar(), indent=2, sort_keys=True) + "\n")


def _locate(nodes: np.ndarray, x: float) -> tuple[int, float]:
    """Index of the lower bracketing node and the fractional offset."""
    if len(nodes) == 1 or x <= nodes[0]:
        return 0, 0.0
    if x >= nodes[-1]:
        return len(nodes) - 1, 0.0
    i = int(np.searchsorted(nodes, x, side="right")) - 1
    frac = (x - nodes[i]) / (nodes[i + 1] - nodes[i])
    if frac == 0.0:
        return i, 0.0
    return i, float(frac)


def _column_task(args):
    params, speed, depths, cfg = args
    try:
        rho, gam = speed_column(params, speed, depths, cfg)
        return rho, gam, []
    except SdmNumericalError:
        pass
    # isolate the failing depths one by one
    rho = np.full(len(depths), np.nan)
    gam = np.full(len(depths), np.nan)
    failed = []
    for d, depth in enumerate(depths):
        try:
            r, g = speed_column(params, speed, [depth], cfg)
            rho[d], gam[d] = r[0], g[0]
        except SdmNumericalError as exc:
            failed.append((float(speed), float(depth), str(exc)))
    return rho, gam, failed


def compute_sld(params: ProcessParameters, spec: GridSpec = GridSpec(), workers: int = 1,
                timestamp: float = 0.0) -> SldGrid:
    """Evaluate rho(Phi) and sigma_max(Gamma) on every grid node.

    Columns of constant speed are independent and are farmed out to
    ``workers`` processes; results are assembled by index so the output does
    not depend on the worker count.
    """
    depths = spec.depths
    tasks = [(params, float(s), depths, spec.sdm) for s in spec.speeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_column_task, tasks))
    else:
        results = [_column_task(t) for t in tasks]
    rho = np.column_stack([r[0] for r in results])
    gam = np.column_stack([r[1] for r in results])
    failures = [f for r in results for f in r[2]]
    grid = SldGrid(spec, rho, gam, params, timestamp, failures)
    if len(failures) > FAILURE_LIMIT * rho.size:
        raise SldComputationError(
            f"{len(failures)} of {rho.size} grid points failed (limit {FAILURE_LIMIT:.0%})", failures)
    return grid


def compute_rows(params: ProcessParameters, spec: GridSpec, timestamp: float = 0.0) -> SldGrid:
    """Small grids (a few depth rows) in one batched pass, in-process.

    Falls back to the column-wise sweep, which isolates failing points, if
    the batch hits a numerical failure.
    """
    try:
        rho, gam = speed_rows(params, spec.speeds, spec.depths, spec.sdm)
    except SdmNumericalError:
        return compute_sld(params, spec, workers=1, timestamp=timestamp)
    return SldGrid(spec, rho, gam, params, timestamp, [])


def classify(grid: SldGrid, op: OperatingPoint) -> Classification:
    rho = grid.rho_at(op.spindle_speed, op.axial_depth)
    return Classification(rho < 1.0, 1.0 - rho, rho)


def extract_boundary(grid: SldGrid) -> list[tuple[float, float]]:
    """Lowest depth at which rho reaches 1 for each speed column.

    Fully stable columns report the top of the depth range.
    """
    depths = grid.depths
    out = []
    for s, speed in enumerate(grid.speeds):
        col = grid.rho[:, s]
        crossing = float(depths[-1])
        hits = np.flatnonzero(col >= 1.0)
        if len(hits):
            d = int(hits[0])
            if d == 0:
                crossing = float(depths[0])
            else:
                r0, r1 = col[d - 1], col[d]
                crossing = float(depths[d - 1] + (1.0 - r0) / (r1 - r0) * (depths[d] - depths[d - 1]))
        out.append((float(speed), crossing))
    return out


def boundary_csv_text(boundary) -> str:
    lines = ["omega_rpm,ap_star_mm"]
    lines += [f"{w!r},{a!r}" for w, a in boundary]
    return "\n".join(lines) + "\n"


def point_rho(params: ProcessParameters, op: OperatingPoint, cfg: SdmConfig = SdmConfig()) -> float:
    """Spectral radius at a single operating point (analytic at zero depth)."""
    if op.axial_depth == 0.0:
        tau = op.delay(params.teeth_count)
        return math.exp(-params.damping_ratio * params.natural_frequency * tau)
    return period_transition(params, op, cfg).rho
