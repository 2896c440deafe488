"""Timing harness for the lobe-diagram workloads.

    python -m millstab.benchmark [--workers N] [--repeats R] [--skip-full]

Measures the full default grid sweep and the per-decision controller row
update (one depth slice over the speed lattice), reporting wall times.
"""
from __future__ import annotations

import argparse
import json
import os
import statistics
import time
from dataclasses import dataclass

from millstab.controller import ControllerConfig
from millstab.dynamics import ProcessParameters
from millstab.closed_loop import controller_grid_spec
from millstab.sld import GridSpec, compute_rows, compute_sld


@dataclass(frozen=True)
class Timing:
    label: str
    median_s: float
    best_s: float
    repeats: int

    def to_dict(self) -> dict:
        return {"label": self.label, "median_s": self.median_s, "best_s": self.best_s,
                "repeats": self.repeats}


def _time(label: str, fn, repeats: int) -> Timing:
    fn()  # warm caches (quadrature nodes, imports)
    samples = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - start)
    return Timing(label, statistics.median(samples), min(samples), repeats)


def row_update(params: ProcessParameters = ProcessParameters(), axial_depth: float = 1.0,
               rows: int = 0, repeats: int = 15) -> Timing:
    """Controller grid rebuild at ``axial_depth`` with ``rows`` extra rows either side."""
    cfg = ControllerConfig()
    spec = controller_grid_spec(cfg, axial_depth, rows, 0.025)
    return _time(f"controller grid, {spec.depth_count} row(s) x {spec.speed_count} speeds",
                 lambda: compute_rows(params, spec), repeats)


def full_grid(params: ProcessParameters = ProcessParameters(), workers: int | None = None,
              repeats: int = 1) -> Timing:
    workers = workers or os.cpu_count() or 1
    spec = GridSpec()
    return _time(f"full grid {spec.speed_count}x{spec.depth_count}, {workers} worker(s)",
                 lambda: compute_sld(params, spec, workers=workers), repeats)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="python -m millstab.benchmark", description=__doc__.splitlines()[0])
    parser.add_argument("--workers", type=int, default=None)
    parser.add_argument("--repeats", type=int, default=15)
    parser.add_argument("--skip-full", action="store_true")
    args = parser.parse_args(argv)
    results = [row_update(repeats=args.repeats), row_update(rows=2, repeats=max(3, args.repeats // 3))]
    if not args.skip_full:
        results.append(full_grid(workers=args.workers))
    for r in results:
        print(f"{r.label}: median {r.median_s * 1e3:.1f} ms, best {r.best_s * 1e3:.1f} ms")
    print(json.dumps({"cpu_count": os.cpu_count(), "timings": [r.to_dict() for r in results]}))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
