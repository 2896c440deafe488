import json
import math

import numpy as np
import pytest

from millstab.dynamics import OperatingPoint, tooth_period
from millstab.sdm import SdmConfig
from millstab.sld import (
    GridSpec,
    OutOfGridError,
    SldGrid,
    boundary_csv_text,
    classify,
    compute_rows,
    compute_sld,
    extract_boundary,
    point_rho,
)

from conftest import TABLE1

SMALL = GridSpec(speed_range=(9000.0, 13000.0), depth_range=(0.0, 2.0), speed_count=12, depth_count=9)


def synthetic(rho_fn, speeds=(1000.0, 2000.0, 3000.0), depths=np.linspace(0, 2, 5)):
    spec = GridSpec(speed_range=(speeds[0], speeds[-1]), depth_range=(depths[0], depths[-1]),
                    speed_count=len(speeds), depth_count=len(depths))
    rho = np.array([[rho_fn(w, d) for w in spec.speeds] for d in spec.depths])
    return SldGrid(spec, rho, np.ones_like(rho), TABLE1)


class TestGridSpec:
    def test_defaults(self):
        spec = GridSpec()
        assert spec.speed_range == (6000.0, 16000.0) and spec.depth_range == (0.0, 2.5)
        assert (spec.speed_count, spec.depth_count) == (200, 100)

    @pytest.mark.parametrize("kwargs", [
        {"speed_range": (0.0, 100.0)}, {"depth_range": (-1.0, 1.0)}, {"speed_count": 1},
        {"speed_range": (200.0, 100.0)},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            GridSpec(**kwargs)

    def test_degenerate_range_is_one_node(self):
        assert GridSpec(depth_range=(0.0, 0.0)).depth_count == 1

    def test_dict_round_trip(self):
        spec = GridSpec(speed_count=7, sdm=SdmConfig(24, 4))
        assert GridSpec.from_dict(spec.to_dict()) == spec
        with pytest.raises(ValueError):
            GridSpec.from_dict({"nope": 1})


class TestComputeSld:
    def test_zero_depth_row_analytic(self, table1_grid):
        expected = [math.exp(-TABLE1.damping_ratio * TABLE1.natural_frequency * tooth_period(2, w))
                    for w in table1_grid.speeds]
        assert np.allclose(table1_grid.rho[0], expected, rtol=1e-12)
        assert np.all(table1_grid.rho[0] < 1)

    def test_reference_classifications(self, table1_grid):
        assert not classify(table1_grid, OperatingPoint(11500, 1.0)).stable
        assert classify(table1_grid, OperatingPoint(11500, 1.0)).margin < 0
        assert classify(table1_grid, OperatingPoint(10579, 1.0)).stable

    def test_all_finite_and_shape(self, table1_grid):
        assert table1_grid.rho.shape == (100, 200)
        assert np.all(np.isfinite(table1_grid.rho)) and np.all(np.isfinite(table1_grid.gamma_max))
        assert not table1_grid.failures

    def test_nodes_match_point_evaluation(self, table1_grid):
        rng = np.random.default_rng(0)
        for _ in range(5):
            d, s = rng.integers(1, 100), rng.integers(0, 200)
            op = OperatingPoint(float(table1_grid.speeds[s]), float(table1_grid.depths[d]))
            assert table1_grid.rho[d, s] == pytest.approx(point_rho(TABLE1, op), rel=1e-9)

    def test_workers_bit_identical(self):
        a = compute_sld(TABLE1, SMALL, workers=1)
        b = compute_sld(TABLE1, SMALL, workers=3)
        assert a.to_csv_text() == b.to_csv_text()

    def test_compute_rows_matches_sweep(self):
        a = compute_sld(TABLE1, SMALL)
        b = compute_rows(TABLE1, SMALL)
        assert np.allclose(a.rho, b.rho, rtol=1e-9)
        assert np.allclose(a.gamma_max, b.gamma_max, rtol=1e-9)

    def test_larger_cutting_coefficient_lowers_boundary(self):
        spec = GridSpec(speed_range=(9000.0, 12000.0), depth_range=(0.0, 2.5), speed_count=6, depth_count=26)
        base = extract_boundary(compute_sld(TABLE1, spec))
        harder = extract_boundary(compute_sld(TABLE1.with_uncertain(kt=1.2 * TABLE1.tangential_coeff), spec))
        assert all(h <= b + 1e-12 for (_, h), (_, b) in zip(harder, base))
        assert any(h < b for (_, h), (_, b) in zip(harder, base))


class TestInterpolation:
    def test_exact_at_nodes(self, table1_grid):
        for d in (0, 17, 99):
            for s in (0, 63, 199):
                w, a = float(table1_grid.speeds[s]), float(table1_grid.depths[d])
                assert table1_grid.rho_at(w, a) == table1_grid.rho[d, s]
                assert classify(table1_grid, OperatingPoint(w, a)).stable == (table1_grid.rho[d, s] < 1)

    def test_bilinear(self):
        g = synthetic(lambda w, d: 0.001 * w + 0.3 * d)
        assert g.rho_at(1500.0, 0.25) == pytest.approx(1.5 + 0.075)

    def test_out_of_range(self, table1_grid):
        with pytest.raises(OutOfGridError):
            table1_grid.rho_at(5000.0, 1.0)
        with pytest.raises(OutOfGridError):
            table1_grid.rho_at(11000.0, 2.6)

    def test_zero_depth_margin(self, table1_grid):
        c = classify(table1_grid, OperatingPoint(11000.0, 0.0))
        tau = tooth_period(2, 11000.0)
        expected = 1 - math.exp(-TABLE1.damping_ratio * TABLE1.natural_frequency * tau)
        # 11000 rpm is not a node: the value is interpolated between the two analytic neighbours
        assert c.stable and c.margin == pytest.approx(expected, rel=1e-3)


class TestBoundary:
    def test_linear_rho_crossing(self):
        g = synthetic(lambda w, d: d / 1.3)
        assert all(a == pytest.approx(1.3) for _, a in extract_boundary(g))

    def test_fully_stable_column(self):
        g = synthetic(lambda w, d: 0.5)
        assert all(a == 2.0 for _, a in extract_boundary(g))

    def test_lobed_structure(self, table1_grid):
        b = np.array([a for _, a in extract_boundary(table1_grid)])
        interior = (b[1:-1] > b[:-2]) & (b[1:-1] >= b[2:])
        assert interior.sum() >= 2

    def test_refinement_stability(self):
        coarse = GridSpec(speed_range=(10000.0, 12000.0), depth_range=(0.0, 2.5), speed_count=5, depth_count=26)
        fine = GridSpec(speed_range=(10000.0, 12000.0), depth_range=(0.0, 2.5), speed_count=9, depth_count=51)
        bc = extract_boundary(compute_rows(TABLE1, coarse))
        bf = dict(extract_boundary(compute_rows(TABLE1, fine)))
        step = 2.5 / 25
        for w, a in bc:
            assert abs(bf[w] - a) < step

    def test_csv_formats(self, tmp_path):
        g = compute_sld(TABLE1, SMALL)
        text = g.to_csv_text()
        lines = text.splitlines()
        assert lines[0] == "omega_rpm,ap_mm,rho,gamma_max,stable"
        assert len(lines) == 1 + 12 * 9
        # row-major over depth then speed
        first = [float(x) for x in lines[1].split(",")]
        second = [float(x) for x in lines[2].split(",")]
        assert first[1] == second[1] == 0.0 and second[0] > first[0]
        for line in lines[1:]:
            w, a, r, gm, s = line.split(",")
            assert int(s) == int(float(r) < 1.0)
        assert boundary_csv_text(extract_boundary(g)).startswith("omega_rpm,ap_star_mm\n")
        g.write(tmp_path)
        side = json.loads((tmp_path / "sld.json").read_text())
        assert side["grid"]["speed_count"] == 12 and side["params"] == TABLE1.to_dict()
        assert (tmp_path / "sld.csv").read_text() == text
