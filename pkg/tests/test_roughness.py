import math

import numpy as np
import pytest

from millstab.dynamics import OperatingPoint, simulate_dde, tooth_period
from millstab.estimation import SensorWindow, estimate_parameters, window_from_trajectory
from millstab.roughness import (
    CalibrationAnchor,
    FeatureVector,
    RoughnessModel,
    UncalibratedModel,
    band_fractions,
    calibrate,
    default_calibration,
    default_model,
    estimate_force,
    expected_residual,
    extract_features,
    feed_per_tooth,
    kinematic_coefficient,
    load_calibration,
    load_model,
    predict_roughness,
    register_model,
    roughness_map,
)
from millstab.sdm import speed_column
from millstab.sld import GridSpec, compute_rows

from conftest import TABLE1, rms


def synthetic_window(signal, step, speed=11500.0):
    n = len(signal)
    q = np.column_stack([signal, np.zeros(n)])
    z = np.zeros((n, 2))
    return SensorWindow(np.arange(n) * step, q, z, z, z, z, OperatingPoint(speed, 1.0))


def features(**kw):
    base = dict(rms_displacement=1e-5, rms_force=1.0, tooth_passing_energy_fraction=0.5,
                offband_energy_fraction=0.5, feed_per_tooth=0.02, depth=1.0, speed=11500.0,
                envelope_growth=1.5)
    base.update(kw)
    return FeatureVector(**base)


class TestForce:
    def test_zero_motion(self):
        w = synthetic_window(np.zeros(100), 1e-6)
        assert np.all(estimate_force(w, TABLE1) == 0)

    def test_matches_recorded(self, unstable_run):
        w = window_from_trajectory(unstable_run, 0.02, 0.03, 1.0, 2)
        f = estimate_force(w, TABLE1)
        assert rms(f - w.force) < 0.01 * rms(w.force)
        est = estimate_parameters(w, TABLE1)
        assert rms(estimate_force(w, est, TABLE1.modal_mass) - w.force) < 0.01 * rms(w.force)
        with pytest.raises(ValueError):
            estimate_force(w, est)

    def test_doubled_damping_error_tracks_velocity(self, unstable_run):
        errs, vel = [], []
        for t0 in (0.006, 0.015, 0.024):
            w = window_from_trajectory(unstable_run, t0, t0 + 0.006, 1.0, 2)
            wrong = TABLE1.with_uncertain(zeta=2 * TABLE1.damping_ratio)
            errs.append(rms(estimate_force(w, wrong) - w.force))
            vel.append(rms(w.v))
        order = np.argsort(vel)
        assert np.all(np.diff(np.array(errs)[order]) > 0)


class TestFeatures:
    STEP = tooth_period(2, 11500) / 200

    def test_tooth_passing_sinusoid(self):
        tau = tooth_period(2, 11500)
        t = np.arange(int(8 * tau / self.STEP)) * self.STEP
        w = synthetic_window(np.sin(2 * math.pi * t / tau), self.STEP)
        f = extract_features(w, 2, 8.5)
        assert f.tooth_passing_energy_fraction >= 0.95
        assert f.offband_energy_fraction <= 0.05

    def test_white_noise(self):
        rng = np.random.default_rng(1)
        n = 4096
        sig = rng.standard_normal(n)
        on, off = band_fractions(sig, self.STEP, 1.0 / tooth_period(2, 11500))
        freqs = np.fft.rfftfreq(n, self.STEP)
        f0 = 1.0 / tooth_period(2, 11500)
        df = freqs[1]
        mask = np.zeros(len(freqs), bool)
        for h in np.arange(1, int(freqs[-1] / f0) + 2) * f0:
            mask |= np.abs(freqs - h) <= max(0.02 * h, df / 2)
        mask[0] = False
        bin_fraction = mask.sum() / (len(freqs) - 1)
        assert off == pytest.approx(1 - bin_fraction, abs=0.1)
        assert on + off <= 1 + 1e-12

    def test_zero_signal(self):
        w = synthetic_window(np.zeros(1000), self.STEP)
        f = extract_features(w, 2, 8.5)
        assert f.tooth_passing_energy_fraction == 0 and f.offband_energy_fraction == 0
        assert f.rms_displacement == 0

    def test_short_window_rejected(self):
        w = synthetic_window(np.ones(300), self.STEP)
        with pytest.raises(ValueError, match="four tooth periods"):
            extract_features(w, 2, 8.5)

    def test_feed_per_tooth(self):
        assert feed_per_tooth(8.5, 2, 11500) == pytest.approx(8.5 * 60 / (2 * 11500))


class TestPrediction:
    def test_baseline(self):
        m = default_model()
        est = predict_roughness(features(rms_displacement=0.0, feed_per_tooth=0.0), m)
        assert est.r == m.r0_um

    def test_monotone(self):
        m = default_model()
        rs = [predict_roughness(features(rms_displacement=x), m).r for x in (0, 1e-6, 1e-5, 1e-4)]
        assert all(b > a for a, b in zip(rs, rs[1:]))
        rs = [predict_roughness(features(feed_per_tooth=x), m).r for x in (0, 0.01, 0.05)]
        assert all(b > a for a, b in zip(rs, rs[1:]))

    def test_uncalibrated(self):
        with pytest.raises(UncalibratedModel):
            predict_roughness(features(), RoughnessModel())

    def test_chatter_flag_rule(self):
        m = default_model()
        assert predict_roughness(features(offband_energy_fraction=0.6, envelope_growth=1.2), m).chatter
        assert not predict_roughness(features(offband_energy_fraction=0.2, envelope_growth=1.2), m).chatter
        assert not predict_roughness(features(offband_energy_fraction=0.6, envelope_growth=0.5), m).chatter
        assert 0 <= predict_roughness(features(), m).confidence <= 1

    def test_anchor_reproduced(self):
        a = CalibrationAnchor()
        traj = simulate_dde(TABLE1, [(0.0, a.spindle_speed)], a.axial_depth, a.window_end)
        tau = tooth_period(2, a.spindle_speed)
        w = window_from_trajectory(traj, a.window_end - 4 * tau, a.window_end, 1.0, 2)
        est = predict_roughness(extract_features(w, 2, a.feed_rate), default_model())
        assert est.r == pytest.approx(6.10, rel=1e-6)
        assert est.chatter

    def test_shipped_calibration_is_reproducible(self):
        m = calibrate(TABLE1)
        d = default_calibration()
        assert m.c_vib == pytest.approx(d["c_vib"], rel=1e-9)
        assert m.c_kin == pytest.approx(kinematic_coefficient(6.35))
        assert (m.r0_um, m.chatter_offband_threshold) == (d["r0_um"], d["chatter_offband_threshold"])

    def test_file_round_trip_and_registry(self, tmp_path):
        import json
        m = default_model()
        p = tmp_path / "cal.json"
        p.write_text(json.dumps(m.to_dict()))
        assert load_calibration(p) == m
        assert load_model(m.to_dict()) == m

        class Constant:
            def __init__(self, data):
                self.r = data["r"]

            def predict(self, features, distribution=None):
                from millstab.roughness import RoughnessEstimate
                return RoughnessEstimate(self.r, False, 1.0)

        register_model("constant", Constant)
        assert load_model({"r": 2.0}, "constant").predict(features()).r == 2.0
        with pytest.raises(ValueError):
            load_model({}, "missing")


class TestChatterAgainstSdm:
    @pytest.mark.parametrize("speed,depth", [(10579.0, 1.0), (13000.0, 0.3), (8000.0, 0.2)])
    def test_stable_points_not_flagged(self, speed, depth):
        rho = speed_column(TABLE1, speed, [depth])[0][0]
        assert rho < 0.9
        traj = simulate_dde(TABLE1, [(0.0, speed)], depth, 0.04)
        w = window_from_trajectory(traj, 0.02, 0.04, depth, 2)  # last 50 %
        assert not predict_roughness(extract_features(w, 2, 8.5), default_model()).chatter

    @pytest.mark.parametrize("speed,depth", [(11500.0, 1.0), (9000.0, 2.0), (15000.0, 2.0)])
    def test_unstable_points_flagged(self, speed, depth):
        rho = speed_column(TABLE1, speed, [depth])[0][0]
        assert rho > 1.1
        tau = tooth_period(2, speed)
        growth = math.log(10) / (math.log(rho) / tau)
        duration = max(2 * growth, 8 * tau)
        traj = simulate_dde(TABLE1, [(0.0, speed)], depth, duration)
        w = window_from_trajectory(traj, duration / 2, duration, depth, 2)
        assert predict_roughness(extract_features(w, 2, 8.5), default_model()).chatter


class TestRoughnessMap:
    def test_expected_residual(self):
        assert expected_residual(1.2, 10) == 1.0
        assert expected_residual(0.5, 1.0) == 1.0
        assert expected_residual(0.5, 4) == pytest.approx((1 - 0.5 ** 4) / (4 * 0.5))

    def test_more_stable_candidate_is_smoother(self):
        spec = GridSpec(speed_range=(10500.0, 11500.0), depth_range=(0.975, 1.025),
                        speed_count=11, depth_count=3)
        grid = compute_rows(TABLE1, spec)
        r = roughness_map(default_model(), grid, 1.0, spec.speeds, 8.5, 2, 1e-4, 0.2)
        assert r[10600.0] < r[11500.0]
        assert set(r) == {float(w) for w in spec.speeds}
