"""White-noise sampler, densities, ensembles, transport, weak-form residual."""

import numpy as np
import pytest

from enstrophy_lab.cylinder import CylinderFunctional, bounded_window, ramp_down
from enstrophy_lab.fields import SpectralField, sobolev_norm, validate_field
from enstrophy_lab.flow import FlowParams
from enstrophy_lab.measure import (
    Ensemble,
    GaussianTilt,
    MeasureSpec,
    PushforwardError,
    TruncatedDensity,
    UniformDensity,
    density_value,
    init_ensemble,
    load_ensemble,
    pushforward,
    sample_batch,
    sample_coeffs,
    sample_white_noise,
    save_ensemble,
    weak_form_residual,
    write_estimates_csv,
)

SPEC = MeasureSpec(cutoff=4, seed=123)
PHI = SpectralField.from_modes(1, {(1, 0): 0.5})  # cos(2 pi x1), norm^2 = 1/2


class TestSampler:
    def test_pure_function_of_spec_and_index(self):
        a = sample_coeffs(SPEC, 11)
        b = sample_coeffs(SPEC, 11)
        assert np.array_equal(a, b)
        batch = sample_batch(SPEC, [3, 11, 7])
        assert np.array_equal(batch[1], a)  # order independent

    def test_fields_satisfy_reality(self):
        for i in range(5):
            validate_field(sample_white_noise(SPEC, i))

    def test_seed_changes_samples(self):
        other = MeasureSpec(cutoff=4, seed=124)
        assert not np.array_equal(sample_coeffs(SPEC, 0), sample_coeffs(other, 0))

    def test_zero_mode_toggle(self):
        spec = MeasureSpec(cutoff=2, include_zero_mode=False, seed=9)
        batch = sample_batch(spec, range(8))
        assert np.all(batch[:, 2, 2] == 0)

    def test_covariance_identity(self):
        batch = sample_batch(SPEC, range(20000))
        # direct pairing against cos(2 pi x1): modes (1,0) and (-1,0)
        v = (batch[:, 5, 4] * 0.5 + batch[:, 3, 4] * 0.5).real
        se_mean = v.std(ddof=1) / np.sqrt(len(v))
        assert abs(v.mean()) <= 3 * se_mean
        var = v.var(ddof=1)
        se_var = np.sqrt((np.mean((v - v.mean()) ** 4) - var ** 2) / len(v))
        assert abs(var - 0.5) <= 3 * se_var

    def test_expected_squared_norm(self):
        batch = sample_batch(SPEC, range(20000))
        sq = np.sum(np.abs(batch) ** 2, axis=(1, 2))
        se = sq.std(ddof=1) / np.sqrt(len(sq))
        assert abs(sq.mean() - 81.0) <= 3 * se

    def test_distinct_modes_uncorrelated(self):
        batch = sample_batch(SPEC, range(20000))
        a = batch[:, 5, 4]          # mode (1, 0)
        b = np.conj(batch[:, 5, 5])  # mode (1, 1)
        prod = (a * b).real
        se = prod.std(ddof=1) / np.sqrt(len(prod))
        assert abs(prod.mean()) <= 3 * se


class TestDensities:
    def test_trivial_tilt_is_uniform(self):
        zero = SpectralField.zeros(1)
        d = GaussianTilt(zero)
        w = sample_white_noise(SPEC, 0)
        assert density_value(d, w) == 1.0
        e = init_ensemble(SPEC, d, 64)
        ent, _ = e.entropy()
        assert ent == 0.0

    def test_tilt_unit_mean_and_entropy(self):
        e = init_ensemble(SPEC, GaussianTilt(PHI), 20000)
        mean, se = e.weighted_mean(np.ones(len(e)))
        assert abs(mean - 1.0) <= 3 * se
        ent, ent_se = e.entropy()
        assert abs(ent - 0.25) <= 3 * ent_se

    def test_tilt_shifts_the_mean(self):
        e = init_ensemble(SPEC, GaussianTilt(PHI), 20000)
        est, se = e.weighted_mean(e.pairings([PHI])[:, 0])
        assert abs(est - 0.5) <= 3 * se

    def test_truncated_requires_normalization(self):
        t = TruncatedDensity(GaussianTilt(PHI), bound=2.0)
        with pytest.raises(ValueError):
            density_value(t, sample_white_noise(SPEC, 0))

    def test_truncated_normalized_unit_mean(self):
        t = TruncatedDensity(GaussianTilt(PHI), bound=2.0).with_normalization(SPEC, 20000)
        assert t.norm_const is not None and t.norm_std_error is not None
        e = init_ensemble(SPEC, t, 10000)
        mean, se = e.weighted_mean(np.ones(len(e)))
        assert abs(mean - 1.0) <= 3 * np.hypot(se, t.norm_std_error / t.norm_const)
        assert np.all(e.weights <= 2.0 / t.norm_const + 1e-15)

    def test_uniform_weights_are_one(self):
        e = init_ensemble(SPEC, UniformDensity(), 32)
        assert np.all(e.weights == 1.0)


class TestEnsembleTransport:
    def test_fixed_point_members_unchanged(self):
        shear = SpectralField.from_modes(4, {(1, 0): 0.5}).coeffs
        ens = Ensemble(spec=SPEC, coeffs=np.stack([shear, 2 * shear]),
                       weights=np.ones(2), stream_ids=np.arange(2))
        out = pushforward(ens, FlowParams(cutoff=4, dt=1e-2, t_end=0.2))
        assert np.abs(out.coeffs - ens.coeffs).max() <= 1e-12
        assert out.t == 0.2

    def test_weights_ride_bitwise(self):
        e = init_ensemble(SPEC, GaussianTilt(PHI), 64)
        out = pushforward(e, FlowParams(cutoff=4, dt=1e-2, t_end=0.1))
        assert np.array_equal(out.weights, e.weights)
        assert out.entropy() == e.entropy()

    def test_two_route_consistency(self):
        # carrying weights forward and pulling the density back both
        # estimate the same transported integral
        count = 1500
        density = GaussianTilt(PHI)
        params = FlowParams(cutoff=4, dt=1e-2, t_end=0.25, integrator="rk4")
        e = init_ensemble(SPEC, density, count)
        moved = pushforward(e, params)
        obs = np.tanh(moved.pairings([PHI])[:, 0])
        r1, se1 = moved.weighted_mean(obs)
        from enstrophy_lab.dynamics import SpectralDrift

        fresh = init_ensemble(MeasureSpec(cutoff=4, seed=999), UniformDensity(), count)
        back = pushforward(fresh, params, drift_fn=SpectralDrift(4, sign=-1.0))
        vals = density.values(back.coeffs, 4) * np.tanh(fresh.pairings([PHI])[:, 0])
        r2, se2 = float(np.mean(vals)), float(np.std(vals, ddof=1) / np.sqrt(count))
        assert abs(r1 - r2) <= 3 * np.hypot(se1, se2)

    def test_divergent_step_reports_members(self):
        e = init_ensemble(SPEC, UniformDensity(), 8)
        bad = FlowParams(cutoff=4, dt=5.0, t_end=5.0, midpoint_max_iter=8)
        with pytest.raises(PushforwardError) as info:
            pushforward(e, bad)
        assert len(info.value.failed_members) >= 1

    def test_snapshot_roundtrip(self, tmp_path):
        e = init_ensemble(SPEC, GaussianTilt(PHI), 5)
        save_ensemble(e, tmp_path / "snap")
        back = load_ensemble(tmp_path / "snap", SPEC)
        assert np.array_equal(back.coeffs, e.coeffs)
        assert np.array_equal(back.weights, e.weights)
        assert np.array_equal(back.stream_ids, e.stream_ids)
        header = (tmp_path / "snap" / "manifest.csv").read_text().splitlines()[0]
        assert header == "member,stream_id,weight,t"


class TestWeakForm:
    def test_time_only_functional_telescopes(self):
        g, dg = ramp_down(0.2)
        func = CylinderFunctional.time_only(g, dg, 0.2)
        e = init_ensemble(SPEC, GaussianTilt(PHI), 64)
        res = weak_form_residual(e, func, FlowParams(cutoff=4, dt=1e-2, t_end=0.2))
        # trapezoid is exact for the linear ramp, so only roundoff remains
        assert abs(res.residual) <= 1e-12

    def test_cylinder_residual_within_band(self):
        count = 1200
        horizon = 0.25
        g, dg = ramp_down(horizon)
        f, grad_f = bounded_window()
        func = CylinderFunctional.single(f, grad_f, g, dg, [PHI], horizon)
        e = init_ensemble(SPEC, GaussianTilt(PHI), count)
        p = FlowParams(cutoff=4, dt=1e-2, t_end=horizon, integrator="rk4")
        res = weak_form_residual(e, func, p)
        half = FlowParams(cutoff=4, dt=5e-3, t_end=horizon, integrator="rk4")
        res_half = weak_form_residual(e, func, half)
        c_hat = abs(res.residual - res_half.residual) / (0.75 * p.dt ** 2)
        assert abs(res.residual) <= 3 * res.std_error + 1.25 * c_hat * p.dt ** 2

    def test_invariant_measure_time_ramp(self):
        # uniform density, time-ramped cylinder: residual consistent with zero
        horizon = 0.2
        g, dg = ramp_down(horizon)
        f, grad_f = bounded_window()
        func = CylinderFunctional.single(f, grad_f, g, dg, [PHI], horizon)
        e = init_ensemble(SPEC, UniformDensity(), 1500)
        res = weak_form_residual(e, func, FlowParams(cutoff=4, dt=1e-2, t_end=horizon, integrator="rk4"))
        assert abs(res.residual) <= 3 * res.std_error + 1e-3 * res.dt ** 2 + 1e-4

    def test_horizon_time_factor_enforced(self):
        with pytest.raises(ValueError):
            CylinderFunctional.time_only(lambda t: 1.0, lambda t: 0.0, 1.0)

    def test_unsupported_test_field_rejected(self):
        wide = SpectralField.from_modes(6, {(6, 0): 1.0})
        g, dg = ramp_down(0.1)
        f, grad_f = bounded_window()
        func = CylinderFunctional.single(f, grad_f, g, dg, [wide], 0.1)
        e = init_ensemble(SPEC, UniformDensity(), 8)
        with pytest.raises(ValueError):
            weak_form_residual(e, func, FlowParams(cutoff=4, dt=1e-2, t_end=0.1))

    def test_horizon_mismatch_rejected(self):
        g, dg = ramp_down(0.2)
        func = CylinderFunctional.time_only(g, dg, 0.2)
        e = init_ensemble(SPEC, UniformDensity(), 8)
        with pytest.raises(ValueError):
            weak_form_residual(e, func, FlowParams(cutoff=4, dt=1e-2, t_end=0.1))


def test_estimates_csv(tmp_path):
    path = tmp_path / "estimates.csv"
    write_estimates_csv(path, [("mean", 1.0, 0.01, 100)])
    lines = path.read_text().splitlines()
    assert lines[0] == "quantity,estimate,std_error,n_samples"
    assert lines[1].startswith("mean,1,")
