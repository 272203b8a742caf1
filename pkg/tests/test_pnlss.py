import numpy as np
import pytest
from dataclasses import replace
from scipy import signal as sp_signal

from nlsid.bla import estimate_bla_spectral
from nlsid.decouple import DecoupledFunction
from nlsid.polybasis import PolyMap, enumerate_monomials
from nlsid.pnlss import (FitReport, PnlssModel, fit_pnlss, fit_pnlss_decoupled,
                         init_linear_from_bla, simulate_pnlss,
                         single_branch_init, state_coverage)
from nlsid.signals import (SignalRecord, design_multisine, flat_amplitude_spec,
                           full_grid, random_phases, tile_periods)
from nlsid.simulators import NoiseSpec, default_duffing, simulate_duffing, steady_state_record


def linear_model(a, b, c, d, n):
    return PnlssModel(a=a, b=b, c=c, d=d, e_map=None, f_map=None, x0=np.zeros(n))


def cubic_feedback_model(alpha=-0.05):
    """Two-state oscillator with a cubic term in the state update."""
    a = np.array([[1.55, -0.7], [1.0, 0.0]])
    b = np.array([0.5, 0.0])
    c = np.array([0.4, 0.1])
    basis = enumerate_monomials(3, 2, 3)
    coeffs = np.zeros((2, len(basis)))
    idx = [tuple(e) for e in basis.exponents].index((3, 0, 0))
    coeffs[0, idx] = alpha
    return PnlssModel(a=a, b=b, c=c, d=0.0,
                      e_map=PolyMap(basis, coeffs), f_map=None, x0=np.zeros(2))


def _linear_records(spec, b, a, n_real, p=2):
    recs = []
    n = spec.period_samples
    for m in range(n_real):
        u = tile_periods(design_multisine(random_phases(spec, m)), p + 1)
        y = sp_signal.lfilter(b, a, u)
        recs.append(SignalRecord(spec.sample_rate_hz, n, p, u[n:], y[n:]))
    return recs


def test_simulate_zero_everything():
    m = cubic_feedback_model()
    res = simulate_pnlss(m, np.zeros(64))
    assert not res.diverged
    assert np.allclose(res.y, 0.0)


def test_simulate_linear_matches_filter_oracle():
    b, a = sp_signal.butter(2, 0.2)
    a_m, b_m, c_m, d_m = sp_signal.tf2ss(b, a)
    model = linear_model(a_m, b_m.ravel(), c_m.ravel(), float(d_m.ravel()[0]), 2)
    u = np.random.default_rng(0).normal(size=300)
    res = simulate_pnlss(model, u)
    ref = sp_signal.lfilter(b, a, u)
    assert np.max(np.abs(res.y - ref)) < 1e-10


def test_simulate_divergence_status():
    m = PnlssModel(a=np.array([[1.5]]), b=[1.0], c=[1.0], d=0.0,
                   e_map=None, f_map=None, x0=[1.0])
    res = simulate_pnlss(m, np.zeros(200))
    assert res.diverged
    assert res.divergence_index is not None


def test_init_linear_from_bla_exact_second_order():
    spec = flat_amplitude_spec(256, 1.0, full_grid(256, 100), rms=1.0)
    b, a = (0.2, 0.1, 0.05), (1.0, -1.2, 0.5)
    recs = _linear_records(spec, b, a, 2)
    bla = estimate_bla_spectral(recs, spec)
    model, frf_rms = init_linear_from_bla(bla, 2)
    assert frf_rms < 1e-6
    omega = 2 * np.pi * bla.lines / 256
    z = np.exp(1j * omega)
    g_true = np.polyval(b[::-1], 1 / z) / np.polyval(a[::-1], 1 / z)
    assert np.max(np.abs(model.frf(omega) - g_true) / np.abs(g_true)) < 1e-6


def test_init_linear_overmodelled_extra_modes_cancel():
    spec = flat_amplitude_spec(256, 1.0, full_grid(256, 100), rms=1.0)
    b, a = (0.2, 0.1), (1.0, -0.5)  # true order 1
    recs = _linear_records(spec, b, a, 2)
    bla = estimate_bla_spectral(recs, spec)
    model, frf_rms = init_linear_from_bla(bla, 3)
    assert frf_rms < 1e-6
    import scipy.signal as ss
    num, den = ss.ss2tf(model.a, model.b[:, None], model.c[None, :], [[model.d]])
    poles = np.roots(den)
    zeros = np.roots(num[0])
    # every extra pole nearly cancels against a zero
    true_pole = 0.5
    extra = [p for p in poles if abs(p - true_pole) > 1e-4]
    assert len(extra) == 2
    for p in extra:
        assert np.min(np.abs(zeros - p)) < 1e-3


def test_init_linear_needs_enough_lines():
    spec = flat_amplitude_spec(64, 1.0, (1, 3), rms=1.0)
    recs = _linear_records(spec, (0.5,), (1.0, -0.3), 1)
    bla = estimate_bla_spectral(recs, spec)
    with pytest.raises(ValueError, match="lines"):
        init_linear_from_bla(bla, 2)


def _fd_gradient(fun, theta, eps=1e-6):
    g = np.zeros_like(theta)
    for i in range(len(theta)):
        tp = theta.copy(); tp[i] += eps
        tm = theta.copy(); tm[i] -= eps
        g[i] = (fun(tp) - fun(tm)) / (2 * eps)
    return g


def test_analytic_gradient_matches_finite_differences():
    # small instance: n=2, degree 2, N=128, five random parameter points
    import nlsid.pnlss as P

    rng = np.random.default_rng(1)
    truth = cubic_feedback_model()
    u = rng.normal(0, 0.5, 128)
    y = simulate_pnlss(truth, u).y
    rec = SignalRecord(1.0, 128, 1, u, y)
    basis = enumerate_monomials(3, 2, 2)
    template = PnlssModel(a=truth.a, b=truth.b, c=truth.c, d=truth.d,
                          e_map=PolyMap(basis, np.zeros((2, len(basis)))),
                          f_map=PolyMap(basis, np.zeros((1, len(basis)))),
                          x0=truth.x0)
    pack = P._ParamPack(template)
    lines = np.arange(1, 40)
    bins, sqrt_w, y_f = P._freq_residual_factory(rec, lines, None)

    def residual(th):
        m = pack.unpack(th, template)
        sim = simulate_pnlss(m, u)
        r_c = (y_f - np.fft.rfft(sim.y)[bins]) / sqrt_w
        return np.concatenate([r_c.real, r_c.imag])

    def cost(th):
        r = residual(th)
        return float(r @ r)

    theta0 = pack.pack(template)
    for trial in range(5):
        theta = theta0 + 0.01 * rng.normal(size=len(theta0))
        y_sim, xs, jac_t, diverged = P._output_jacobian_polymap(pack.unpack(theta, template), u)
        assert not diverged
        j_c = -np.fft.rfft(jac_t, axis=0)[bins] / sqrt_w[:, None]
        j = np.concatenate([j_c.real, j_c.imag], axis=0)
        g_analytic = 2.0 * j.T @ residual(theta)
        g_fd = _fd_gradient(cost, theta)
        scale = np.maximum(np.abs(g_fd), 1e-6 * np.max(np.abs(g_fd)))
        assert np.max(np.abs(g_analytic - g_fd) / scale) < 1e-4


def test_fit_self_consistency_from_perturbed_truth():
    rng = np.random.default_rng(2)
    truth = cubic_feedback_model()
    u = tile_periods(design_multisine(random_phases(
        flat_amplitude_spec(512, 1.0, full_grid(512, 120), rms=1.0), 3)), 1)
    y = simulate_pnlss(truth, u).y
    rec = SignalRecord(1.0, 512, 1, u, y)
    start = replace(
        truth,
        a=truth.a * (1 + 0.01 * rng.normal(size=(2, 2))),
        b=truth.b * (1 + 0.01 * rng.normal(size=2)),
        e_map=PolyMap(truth.e_map.basis,
                      truth.e_map.coefficients * (1 + 0.01 * rng.normal(size=truth.e_map.coefficients.shape))),
    )
    fitted, report = fit_pnlss(start, rec, np.arange(1, 200), state_degree=None)
    assert report.final_rms_time < 1e-6 * np.sqrt(np.mean(y**2))


def test_fit_linear_limit_matches_linear_solution():
    # E and F absent: the optimizer is pure linear refinement and must keep
    # the exact linear fit
    spec = flat_amplitude_spec(256, 1.0, full_grid(256, 100), rms=1.0)
    b, a = (0.3, 0.15), (1.0, -0.8)
    recs = _linear_records(spec, b, a, 2)
    bla = estimate_bla_spectral(recs, spec)
    lin, _ = init_linear_from_bla(bla, 2)
    fitted, report = fit_pnlss(lin, recs[0], spec.excited_lines, state_degree=None)
    omega = 2 * np.pi * np.asarray(spec.excited_lines) / 256
    assert np.max(np.abs(fitted.frf(omega) - lin.frf(omega))) < 1e-6
    assert report.final_rms_time < 1e-9


def test_fit_cost_trajectory_monotone_nonincreasing():
    truth = cubic_feedback_model(alpha=-0.08)
    u = tile_periods(design_multisine(random_phases(
        flat_amplitude_spec(256, 1.0, full_grid(256, 60), rms=1.0), 7)), 1)
    y = simulate_pnlss(truth, u).y + np.random.default_rng(3).normal(0, 1e-3, len(u))
    rec = SignalRecord(1.0, 256, 1, u, y)
    lin = replace(truth, e_map=None)
    fitted, report = fit_pnlss(lin, rec, np.arange(1, 80), state_degree=3,
                               max_iterations=40)
    assert np.all(np.diff(report.cost_trajectory) <= 0.0)
    assert report.cost_trajectory[-1] < report.cost_trajectory[0]


def test_fit_rejects_diverging_init():
    bad = PnlssModel(a=np.array([[2.0, 0.0], [0.0, 0.1]]), b=[1.0, 1.0],
                     c=[1.0, 0.0], d=0.0, e_map=None, f_map=None, x0=[1.0, 0.0])
    u = np.random.default_rng(4).normal(size=128)
    rec = SignalRecord(1.0, 128, 1, u, u)
    with pytest.raises(ValueError, match="diverg"):
        fit_pnlss(bad, rec, np.arange(1, 20), state_degree=2)


def test_weights_shape_checked():
    truth = cubic_feedback_model()
    u = np.random.default_rng(5).normal(size=128)
    rec = SignalRecord(1.0, 128, 1, u, simulate_pnlss(truth, u).y)
    with pytest.raises(ValueError, match="weights"):
        fit_pnlss(replace(truth, e_map=None), rec, np.arange(1, 20),
                  weights=np.ones(5))


def test_serialization_round_trip_bit_exact_simulation():
    truth = cubic_feedback_model()
    back = PnlssModel.from_dict(truth.to_dict())
    u = np.random.default_rng(6).normal(0, 0.5, 200)
    assert np.array_equal(simulate_pnlss(truth, u).y, simulate_pnlss(back, u).y)


def test_serialization_round_trip_decoupled_state_map():
    rng = np.random.default_rng(7)
    dec = DecoupledFunction(rng.normal(size=(2, 1)), rng.normal(size=(3, 1)),
                            (np.array([0.0, 0.0, 0.1, 0.02]),))
    m = PnlssModel(a=np.array([[0.5, 0.1], [-0.1, 0.4]]), b=[1.0, 0.2],
                   c=[1.0, 0.0], d=0.0, e_map=dec, f_map=None, x0=[0.0, 0.0])
    back = PnlssModel.from_dict(m.to_dict())
    u = rng.normal(size=100)
    assert np.array_equal(simulate_pnlss(m, u).y, simulate_pnlss(back, u).y)
    assert isinstance(back.e_map, DecoupledFunction)


def test_fit_decoupled_self_consistency():
    rng = np.random.default_rng(8)
    dec = DecoupledFunction(np.array([[0.3], [-0.1]]), np.array([[0.8], [0.2], [0.4]]),
                            (np.array([0.0, 0.0, -0.15, -0.05]),))
    truth = PnlssModel(a=np.array([[1.2, -0.5], [1.0, 0.0]]), b=[0.4, 0.0],
                       c=[0.5, 0.1], d=0.0, e_map=dec, f_map=None, x0=[0.0, 0.0])
    u = tile_periods(design_multisine(random_phases(
        flat_amplitude_spec(256, 1.0, full_grid(256, 60), rms=1.0), 9)), 1)
    y = simulate_pnlss(truth, u).y
    rec = SignalRecord(1.0, 256, 1, u, y)
    start = replace(truth, e_map=DecoupledFunction(
        dec.w * 1.05, dec.v * 0.95, (dec.branches[0] * 1.1,)))
    # the branch constant can trade against a pure output offset, so the DC
    # bin must be part of the cost for a full time-domain match
    fitted, report = fit_pnlss_decoupled(start, rec, np.arange(0, 128))
    assert report.final_rms_time < 1e-6 * np.sqrt(np.mean(y**2))
    assert np.all(np.diff(report.cost_trajectory) <= 0.0)


def test_fit_decoupled_requires_decoupled_map():
    truth = cubic_feedback_model()
    u = np.random.default_rng(10).normal(size=64)
    rec = SignalRecord(1.0, 64, 1, u, simulate_pnlss(truth, u).y)
    with pytest.raises(TypeError, match="Decoupled"):
        fit_pnlss_decoupled(truth, rec, np.arange(1, 10))


def test_single_branch_init_on_rank_one_truth():
    # when E really is one branch, the projection search finds it
    dec = DecoupledFunction(np.array([[0.25], [-0.1]]),
                            np.array([[0.9], [0.1], [0.3]]),
                            (np.array([0.0, 0.0, -0.2, -0.08]),))
    from nlsid.decouple import to_polymap
    truth = PnlssModel(a=np.array([[1.2, -0.5], [1.0, 0.0]]), b=[0.4, 0.0],
                       c=[0.5, 0.1], d=0.0, e_map=to_polymap(dec), f_map=None,
                       x0=[0.0, 0.0])
    u = np.random.default_rng(11).normal(0, 0.8, 600)
    sim = simulate_pnlss(truth, u)
    assert not sim.diverged
    z = np.concatenate([sim.x_traj, u[:, None]], axis=1)
    init = single_branch_init(truth, z, branch_degree=3)
    sim_init = simulate_pnlss(init, u)
    rel = np.sqrt(np.mean((sim_init.y - sim.y) ** 2)) / np.sqrt(np.mean(sim.y**2))
    assert rel < 1e-4  # an initializer, not a fit: the refit polishes the rest


def test_state_coverage_flags_larger_inputs():
    truth = cubic_feedback_model()
    u = tile_periods(design_multisine(random_phases(
        flat_amplitude_spec(256, 1.0, full_grid(256, 60), rms=0.6), 12)), 1)
    rec = SignalRecord(1.0, 256, 1, u, simulate_pnlss(truth, u).y)
    lin = replace(truth, e_map=None)
    fitted, report = fit_pnlss(lin, rec, np.arange(1, 80), state_degree=3,
                               max_iterations=30)
    same = state_coverage(report, simulate_pnlss(fitted, u))
    assert not same.extrapolation_flag
    wide = simulate_pnlss(fitted, 3.0 * u)
    cov = state_coverage(report, wide)
    assert cov.extrapolation_flag


FS = 200.0


def test_cross_simulator_duffing_discretization_fit():
    # a fitted discrete cubic-feedback state-space reproduces the RK4-integrated
    # oscillator to better than 1% once the discretization is matched on data
    params = default_duffing(FS, hardening=0.1, oversample=16)
    spec = flat_amplitude_spec(512, FS, full_grid(512, 75), rms=0.1)

    def steady(seed):
        up = design_multisine(random_phases(spec, seed))
        return steady_state_record(lambda u, fs: simulate_duffing(params, u, fs),
                                   up, FS, 2, 3)

    recs = [steady(m) for m in range(2)]
    bla = estimate_bla_spectral(recs, spec)
    lin, _ = init_linear_from_bla(bla, 2)
    model, report = fit_pnlss(lin, recs[0], spec.excited_lines, state_degree=3)
    val = steady(7)
    sim = simulate_pnlss(model, val.input)
    second = slice(512, 1024)
    err = np.sqrt(np.mean((val.output[second] - sim.y[second]) ** 2))
    assert err <= 0.01 * np.sqrt(np.mean(val.output[second] ** 2))
