"""Transform quadrature, tau-domain solves, and the integral identity."""

import numpy as np
import pytest
import scipy.integrate

from waveinv import coeffs, forward, laplace, mesh, spectral

from helpers import fit_slope, probe_trace, rel_err

_CACHE = {}


def _identity_setup():
    """Shared 17^2 probe pair with quadratic coefficients, long run."""
    if "identity" not in _CACHE:
        grid = mesh.make_grid(2, 17)
        cset = coeffs.synth_coeffs(
            grid, "random_c_field", seed=11, gamma_amplitude=0.25,
            amplitude=1.5,
        )
        f_run = forward.solve_linear(
            cset, probe_trace(grid, cset, 6.0, t_end=0.9)
        )
        g_run = forward.solve_linear(
            cset,
            probe_trace(
                grid, cset, 6.0, t_end=0.8,
                spatial_fn=lambda *xs: 0.8 + 0.4 * xs[-1] - 0.3 * xs[0],
            ),
        )
        op = spectral.SpectralOperator(cset)
        _CACHE["identity"] = (grid, cset, f_run, g_run, op)
    return _CACHE["identity"]


def _identity_response():
    if "dresp" not in _CACHE:
        _, _, f_run, g_run, op = _identity_setup()
        _CACHE["dresp"] = spectral.delay_integrated_response(op, f_run, g_run)
    return _CACHE["dresp"]


def _identity_comparison():
    if "comparison" not in _CACHE:
        _, _, f_run, g_run, op = _identity_setup()
        _CACHE["comparison"] = spectral.dominant_corrections(op, f_run, g_run)
    return _CACHE["comparison"]


# ---------------------------------------------------------------------------
# probe profile


def test_chi_profile_window_and_errors():
    dt = 1.0 / 128
    chi = laplace.make_chi(3, 1.0, 160, dt)
    t = chi.times
    inner = t <= 0.5
    assert chi.samples[0] == 0.0
    assert np.allclose(chi.samples[inner], t[inner] ** 2 / 2.0, rtol=1e-13)
    assert np.all(chi.samples[t >= 1.0] == 0.0)
    flat = laplace.make_chi(1, 1.0, 160, dt)
    assert np.all(flat.samples[t < 0.5] == 1.0)
    with pytest.raises(ValueError):
        laplace.make_chi(0, 1.0, 160, dt)
    with pytest.raises(ValueError):
        laplace.make_chi(2.5, 1.0, 160, dt)
    with pytest.raises(ValueError):
        laplace.make_chi(3, 0.05, 160, dt)


def test_chi_hat_matches_quadrature_and_decays():
    chi = laplace.make_chi(3, 1.0, 1300, 1e-3)
    direct = laplace.laplace_transform(chi.samples, dt=1e-3, tau=5.0)
    assert abs(chi.hat(5.0) - direct) <= 1e-8 * abs(direct)
    taus = np.array([4.0, 8.0, 16.0, 32.0, 64.0])
    hats = chi.hat(taus)
    assert hats.shape == taus.shape
    defects = np.abs(taus**3 * hats - 1.0)
    assert np.all(np.diff(defects) < 0)
    assert fit_slope(taus, defects) <= -0.9
    flat = laplace.make_chi(1, 1.0, 1300, 1e-3)
    # at tau = 64 the mu = 1 defect sits below double precision; fit the
    # representable part of the sweep
    flat_defects = np.abs(taus[:4] * flat.hat(taus[:4]) - 1.0)
    assert fit_slope(taus[:4], flat_defects) <= -0.9


def test_chi_trace_is_separable():
    grid = mesh.make_grid(2, 9)
    chi = laplace.make_chi(3, 0.5, 40, 0.05)
    trace = laplace.chi_trace(grid, chi, lambda x, y: 1.0 + x, amplitude=2.0)
    assert trace.values.shape == (40, grid.boundary_ids().size)
    spatial = (1.0 + grid.meshgrid()[0]).ravel()[grid.boundary_ids()]
    m = 13
    assert np.allclose(trace.values[m], 2.0 * chi.samples[m] * spatial)


# ---------------------------------------------------------------------------
# transform quadrature


def test_laplace_transform_quadrature_invariants():
    dt = 1e-3
    t = dt * np.arange(12001)
    decay = np.exp(-t)
    for tau in (2.0, 8.0, 32.0):
        val = laplace.laplace_transform(decay, dt=dt, tau=tau)
        assert abs(val - 1.0 / (tau + 1.0)) <= 1e-6
    tau_c = 8.0 + 1.0j
    val_c = laplace.laplace_transform(decay, dt=dt, tau=tau_c)
    assert abs(val_c - 1.0 / (tau_c + 1.0)) <= 1e-8
    short = dt * np.arange(3001)
    ones = np.ones_like(short)
    val1 = laplace.laplace_transform(ones, dt=dt, tau=8.0)
    assert abs(val1 - 1.0 / 8.0) <= 1e-8
    assert laplace.laplace_transform(np.zeros_like(short), dt=dt, tau=8.0) == 0.0
    moment = laplace.laplace_transform(
        decay, dt=dt, tau=5.0, weight=t
    )
    assert abs(moment - 1.0 / 36.0) <= 1e-8


def test_laplace_transform_linearity_and_guards():
    dt = 1e-3
    t = dt * np.arange(3001)
    a = np.exp(-2.0 * t)
    b = np.exp(-3.0 * t) * np.cos(t)
    lhs = laplace.laplace_transform(2.0 * a + 3.0 * b, dt=dt, tau=8.0)
    rhs = 2.0 * laplace.laplace_transform(
        a, dt=dt, tau=8.0
    ) + 3.0 * laplace.laplace_transform(b, dt=dt, tau=8.0)
    assert abs(lhs - rhs) <= 1e-12 * abs(lhs)
    with pytest.raises(ValueError, match="truncation"):
        laplace.laplace_transform(np.ones_like(t), dt=dt, tau=1.0)
    with pytest.raises(ValueError):
        laplace.laplace_transform(a, tau=8.0)  # dt missing
    grid = mesh.make_grid(2, 9)
    trace = mesh.BoundaryTrace.from_profile(
        grid, a, np.ones(grid.boundary_ids().size), dt
    )
    from_trace = laplace.laplace_transform(trace, tau=8.0)
    manual = laplace.laplace_transform(trace.values, dt=dt, tau=8.0)
    assert np.array_equal(from_trace, manual)


def test_tau_sample_sector():
    assert laplace.in_sector(4.0)
    assert laplace.in_sector(4.0 + 0.5j)
    assert not laplace.in_sector(0.5)
    assert not laplace.in_sector(4.0 + 2.0j)
    sample = laplace.TauSample(6.0 + 1.0j)
    assert sample.value == 6.0 + 1.0j
    with pytest.raises(ValueError):
        laplace.TauSample(0.5)
    with pytest.raises(ValueError):
        laplace.TauSample(4.0 + 2.0j)


# ---------------------------------------------------------------------------
# tau-domain elliptic solves


def test_tau_solver_exponential_oracle():
    tau = 3.0
    errs = []
    for dims in (17, 33):
        grid = mesh.make_grid(2, dims)
        cset = coeffs.synth_coeffs(grid, "constant_gamma")
        solver = laplace.TauSolver(cset)
        exact = np.exp(tau * grid.meshgrid()[0])
        data = exact.ravel()[grid.boundary_ids()]
        field = solver.solve(tau, boundary=data)
        assert field.tau == tau
        assert solver.residual(field) <= 1e-10
        inner = grid.interior_mask()
        errs.append(rel_err(field.values[inner], exact[inner]))
        zero = solver.solve(tau)
        assert np.all(zero.values == 0.0)
    assert np.log2(errs[0] / errs[1]) >= 1.9


def test_tau_solver_complex_and_caching():
    grid = mesh.make_grid(2, 17)
    cset = coeffs.synth_coeffs(grid, "constant_gamma")
    solver = laplace.TauSolver(cset)
    tau = 3.0 + 0.5j
    x1 = grid.meshgrid()[0]
    exact = np.exp(tau * x1)
    data = exact.ravel()[grid.boundary_ids()]
    field = solver.solve(tau, boundary=data)
    assert solver.residual(field) <= 1e-10
    inner = grid.interior_mask()
    assert rel_err(field.values[inner], exact[inner]) <= 0.05
    again = solver.solve(tau, boundary=data)
    assert np.array_equal(field.values, again.values)
    assert len(solver._factors) == 1


def test_tau_solver_transform_consistency():
    grid = mesh.make_grid(2, 17)
    cset = coeffs.synth_coeffs(
        grid, "smooth_gamma_bump", center=(0.5, 0.5), radius=0.3,
        gamma_amplitude=0.3,
    )
    num_steps, dt = forward.make_time_grid(cset, 5.0)
    chi = laplace.make_chi(3, 0.8, num_steps, dt)
    trace = laplace.chi_trace(grid, chi, lambda x, y: 1.0 + 0.3 * x - 0.2 * y)
    run = forward.solve_linear(cset, trace)
    tau = 5.0
    u_time = laplace.laplace_transform(run.fields, dt=dt, tau=tau)
    data = laplace.laplace_transform(trace, tau=tau)
    elliptic = laplace.TauSolver(cset).solve(tau, boundary=data)
    assert rel_err(u_time, elliptic.values) <= 1e-2


# ---------------------------------------------------------------------------
# integral identity


def test_green_exchange_is_exact():
    grid = mesh.make_grid(2, 13)
    cset = coeffs.synth_coeffs(
        grid, "smooth_gamma_bump", center=(0.5, 0.5), radius=0.25,
        gamma_amplitude=0.4,
    )
    ev = coeffs.FluxEvaluator(cset)
    rng = np.random.default_rng(2)
    u = rng.standard_normal(grid.shape) + 1j * rng.standard_normal(grid.shape)
    w = rng.standard_normal(grid.shape)
    hn = grid.h**grid.n
    inner = grid.interior_mask()

    def bulk(a, b):
        div = mesh.face_divergence(ev.linear_fluxes(a), grid.h, grid.n)
        return hn * np.sum(div[inner] * b[inner])

    direct = bulk(u, w) - bulk(w, u)
    paired = laplace.green_exchange(cset, u, w)
    assert abs(direct - paired) <= 1e-12 * max(1.0, abs(direct))


def test_integral_identity_null_and_double_entry():
    grid, cset, f_run, g_run, op = _identity_setup()
    dresp = _identity_response()
    tau = 5.0
    dt = f_run.dt
    i_hats = laplace.transform_corrections(dresp, tau)
    uf_hat = laplace.laplace_transform(f_run.fields, dt=dt, tau=tau)
    ug_hat = laplace.laplace_transform(g_run.fields, dt=dt, tau=tau)
    solver = laplace.TauSolver(cset)
    w_hat = solver.solve(tau, boundary=np.ones(grid.boundary_ids().size))
    report = laplace.integral_identity_eval(
        cset, tau, w_hat, uf_hat, ug_hat, i_hats, solver=solver
    )
    assert report.normalization > 0.0
    assert report.normalized_null <= 1e-6
    assert report.double_entry_gap <= 1e-10
    # doubling the quadratic tensor doubles the volume side
    doubled = coeffs.CoefficientSet(cset.gamma, 2.0 * cset.c)
    i_doubled = [2.0 * ih for ih in i_hats]
    r2 = laplace.integral_identity_eval(
        doubled, tau, w_hat, uf_hat, ug_hat, i_doubled, solver=solver
    )
    assert abs(r2.volume_value - 2.0 * report.volume_value) <= 1e-12 * abs(
        report.volume_value
    )
    assert r2.normalized_null <= 1e-6
    # zero tensor: every term vanishes identically
    null_set = coeffs.CoefficientSet(cset.gamma, np.zeros_like(cset.c))
    zeros = [np.zeros(grid.shape, dtype=complex) for _ in range(4)]
    r0 = laplace.integral_identity_eval(
        null_set, tau, w_hat, uf_hat, ug_hat, zeros, solver=solver
    )
    assert r0.null_value == 0.0
    assert r0.normalized_null == 0.0
    with pytest.raises(ValueError, match="tau mismatch"):
        laplace.integral_identity_eval(
            cset, 6.0, w_hat, uf_hat, ug_hat, i_hats, solver=solver
        )


def test_integral_identity_complex_tau():
    grid, cset, f_run, g_run, op = _identity_setup()
    dresp = _identity_response()
    tau = 5.0 + 0.8j
    dt = f_run.dt
    i_hats = laplace.transform_corrections(dresp, tau)
    uf_hat = laplace.laplace_transform(f_run.fields, dt=dt, tau=tau)
    ug_hat = laplace.laplace_transform(g_run.fields, dt=dt, tau=tau)
    solver = laplace.TauSolver(cset)
    w_hat = solver.solve(tau, boundary=np.ones(grid.boundary_ids().size))
    report = laplace.integral_identity_eval(
        cset, tau, w_hat, uf_hat, ug_hat, i_hats, solver=solver
    )
    assert report.normalized_null <= 1e-6
    assert report.double_entry_gap <= 1e-10


# ---------------------------------------------------------------------------
# dominant substitution


def test_post_lemma_defect_decays():
    grid, cset, f_run, g_run, op = _identity_setup()
    comparison = _identity_comparison()
    solver = laplace.TauSolver(cset)
    ones = np.ones(grid.boundary_ids().size)
    taus = [4.0, 8.0, 16.0, 32.0]
    defects = []
    for tau in taus:
        w_hat = solver.solve(tau, boundary=ones)
        out = laplace.post_lemma_eval(cset, tau, w_hat, comparison)
        assert np.isfinite(out["self_defect"])
        defects.append(out["self_defect"])
    assert defects[-1] < defects[0]
    assert fit_slope(taus, defects) < 0.0


def test_stated_combination_reports():
    grid, cset, f_run, g_run, op = _identity_setup()
    solver = laplace.TauSolver(cset)
    w_hat = solver.solve(8.0, boundary=np.ones(grid.boundary_ids().size))
    out = laplace.stated_combination(cset, 8.0, w_hat, f_run, g_run)
    assert set(out["blocks"]) == {"main", "first", "second"}
    assert np.isfinite(out["normalized"])
    assert out["normalized"] >= 0.0


def test_post_lemma_single_mode_bookkeeping():
    grid = mesh.make_grid(2, 13)
    cset = coeffs.synth_coeffs(grid, "constant_gamma")
    op = spectral.SpectralOperator(cset)
    dt = 0.01
    num = 700
    s = dt * np.arange(num)
    rng = np.random.default_rng(4)
    tau = 6.0
    exact, dom = [], []
    for _ in range(4):
        ex = np.zeros((num, op.eigenvalues.size))
        dm = np.zeros_like(ex)
        ex[:, 0] = s**2 * np.exp(-s) * rng.uniform(0.5, 2.0)
        dm[:, 0] = ex[:, 0] * (1.0 + 0.1 * rng.uniform(-1, 1) * np.tanh(s))
        exact.append(ex)
        dom.append(dm)
    comparison = spectral.DominantComparison(op, dt, exact, dom)
    solver = laplace.TauSolver(cset)
    w_hat = solver.solve(tau, boundary=np.ones(grid.boundary_ids().size))
    out = laplace.post_lemma_eval(cset, tau, w_hat, comparison)
    mode_field = op.synthesize(np.eye(op.eigenvalues.size)[0])
    pairing = grid.h**grid.n * np.sum(mode_field * w_hat.values)
    remainder = sum(
        laplace.laplace_transform(dm[:, 0] - ex[:, 0], dt=dt, tau=tau)
        for ex, dm in zip(exact, dom)
    )
    scale = sum(
        abs(laplace.laplace_transform(dm[:, 0], dt=dt, tau=tau) * pairing)
        for dm in dom
    )
    expected = abs(remainder * pairing) / scale
    assert abs(out["self_defect"] - expected) <= 1e-12 * expected


def test_dominant_part_diag_decay_and_degenerate():
    comparison = _identity_comparison()
    taus = [4.0, 8.0, 16.0, 32.0]
    report = laplace.dominant_part_diag(
        comparison.exact[1], comparison.dominant[1], comparison.dt, taus
    )
    assert report["slope"] < 0.0
    assert report["dominant"]
    assert report["ratios"][-1] < report["ratios"][0]
    zeros = np.zeros((50, 3))
    degen = laplace.dominant_part_diag(zeros, zeros, 0.01, taus)
    assert degen["degenerate"]
    assert not degen["dominant"]
    with pytest.raises(ValueError):
        laplace.dominant_part_diag(zeros, zeros, 0.01, [4.0, 8.0])


def test_dominant_ratio_matches_single_mode_quadrature():
    omega = 3.7
    dt = 0.004
    num = 1751

    def block(m):
        sig = dt * np.arange(m + 1)
        r = dt * m - sig
        a = sig**2 * np.exp(-sig)
        a_dot = (2.0 * sig - sig**2) * np.exp(-sig)
        b = r**2 * np.exp(-r / 2.0)
        return {
            "p": (a * b)[:, None],
            "pf": (a_dot * b)[:, None],
            "pfg": (a_dot * b)[:, None],
        }

    data = spectral.modal_delay_assemble(
        np.array([omega]), block, dt, num, want_dominant=True
    )
    taus = [4.0, 8.0, 16.0, 32.0]
    report = laplace.dominant_part_diag(
        data["i2"], data["i2_dom"], dt, taus
    )
    for tau, got in zip(taus, report["ratios"]):
        top = scipy.integrate.quad(
            lambda r: np.exp(-tau * r)
            * (np.sin(omega * r) / omega - r)
            * r**2
            * np.exp(-r / 2.0),
            0.0,
            60.0,
            limit=400,
        )[0]
        bot = scipy.integrate.quad(
            lambda r: np.exp(-tau * r) * r**3 * np.exp(-r / 2.0),
            0.0,
            60.0,
            limit=400,
        )[0]
        ref = abs(top) / abs(bot)
        assert abs(got - ref) <= 5e-3 * max(ref, 1e-12)
    assert report["slope"] < 0.0


# ---------------------------------------------------------------------------
# analyticity proxy


def test_cauchy_mean_value_proxy():
    chi = laplace.make_chi(3, 1.0, 1300, 1e-3)
    good = laplace.cauchy_mean_check(chi.hat, 8.0, 1.0)
    assert good["defect"] <= 1e-8
    bad = laplace.cauchy_mean_check(lambda z: abs(z) ** 2, 8.0, 1.0)
    assert bad["defect"] > 1e-3

    grid = mesh.make_grid(2, 13)
    cset = coeffs.synth_coeffs(
        grid, "single_c_bump", center=(0.5, 0.5), radius=0.25, amplitude=1.0
    )
    solver = laplace.TauSolver(cset)
    ev = coeffs.FluxEvaluator(cset)
    nb = grid.boundary_ids().size
    f_data = np.linspace(0.5, 1.5, nb)
    g_data = np.linspace(1.0, 0.4, nb)

    def main_term(tau):
        uf = solver.solve(tau, boundary=chi.hat(tau) * f_data)
        ug = solver.solve(tau, boundary=chi.hat(tau) * g_data)
        w = solver.solve(tau, boundary=np.ones(nb))
        qf = ev.face_gradients(uf.values)
        qg = ev.face_gradients(ug.values)
        qw = ev.face_gradients(w.values)
        bil = ev.bilinear_fluxes(qf, qg)
        total = 0.0 + 0.0j
        for d in range(grid.n):
            total += np.sum(bil[d] * qw[d][d])
        return -2.0 * grid.h**grid.n * total

    term = laplace.cauchy_mean_check(main_term, 6.0, 0.5, num=12)
    assert term["defect"] <= 1e-6
