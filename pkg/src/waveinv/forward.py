"""Explicit wave solvers: nonlinear, linearized, and second-order response.

One leapfrog kernel drives every solve; the linearized and second-order
solvers are the exact first and second amplitude derivatives of the
nonlinear update (same face stencils), so the discrete small-amplitude
expansion holds to the order of the scheme itself rather than the grid.
"""

import numpy as np

from . import coeffs as coeffs_mod
from . import mesh

CFL_FACTOR = 0.5


class SolverBlowupError(RuntimeError):
    """Raised when a time step produces non-finite values."""

    def __init__(self, step, message):
        self.step = step
        super().__init__(message)


def max_stable_dt(coeffs):
    """CFL bound dt <= 0.5 h / sqrt(max gamma)."""
    return CFL_FACTOR * coeffs.grid.h / np.sqrt(coeffs.gamma_max())


def make_time_grid(coeffs, t_final, dt_factor=1.0):
    """Number of steps and dt covering [0, t_final] under the CFL bound.

    dt_factor < 1 refines below the stability limit (smaller dispersion).
    """
    dt_max = dt_factor * max_stable_dt(coeffs)
    num_steps = int(np.ceil(t_final / dt_max)) + 1
    dt = t_final / (num_steps - 1)
    return num_steps, dt


def _check_cfl(coeffs, dt):
    if dt > max_stable_dt(coeffs) * (1 + 1e-12):
        raise ValueError(
            f"dt={dt:.3g} violates the CFL bound {max_stable_dt(coeffs):.3g}"
        )


class WaveRun:
    """Result of a time integration."""

    def __init__(self, grid, dt, fields=None, neumann=None, meta=None):
        self.grid = grid
        self.dt = float(dt)
        self.fields = fields  # (num_steps,) + batch + grid.shape, or None
        self.neumann = neumann  # (num_steps,) + batch + (nb,), or None
        self.meta = dict(meta or {})

    @property
    def num_steps(self):
        ref = self.fields if self.fields is not None else self.neumann
        return ref.shape[0]

    def times(self):
        return self.dt * np.arange(self.num_steps)

    def field_at(self, m):
        return self.fields[m]


def boundary_flux(grid, fluxes):
    """Outward one-sided flux summed per boundary node, ordered by node id.

    fluxes are face arrays (possibly batched); corner nodes accumulate one
    term per adjacent face.
    """
    n = grid.n
    batch = fluxes[0].shape[: fluxes[0].ndim - n]
    full = np.zeros(batch + grid.shape, dtype=fluxes[0].dtype)
    for d in range(n):
        ax = full.ndim - n + d
        first = [slice(None)] * full.ndim
        first[ax] = 0
        face_first = [slice(None)] * full.ndim
        face_first[ax] = 0
        last = [slice(None)] * full.ndim
        last[ax] = -1
        face_last = [slice(None)] * full.ndim
        face_last[ax] = -1
        # outward normal at side 0 is -e_d; the face array is short by one
        full[tuple(first)] += -fluxes[d][tuple(face_first)]
        full[tuple(last)] += fluxes[d][tuple(face_last)]
    bids = grid.boundary_ids()
    flat = full.reshape(batch + (grid.num_nodes,))
    return flat[..., bids]


def _scatter_boundary(u, grid, frame):
    """Write one boundary frame into a (batched) full array in place."""
    n = grid.n
    batch = u.shape[: u.ndim - n]
    flat = u.reshape(batch + (grid.num_nodes,))
    flat[..., grid.boundary_ids()] = frame


def leapfrog(
    coeffs,
    flux_fn,
    boundary_values,
    dt,
    source_fn=None,
    phi0=None,
    phi1=None,
    store_fields=True,
    record_neumann=False,
    on_step=None,
    batch_shape=(),
    dtype=None,
):
    """Shared second-order leapfrog over Dirichlet boundary data.

    boundary_values: array (num_steps, *batch, nb) or (num_steps, nb).
    flux_fn: maps a full lattice array to per-axis face fluxes.
    source_fn: optional source frames, source_fn(m) -> interior-supported
    array (added inside dt^2 with the flux divergence).
    on_step(m, u) is called once per stored time level.
    """
    grid = coeffs.grid
    _check_cfl(coeffs, dt)
    num_steps = boundary_values.shape[0]
    if dtype is None:
        dtype = np.result_type(boundary_values.dtype, np.float64)
    shape = batch_shape + grid.shape
    h = grid.h

    def bframe(m):
        return boundary_values[m]

    u_prev = np.zeros(shape, dtype=dtype)
    if phi0 is not None:
        u_prev = u_prev + phi0
    _scatter_boundary(u_prev, grid, bframe(0))

    fields = None
    if store_fields:
        fields = np.zeros((num_steps,) + shape, dtype=dtype)
        fields[0] = u_prev
    neumann = None
    if record_neumann:
        nb = grid.boundary_ids().size
        neumann = np.zeros((num_steps,) + batch_shape + (nb,), dtype=dtype)
        neumann[0] = boundary_flux(grid, flux_fn(u_prev))
    if on_step is not None:
        on_step(0, u_prev)
    if num_steps == 1:
        return WaveRun(grid, dt, fields, neumann)

    # Taylor start keeps second-order accuracy at the first step
    accel = mesh.face_divergence(flux_fn(u_prev), h, grid.n)
    if source_fn is not None:
        accel = accel + source_fn(0)
    u_curr = u_prev + 0.5 * dt * dt * accel
    if phi1 is not None:
        u_curr = u_curr + dt * phi1
    _scatter_boundary(u_curr, grid, bframe(1))
    if store_fields:
        fields[1] = u_curr
    if record_neumann:
        neumann[1] = boundary_flux(grid, flux_fn(u_curr))
    if on_step is not None:
        on_step(1, u_curr)

    for m in range(1, num_steps - 1):
        try:
            fluxes = flux_fn(u_curr)
        except coeffs_mod.FluxOverflowError as exc:
            raise SolverBlowupError(
                m, f"flux overflow at step {m}: {exc}"
            ) from exc
        accel = mesh.face_divergence(fluxes, h, grid.n)
        if source_fn is not None:
            accel = accel + source_fn(m)
        u_next = 2.0 * u_curr - u_prev + dt * dt * accel
        _scatter_boundary(u_next, grid, bframe(m + 1))
        if not np.all(np.isfinite(u_next.view(np.float64))):
            raise SolverBlowupError(
                m + 1, f"non-finite values appeared at step {m + 1}"
            )
        u_prev, u_curr = u_curr, u_next
        if store_fields:
            fields[m + 1] = u_curr
        if record_neumann:
            neumann[m + 1] = boundary_flux(grid, flux_fn(u_curr))
        if on_step is not None:
            on_step(m + 1, u_curr)

    return WaveRun(grid, dt, fields, neumann)


def solve_nonlinear(coeffs, boundary, store_fields=True, record_neumann=False):
    """Integrate the full nonlinear model over a Dirichlet boundary trace."""
    ev = coeffs_mod.FluxEvaluator(coeffs)
    run = leapfrog(
        coeffs,
        ev.full_fluxes,
        boundary.values,
        boundary.dt,
        store_fields=store_fields,
        record_neumann=record_neumann,
    )
    run.meta["kind"] = "nonlinear"
    return run


def solve_linear(coeffs, boundary, dt=None, store_fields=True,
                 record_neumann=False, on_step=None, batch_shape=()):
    """Integrate the linearized model (gamma only) over a boundary trace.

    boundary is a BoundaryTrace, or a raw (num_steps, *batch, nb) array
    with dt given explicitly.
    """
    ev = coeffs_mod.FluxEvaluator(coeffs)
    if isinstance(boundary, mesh.BoundaryTrace):
        values, dt = boundary.values, boundary.dt
    else:
        values = np.asarray(boundary)
        if dt is None:
            raise ValueError("raw boundary arrays need an explicit dt")
    run = leapfrog(
        coeffs,
        ev.linear_fluxes,
        values,
        dt,
        store_fields=store_fields,
        record_neumann=record_neumann,
        on_step=on_step,
        batch_shape=batch_shape,
    )
    run.meta["kind"] = "linear"
    return run


def quadratic_source_from_run(ev, run):
    """Source frames div P(x, grad u1) read from a stored linear run."""

    def source(m):
        q = ev.face_gradients(run.fields[m])
        return mesh.face_divergence(
            ev.quadratic_fluxes(q), ev.h, ev.grid.n
        )

    return source


def solve_quadratic_response(coeffs, u1_run=None, source_fn=None,
                             num_steps=None, dt=None, store_fields=True,
                             record_neumann=False, on_step=None,
                             batch_shape=(), dtype=None):
    """Second-order response: zero data, driven by div P(grad u1).

    Either pass a stored linear run (the standard source) or an explicit
    source_fn with num_steps and dt.
    """
    ev = coeffs_mod.FluxEvaluator(coeffs)
    if source_fn is None:
        if u1_run is None:
            raise ValueError("need a linear run or an explicit source")
        source_fn = quadratic_source_from_run(ev, u1_run)
        num_steps = u1_run.num_steps
        dt = u1_run.dt
        if dtype is None:
            dtype = u1_run.fields.dtype
    nb = coeffs.grid.boundary_ids().size
    zero_boundary = np.zeros((num_steps, nb))
    run = leapfrog(
        coeffs,
        ev.linear_fluxes,
        zero_boundary,
        dt,
        source_fn=source_fn,
        store_fields=store_fields,
        record_neumann=record_neumann,
        on_step=on_step,
        batch_shape=batch_shape,
        dtype=dtype,
    )
    run.meta["kind"] = "quadratic_response"
    return run


def dn_trace(coeffs, run, nonlinear=False):
    """Boundary flux trace nu . C(x, grad u) from stored fields.

    With nonlinear=False only the linear part gamma d_nu u is evaluated.
    """
    ev = coeffs_mod.FluxEvaluator(coeffs)
    grid = coeffs.grid
    nb = grid.boundary_ids().size
    out = np.zeros(
        (run.num_steps,) + run.fields.shape[1:-grid.n] + (nb,),
        dtype=run.fields.dtype,
    )
    for m in range(run.num_steps):
        u = run.fields[m]
        fluxes = (
            ev.full_fluxes(u, check_overflow=False)
            if nonlinear
            else ev.linear_fluxes(u)
        )
        out[m] = boundary_flux(grid, fluxes)
    return mesh.TimeSeries(out, run.dt)


def quadratic_dn_correction(coeffs, u1_run):
    """Boundary trace of nu . P(x, grad u1), the second-order flux term."""
    ev = coeffs_mod.FluxEvaluator(coeffs)
    grid = coeffs.grid
    nb = grid.boundary_ids().size
    out = np.zeros((u1_run.num_steps, nb), dtype=u1_run.fields.dtype)
    for m in range(u1_run.num_steps):
        q = ev.face_gradients(u1_run.fields[m])
        out[m] = boundary_flux(grid, ev.quadratic_fluxes(q))
    return mesh.TimeSeries(out, u1_run.dt)


# ---------------------------------------------------------------------------
# energy and diagnostics


def staggered_energy(coeffs, run):
    """Leapfrog energy invariant at half steps.

    E^{m+1/2} = h^n/2 ||(u^{m+1}-u^m)/dt||^2 + a(u^m, u^{m+1})/2 with the
    face-flux bilinear form; conserved to roundoff by the linear scheme
    once the boundary input is quiescent.
    """
    ev = coeffs_mod.FluxEvaluator(coeffs)
    g = coeffs.grid
    hn = g.h**g.n
    dt = run.dt
    energies = []
    for m in range(run.num_steps - 1):
        a, b = run.fields[m], run.fields[m + 1]
        kinetic = 0.5 * hn * np.sum(np.abs((b - a) / dt) ** 2)
        fa = ev.linear_fluxes(a)
        potential = 0.0
        for d in range(g.n):
            db = mesh.face_diff(b, d, g.h, g.n)
            potential += 0.5 * hn * np.real(np.sum(fa[d] * np.conj(db)))
        energies.append(kinetic + potential)
    return np.array(energies)


def energy_drift(coeffs, run, start_index):
    """Max relative drift of the staggered energy after start_index."""
    e = staggered_energy(coeffs, run)[start_index:]
    scale = np.max(np.abs(e))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(e - e[0])) / scale)


class ExpansionReport:
    """Small-amplitude expansion diagnostics."""

    def __init__(self, epsilons, field_residuals, dn_residuals, w_norms,
                 field_slope, dn_slope):
        self.epsilons = np.asarray(epsilons)
        self.field_residuals = np.asarray(field_residuals)
        self.dn_residuals = np.asarray(dn_residuals)
        self.w_norms = np.asarray(w_norms)
        self.field_slope = float(field_slope)
        self.dn_slope = float(dn_slope)


def _sup_l2(grid, frames):
    hn = grid.h**grid.n
    return float(np.max(np.sqrt(hn * np.sum(np.abs(frames) ** 2, axis=tuple(range(1, frames.ndim))))))


def _fit_loglog(xs, ys):
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    keep = ys > 0
    if keep.sum() < 2:
        return 0.0
    return float(np.polyfit(np.log(xs[keep]), np.log(ys[keep]), 1)[0])


def expansion_residual(coeffs, boundary, epsilons):
    """Compare nonlinear solves against the two-term expansion.

    boundary is the unit-amplitude probe trace; each epsilon scales it.
    Returns an ExpansionReport with sup-in-time L2 residuals of the field
    and of the boundary flux, and the scaled-window diagnostic
    w = (u - eps u1 - eps^2 u2)/eps^2 whose norm should shrink like eps.
    """
    grid = coeffs.grid
    u1 = solve_linear(coeffs, boundary)
    u2 = solve_quadratic_response(coeffs, u1)
    g1 = dn_trace(coeffs, u1).values
    g2 = (
        dn_trace(coeffs, u2).values
        + quadratic_dn_correction(coeffs, u1).values
    )
    field_res, dn_res, w_norms = [], [], []
    for eps in epsilons:
        scaled = mesh.BoundaryTrace(
            grid, eps * boundary.values, boundary.dt
        )
        nl = solve_nonlinear(coeffs, scaled)
        gnl = dn_trace(coeffs, nl, nonlinear=True).values
        diff = nl.fields - eps * u1.fields - eps * eps * u2.fields
        field_res.append(_sup_l2(grid, diff))
        w_norms.append(_sup_l2(grid, diff / (eps * eps)))
        dn_diff = gnl - eps * g1 - eps * eps * g2
        hs = grid.h ** (grid.n - 1)
        dn_res.append(
            float(np.max(np.sqrt(hs * np.sum(dn_diff ** 2, axis=1))))
        )
    return ExpansionReport(
        epsilons,
        field_res,
        dn_res,
        w_norms,
        _fit_loglog(epsilons, field_res),
        _fit_loglog(epsilons, dn_res),
    )


def discover_epsilon_range(coeffs, boundary, eps_hi=2.0, tol=0.05):
    """Bisect the largest stable probe amplitude for this model.

    Stability means the nonlinear solve completes with finite values and
    gradients inside the validity radius. Returns (eps_max, report dict).
    """
    grid = coeffs.grid

    def stable(eps):
        scaled = mesh.BoundaryTrace(grid, eps * boundary.values, boundary.dt)
        try:
            solve_nonlinear(coeffs, scaled, store_fields=False)
        except (SolverBlowupError, coeffs_mod.FluxOverflowError):
            return False
        return True

    lo = 0.0
    hi = eps_hi
    grow = 0
    while stable(hi) and grow < 8:
        lo = hi
        hi *= 2.0
        grow += 1
    if grow == 8:
        return hi, {"saturated": True}
    while (hi - lo) > tol * hi:
        mid = 0.5 * (lo + hi)
        if stable(mid):
            lo = mid
        else:
            hi = mid
    return lo, {"saturated": False, "bracket": (lo, hi)}
