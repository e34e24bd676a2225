"""Eigenbasis calculus for the Dirichlet operator and delay bookkeeping.

Assembles B = -div(gamma grad .) on interior nodes with the same face
stencil the time steppers use, decomposes it densely, and provides:
Duhamel solves, the polarized second-order response driven by a delayed
probe pair, and the delay-line time-integrated response together with its
four correction sources and their leading-order (dominant) approximations.
"""

import numpy as np
import scipy.linalg
import scipy.sparse

from . import coeffs as coeffs_mod
from . import forward, mesh

DENSE_EIG_CAP = 4096


class SpectralOperator:
    """Dense eigendecomposition of the interior Dirichlet operator."""

    def __init__(self, coeffs):
        g = coeffs.grid
        n_int = (g.dims - 2) ** g.n
        if n_int > DENSE_EIG_CAP:
            raise ValueError(
                f"{n_int} interior nodes exceed the dense cap {DENSE_EIG_CAP}"
            )
        self.coeffs = coeffs
        self.grid = g
        self.ev = coeffs_mod.FluxEvaluator(coeffs)
        self.matrix = assemble_dirichlet_matrix(coeffs)
        dense = self.matrix.toarray()
        sym_defect = np.max(np.abs(dense - dense.T))
        scale = np.max(np.abs(dense))
        if sym_defect > 1e-12 * scale:
            raise RuntimeError(
                f"operator symmetry defect {sym_defect:.3e}; stencil bug"
            )
        lam, vec = scipy.linalg.eigh(dense)
        self.eigenvalues = lam
        self.eigenvectors = vec
        self.interior_ids = g.interior_ids()

    @property
    def omegas(self):
        return np.sqrt(self.eigenvalues)

    def to_interior(self, full):
        """Restrict full lattice array(s) to interior nodes, flattened."""
        full = np.asarray(full)
        lead = full.shape[: full.ndim - self.grid.n]
        flat = full.reshape(lead + (self.grid.num_nodes,))
        return flat[..., self.interior_ids]

    def to_full(self, interior):
        """Scatter interior vectors into full lattice arrays (zero boundary)."""
        interior = np.asarray(interior)
        lead = interior.shape[:-1]
        out = np.zeros(lead + (self.grid.num_nodes,), dtype=interior.dtype)
        out[..., self.interior_ids] = interior
        return out.reshape(lead + self.grid.shape)

    def project(self, full):
        """Eigen-coefficients of full lattice array(s)."""
        return self.to_interior(full) @ self.eigenvectors

    def synthesize(self, coefs):
        """Full lattice array(s) from eigen-coefficients."""
        return self.to_full(np.asarray(coefs) @ self.eigenvectors.T)

    def apply_matrix(self, full):
        """B applied to a full array, returned as a full array."""
        return self.to_full(self.matrix @ self.to_interior(full))

    def gram_defect(self):
        v = self.eigenvectors
        return float(np.max(np.abs(v.T @ v - np.eye(v.shape[1]))))

    def residual_defect(self):
        r = self.matrix @ self.eigenvectors - self.eigenvectors * self.eigenvalues
        return float(np.max(np.abs(r)) / max(self.eigenvalues.max(), 1.0))


def assemble_dirichlet_matrix(coeffs):
    """Sparse interior matrix of -div(gamma grad .), zero Dirichlet."""
    g = coeffs.grid
    ev = coeffs_mod.FluxEvaluator(coeffs)
    h2 = g.h * g.h
    full_index = -np.ones(g.shape, dtype=np.int64)
    int_mask = g.interior_mask()
    n_int = int(int_mask.sum())
    full_index[int_mask] = np.arange(n_int)
    rows, cols, vals = [], [], []
    diag = np.zeros(n_int)
    for d in range(g.n):
        gam = ev.gamma_faces[d] / h2
        lo = [slice(None)] * g.n
        hi = [slice(None)] * g.n
        lo[d] = slice(None, -1)
        hi[d] = slice(1, None)
        a = full_index[tuple(lo)].ravel()
        b = full_index[tuple(hi)].ravel()
        w = gam.ravel()
        both = (a >= 0) & (b >= 0)
        rows.append(a[both])
        cols.append(b[both])
        vals.append(-w[both])
        rows.append(b[both])
        cols.append(a[both])
        vals.append(-w[both])
        np.add.at(diag, a[a >= 0], w[a >= 0])
        np.add.at(diag, b[b >= 0], w[b >= 0])
    rows.append(np.arange(n_int))
    cols.append(np.arange(n_int))
    vals.append(diag)
    mat = scipy.sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_int, n_int),
    )
    return mat


FUNCTION_KINDS = ("sin_sqrt_scaled", "cos_sqrt_scaled", "inv_sqrt", "sqrt")


def apply_function(op, kind, full, t=None):
    """Apply a spectral function of B to a full lattice array."""
    lam = op.eigenvalues
    om = op.omegas
    if kind == "sin_sqrt_scaled":
        if t is None:
            raise ValueError("sin_sqrt_scaled needs a time argument")
        f = np.sin(t * om) / om
    elif kind == "cos_sqrt_scaled":
        if t is None:
            raise ValueError("cos_sqrt_scaled needs a time argument")
        f = np.cos(t * om)
    elif kind == "inv_sqrt":
        f = 1.0 / om
    elif kind == "sqrt":
        f = om
    else:
        raise ValueError(f"unknown function kind {kind!r}; use {FUNCTION_KINDS}")
    return op.synthesize(op.project(full) * f)


def duhamel_solve(op, sources, dt):
    """Zero-data wave solve u(t) = int_0^t B^-1/2 sin((t-s)B^1/2) F(s) ds.

    sources: (num_steps,) + grid.shape frames. Uses per-mode trapezoid
    with angle-addition running sums; cost O(num_steps * modes).
    """
    num_steps = sources.shape[0]
    om = op.omegas
    coefs = op.project(sources)  # (num_steps, modes)
    cos_t = np.cos(np.outer(dt * np.arange(num_steps), om))
    sin_t = np.sin(np.outer(dt * np.arange(num_steps), om))
    # running trapezoid of cos(om s) F(s) and sin(om s) F(s)
    cterm = cos_t * coefs
    sterm = sin_t * coefs
    csum = np.zeros_like(coefs)
    ssum = np.zeros_like(coefs)
    csum[1:] = np.cumsum(0.5 * (cterm[1:] + cterm[:-1]), axis=0) * dt
    ssum[1:] = np.cumsum(0.5 * (sterm[1:] + sterm[:-1]), axis=0) * dt
    u_modes = (sin_t * csum - cos_t * ssum) / om
    return op.synthesize(u_modes)


# ---------------------------------------------------------------------------
# delayed probe pairs


def mirrored_index(m, delay_index):
    """Index of the evenly extended run: |m - delay_index|."""
    return abs(m - delay_index)


class ExtendedTrace:
    """Even time extension of a sampled trace with an exact delay shift.

    Values live on signed step indices via value(m) = base[|m - shift|];
    delays compose additively, so delaying by s then t equals delaying
    by s + t with no interpolation.
    """

    def __init__(self, values, shift=0):
        self.values = np.asarray(values)
        self.shift = int(shift)

    def delayed(self, steps):
        return ExtendedTrace(self.values, self.shift + int(steps))

    def at(self, m):
        idx = abs(int(m) - self.shift)
        if idx >= self.values.shape[0]:
            raise IndexError(f"extended trace index {m} out of range")
        return self.values[idx]

    def sample(self, num_steps):
        idx = np.abs(np.arange(num_steps) - self.shift)
        if idx.max() >= self.values.shape[0]:
            raise IndexError("extended trace sampled past its support")
        return self.values[idx]


def delayed_trace(trace, delay_index):
    """Boundary trace of the delayed, evenly extended probe."""
    vals = ExtendedTrace(trace.values, delay_index).sample(trace.values.shape[0])
    return mesh.BoundaryTrace(trace.grid, vals, trace.dt)


def pair_source_frames(ev, f_run, g_run, delay_index):
    """Polarized source frames 2 div P_bil(grad u1f(t), grad u1g(|t-s|))."""

    def source(m):
        qf = ev.face_gradients(f_run.fields[m])
        qg = ev.face_gradients(g_run.fields[mirrored_index(m, delay_index)])
        return 2.0 * mesh.face_divergence(
            ev.bilinear_fluxes(qf, qg), ev.h, ev.grid.n
        )

    return source


def polarized_response(coeffs, f_run, g_run, delay_index, store_fields=True,
                       record_neumann=False, on_step=None):
    """Second-order response of the probe pair (f, delayed g), polarized.

    Equals the difference of the quadratic responses to f + Y_s g and
    f - Y_s g, where Y_s delays by delay_index steps and extends evenly.
    """
    if f_run.num_steps != g_run.num_steps or f_run.dt != g_run.dt:
        raise ValueError("probe runs must share one time grid")
    if not (0 <= delay_index < f_run.num_steps):
        raise ValueError("delay index outside the run")
    ev = coeffs_mod.FluxEvaluator(coeffs)
    run = forward.solve_quadratic_response(
        coeffs,
        source_fn=pair_source_frames(ev, f_run, g_run, delay_index),
        num_steps=f_run.num_steps,
        dt=f_run.dt,
        store_fields=store_fields,
        record_neumann=record_neumann,
        on_step=on_step,
        dtype=np.result_type(f_run.fields.dtype, g_run.fields.dtype),
    )
    run.meta["kind"] = "polarized_response"
    run.meta["delay_index"] = delay_index
    return run


# ---------------------------------------------------------------------------
# delay-integrated response and its correction sources


class DelayIntegratedResponse:
    """Time-integrated polarized response over the delay grid.

    response[M] integrates the polarized field up to its delay s_M; conv is
    the convolution source; corrections hold the four extra source terms of
    the second-order delay equation. pde_defect() checks that equation.
    """

    def __init__(self, op, dt, response_modes, conv_modes, correction_modes):
        self.op = op
        self.dt = float(dt)
        self._response = response_modes
        self._conv = conv_modes
        self._corrections = correction_modes

    @property
    def num_delays(self):
        return self._response.shape[0]

    def delays(self):
        return self.dt * np.arange(self.num_delays)

    def response_fields(self):
        return self.op.synthesize(self._response)

    def conv_fields(self):
        return self.op.synthesize(self._conv)

    def correction_fields(self, j):
        return self.op.synthesize(self._corrections[j])

    def correction_modes(self, j):
        """Modal series of the j-th correction source over delays."""
        return self._corrections[j]

    def pde_defect(self):
        """Relative residual of d_s^2 u + B u = conv + sum of corrections.

        Returns (per-delay relative residuals, scale) over interior delay
        indices.
        """
        u = self._response
        lam = self.op.eigenvalues
        dss = (u[2:] - 2 * u[1:-1] + u[:-2]) / self.dt**2
        lhs = dss + u[1:-1] * lam
        rhs = self._conv[1:-1] + sum(c[1:-1] for c in self._corrections)
        scale = float(np.max(np.linalg.norm(rhs, axis=1)))
        resid = np.linalg.norm(lhs - rhs, axis=1)
        return resid / max(scale, 1e-300), scale

    def h1_over_s2(self):
        """Discrete H1 norm of response/s^2 per delay (floor-guarded)."""
        g = self.op.grid
        hn = g.h**g.n
        fields = self.response_fields()
        out = np.zeros(self.num_delays)
        s = self.delays()
        for m in range(1, self.num_delays):
            f = fields[m]
            grads = np.gradient(f, g.h, edge_order=2)
            val = hn * (np.sum(f**2) + sum(np.sum(gr**2) for gr in grads))
            out[m] = np.sqrt(val) / max(s[m] ** 2, 1e-12)
        return out


def _pair_blocks(op, f_run, g_run, want_dominant):
    """Per-diagonal projected source blocks for the delay assembly.

    Returns a function block(M) -> dict of (modes, M+1) arrays for the
    plain, f-differentiated, and doubly differentiated source kernels.
    """
    ev = op.ev
    g = op.grid
    nt = f_run.num_steps
    dt = f_run.dt
    qf = [ev.face_gradients(f_run.fields[m]) for m in range(nt)]
    qg = [ev.face_gradients(g_run.fields[m]) for m in range(nt)]
    # time derivative of the f-side gradient stream
    f_dot = np.gradient(f_run.fields, dt, axis=0, edge_order=2)
    g_dot = np.gradient(g_run.fields, dt, axis=0, edge_order=2)
    qf_dot = [ev.face_gradients(f_dot[m]) for m in range(nt)]
    qg_dot = [ev.face_gradients(g_dot[m]) for m in range(nt)]

    def kernel(qa, qb):
        return 2.0 * mesh.face_divergence(
            ev.bilinear_fluxes(qa, qb), ev.h, g.n
        )

    def block(M):
        cols_p = np.empty((M + 1,) + g.shape)
        cols_f = np.empty((M + 1,) + g.shape)
        cols_fg = np.empty((M + 1,) + g.shape)
        for a in range(M + 1):
            b = M - a
            cols_p[a] = kernel(qf[a], qg[b])
            cols_f[a] = kernel(qf_dot[a], qg[b])
            cols_fg[a] = kernel(qf_dot[a], qg_dot[b])
        return {
            "p": op.project(cols_p),
            "pf": op.project(cols_f),
            "pfg": op.project(cols_fg),
        }

    return block


def modal_delay_assemble(omegas, block_fn, dt, num_delays, want_dominant=False):
    """Assemble the delay-integrated response and corrections per mode.

    block_fn(M) returns projected source values on the diagonal
    sigma_a + r_b = s_M: arrays of shape (M+1, modes) for keys
    'p' (plain), 'pf' (d/d sigma on the first factor), and 'pfg'
    (both factors differentiated). Returns dict of (num_delays, modes)
    arrays: response, conv, i1..i4 (and dominants when requested).
    """
    omegas = np.asarray(omegas)
    modes = omegas.size
    out_keys = ["response", "conv", "i1", "i2", "i4"]
    if want_dominant:
        out_keys += ["i2_dom", "i4_dom"]
    out = {k: np.zeros((num_delays, modes)) for k in out_keys}
    for M in range(1, num_delays):
        blocks = block_fn(M)
        r = dt * (M - np.arange(M + 1))  # r = s - sigma per column
        w = np.full(M + 1, dt)
        w[0] = w[-1] = 0.5 * dt
        ro = np.outer(r, omegas)
        cos_r = np.cos(ro)
        one_minus_cos = 1.0 - cos_r
        sin_r = np.sin(ro)
        wp = w[:, None] * blocks["p"]
        wf = w[:, None] * blocks["pf"]
        wfg = w[:, None] * blocks["pfg"]
        out["conv"][M] = wp.sum(axis=0)
        out["i1"][M] = -(cos_r * wp).sum(axis=0)
        out["i2"][M] = 2.0 * ((sin_r / omegas) * wf).sum(axis=0)
        out["i4"][M] = ((one_minus_cos / omegas**2) * wfg).sum(axis=0)
        out["response"][M] = ((one_minus_cos / omegas**2) * wp).sum(axis=0)
        if want_dominant:
            out["i2_dom"][M] = 2.0 * (r[:, None] * wf).sum(axis=0)
            out["i4_dom"][M] = 0.5 * ((r**2)[:, None] * wfg).sum(axis=0)
    return out


def delay_integrated_response(op, f_run, g_run):
    """Integrated polarized response with its four correction sources.

    The delay grid coincides with the probe time grid. The second-order
    delay equation d_s^2 u + B u = conv + I1 + I2 + I3 + I4 is the
    quantity pde_defect() checks; I3 = -I2/2 exactly.
    """
    if f_run.num_steps != g_run.num_steps or f_run.dt != g_run.dt:
        raise ValueError("probe runs must share one time grid")
    block_fn = _pair_blocks(op, f_run, g_run, want_dominant=False)
    nt = f_run.num_steps
    data = modal_delay_assemble(op.omegas, block_fn, f_run.dt, nt)
    corrections = [
        data["i1"],
        data["i2"],
        -0.5 * data["i2"],
        data["i4"],
    ]
    return DelayIntegratedResponse(
        op, f_run.dt, data["response"], data["conv"], corrections
    )


class DominantComparison:
    """Exact and leading-order correction sources, per term."""

    def __init__(self, op, dt, exact, dominant, conv=None):
        self.op = op
        self.dt = float(dt)
        self.exact = exact  # list of 4 modal arrays
        self.dominant = dominant
        self.conv = conv

    def relative_gaps(self):
        """Per-term relative distance between exact and dominant forms."""
        gaps = []
        for e, d in zip(self.exact, self.dominant):
            scale = max(float(np.max(np.abs(d))), 1e-300)
            gaps.append(float(np.max(np.abs(e - d))) / scale)
        return gaps


def dominant_corrections(op, f_run, g_run):
    """Exact correction sources next to their dominant approximations.

    The first dominant term is exactly -conv; the second and third carry
    the (s - sigma) weight on the differentiated kernel; the fourth the
    (s - sigma)^2/2 weight on the doubly differentiated kernel.
    """
    if f_run.num_steps != g_run.num_steps or f_run.dt != g_run.dt:
        raise ValueError("probe runs must share one time grid")
    block_fn = _pair_blocks(op, f_run, g_run, want_dominant=True)
    nt = f_run.num_steps
    data = modal_delay_assemble(
        op.omegas, block_fn, f_run.dt, nt, want_dominant=True
    )
    exact = [data["i1"], data["i2"], -0.5 * data["i2"], data["i4"]]
    dominant = [
        -data["conv"],
        data["i2_dom"],
        -0.5 * data["i2_dom"],
        data["i4_dom"],
    ]
    return DominantComparison(op, f_run.dt, exact, dominant, conv=data["conv"])
