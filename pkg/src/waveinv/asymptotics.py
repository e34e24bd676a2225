"""Boundary-layer expansions of the tau-domain equation near a flat face.

Builds decaying layer profiles for tau^2 v - div(gamma grad v) = 0 on a
half-box below one face of the unit box: per-frequency decay rates and
corrector coefficients from face traces of gamma, tangential Fourier
assembly of the truncated expansion, an interior residual check, and
error studies against direct sparse solves.
"""

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

MAX_ORDER = 1
RESOLUTION_LIMIT = 1.0
AUTO_SPACING_CAP = 1.0 / 256.0
ACTIVE_MODE_CUTOFF = 1e-14


class FaceTrace:
    """Values of gamma and its inward normal derivative on one flat face."""

    def __init__(self, gamma, normal_derivative, spacing):
        gamma = np.asarray(gamma, dtype=float)
        dgamma = np.asarray(normal_derivative, dtype=float)
        if gamma.ndim not in (1, 2):
            raise ValueError("face must be one- or two-dimensional")
        if dgamma.shape != gamma.shape:
            raise ValueError("trace shapes do not match")
        if not np.isfinite(spacing) or spacing <= 0:
            raise ValueError("spacing must be positive")
        if gamma.min() <= 0:
            raise ValueError("gamma must be positive on the face")
        self.gamma = gamma
        self.normal_derivative = dgamma
        self.spacing = float(spacing)

    @property
    def shape(self):
        return self.gamma.shape

    def frequencies(self):
        """Angular frequencies of the discrete Fourier bins, one array per axis."""
        return tuple(2.0 * np.pi * np.fft.fftfreq(m, d=self.spacing)
                     for m in self.gamma.shape)


def _tangential_gradient(values, spacing):
    """Differentiate a periodic face field along each axis by FFT."""
    grads = []
    for axis in range(values.ndim):
        m = values.shape[axis]
        freq = 2.0 * np.pi * np.fft.fftfreq(m, d=spacing)
        shape = [1] * values.ndim
        shape[axis] = m
        spec = np.fft.fft(values, axis=axis) * (1j * freq.reshape(shape))
        grads.append(np.real(np.fft.ifft(spec, axis=axis)))
    return grads


class BoundarySymbolData:
    """Per-frequency decay rate and corrector coefficients on one face."""

    def __init__(self, eta_prime, tau, spacing, lam, e0, e1, f1, f2):
        self.eta_prime = tuple(float(c) for c in eta_prime)
        self.tau = float(tau)
        self.spacing = float(spacing)
        self.lam = lam
        self.e0 = e0
        self.e1 = e1
        self.f1 = f1
        self.f2 = f2


def boundary_symbols(trace, eta_prime, tau):
    """Evaluate the decay rate and corrector coefficients for one frequency."""
    tau = float(tau)
    if tau <= 0:
        raise ValueError("tau must be positive")
    eta = np.asarray(eta_prime, dtype=float).reshape(-1)
    if eta.size != trace.gamma.ndim:
        raise ValueError("frequency length does not match the face dimension")
    g = trace.gamma
    dg = trace.normal_derivative
    lam = np.sqrt(float(eta @ eta) + tau * tau / g)
    grads_g = _tangential_gradient(g, trace.spacing)
    grads_lam = _tangential_gradient(lam, trace.spacing)
    # First-order corrector solves (lam^2 - d_n^2) a = (e0 - y_n e1) a0 along
    # the depth coordinate.  The phases on the normal and tangential parts of
    # e0 and the overall sign of e1 are fixed by that matching; flipping any
    # of them stalls the order improvement against direct solves.
    u = dg * lam / g
    w = sum(gd * ed for gd, ed in zip(grads_g, eta)) / g
    dlam_eta = sum(gd * ed for gd, ed in zip(grads_lam, eta))
    e0 = -u + 1j * w
    e1 = -dg / g**2 * tau * tau + 2j * dlam_eta
    f1 = e0 / (2.0 * lam) - e1 / (4.0 * lam * lam)
    f2 = -e1 / (4.0 * lam)
    return BoundarySymbolData(eta, tau, trace.spacing, lam, e0, e1, f1, f2)


def full_symbol_set(trace, tau):
    """Evaluate boundary symbols for every discrete Fourier bin of the face."""
    freqs = trace.frequencies()
    grids = np.meshgrid(*freqs, indexing="ij")
    etas = np.stack([g.ravel() for g in grids], axis=-1)
    return [boundary_symbols(trace, eta, tau) for eta in etas]


class LayerSolution:
    """Truncated layer expansion on the face lattice times depth levels."""

    def __init__(self, values, levels, spacing, tau, order):
        self.values = values
        self.levels = levels
        self.spacing = float(spacing)
        self.tau = float(tau)
        self.order = int(order)

    def boundary_values(self):
        """Trace of the assembled field on the face itself."""
        return self.values[..., 0]


def assemble_vN(symbols, phi, order, levels):
    """Synthesize the truncated layer field from per-frequency symbols."""
    if order not in (0, MAX_ORDER):
        raise ValueError(f"order must be 0 or {MAX_ORDER}")
    if not symbols:
        raise ValueError("need at least one symbol")
    phi = np.asarray(phi, dtype=np.complex128)
    levels = np.asarray(levels, dtype=float)
    if levels.ndim != 1 or levels.size < 2 or levels[0] != 0.0:
        raise ValueError("levels must start at zero and hold at least two entries")
    if np.any(np.diff(levels) <= 0):
        raise ValueError("levels must increase")
    if len(symbols) != phi.size:
        raise ValueError("symbol count does not match the face bin count")
    tau = symbols[0].tau
    spacing = symbols[0].spacing
    shape = np.shape(symbols[0].lam)
    if phi.shape != shape:
        raise ValueError("boundary data shape does not match the symbols")
    out = np.zeros(shape + (levels.size,), dtype=np.complex128)
    coeffs = np.fft.fftn(phi) / phi.size
    cutoff = ACTIVE_MODE_CUTOFF * np.abs(coeffs).max()
    axes = [spacing * np.arange(m) for m in shape]
    mesh = np.meshgrid(*axes, indexing="ij")
    for sym, coeff in zip(symbols, coeffs.ravel()):
        if sym.tau != tau or sym.spacing != spacing:
            raise ValueError("symbols carry mixed tau values or spacings")
        if np.shape(sym.lam) != shape:
            raise ValueError("symbols carry mixed face shapes")
        if abs(coeff) <= cutoff:
            continue
        phase = sum(y * eta for y, eta in zip(mesh, sym.eta_prime))
        carrier = np.exp(1j * phase) * coeff
        decay = np.exp(-sym.lam[..., None] * levels)
        profile = np.ones_like(decay)
        if order >= 1:
            profile = profile + (sym.f1[..., None] * levels
                                 + sym.f2[..., None] * levels**2)
        out += carrier[..., None] * decay * profile
    return LayerSolution(out, levels, spacing, tau, order)


def layer_residual(gamma_values, solution):
    """Relative interior residual of the tau-domain equation on the lattice."""
    v = solution.values
    gamma_values = np.asarray(gamma_values, dtype=float)
    if gamma_values.shape != v.shape:
        raise ValueError("gamma lattice does not match the solution lattice")
    steps = np.diff(solution.levels)
    hn = steps[0]
    if not np.allclose(steps, hn, rtol=1e-12, atol=0):
        raise ValueError("residual check needs uniformly spaced levels")
    ht = solution.spacing
    tau = solution.tau
    div = np.zeros_like(v)
    for axis in range(v.ndim - 1):
        gp = 0.5 * (gamma_values + np.roll(gamma_values, -1, axis=axis))
        flux = gp * (np.roll(v, -1, axis=axis) - v)
        div += (flux - np.roll(flux, 1, axis=axis)) / ht**2
    gmid = 0.5 * (gamma_values[..., :-1] + gamma_values[..., 1:])
    flux_n = gmid * np.diff(v, axis=-1)
    div[..., 1:-1] += np.diff(flux_n, axis=-1) / hn**2
    res = tau * tau * v - div
    interior = res[..., 1:-1]
    denom = tau * tau * np.linalg.norm(v[..., 1:-1])
    if denom == 0:
        raise ValueError("solution vanishes on the interior levels")
    return float(np.linalg.norm(interior) / denom)


class LayerStudyReport:
    """Errors of truncated expansions against direct solves over a tau sweep."""

    def __init__(self, taus, errors, slopes, meta):
        self.taus = taus
        self.errors = errors
        self.slopes = slopes
        self.meta = meta

    @property
    def orders(self):
        return sorted(self.errors)

    def slope_gap(self):
        """Drop in fitted decay order from the leading to the corrected sum."""
        if self.slopes.get(0) is None or self.slopes.get(1) is None:
            return None
        return self.slopes[0] - self.slopes[1]

    def rows(self):
        """Flat (tau, order, error, slope) records for reporting."""
        out = []
        for order in self.orders:
            slope = self.slopes[order]
            for tau, err in zip(self.taus, self.errors[order]):
                out.append((float(tau), int(order), float(err),
                            float("nan") if slope is None else float(slope)))
        return out


def layer_error_study(gamma_fn, phi_fn, taus, order=MAX_ORDER, face_nodes=64,
                      slab_depth=0.25, normal_spacing=None):
    """Compare direct half-box solves with layer expansions over a tau sweep."""
    if order not in (0, MAX_ORDER):
        raise ValueError(f"order must be 0 or {MAX_ORDER}")
    taus = [float(t) for t in taus]
    if not taus or any(t <= 0 for t in taus):
        raise ValueError("need positive tau values")
    if face_nodes < 8:
        raise ValueError("face too coarse for a Fourier basis")
    ht = 1.0 / face_nodes
    yp = ht * np.arange(face_nodes)
    g0 = np.asarray(gamma_fn(yp, 0.0 * yp), dtype=float)
    if g0.shape != yp.shape:
        raise ValueError("gamma_fn must map a face sample to a face sample")
    # One-sided fourth-order difference keeps the trace usable when gamma is
    # only defined on the closed half-box.
    d = 1e-3
    dg0 = (-25.0 * g0 + 48.0 * gamma_fn(yp, d + 0.0 * yp)
           - 36.0 * gamma_fn(yp, 2 * d + 0.0 * yp)
           + 16.0 * gamma_fn(yp, 3 * d + 0.0 * yp)
           - 3.0 * gamma_fn(yp, 4 * d + 0.0 * yp)) / (12.0 * d)
    trace = FaceTrace(g0, dg0, ht)
    phi = np.asarray(phi_fn(yp), dtype=float)
    coeffs = np.fft.fft(phi) / phi.size
    active = np.abs(coeffs) > ACTIVE_MODE_CUTOFF * np.abs(coeffs).max()
    errors = {n: [] for n in range(order + 1)}
    meta = []
    for tau in taus:
        hn = normal_spacing if normal_spacing else min(AUTO_SPACING_CAP,
                                                       1.0 / (4.0 * tau * tau))
        depth = min(1.0, max(24.0 / tau + 0.1, 2.0 * slab_depth))
        if slab_depth >= depth:
            raise ValueError("slab exceeds the solve depth")
        nlev = int(round(depth / hn)) + 1
        levels = hn * np.arange(nlev)
        symbols = full_symbol_set(trace, tau)
        lam_peak = max(float(s.lam.max())
                       for s, act in zip(symbols, active.ravel()) if act)
        if lam_peak * hn > RESOLUTION_LIMIT:
            raise ValueError(
                f"resolution insufficient for the layer: lambda*h = {lam_peak * hn:.3f}")
        direct = _direct_half_box(gamma_fn, phi, ht, hn, nlev, tau)
        slab = levels <= slab_depth
        denom = np.linalg.norm(direct[:, slab])
        for n in range(order + 1):
            approx = assemble_vN(symbols, phi, n, levels)
            diff = direct[:, slab] - approx.values[:, slab]
            errors[n].append(float(np.linalg.norm(diff) / denom))
        meta.append({"tau": tau, "normal_spacing": hn, "depth": depth,
                     "levels": nlev})
    slopes = {}
    for n in errors:
        if len(taus) >= 2:
            slopes[n] = float(np.polyfit(np.log(taus), np.log(errors[n]), 1)[0])
        else:
            slopes[n] = None
        errors[n] = np.asarray(errors[n])
    return LayerStudyReport(np.asarray(taus), errors, slopes, meta)


def _direct_half_box(gamma_fn, phi, ht, hn, nlev, tau):
    """Solve the tau-domain equation on the half-box lattice directly."""
    m = phi.size
    ni = nlev - 2
    yp = ht * np.arange(m)
    yn = hn * np.arange(nlev)
    gv = np.asarray(gamma_fn(yp[:, None], yn[None, :]), dtype=float)
    if gv.min() <= 0:
        raise ValueError("gamma must stay positive on the half-box")
    gf_t = 0.5 * (gv + np.roll(gv, -1, axis=0))
    gf_n = 0.5 * (gv[:, :-1] + gv[:, 1:])
    lev_idx, tan_idx = np.meshgrid(np.arange(ni), np.arange(m), indexing="ij")
    rows_idx = (lev_idx * m + tan_idx).ravel()
    lev = (lev_idx + 1).ravel()
    tan = tan_idx.ravel()
    g_left = gf_t[(tan - 1) % m, lev]
    g_right = gf_t[tan, lev]
    g_down = gf_n[tan, lev - 1]
    g_up = gf_n[tan, lev]
    rows = [rows_idx, rows_idx, rows_idx]
    cols = [rows_idx,
            (lev_idx * m + (tan_idx - 1) % m).ravel(),
            (lev_idx * m + (tan_idx + 1) % m).ravel()]
    vals = [tau * tau + (g_left + g_right) / ht**2 + (g_down + g_up) / hn**2,
            -g_left / ht**2,
            -g_right / ht**2]
    has_below = lev_idx.ravel() > 0
    rows.append(rows_idx[has_below])
    cols.append(((lev_idx - 1) * m + tan_idx).ravel()[has_below])
    vals.append(-g_down[has_below] / hn**2)
    has_above = lev_idx.ravel() < ni - 1
    rows.append(rows_idx[has_above])
    cols.append(((lev_idx + 1) * m + tan_idx).ravel()[has_above])
    vals.append(-g_up[has_above] / hn**2)
    rhs = np.zeros(m * ni)
    face_row = lev_idx.ravel() == 0
    rhs[rows_idx[face_row]] = g_down[face_row] / hn**2 * phi[tan[face_row]]
    matrix = scipy.sparse.csc_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(m * ni, m * ni))
    interior = scipy.sparse.linalg.splu(matrix).solve(rhs)
    full = np.zeros((m, nlev))
    full[:, 0] = phi
    full[:, 1:-1] = interior.reshape(ni, m).T
    return full
