"""Material coefficients for the quadratic-gradient wave model.

The flux law is C(x, q) = gamma(x) q + P(x, q) + R(x, q) with
P_j = sum_kl c_jkl(x) q_k q_l and an optional cubic remainder
R = r(x) |q|^2 q. The quadratic tensor is consumed through its
symmetrization in every numeric path, so models whose c differ by a
k<->l swap are indistinguishable by construction.
"""

import json
import os

import numpy as np

from . import mesh

GAMMA_MIN = 0.25
SUPPORT_MARGIN = 2  # c and r must vanish this many node shells into the box


class FluxOverflowError(ValueError):
    """Raised when a gradient exceeds the model's validity radius."""


def _margin_mask(grid, margin):
    """True on nodes within `margin` shells of the boundary."""
    mask = np.zeros(grid.shape, dtype=bool)
    for d in range(grid.n):
        sl = [slice(None)] * grid.n
        sl[d] = slice(0, margin + 1)
        mask[tuple(sl)] = True
        sl[d] = slice(-margin - 1, None)
        mask[tuple(sl)] = True
    return mask


def _check_support(grid, arr, name):
    near = _margin_mask(grid, SUPPORT_MARGIN)
    scale = np.max(np.abs(arr)) if arr.size else 0.0
    if scale == 0.0:
        return
    if np.max(np.abs(arr[..., near])) > 1e-13 * scale:
        raise ValueError(f"{name} must vanish within {SUPPORT_MARGIN} nodes of the boundary")


class CoefficientSet:
    """gamma, quadratic tensor c (j,k,l), and optional cubic remainder."""

    def __init__(self, gamma, c, remainder="none", r=None, h_valid=1.0):
        grid = gamma.grid
        if gamma.values.min() < GAMMA_MIN:
            raise ValueError(f"gamma must stay >= {GAMMA_MIN}")
        c = np.asarray(c, dtype=float)
        n = grid.n
        if c.shape != (n, n, n) + grid.shape:
            raise ValueError(f"c must have shape (n,n,n)+grid, got {c.shape}")
        _check_support(grid, c, "c")
        if remainder not in ("none", "cubic"):
            raise ValueError(f"unknown remainder kind {remainder!r}")
        if remainder == "cubic":
            if r is None:
                raise ValueError("cubic remainder needs an r field")
            if r.values.shape != grid.shape:
                raise ValueError("r field shape mismatch")
            _check_support(grid, r.values[None], "r")
        self.grid = grid
        self.gamma = gamma
        self.c = mesh._frozen(c)
        self.remainder = remainder
        self.r = r
        self.h_valid = float(h_valid)

    @property
    def n(self):
        return self.grid.n

    def gamma_max(self):
        return float(self.gamma.values.max())

    def has_quadratic(self):
        return bool(np.any(self.c != 0.0))

    def __repr__(self):
        return (
            f"CoefficientSet(grid={self.grid}, remainder={self.remainder!r}, "
            f"h_valid={self.h_valid})"
        )


class SymmetrizedCoefficients:
    """The k<->l symmetrization s_jkl = (c_jkl + c_jlk)/2."""

    def __init__(self, grid, s):
        self.grid = grid
        self.s = mesh._frozen(s)


def symmetrize(coeffs):
    """Symmetrize the quadratic tensor in its last two component indices."""
    c = coeffs.c
    s = 0.5 * (c + np.swapaxes(c, 1, 2))
    return SymmetrizedCoefficients(coeffs.grid, s)


def _check_overflow(coeffs, q_norm_sq):
    qmax = float(np.sqrt(np.max(q_norm_sq))) if q_norm_sq.size else 0.0
    if qmax > coeffs.h_valid:
        raise FluxOverflowError(
            f"gradient magnitude {qmax:.3g} exceeds validity radius "
            f"{coeffs.h_valid:.3g}"
        )


def eval_flux(coeffs, q):
    """Evaluate the full nodal flux C(x, q) for a vector field q."""
    g = coeffs.grid
    qv = q.values
    real_sq = np.sum(np.abs(qv) ** 2, axis=0)
    _check_overflow(coeffs, real_sq)
    s = symmetrize(coeffs).s
    out = coeffs.gamma.values * qv
    for j in range(g.n):
        acc = np.zeros(g.shape, dtype=qv.dtype)
        for k in range(g.n):
            for l in range(g.n):
                acc = acc + s[j, k, l] * qv[k] * qv[l]
        out[j] = out[j] + acc
    if coeffs.remainder == "cubic":
        out = out + coeffs.r.values * real_sq * qv
    return mesh.VectorField(g, out)


class FluxEvaluator:
    """Face-centered flux kernels shared by the wave and elliptic solvers.

    Coefficients are averaged onto face midpoints once; the linear part uses
    only the exact mid-difference along the face normal, which keeps the
    assembled operator symmetric.
    """

    def __init__(self, coeffs):
        self.coeffs = coeffs
        g = coeffs.grid
        self.grid = g
        self.h = g.h
        s = symmetrize(coeffs).s
        self.gamma_faces = [
            mesh.face_avg(coeffs.gamma.values, d) for d in range(g.n)
        ]
        self.s_faces = [mesh.face_avg(s, 3 + d) for d in range(g.n)]
        self.has_quad = coeffs.has_quadratic()
        if coeffs.remainder == "cubic":
            self.r_faces = [mesh.face_avg(coeffs.r.values, d) for d in range(g.n)]
        else:
            self.r_faces = None

    def linear_fluxes(self, u):
        """gamma times the normal mid-difference, per axis."""
        return [
            self.gamma_faces[d] * mesh.face_diff(u, d, self.h, self.grid.n)
            for d in range(self.grid.n)
        ]

    def face_gradients(self, u):
        return [
            mesh.face_gradient(u, d, self.h, self.grid.n)
            for d in range(self.grid.n)
        ]

    def bilinear_fluxes(self, qa_faces, qb_faces):
        """Symmetric bilinear quadratic flux: P(qa+qb) - P(qa) - P(qb).

        Takes precomputed face gradients; returns the d-component at the
        d-faces for each axis d.
        """
        n = self.grid.n
        out = []
        for d in range(n):
            s = self.s_faces[d][d]
            qa = qa_faces[d]
            qb = qb_faces[d]
            acc = np.zeros(qa.shape[1:], dtype=np.result_type(qa, qb))
            for k in range(n):
                for l in range(n):
                    acc = acc + s[k, l] * (qa[k] * qb[l] + qb[k] * qa[l])
            out.append(acc)
        return out

    def quadratic_fluxes(self, q_faces):
        """P(x, q) at faces from precomputed face gradients."""
        n = self.grid.n
        out = []
        for d in range(n):
            s = self.s_faces[d][d]
            q = q_faces[d]
            acc = np.zeros(q.shape[1:], dtype=q.dtype)
            for k in range(n):
                for l in range(n):
                    acc = acc + s[k, l] * q[k] * q[l]
            out.append(acc)
        return out

    def cubic_fluxes(self, q_faces):
        """r |q|^2 q_d at the d-faces."""
        out = []
        for d in range(self.grid.n):
            q = q_faces[d]
            mag = np.sum(np.abs(q) ** 2, axis=0)
            out.append(self.r_faces[d] * mag * q[d])
        return out

    def full_fluxes(self, u, check_overflow=True):
        """Complete nonlinear flux at faces; raises past the validity radius."""
        fluxes = self.linear_fluxes(u)
        needs_grad = self.has_quad or self.r_faces is not None
        if needs_grad or check_overflow:
            q_faces = self.face_gradients(u)
            if check_overflow:
                qmax_sq = max(
                    float(np.max(np.sum(np.abs(q) ** 2, axis=0)))
                    for q in q_faces
                )
                if qmax_sq > self.coeffs.h_valid**2:
                    raise FluxOverflowError(
                        f"gradient magnitude {np.sqrt(qmax_sq):.3g} exceeds "
                        f"validity radius {self.coeffs.h_valid:.3g}"
                    )
        if self.has_quad:
            quad = self.quadratic_fluxes(q_faces)
            fluxes = [f + p for f, p in zip(fluxes, quad)]
        if self.r_faces is not None:
            cub = self.cubic_fluxes(q_faces)
            fluxes = [f + c for f, c in zip(fluxes, cub)]
        return fluxes

    def linear_divergence(self, u):
        """div(gamma grad u) on nodes (zero on the boundary shell)."""
        return mesh.face_divergence(self.linear_fluxes(u), self.h, self.grid.n)

    def pair_source(self, ua, ub):
        """div of the bilinear flux of two fields, on nodes."""
        qa = self.face_gradients(ua)
        qb = self.face_gradients(ub)
        return mesh.face_divergence(self.bilinear_fluxes(qa, qb), self.h, self.grid.n)


# ---------------------------------------------------------------------------
# synthesis recipes


def _bump(grid, center, radius):
    """Squared raised-cosine bump, exactly zero outside the radius."""
    xs = grid.meshgrid()
    rho_sq = sum((x - c) ** 2 for x, c in zip(xs, center))
    rho = np.sqrt(rho_sq)
    prof = np.where(rho < radius, 0.5 * (1.0 + np.cos(np.pi * rho / radius)), 0.0)
    return prof**2


def _clip_radius(grid, center, radius):
    # keep the support clear of the mandated boundary margin
    room = min(min(c, 1.0 - c) for c in center) - (SUPPORT_MARGIN + 1) * grid.h
    radius = min(radius, room)
    if radius < 2 * grid.h:
        raise ValueError(
            "grid too coarse to fit a bump inside the boundary margin"
        )
    return radius


def _seeded_center(rng, grid):
    lo = 0.35
    return tuple(rng.uniform(lo, 1.0 - lo, size=grid.n))


RECIPES = ("constant_gamma", "smooth_gamma_bump", "single_c_bump", "random_c_field")


def synth_coeffs(grid, recipe, seed=0, **params):
    """Deterministic coefficient synthesis; same seed, same bits.

    Recipes: constant_gamma, smooth_gamma_bump, single_c_bump,
    random_c_field. Common params: gamma0, amplitude, radius, remainder
    ('none'|'cubic'), r_amplitude, h_valid.
    """
    if recipe not in RECIPES:
        raise ValueError(f"unknown recipe {recipe!r}; choose from {RECIPES}")
    rng = np.random.default_rng(seed)
    n = grid.n
    gamma0 = params.get("gamma0", 1.0)
    amplitude = params.get("amplitude", 1.0)
    h_valid = params.get("h_valid", 1.0)
    gamma_vals = np.full(grid.shape, float(gamma0))
    c = np.zeros((n, n, n) + grid.shape)

    if recipe == "smooth_gamma_bump":
        center = params.get("center", _seeded_center(rng, grid))
        radius = _clip_radius(grid, center, params.get("radius", 0.3))
        gamma_vals = gamma_vals + params.get("gamma_amplitude", 0.5) * _bump(
            grid, center, radius
        )
    elif recipe == "single_c_bump":
        j, k, l = params.get("component", (0, 0, 1 % n))
        center = params.get("center", _seeded_center(rng, grid))
        radius = _clip_radius(grid, center, params.get("radius", 0.3))
        c[j, k, l] = amplitude * _bump(grid, center, radius)
        if params.get("gamma_amplitude", 0.0):
            gcenter = params.get("gamma_center", (0.5,) * n)
            gradius = _clip_radius(grid, gcenter, params.get("gamma_radius", 0.35))
            gamma_vals = gamma_vals + params["gamma_amplitude"] * _bump(
                grid, gcenter, gradius
            )
    elif recipe == "random_c_field":
        bumps = params.get("num_bumps", 2)
        for j in range(n):
            for k in range(n):
                for l in range(n):
                    for _ in range(bumps):
                        center = _seeded_center(rng, grid)
                        radius = _clip_radius(
                            grid, center, rng.uniform(0.15, 0.3)
                        )
                        amp = amplitude * rng.uniform(-1.0, 1.0)
                        c[j, k, l] += amp * _bump(grid, center, radius)
        if params.get("gamma_amplitude", 0.0):
            center = _seeded_center(rng, grid)
            radius = _clip_radius(grid, center, 0.3)
            gamma_vals = gamma_vals + params["gamma_amplitude"] * _bump(
                grid, center, radius
            )

    gamma = mesh.ScalarField(grid, gamma_vals)
    remainder = params.get("remainder", "none")
    r = None
    if remainder == "cubic":
        center = params.get("r_center", (0.5,) * n)
        radius = _clip_radius(grid, center, params.get("r_radius", 0.3))
        r = mesh.ScalarField(
            grid, params.get("r_amplitude", 1.0) * _bump(grid, center, radius)
        )
    return CoefficientSet(gamma, c, remainder=remainder, r=r, h_valid=h_valid)


# ---------------------------------------------------------------------------
# serialization


def save_coeffs(coeffs, outdir):
    """One snapshot file per field plus a manifest JSON."""
    os.makedirs(outdir, exist_ok=True)
    g = coeffs.grid
    entries = {}
    mesh.save_snapshot(coeffs.gamma, os.path.join(outdir, "gamma.f64"), role="gamma")
    entries["gamma"] = "gamma.f64"
    comp_files = {}
    for j in range(g.n):
        for k in range(g.n):
            for l in range(g.n):
                name = f"c_{j}{k}{l}.f64"
                mesh.save_snapshot(
                    mesh.ScalarField(g, coeffs.c[j, k, l]),
                    os.path.join(outdir, name),
                    role="quadratic",
                )
                comp_files[f"{j}{k}{l}"] = name
    entries["c"] = comp_files
    if coeffs.remainder == "cubic":
        mesh.save_snapshot(coeffs.r, os.path.join(outdir, "r.f64"), role="remainder")
        entries["r"] = "r.f64"
    manifest = {
        "n": g.n,
        "dims": g.dims,
        "h": g.h,
        "remainder": coeffs.remainder,
        "h_valid": coeffs.h_valid,
        "fields": entries,
    }
    with open(os.path.join(outdir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_coeffs(outdir):
    """Read a coefficient directory written by save_coeffs."""
    with open(os.path.join(outdir, "manifest.json")) as fh:
        manifest = json.load(fh)
    grid = mesh.make_grid(manifest["n"], manifest["dims"])
    gamma, _ = mesh.load_snapshot(os.path.join(outdir, manifest["fields"]["gamma"]))
    n = grid.n
    c = np.zeros((n, n, n) + grid.shape)
    for key, name in manifest["fields"]["c"].items():
        j, k, l = (int(ch) for ch in key)
        fld, _ = mesh.load_snapshot(os.path.join(outdir, name))
        c[j, k, l] = fld.values
    r = None
    if manifest["remainder"] == "cubic":
        r, _ = mesh.load_snapshot(os.path.join(outdir, manifest["fields"]["r"]))
    return CoefficientSet(
        gamma, c, remainder=manifest["remainder"], r=r, h_valid=manifest["h_valid"]
    )
