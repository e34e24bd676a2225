"""Uniform unit-box grids, fields, and discrete calculus.

All modules share one geometry: the closed unit box [0,1]^n (n = 2 or 3)
sampled on a uniform lattice with the same node count along every axis.
Boundary nodes are the outermost lattice shell; node ids are C-order flat
indices into the full lattice.
"""

import json

import numpy as np


class Grid:
    """Uniform lattice on [0,1]^n with spacing h = 1/(dims-1)."""

    def __init__(self, n, dims):
        if n not in (2, 3):
            raise ValueError(f"dimension must be 2 or 3, got {n}")
        if dims < 4:
            raise ValueError(f"need at least 4 nodes per axis, got {dims}")
        self.n = int(n)
        self.dims = int(dims)
        self.h = 1.0 / (dims - 1)
        self.shape = (self.dims,) * self.n

    @property
    def num_nodes(self):
        return self.dims**self.n

    def axis_coords(self):
        """Return the shared 1-d coordinate array for any axis."""
        return np.linspace(0.0, 1.0, self.dims)

    def meshgrid(self):
        """Return n coordinate arrays of full lattice shape."""
        ax = self.axis_coords()
        return np.meshgrid(*([ax] * self.n), indexing="ij")

    def boundary_mask(self):
        """Boolean lattice mask, True on the outermost shell."""
        mask = np.zeros(self.shape, dtype=bool)
        for d in range(self.n):
            sl = [slice(None)] * self.n
            sl[d] = 0
            mask[tuple(sl)] = True
            sl[d] = -1
            mask[tuple(sl)] = True
        return mask

    def interior_mask(self):
        return ~self.boundary_mask()

    def boundary_ids(self):
        """Flat C-order node ids of boundary nodes, ascending."""
        return np.flatnonzero(self.boundary_mask().ravel())

    def interior_ids(self):
        return np.flatnonzero(self.interior_mask().ravel())

    def face_slice(self, axis, side):
        """Index tuple selecting one boundary face (side 0 -> x=0, 1 -> x=1)."""
        sl = [slice(None)] * self.n
        sl[axis] = 0 if side == 0 else -1
        return tuple(sl)

    def __eq__(self, other):
        return (
            isinstance(other, Grid)
            and self.n == other.n
            and self.dims == other.dims
        )

    def __repr__(self):
        return f"Grid(n={self.n}, dims={self.dims})"


def make_grid(n, dims):
    """Build the shared uniform grid; validates n and dims."""
    return Grid(n, dims)


def _frozen(values, dtype=None):
    arr = np.array(values, dtype=dtype, order="C")
    arr.setflags(write=False)
    return arr


class ScalarField:
    """Immutable nodal scalar field on a grid."""

    def __init__(self, grid, values):
        values = np.asarray(values)
        if values.shape != grid.shape:
            raise ValueError(
                f"values shape {values.shape} does not match grid {grid.shape}"
            )
        self.grid = grid
        self.values = _frozen(values)

    @classmethod
    def zeros(cls, grid, complex=False):
        dtype = np.complex128 if complex else np.float64
        return cls(grid, np.zeros(grid.shape, dtype=dtype))

    @classmethod
    def from_function(cls, grid, fn):
        """Sample fn(x1, ..., xn) on the lattice."""
        return cls(grid, fn(*grid.meshgrid()))

    @property
    def is_complex(self):
        return np.iscomplexobj(self.values)

    def __repr__(self):
        return f"ScalarField(grid={self.grid}, dtype={self.values.dtype})"


class VectorField:
    """Immutable nodal vector field; component axis leads."""

    def __init__(self, grid, values):
        values = np.asarray(values)
        if values.shape != (grid.n,) + grid.shape:
            raise ValueError(
                f"values shape {values.shape} does not match (n,)+grid shape"
            )
        self.grid = grid
        self.values = _frozen(values)

    @classmethod
    def zeros(cls, grid, complex=False):
        dtype = np.complex128 if complex else np.float64
        return cls(grid, np.zeros((grid.n,) + grid.shape, dtype=dtype))

    def component(self, d):
        return self.values[d]

    def __repr__(self):
        return f"VectorField(grid={self.grid}, dtype={self.values.dtype})"


class TimeSeries:
    """Uniformly sampled time series; leading axis is time."""

    def __init__(self, values, dt, t0=0.0):
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.values = _frozen(values)
        self.dt = float(dt)
        self.t0 = float(t0)

    @property
    def num_steps(self):
        return self.values.shape[0]

    def times(self):
        return self.t0 + self.dt * np.arange(self.num_steps)


class BoundaryTrace:
    """Time series of values on the boundary shell, stored per node id."""

    def __init__(self, grid, values, dt, t0=0.0):
        values = np.asarray(values)
        nb = grid.boundary_ids().size
        if values.ndim != 2 or values.shape[1] != nb:
            raise ValueError(
                f"trace shape {values.shape} does not match {nb} boundary nodes"
            )
        self.grid = grid
        self.values = _frozen(values)
        self.dt = float(dt)
        self.t0 = float(t0)

    @classmethod
    def zeros(cls, grid, num_steps, dt, complex=False):
        dtype = np.complex128 if complex else np.float64
        nb = grid.boundary_ids().size
        return cls(grid, np.zeros((num_steps, nb), dtype=dtype), dt)

    @classmethod
    def from_profile(cls, grid, profile, spatial, dt):
        """Separable trace profile(t) * spatial(boundary nodes).

        profile: 1-d array over time steps; spatial: ScalarField or flat
        boundary-node array.
        """
        if isinstance(spatial, ScalarField):
            sp = spatial.values.ravel()[grid.boundary_ids()]
        else:
            sp = np.asarray(spatial)
        profile = np.asarray(profile)
        return cls(grid, np.multiply.outer(profile, sp), dt)

    @property
    def num_steps(self):
        return self.values.shape[0]

    def times(self):
        return self.t0 + self.dt * np.arange(self.num_steps)

    def frame_full(self, k):
        """Scatter step k into a full lattice array (zero interior)."""
        out = np.zeros(self.grid.shape, dtype=self.values.dtype)
        out.ravel()[self.grid.boundary_ids()] = self.values[k]
        return out


# ---------------------------------------------------------------------------
# nodal calculus


def gradient(field):
    """Nodal gradient, centered interior, one-sided second order at edges."""
    g = field.grid
    comps = np.gradient(field.values, g.h, edge_order=2)
    if g.n == 1:
        comps = [comps]
    return VectorField(g, np.stack(comps))


def divergence(vfield):
    """Nodal divergence of a vector field, same stencils as gradient."""
    g = vfield.grid
    out = np.zeros(g.shape, dtype=vfield.values.dtype)
    for d in range(g.n):
        out = out + np.gradient(vfield.values[d], g.h, axis=d, edge_order=2)
    return ScalarField(g, out)


def _trapezoid_weights_1d(dims, h):
    w = np.full(dims, h)
    w[0] = w[-1] = 0.5 * h
    return w


def quadrature_weights(grid):
    """Tensor-product trapezoid weights over the full lattice."""
    w1 = _trapezoid_weights_1d(grid.dims, grid.h)
    w = w1
    for _ in range(grid.n - 1):
        w = np.multiply.outer(w, w1)
    return w


def integrate(field):
    """Trapezoid integral over the box; exact on multilinear polynomials."""
    return np.sum(quadrature_weights(field.grid) * field.values)


def face_quadrature_weights(grid):
    """Trapezoid weights for one boundary face, shape of the (n-1)-d face."""
    w1 = _trapezoid_weights_1d(grid.dims, grid.h)
    if grid.n == 2:
        return w1
    return np.multiply.outer(w1, w1)


def normal_trace(vfield, axis, side):
    """Outward normal component of a vector field on one boundary face."""
    g = vfield.grid
    face = vfield.values[axis][g.face_slice(axis, side)]
    sign = -1.0 if side == 0 else 1.0
    return sign * face


def boundary_integrate(vfield, weight=None):
    """Surface integral of F . nu over the whole boundary.

    weight, if given, is a ScalarField multiplied in before integration.
    """
    g = vfield.grid
    wq = face_quadrature_weights(g)
    total = 0.0
    for axis in range(g.n):
        for side in (0, 1):
            tr = normal_trace(vfield, axis, side)
            if weight is not None:
                tr = tr * weight.values[g.face_slice(axis, side)]
            total = total + np.sum(wq * tr)
    return total


# ---------------------------------------------------------------------------
# face-centered calculus (conservative stencils share these)


def _spatial_axis(values, d, n):
    """Absolute axis index of spatial axis d; spatial axes trail."""
    if n is None:
        n = values.ndim
    return values.ndim - n + d


def face_diff(values, d, h, n=None):
    """Difference along spatial axis d at face midpoints: (u[i+1]-u[i])/h.

    Leading axes beyond the last n are treated as batch axes.
    """
    ax = _spatial_axis(values, d, n)
    upper = [slice(None)] * values.ndim
    lower = [slice(None)] * values.ndim
    upper[ax] = slice(1, None)
    lower[ax] = slice(None, -1)
    return (values[tuple(upper)] - values[tuple(lower)]) / h


def face_avg(values, d, n=None):
    """Arithmetic mean along spatial axis d at face midpoints."""
    ax = _spatial_axis(values, d, n)
    upper = [slice(None)] * values.ndim
    lower = [slice(None)] * values.ndim
    upper[ax] = slice(1, None)
    lower[ax] = slice(None, -1)
    return 0.5 * (values[tuple(upper)] + values[tuple(lower)])


def face_gradient(values, d, h, n=None):
    """Full gradient vector at the midpoints of axis-d faces.

    Component d is the exact mid-difference; tangential components average
    the nodal centered gradient onto the face. Components stack on a new
    leading axis.
    """
    if n is None:
        n = values.ndim
    comps = []
    for t in range(n):
        if t == d:
            comps.append(face_diff(values, d, h, n))
        else:
            nodal = np.gradient(
                values, h, axis=_spatial_axis(values, t, n), edge_order=2
            )
            comps.append(face_avg(nodal, d, n))
    return np.stack(comps)


def face_divergence(fluxes, h, n=None):
    """Divergence of face fluxes onto nodes; boundary entries stay zero.

    fluxes[d] has one fewer entry along spatial axis d (face midpoints).
    """
    if n is None:
        n = fluxes[0].ndim
    ndim = fluxes[0].ndim
    shape = list(fluxes[0].shape)
    shape[ndim - n] += 1
    dtype = np.result_type(*[f.dtype for f in fluxes])
    out = np.zeros(shape, dtype=dtype)
    core = [slice(None)] * (ndim - n) + [slice(1, -1)] * n
    core = tuple(core)
    for d in range(n):
        ax = ndim - n + d
        take_hi = list(core)
        take_lo = list(core)
        take_hi[ax] = slice(1, None)
        take_lo[ax] = slice(None, -1)
        out[core] += (fluxes[d][tuple(take_hi)] - fluxes[d][tuple(take_lo)]) / h
    return out


# ---------------------------------------------------------------------------
# snapshots


def save_snapshot(field, path, role="state"):
    """Write raw little-endian float64 values plus a JSON sidecar."""
    g = field.grid
    vals = np.ascontiguousarray(field.values)
    is_complex = np.iscomplexobj(vals)
    raw = vals.view(np.float64) if is_complex else vals.astype(np.float64)
    raw.astype("<f8").tofile(path)
    sidecar = {
        "n": g.n,
        "dims": g.dims,
        "h": g.h,
        "complex": bool(is_complex),
        "role": role,
    }
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_snapshot(path):
    """Read a snapshot written by save_snapshot; returns (field, role)."""
    with open(str(path) + ".json") as fh:
        sidecar = json.load(fh)
    grid = make_grid(sidecar["n"], sidecar["dims"])
    raw = np.fromfile(path, dtype="<f8")
    if sidecar["complex"]:
        vals = raw.view(np.complex128).reshape(grid.shape)
    else:
        vals = raw.reshape(grid.shape)
    return ScalarField(grid, vals), sidecar["role"]
