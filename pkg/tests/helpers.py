"""Shared test utilities."""

import numpy as np

from waveinv import forward, mesh


def smooth_window(t, t_end):
    """C^3 compatible ramp: sin^4 inside [0, t_end], zero after."""
    t = np.asarray(t)
    w = np.sin(np.pi * np.clip(t / t_end, 0.0, 1.0)) ** 4
    return np.where(t < t_end, w, 0.0)


def probe_trace(grid, coeffs_set, t_final, spatial_fn=None, t_end=None,
                amplitude=1.0, dt_factor=1.0):
    """Windowed separable boundary trace on the stable time grid."""
    num_steps, dt = forward.make_time_grid(coeffs_set, t_final, dt_factor)
    times = dt * np.arange(num_steps)
    prof = amplitude * smooth_window(times, t_end if t_end is not None else t_final)
    if spatial_fn is None:
        spatial_fn = lambda *xs: 1.0 + 0.4 * xs[0] - 0.2 * xs[-1]
    spatial = mesh.ScalarField.from_function(grid, spatial_fn)
    return mesh.BoundaryTrace.from_profile(grid, prof, spatial, dt)


def fit_slope(xs, ys):
    """Least-squares slope of log(ys) against log(xs)."""
    xs = np.log(np.asarray(xs, dtype=float))
    ys = np.log(np.asarray(ys, dtype=float))
    return np.polyfit(xs, ys, 1)[0]


def rel_err(approx, exact, floor=1e-300):
    """Relative error with a denominator floor."""
    num = np.linalg.norm(np.ravel(approx - exact))
    den = max(np.linalg.norm(np.ravel(exact)), floor)
    return num / den
