"""Step-by-step driver around scipy's explicit Runge-Kutta solvers.

The solution is handed to a callback at every requested output time instead
of being stored, which keeps memory flat for long runs of large systems.
"""

from __future__ import annotations

import numpy as np
from scipy.integrate import DOP853, RK45

from .errors import IntegrationError

METHODS = {"RK45": RK45, "DOP853": DOP853}


def check_time_grid(times) -> np.ndarray:
    t = np.asarray(times, dtype=float)
    if t.ndim != 1 or t.size < 1:
        raise ValueError("time grid must be a non-empty 1-D array")
    if t[0] != 0.0:
        raise ValueError("time grid must start at 0")
    if np.any(np.diff(t) <= 0):
        raise ValueError("time grid must be strictly increasing")
    return t


def integrate(fun, y0, times, callback, rtol=1e-8, atol=1e-10, method="RK45", max_step=np.inf,
              fixed_step=None):
    """Integrate ``dy/dt = fun(t, y)`` and call ``callback(i, t_i, y(t_i))``.

    ``method="fixed"`` uses classical RK4 with ``fixed_step`` (the grid
    spacing must be an integer multiple of it).
    """
    times = np.asarray(times, dtype=float)
    y0 = np.asarray(y0)
    callback(0, times[0], y0)
    if times.size == 1:
        return
    if method == "fixed":
        _integrate_rk4(fun, y0, times, callback, fixed_step)
        return
    try:
        cls = METHODS[method]
    except KeyError:
        raise ValueError(f"unknown integration method {method!r}") from None
    solver = cls(fun, times[0], y0, times[-1], rtol=rtol, atol=atol, max_step=max_step)
    k = 1
    while k < times.size:
        msg = solver.step()
        if solver.status == "failed":
            raise IntegrationError(msg or "integration failed", solver.t)
        if k < times.size and times[k] <= solver.t:
            dense = solver.dense_output()
            while k < times.size and times[k] <= solver.t:
                y = solver.y if times[k] == solver.t else dense(times[k])
                callback(k, times[k], y)
                k += 1
        if solver.status == "finished" and k < times.size:
            raise IntegrationError("integrator stopped before the end of the grid", solver.t)


def _integrate_rk4(fun, y, times, callback, h):
    if h is None or h <= 0:
        raise ValueError("fixed-step integration needs a positive step")
    t = times[0]
    for k in range(1, times.size):
        span = times[k] - t
        n = max(1, int(round(span / h)))
        dt = span / n
        for _ in range(n):
            k1 = fun(t, y)
            k2 = fun(t + dt / 2, y + dt / 2 * k1)
            k3 = fun(t + dt / 2, y + dt / 2 * k2)
            k4 = fun(t + dt, y + dt * k3)
            y = y + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            t += dt
        t = times[k]
        callback(k, t, y)
