"""Adaptive TR-BDF2 for stiff systems with zero-crossing events.

A step of size ``h`` is a trapezoidal stage to ``t + g h`` followed by a
BDF2 stage to ``t + h`` (``g = 2 - sqrt 2``); both stages share the
iteration matrix ``I - d h J`` with ``d = g / 2``.  The embedded third-order
companion gives the local error estimate, which is filtered through the same
matrix so that stiff components do not spoil step-size control.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.optimize import brentq

log = logging.getLogger(__name__)

GAMMA = 2.0 - math.sqrt(2.0)
D = GAMMA / 2.0
W = math.sqrt(2.0) / 4.0
# stage weights of the main (B) and embedded (BHAT) solutions
B = np.array([W, W, D])
BHAT = np.array([(1.0 - W) / 3.0, (3.0 * W + 1.0) / 3.0, D / 3.0])
ERR = B - BHAT

REL_TOL_FLOOR = 1.0e-12


class IntegrationError(RuntimeError):
    """Step size collapsed or Newton iterations failed irrecoverably."""


@dataclass
class Tolerances:
    abs_tol: float = 7.0e-8
    rel_tol: float = 2.0e-14
    scale: np.ndarray | None = None  # characteristic size per component

    def __post_init__(self):
        if not (self.abs_tol > 0 and self.rel_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.rel_tol < REL_TOL_FLOOR:
            log.info("rel_tol %.3g below round-off floor; using %.3g", self.rel_tol, REL_TOL_FLOOR)
            self.rel_tol = REL_TOL_FLOOR

    def weights(self, y):
        scale = 1.0 if self.scale is None else self.scale
        return self.abs_tol * scale + self.rel_tol * np.abs(y)


def color_columns(pattern) -> list[np.ndarray]:
    """Greedy grouping of structurally orthogonal columns."""
    P = sp.csc_matrix(pattern, dtype=bool)
    n = P.shape[1]
    rows_of = [P.indices[P.indptr[j]:P.indptr[j + 1]] for j in range(n)]
    groups: list[list[int]] = []
    used: list[set] = []
    for j in range(n):
        rj = set(rows_of[j].tolist())
        for g, u in zip(groups, used):
            if not (u & rj):
                g.append(j)
                u |= rj
                break
        else:
            groups.append([j])
            used.append(set(rj))
    return [np.array(g) for g in groups]


def fd_jacobian(fun, t, y, f0, groups, pattern, scale):
    n = len(y)
    J = np.zeros((n, n))
    P = sp.csc_matrix(pattern, dtype=bool)
    ref = np.maximum(np.abs(y), scale if scale is not None else 1.0)
    step = math.sqrt(np.finfo(float).eps) * ref
    for cols in groups:
        yp = y.copy()
        hcol = (y[cols] + step[cols]) - y[cols]
        yp[cols] += hcol
        df = fun(t, yp) - f0
        for j, hj in zip(cols, hcol):
            rows = P.indices[P.indptr[j]:P.indptr[j + 1]]
            J[rows, j] = df[rows] / hj
    return J


@dataclass
class StepResult:
    y_new: np.ndarray
    f_new: np.ndarray
    stages: tuple  # (y0, z1, y2) stage states
    slopes: tuple  # (f0, f1, f2)
    error: float
    converged: bool


class TRBDF2:
    """Stateful driver holding the Jacobian and its factorization."""

    def __init__(self, fun: Callable, n: int, tol: Tolerances, pattern=None, newton_tol: float = 0.03,
                 max_newton: int = 8):
        self.fun = fun
        self.n = n
        self.tol = tol
        self.pattern = sp.csc_matrix(np.ones((n, n), dtype=bool)) if pattern is None else sp.csc_matrix(pattern)
        self.groups = color_columns(self.pattern)
        self.newton_tol = newton_tol
        self.max_newton = max_newton
        self.J = None
        self.lu = None
        self.lu_h = None
        self.n_rhs = 0
        self.n_jac = 0
        self.n_lu = 0

    def rhs(self, t, y):
        self.n_rhs += 1
        return self.fun(t, y)

    def update_jacobian(self, t, y, f):
        self.J = fd_jacobian(self.rhs, t, y, f, self.groups, self.pattern, self.tol.scale)
        self.n_jac += 1
        self.lu = None

    def _factor(self, h):
        if self.lu is None or self.lu_h != h:
            self.lu = sla.lu_factor(np.eye(self.n) - D * h * self.J, check_finite=False)
            self.lu_h = h
            self.n_lu += 1
        return self.lu

    def _newton(self, t, rhs_const, z, h, wt):
        """Solve ``z - d h f(t, z) = rhs_const`` by simplified Newton."""
        lu = self._factor(h)
        rate = None
        prev = None
        for _ in range(self.max_newton):
            try:
                fz = self.rhs(t, z)
            except (ArithmeticError, FloatingPointError, ValueError) as exc:
                log.debug("rhs failed inside Newton: %s", exc)
                return z, None, False
            if not np.all(np.isfinite(fz)):
                return z, None, False
            res = rhs_const + D * h * fz - z
            dz = sla.lu_solve(lu, res, check_finite=False)
            z = z + dz
            nrm = np.max(np.abs(dz) / wt)
            if prev is not None:
                rate = nrm / prev
                if rate >= 0.9:
                    return z, None, False
            if nrm <= self.newton_tol or (rate is not None and rate / (1 - rate) * nrm <= self.newton_tol):
                try:
                    fz = self.rhs(t, z)
                except (ArithmeticError, FloatingPointError, ValueError):
                    return z, None, False
                return z, fz, bool(np.all(np.isfinite(fz)))
            prev = nrm
        return z, None, False

    def step(self, t, y, f0, h) -> StepResult:
        wt = self.tol.weights(y)
        # trapezoidal stage
        z1_guess = y + GAMMA * h * f0
        z1, f1, ok = self._newton(t + GAMMA * h, y + D * h * f0, z1_guess, h, wt)
        if not ok:
            return StepResult(y, f0, (), (), np.inf, False)
        # BDF2 stage
        y2_guess = y + h * ((1 - W) * f0 + W * f1)  # cheap predictor
        y2, f2, ok = self._newton(t + h, y + W * h * (f0 + f1), y2_guess, h, wt)
        if not ok:
            return StepResult(y, f0, (), (), np.inf, False)
        est = h * (ERR[0] * f0 + ERR[1] * f1 + ERR[2] * f2)
        est = sla.lu_solve(self._factor(h), est, check_finite=False)
        wt_new = np.maximum(wt, self.tol.weights(y2))
        err = float(np.max(np.abs(est) / wt_new))
        return StepResult(y2, f2, (y, z1, y2), (f0, f1, f2), err, True)


def hermite(t0, y0, f0, t1, y1, f1, t):
    """Cubic Hermite dense output on ``[t0, t1]``."""
    h = t1 - t0
    s = (t - t0) / h
    h00 = 2 * s ** 3 - 3 * s ** 2 + 1
    h10 = s ** 3 - 2 * s ** 2 + s
    h01 = -2 * s ** 3 + 3 * s ** 2
    h11 = s ** 3 - s ** 2
    return h00 * y0 + h10 * h * f0 + h01 * y1 + h11 * h * f1


def locate_crossings(t0, y0, f0, t1, y1, f1, event_fn, g0, g1, xtol):
    """Crossing time of every component with ``g0 > 0 >= g1`` via the dense output."""
    found = []
    for k in np.flatnonzero((g0 > 0) & (g1 <= 0)):
        if g1[k] == 0.0:
            found.append((t1, int(k)))
            continue
        gk = lambda t: event_fn(t, hermite(t0, y0, f0, t1, y1, f1, t))[k]
        ga, gb = gk(t0), gk(t1)
        if ga > 0 and gb < 0:
            tc = brentq(gk, t0, t1, xtol=xtol, rtol=4 * np.finfo(float).eps)
        else:  # interpolant disagrees with the endpoints; fall back to linear
            tc = t0 + (t1 - t0) * g0[k] / (g0[k] - g1[k])
        found.append((tc, int(k)))
    found.sort()
    return found


@dataclass
class IntegrationStats:
    steps: int = 0
    rejected: int = 0
    newton_failures: int = 0
    events: list = field(default_factory=list)


def integrate(solver: TRBDF2, t0: float, y0: np.ndarray, t_end: float, h0: float,
              stop_times=(), event_fn=None, on_event=None, on_step=None, on_stop=None,
              h_max: float | None = None, stop_when=None) -> tuple[float, np.ndarray, IntegrationStats]:
    """Advance from ``t0`` to ``t_end`` landing exactly on ``stop_times``.

    ``event_fn(t, y)`` returns one value per cell (``+inf`` when inactive);
    when the earliest value crosses zero the step is retaken to the crossing
    time and ``on_event(t, y, k) -> y`` applies the switch.  ``on_step``
    receives every accepted ``StepResult`` with its start time and size.
    """
    stats = IntegrationStats()
    t, y = t0, np.array(y0, dtype=float)
    f = solver.rhs(t, y)
    solver.update_jacobian(t, y, f)
    h = h0
    h_min = 1e-12 * t_end
    h_max = h_max or t_end
    stops = sorted(s for s in stop_times if t0 < s <= t_end)
    if not stops or stops[-1] != t_end:
        stops.append(t_end)
    stop_idx = 0
    fresh_jac = True
    g = event_fn(t, y) if event_fn else None
    while t < t_end:
        target = stops[stop_idx]
        h = min(h, h_max)
        landing = t + h >= target * (1 - 1e-14) or t + 1.05 * h >= target
        h_try = target - t if landing else h
        res = solver.step(t, y, f, h_try)
        if not res.converged:
            stats.newton_failures += 1
            if not fresh_jac:
                solver.update_jacobian(t, y, f)
                fresh_jac = True
            else:
                h = h_try * 0.5
            if h_try * 0.5 < h_min:
                raise IntegrationError(f"step size underflow at t={t:.9g} (Newton failure)")
            continue
        if res.error > 1.0:
            stats.rejected += 1
            h = h_try * max(0.2, 0.9 * res.error ** (-1.0 / 3.0))
            if h < h_min:
                raise IntegrationError(f"step size underflow at t={t:.9g} (error {res.error:.3g})")
            continue
        t_new = target if landing else t + h_try
        if event_fn is not None:
            g_new = event_fn(t_new, res.y_new)
            hits = locate_crossings(t, y, f, t_new, res.y_new, res.f_new, event_fn, g, g_new,
                                    xtol=1e-6 * h_try)
            if hits and hits[0][0] < t_new:
                t_star, k = hits[0]
                h_star = t_star - t
                if h_star > h_min:
                    res_star = solver.step(t, y, f, h_star)
                    if res_star.converged and res_star.error <= 1.0:
                        res, t_new, landing = res_star, t_star, False
                        g_new = event_fn(t_new, res.y_new)
                        hits = [(t_star, k)]
                    else:
                        h = h_star
                        continue
                else:  # crossing at the current time: switch without stepping
                    y = on_event(t, y, k, g)
                    stats.events.append((t, k))
                    f = solver.rhs(t, y)
                    solver.update_jacobian(t, y, f)
                    fresh_jac = True
                    g = event_fn(t, y)
                    continue
            accepted_h = t_new - t
        else:
            hits = []
            accepted_h = t_new - t
        stats.steps += 1
        if on_step is not None:
            on_step(t, accepted_h, res)
        t, y, f = t_new, res.y_new, res.f_new
        fresh_jac = False
        if hits:
            k = hits[0][1]
            y = on_event(t, y, k, g_new)
            stats.events.append((t, k))
            f = solver.rhs(t, y)
            solver.update_jacobian(t, y, f)
            fresh_jac = True
            g = event_fn(t, y)
        elif event_fn is not None:
            g = g_new
        if landing and t == target:
            if on_stop is not None:
                on_stop(t, y)
            stop_idx += 1
        if stop_when is not None and stop_when(t, y):
            break
        factor = min(5.0, max(0.2, 0.9 * max(res.error, 1e-10) ** (-1.0 / 3.0)))
        if not landing or h_try >= h:
            h = max(accepted_h * factor, h_min * 10)
        # refresh the Jacobian periodically for slowly varying nonlinearity
        if stats.steps % 20 == 0 and not fresh_jac:
            solver.update_jacobian(t, y, f)
            fresh_jac = True
    return t, y, stats
