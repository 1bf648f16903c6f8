"""Fine-scale double-porosity solver and its homogenized limit.

Linear regime on the unit square: ``dTheta/dt = div(kappa a grad Theta)``
with ``kappa = eps**2`` inside one disk per ``eps``-cell and 1 elsewhere,
Dirichlet data on the boundary and a constant coefficient ``a``.  Lengths
are in units of the domain side.  The homogenized limit couples

    |Y1| dTheta1/dt = div(a Pi grad Theta1) - 2 pi rho a dTheta2/dr(rho)
    dTheta2/dt = a (1/r) d/dr (r dTheta2/dr),   Theta2(rho) = Theta1(x)

with ``Pi`` the unit-cell tensor and ``rho`` the disk radius in cell units.
Both problems are advanced with backward Euler on identical time grids.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.interpolate import RegularGridInterpolator

from .corrector import CellGeometry, compute_effective_tensor
from .thermo import OmegaRegularization, ThermoProps, enthalpy_from_temp

MIN_NODES_PER_CELL = 8


@dataclass(frozen=True)
class FineScaleProblem:
    """One fine-scale scenario.

    Parameters
    ----------
    eps : float
        Cell size; ``1/eps`` must be an integer.
    nodes_per_cell : int
        Grid cells per ``eps``-cell side (at least 8).
    hole_radius : float
        Disk radius in cell units (``gamma/delta``); 0 disables inclusions.
    a : float
        Constant product ``D * omega'``.
    theta_init, theta_boundary : float
        Uniform initial value and Dirichlet value.
    """

    eps: float
    nodes_per_cell: int = 16
    hole_radius: float = CellGeometry().hole_ratio
    a: float = 1.0
    theta_init: float = 0.0
    theta_boundary: float = 1.0

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if abs(1.0 / self.eps - round(1.0 / self.eps)) > 1e-9 * (1.0 / self.eps):
            raise ValueError(f"1/eps must be an integer, got {1.0 / self.eps!r}")
        if self.nodes_per_cell < MIN_NODES_PER_CELL:
            raise ValueError(f"need at least {MIN_NODES_PER_CELL} nodes per cell side")
        if not 0 <= self.hole_radius < 0.5:
            raise ValueError("hole_radius must lie in [0, 1/2)")
        if not self.a > 0:
            raise ValueError("a must be positive")

    @property
    def n_cells(self) -> int:
        return int(round(1.0 / self.eps))

    @property
    def n(self) -> int:
        """Grid cells per domain side."""
        return self.n_cells * self.nodes_per_cell

    @property
    def h(self) -> float:
        return 1.0 / self.n

    def coordinates(self) -> np.ndarray:
        return (np.arange(self.n) + 0.5) * self.h

    def inclusion_mask(self) -> np.ndarray:
        """``(n, n)`` boolean array, True where ``kappa = eps**2``."""
        local = (np.arange(self.nodes_per_cell) + 0.5) / self.nodes_per_cell - 0.5
        rr = local[:, None] ** 2 + local[None, :] ** 2
        cell = rr < self.hole_radius ** 2
        return np.tile(cell, (self.n_cells, self.n_cells))

    def kappa(self) -> np.ndarray:
        return np.where(self.inclusion_mask(), self.eps ** 2, 1.0)


@dataclass
class Trajectory:
    """Snapshots on a common time grid; ``fields[k]`` belongs to ``times[k]``."""

    times: np.ndarray
    fields: list = field(default_factory=list)


def _harmonic(a, b):
    return 2.0 * a * b / (a + b)


def fine_operator(problem: FineScaleProblem):
    """``(K, b)`` with ``h^2 dTheta/dt = K Theta + b`` on the flattened grid."""
    n, a = problem.n, problem.a
    k = a * problem.kappa()
    idx = np.arange(n * n).reshape(n, n)
    rows, cols, vals = [], [], []
    diag = np.zeros((n, n))
    b = np.zeros((n, n))
    for axis in (0, 1):
        lo = [slice(None)] * 2
        hi = [slice(None)] * 2
        lo[axis] = slice(0, n - 1)
        hi[axis] = slice(1, n)
        lo, hi = tuple(lo), tuple(hi)
        c = _harmonic(k[lo], k[hi])
        rows += [idx[lo].ravel(), idx[hi].ravel()]
        cols += [idx[hi].ravel(), idx[lo].ravel()]
        vals += [c.ravel(), c.ravel()]
        diag[lo] -= c
        diag[hi] -= c
        # Dirichlet faces sit half a cell from the boundary nodes
        for end in (0, n - 1):
            edge = [slice(None)] * 2
            edge[axis] = end
            edge = tuple(edge)
            diag[edge] -= 2.0 * k[edge]
            b[edge] += 2.0 * k[edge] * problem.theta_boundary
    rows.append(idx.ravel())
    cols.append(idx.ravel())
    vals.append(diag.ravel())
    K = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n * n, n * n))
    return K, b.ravel()


def _march(mass, K, b, y0, dt, times):
    """Backward Euler ``mass (y' ) = K y + b`` with snapshots at ``times``."""
    steps = [int(round(t / dt)) for t in times]
    if any(not math.isclose(s * dt, t, rel_tol=1e-9, abs_tol=1e-15) for s, t in zip(steps, times)):
        raise ValueError("snapshot times must be multiples of dt")
    lu = spla.splu(sp.csc_matrix(sp.diags(mass) - dt * K))
    y = y0.copy()
    out = []
    want = dict(zip(steps, range(len(steps))))
    if 0 in want:
        out.append(y.copy())
    for step in range(1, max(steps) + 1):
        y = lu.solve(mass * y + dt * b)
        if step in want:
            out.append(y.copy())
    return out


def solve_fine(problem: FineScaleProblem, times, dt: float) -> Trajectory:
    """Fine-scale field at each of ``times`` (returned as ``(n, n)`` arrays)."""
    times = np.asarray(sorted(times), dtype=float)
    K, b = fine_operator(problem)
    n = problem.n
    mass = np.full(n * n, problem.h ** 2)
    y0 = np.full(n * n, problem.theta_init)
    fields = _march(mass, K, b, y0, dt, times)
    return Trajectory(times, [f.reshape(n, n) for f in fields])


@dataclass
class HomogenizedSolution:
    """Macro field on a node grid including the boundary, plus shell values per node."""

    times: np.ndarray
    x: np.ndarray  # macro node coordinates (with boundary)
    r: np.ndarray  # shell centres in cell units
    theta1: list  # (N+1, N+1) arrays
    theta2: list  # (N+1, N+1, n_shell) arrays
    hole_radius: float


def solve_homogenized(times, dt: float, Pi: np.ndarray, Y1_area: float, hole_radius: float, a: float = 1.0,
                      theta_init: float = 0.0, theta_boundary: float = 1.0, n_macro: int = 64,
                      n_shell: int = 12) -> HomogenizedSolution:
    """Backward-Euler solution of the double-porosity limit.

    ``Pi`` is the unit-cell tensor (cell side 1).  The macro problem uses a
    nine-point-free five-point stencil, so only the diagonal of ``Pi`` enters;
    the off-diagonal part vanishes for the centred disk.
    """
    times = np.asarray(sorted(times), dtype=float)
    N = n_macro
    hx = 1.0 / N
    m = N - 1  # interior nodes per side
    nr = n_shell
    per = 1 + nr
    size = m * m * per
    node = np.arange(m * m).reshape(m, m)
    mass = np.empty(size)
    rows, cols, vals = [], [], []
    b = np.zeros(size)

    def add(r_, c_, v_):
        rows.append(np.atleast_1d(r_))
        cols.append(np.atleast_1d(c_))
        vals.append(np.broadcast_to(np.atleast_1d(v_), np.shape(np.atleast_1d(r_))).astype(float))

    macro = node * per
    mass[macro.ravel()] = Y1_area
    # macro five-point stencil, unknowns scaled per unit area
    for axis, pk in ((0, Pi[0, 0]), (1, Pi[1, 1])):
        c = a * pk / hx ** 2
        lo = [slice(None)] * 2
        hi = [slice(None)] * 2
        lo[axis] = slice(0, m - 1)
        hi[axis] = slice(1, m)
        p, q = macro[tuple(lo)].ravel(), macro[tuple(hi)].ravel()
        add(p, q, c)
        add(q, p, c)
        add(p, p, -c)
        add(q, q, -c)
        for end in (0, m - 1):
            edge = [slice(None)] * 2
            edge[axis] = end
            e = macro[tuple(edge)].ravel()
            add(e, e, -c)
            b[e] += c * theta_boundary
    # radial shells, cell-centred with a Dirichlet trace at r = rho
    rho = hole_radius
    dr = rho / nr
    edges = np.arange(nr + 1) * dr
    centres = 0.5 * (edges[1:] + edges[:-1])
    vol = np.pi * np.diff(edges ** 2)
    for j in range(nr):
        mass[(macro + 1 + j).ravel()] = vol[j]
    for j in range(nr - 1):
        c = a * 2 * np.pi * edges[j + 1] / dr
        p, q = (macro + 1 + j).ravel(), (macro + 2 + j).ravel()
        add(p, q, c)
        add(q, p, c)
        add(p, p, -c)
        add(q, q, -c)
    # exchange between the outer shell and the macro value across half a shell
    c = a * 2 * np.pi * rho / (0.5 * dr)
    p, q = (macro + nr).ravel(), macro.ravel()
    add(p, q, c)
    add(q, p, c)
    add(p, p, -c)
    add(q, q, -c)
    K = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(size, size))
    y0 = np.full(size, theta_init)
    fields = _march(mass, K, b, y0, dt, times)
    theta1, theta2 = [], []
    for f in fields:
        f = f.reshape(m, m, per)
        t1 = np.full((N + 1, N + 1), theta_boundary)
        t1[1:-1, 1:-1] = f[..., 0]
        t2 = np.full((N + 1, N + 1, nr), theta_boundary)
        t2[1:-1, 1:-1] = f[..., 1:]
        theta1.append(t1)
        theta2.append(t2)
    return HomogenizedSolution(times, np.linspace(0.0, 1.0, N + 1), centres, theta1, theta2, rho)


def reconstruct(hom: HomogenizedSolution, problem: FineScaleProblem, k: int) -> np.ndarray:
    """Limit field on the fine grid: ``Theta1`` in the matrix, cell-local ``Theta2`` in the disks."""
    xs = problem.coordinates()
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    out = RegularGridInterpolator((hom.x, hom.x), hom.theta1[k])(pts).reshape(X.shape)
    mask = problem.inclusion_mask()
    if not mask.any():
        return out
    eps = problem.eps
    centre = (np.floor(pts[:, 0] / eps) + 0.5) * eps, (np.floor(pts[:, 1] / eps) + 0.5) * eps
    r = np.hypot(pts[:, 0] - centre[0], pts[:, 1] - centre[1]) / eps
    inside = mask.ravel()
    cpts = np.column_stack([centre[0][inside], centre[1][inside]])
    shells = RegularGridInterpolator((hom.x, hom.x), hom.theta2[k])(cpts)
    trace = RegularGridInterpolator((hom.x, hom.x), hom.theta1[k])(cpts)
    prof_r = np.concatenate([hom.r, [hom.hole_radius]])
    prof = np.column_stack([shells, trace])
    ri = np.minimum(r[inside], hom.hole_radius)
    j = np.clip(np.searchsorted(prof_r, ri) - 1, 0, len(prof_r) - 2)
    w = np.clip((ri - prof_r[j]) / (prof_r[j + 1] - prof_r[j]), 0.0, 1.0)
    rows = np.arange(len(ri))
    vals = (1 - w) * prof[rows, j] + w * prof[rows, j + 1]
    flat = out.ravel()
    flat[inside] = vals
    return flat.reshape(X.shape)


def l2_norm(field_values: np.ndarray, h: float) -> float:
    return float(math.sqrt(np.sum(np.asarray(field_values) ** 2) * h * h))


def compare_to_limit(fine: Trajectory, hom: HomogenizedSolution, problem: FineScaleProblem) -> np.ndarray:
    """L2 distance between the fine field and the reconstructed limit at each snapshot."""
    if len(fine.times) != len(hom.times) or not np.allclose(fine.times, hom.times, rtol=1e-12, atol=0):
        raise ValueError("fine and homogenized snapshot times differ")
    return np.array([l2_norm(fine.fields[k] - reconstruct(hom, problem, k), problem.h)
                     for k in range(len(fine.times))])


def heat_kernel_square(x, y, t, a=1.0, theta_init=0.0, theta_boundary=1.0, terms=199):
    """Separation-of-variables solution for uniform data inside a Dirichlet unit square."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    odd = np.arange(1, terms + 1, 2)
    sx = np.sin(np.pi * np.multiply.outer(x, odd))
    sy = np.sin(np.pi * np.multiply.outer(y, odd))
    decay = np.exp(-a * np.pi ** 2 * (odd[:, None] ** 2 + odd[None, :] ** 2) * t)
    coef = 16.0 / (np.pi ** 2 * odd[:, None] * odd[None, :]) * decay
    series = np.einsum("...i,ij,...j->...", sx, coef, sy)
    return theta_boundary + (theta_init - theta_boundary) * series


@dataclass(frozen=True)
class LadderSetup:
    times: tuple = (0.01, 0.02, 0.05)
    dt: float = 5.0e-4
    nodes_per_cell: int = 16
    n_macro: int = 64
    n_shell: int = 12
    a: float = 1.0


def convergence_study(inverse_eps, thermo: ThermoProps | None = None, geom: CellGeometry | None = None,
                      reg: OmegaRegularization | None = None, setup: LadderSetup = LadderSetup(),
                      threads: int = 1, mesh_h: float = 0.02):
    """``(eps, time, l2_error)`` rows for each ``1/eps`` in ``inverse_eps``.

    Initial and boundary data are the enthalpies at ``T_c`` and ``T_a``.
    Errors are reported relative to the data jump so they are dimensionless.
    """
    thermo = thermo or ThermoProps()
    geom = geom or CellGeometry()
    reg = reg or OmegaRegularization.from_props(thermo)
    theta0 = float(enthalpy_from_temp(thermo.T_c, thermo, reg))
    theta_b = float(enthalpy_from_temp(thermo.T_a, thermo, reg))
    unit = CellGeometry(delta=1.0, R_f=geom.R_f / geom.delta, W=geom.W / geom.delta, gamma=geom.hole_ratio)
    tensor = compute_effective_tensor(unit, mesh_h)
    hom = solve_homogenized(setup.times, setup.dt, tensor.Pi, tensor.Y1_area, geom.hole_ratio, setup.a,
                            theta0, theta_b, setup.n_macro, setup.n_shell)
    jump = abs(theta_b - theta0)

    def one(inv):
        prob = FineScaleProblem(1.0 / inv, setup.nodes_per_cell, geom.hole_ratio, setup.a, theta0, theta_b)
        fine = solve_fine(prob, setup.times, setup.dt)
        return compare_to_limit(fine, hom, prob) / jump

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        errors = list(pool.map(one, inverse_eps))
    return [(1.0 / inv, t, e) for inv, errs in zip(inverse_eps, errors) for t, e in zip(setup.times, errs)]
