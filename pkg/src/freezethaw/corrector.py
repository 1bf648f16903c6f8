"""Periodic cell problem on the perforated reference cell.

The unit square minus a centred disk is meshed with a ray/ring layout whose
quads are split into four triangles around their centroid, which keeps the
mesh invariant under the square's reflections and quarter turns.  Correctors
are computed with P1 finite elements; opposite square edges are identified
by eliminating the slave nodes.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


@dataclass(frozen=True)
class CellGeometry:
    """Reference-cell and tree geometry (m)."""

    delta: float = 4.33e-5
    R_f: float = 3.5e-6
    W: float = 4.38e-6
    gamma: float | None = None
    L_f: float = 1.0e-3
    L_v: float = 5.0e-4
    N_f: float = 16.0
    R_tree: float = 0.25

    def __post_init__(self):
        if self.gamma is None:
            object.__setattr__(self, "gamma", self.R_f + self.W)
        for name in ("delta", "R_f", "W", "L_f", "L_v", "N_f", "R_tree"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.gamma >= 0.5 * self.delta:
            raise ValueError("gamma must be < delta/2")

    @property
    def hole_ratio(self) -> float:
        """Hole radius in unit-cell coordinates, ``gamma / delta``."""
        return self.gamma / self.delta

    @property
    def Y1_area(self) -> float:
        return self.delta ** 2 - math.pi * self.gamma ** 2


@dataclass
class CellMesh:
    points: np.ndarray  # (n, 2) unit-cell coordinates
    triangles: np.ndarray  # (m, 3)
    dof: np.ndarray  # node -> periodic dof index
    pairs: list[tuple[int, int]]  # (slave, master) boundary identifications
    hole_nodes: np.ndarray
    hole_radius: float
    target_h: float
    fluid_area: float = 1.0  # exact area of the meshed region (unit cell minus polygonal hole)

    @property
    def n_dofs(self) -> int:
        return int(self.dof.max()) + 1

    def edges(self) -> np.ndarray:
        e = np.vstack([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]], self.triangles[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    def areas(self) -> np.ndarray:
        p = self.points[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


@dataclass(frozen=True)
class EffectiveTensor:
    """Homogenized multiplier in physical units plus the fluid-cell area."""

    Pi: np.ndarray = field(repr=False)
    Y1_area: float
    mesh_h: float

    @property
    def pi0(self) -> float:
        return float(self.Pi[0, 0])

    @property
    def ratio(self) -> float:
        """``Pi_11 / |Y1|``, the dimensionless macro diffusion multiplier."""
        return self.pi0 / self.Y1_area


def _square_edge_distance(theta):
    return 0.5 / np.maximum(np.abs(np.cos(theta)), np.abs(np.sin(theta)))


def _quad_split(points, quads):
    """Split quads into four triangles around appended centroid nodes."""
    n0 = len(points)
    centers = points[quads].mean(axis=1)
    c = np.arange(n0, n0 + len(quads))
    a, b, cc, d = quads.T
    tris = np.concatenate([np.column_stack([a, b, c]), np.column_stack([b, cc, c]),
                           np.column_stack([cc, d, c]), np.column_stack([d, a, c])])
    return np.vstack([points, centers]), tris


def _identify_periodic(points, tol=1e-12):
    """Map each boundary node to its master on the left/bottom edges."""
    n = len(points)
    master = np.arange(n)
    x, y = points[:, 0], points[:, 1]
    key = lambda v: np.round(v / tol).astype(np.int64)
    left = {k: i for i, k in zip(np.flatnonzero(np.abs(x) < tol), key(y[np.abs(x) < tol]))}
    bottom = {k: i for i, k in zip(np.flatnonzero(np.abs(y) < tol), key(x[np.abs(y) < tol]))}
    for i in np.flatnonzero(np.abs(x - 1) < tol):
        master[i] = left[key(y[i])]
    for i in np.flatnonzero(np.abs(y - 1) < tol):
        master[i] = bottom[key(x[i])]
    # resolve chains (corners map twice)
    for _ in range(3):
        master = master[master]
    pairs = [(int(i), int(m)) for i, m in enumerate(master) if i != m]
    uniq, dof = np.unique(master, return_inverse=True)
    return dof, pairs


def build_reference_mesh(geom: CellGeometry, target_h: float) -> CellMesh:
    """Conforming, symmetric, periodic triangulation of the perforated unit cell."""
    if not 0 < target_h < 1:
        raise ValueError("target_h must lie in (0, 1)")
    a = geom.hole_ratio
    if a >= 0.5:
        raise ValueError("geometry infeasible: gamma/delta >= 1/2")
    if a == 0:
        n = max(2, math.ceil(1.0 / (target_h * 0.999)))
        g = np.linspace(0.0, 1.0, n + 1)
        X, Y = np.meshgrid(g, g, indexing="ij")
        pts = np.column_stack([X.ravel(), Y.ravel()])
        idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
        quads = np.column_stack([idx[:-1, :-1].ravel(), idx[1:, :-1].ravel(),
                                 idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()])
        pts, tris = _quad_split(pts, quads)
        dof, pairs = _identify_periodic(pts)
        return CellMesh(pts, tris, dof, pairs, np.array([], dtype=int), 0.0, target_h, 1.0)

    # rays: multiple of 8 so that all square symmetries map rays onto rays
    n_theta = 8 * max(1, math.ceil(2 * math.pi / (8 * 0.9 * target_h)))
    n_ring = max(2, math.ceil((math.sqrt(0.5) - a) / (0.6 * target_h)))
    while True:
        theta = 2 * math.pi * np.arange(n_theta) / n_theta
        # vertices pushed out so every chord stays outside the true disk
        a_poly = a / math.cos(math.pi / n_theta)
        rho = _square_edge_distance(theta)
        frac = np.linspace(0.0, 1.0, n_ring + 1)
        r = a_poly + frac[:, None] * (rho[None, :] - a_poly)  # (ring, ray)
        pts = np.stack([0.5 + r * np.cos(theta), 0.5 + r * np.sin(theta)], axis=-1).reshape(-1, 2)
        # snap the outer ring exactly onto the square
        outer = slice(n_ring * n_theta, (n_ring + 1) * n_theta)
        pts[outer] = np.where(np.abs(pts[outer] - 0.5) > 0.5 - 1e-12, np.round(pts[outer]), pts[outer])
        idx = np.arange((n_ring + 1) * n_theta).reshape(n_ring + 1, n_theta)
        nxt = np.roll(idx, -1, axis=1)
        # counter-clockwise: outward first, then along increasing angle
        quads = np.column_stack([idx[:-1].ravel(), idx[1:].ravel(), nxt[1:].ravel(), nxt[:-1].ravel()])
        full_pts, tris = _quad_split(pts, quads)
        mesh = CellMesh(full_pts, tris, np.zeros(len(full_pts), dtype=int), [], idx[0].copy(), a, target_h)
        e = mesh.edges()
        longest = np.max(np.linalg.norm(full_pts[e[:, 0]] - full_pts[e[:, 1]], axis=1))
        if longest <= target_h:
            break
        if longest > target_h * 1.02:
            n_theta += 8
        n_ring += 1
    dof, pairs = _identify_periodic(full_pts)
    mesh.dof = dof
    mesh.pairs = pairs
    mesh.fluid_area = 1.0 - 0.5 * n_theta * a_poly ** 2 * math.sin(2 * math.pi / n_theta)
    if np.any(mesh.areas() <= 0):
        raise RuntimeError("meshing failure: degenerate triangles")
    return mesh


def _gradients(mesh: CellMesh):
    p = mesh.points[mesh.triangles]
    area = mesh.areas()
    # gradient of barycentric basis functions, shape (m, 3, 2)
    x, y = p[..., 0], p[..., 1]
    gx = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1) / (2 * area[:, None])
    gy = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1) / (2 * area[:, None])
    return np.stack([gx, gy], axis=-1), area


def _assemble(mesh: CellMesh):
    G, area = _gradients(mesh)
    local = np.einsum("tid,tjd->tij", G, G) * area[:, None, None]
    dofs = mesh.dof[mesh.triangles]
    rows = np.repeat(dofs, 3, axis=1).ravel()
    cols = np.tile(dofs, (1, 3)).ravel()
    n = mesh.n_dofs
    K = sp.csr_matrix((local.ravel(), (rows, cols)), shape=(n, n))
    mass = np.bincount(dofs.ravel(), weights=np.repeat(area / 3, 3), minlength=n)
    return K, G, area, dofs, mass


def solve_corrector(mesh: CellMesh, k: int) -> np.ndarray:
    """Zero-mean periodic corrector ``mu_k`` at the mesh nodes (k = 1 or 2)."""
    if k not in (1, 2):
        raise ValueError("axis index must be 1 or 2")
    if len(mesh.hole_nodes) == 0:
        # e_k is divergence-free on the full periodic cell
        return np.zeros(len(mesh.points))
    K, G, area, dofs, mass = _assemble(mesh)
    n = mesh.n_dofs
    load = np.bincount(dofs.ravel(), weights=(G[:, :, k - 1] * area[:, None]).ravel(), minlength=n)
    A = sp.bmat([[K, sp.csr_matrix(mass[:, None])], [sp.csr_matrix(mass[None, :]), None]], format="csc")
    sol = spla.spsolve(A, np.concatenate([-load, [0.0]]))
    mu = sol[:n]
    if not np.all(np.isfinite(mu)):
        raise np.linalg.LinAlgError("singular corrector system (broken periodic constraints?)")
    # loads that cancel to round-off (no hole) are measured against the cell size
    scale = max(np.linalg.norm(load), np.sqrt(mesh.areas().sum()))
    resid = np.linalg.norm(K @ mu + load) / scale
    if resid > 1e-10:
        raise np.linalg.LinAlgError(f"corrector residual {resid:.3e} above 1e-10")
    return mu[mesh.dof]


def effective_tensor(mesh: CellMesh, geom: CellGeometry, mu) -> EffectiveTensor:
    """Assemble ``Pi_kl = int_{Y1} (delta_kl + d mu_k / dy_l)`` scaled to physical units."""
    G, area = _gradients(mesh)
    Pi = np.empty((2, 2))
    for k in range(2):
        grad = np.einsum("tid,ti->td", G, np.asarray(mu[k])[mesh.triangles])
        for l in range(2):
            Pi[k, l] = mesh.fluid_area * (k == l) + np.sum(area * grad[:, l])
    return EffectiveTensor(Pi * geom.delta ** 2, geom.Y1_area, mesh.target_h)


def compute_effective_tensor(geom: CellGeometry, target_h: float = 0.02, threads: int = 1) -> EffectiveTensor:
    mesh = build_reference_mesh(geom, target_h)
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        mus = list(pool.map(lambda k: solve_corrector(mesh, k), (1, 2)))
    return effective_tensor(mesh, geom, mus)


def write_tensor(tensor: EffectiveTensor, geom: CellGeometry, path) -> None:
    rows = [("pi11", tensor.Pi[0, 0]), ("pi12", tensor.Pi[0, 1]), ("pi21", tensor.Pi[1, 0]),
            ("pi22", tensor.Pi[1, 1]), ("y1_area", tensor.Y1_area), ("delta", geom.delta),
            ("gamma", geom.gamma), ("mesh_h", tensor.mesh_h)]
    with open(path, "w") as fh:
        for key, value in rows:
            fh.write(f"{key} = {float(value):.17g}\n")


def read_tensor(path) -> tuple[EffectiveTensor, dict[str, float]]:
    values: dict[str, float] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            values[key.strip()] = float(value)
    missing = {"pi11", "pi12", "pi21", "pi22", "y1_area", "delta", "gamma", "mesh_h"} - values.keys()
    if missing:
        raise ValueError(f"{path}: missing keys {sorted(missing)}")
    Pi = np.array([[values["pi11"], values["pi12"]], [values["pi21"], values["pi22"]]])
    return EffectiveTensor(Pi, values["y1_area"], values["mesh_h"]), values
