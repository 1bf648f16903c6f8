"""Radially symmetric macroscale enthalpy equation on the stem cross-section.

Finite volumes on nodes ``x_i = i R / M`` (``i = 0..M-1``).  Node 0 owns
``[0, dx/2]``, interior nodes own ``[x_i - dx/2, x_i + dx/2]`` and the last
node's cell extends to the bark at ``R``, where a Robin condition acts in
series with the half-open conduction path from ``x_{M-1}``.  Cell volumes
are exact (per unit stem length, divided by ``2 pi``), so quadratic
temperature profiles are reproduced without error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .thermo import OmegaRegularization, ThermoProps, diffusion_coeff, temp_from_enthalpy


@dataclass(frozen=True)
class RadialGrid:
    R: float
    M: int

    def __post_init__(self):
        if self.M < 4:
            raise ValueError("M_macro must be >= 4")
        if self.R <= 0:
            raise ValueError("R_tree must be positive")

    @property
    def dx(self) -> float:
        return self.R / self.M

    @property
    def x(self) -> np.ndarray:
        return np.arange(self.M) * self.dx

    @property
    def faces(self) -> np.ndarray:
        """Interior face radii ``x_{i+1/2}``, shape ``(M - 1,)``."""
        return (np.arange(self.M - 1) + 0.5) * self.dx

    @property
    def volumes(self) -> np.ndarray:
        """``int x dx`` over each cell (the 2 pi factor is omitted throughout)."""
        edges = np.concatenate([[0.0], self.faces, [self.R]])
        return 0.5 * np.diff(edges ** 2)


@dataclass
class MacroState:
    H1: np.ndarray
    melted: np.ndarray

    def T1(self, props: ThermoProps, reg: OmegaRegularization) -> np.ndarray:
        return temp_from_enthalpy(self.H1, props, reg)


def _harmonic(a, b):
    return 2.0 * a * b / (a + b)


def macro_diffusivity(H1, melted, Pi_ratio: float, props: ThermoProps, post_melt_D: float, factor: float = 1.0):
    """Nodal coefficient of the divided equation: ``factor * (pi0/|Y1|) D(H1)`` or the post-melt constant."""
    D = diffusion_coeff(np.asarray(H1, dtype=float), props)
    return np.where(melted, post_melt_D, factor * Pi_ratio * D)


def robin_flux(T_last, A_last, boundary_scale, grid: RadialGrid, props: ThermoProps):
    """Inward flux density at ``x = R`` for the divided equation.

    The bark exchange ``alpha (T_a - T_s)`` acts in series with conduction
    over ``dx`` from the outermost node; ``boundary_scale`` converts the
    physical flux into the divided equation (``pi0/|Y1|`` while ice is
    present, 1 once melted).
    """
    return boundary_scale * (props.T_a - T_last) / (
        grid.dx * boundary_scale / A_last + 1.0 / props.alpha)


def robin_surface_temperature(T_last, A_last, boundary_scale, grid: RadialGrid, props: ThermoProps):
    q = robin_flux(T_last, A_last, boundary_scale, grid, props)
    return T_last + q * grid.dx / A_last


def macro_fluxes(T1, A, boundary_scale, grid: RadialGrid, props: ThermoProps):
    """Face flux totals ``x_f * A_f * dT/dx`` for interior faces plus the Robin term."""
    A_face = _harmonic(A[1:], A[:-1])
    interior = grid.faces * A_face * np.diff(T1) / grid.dx
    bark = grid.R * robin_flux(T1[-1], A[-1], boundary_scale, grid, props)
    return interior, bark


def macro_rhs(H1, melted, micro_flux, Pi_ratio: float, Y1_area: float, grid: RadialGrid,
              props: ThermoProps, reg: OmegaRegularization, post_melt_D: float, factor: float = 1.0,
              boundary_scale=None):
    """``dH1/dt`` at every node.

    ``micro_flux`` is the heat drawn by each cell's annulus (zero for melted
    cells) and is removed after division by ``|Y1|``.
    """
    H1 = np.asarray(H1, dtype=float)
    T1 = temp_from_enthalpy(H1, props, reg)
    A = macro_diffusivity(H1, melted, Pi_ratio, props, post_melt_D, factor)
    if boundary_scale is None:
        boundary_scale = 1.0 if melted[-1] else Pi_ratio
    interior, bark = macro_fluxes(T1, A, boundary_scale, grid, props)
    net = np.zeros_like(H1)
    net[:-1] += interior
    net[1:] -= interior
    net[-1] += bark
    sink = np.where(melted, 0.0, np.asarray(micro_flux, dtype=float) / Y1_area)
    return net / grid.volumes - sink


def post_melt_rhs(H1, grid: RadialGrid, props: ThermoProps, reg: OmegaRegularization, post_melt_D: float):
    """Source-free conduction with constant ``post_melt_D`` and unit multiplier."""
    melted = np.ones(np.shape(H1), dtype=bool)
    return macro_rhs(H1, melted, np.zeros(np.shape(H1)), 1.0, 1.0, grid, props, reg, post_melt_D)


def stored_energy(H1, grid: RadialGrid, Y1_area: float):
    """``sum |Y1| H1 V_i``; every node shares the ``|Y1|`` weight, melted or not."""
    return float(Y1_area * np.sum(np.asarray(H1) * grid.volumes))
