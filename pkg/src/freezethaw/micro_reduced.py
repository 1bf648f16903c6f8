"""One-phase Stefan problem on the water annulus ``s_iw <= y <= gamma``.

Temperatures live on a moving radial mesh ``y_j = s + j (gamma - s) / M``
(fixed computational coordinate ``xi = j / M``).  All operators are batched:
``s`` has shape ``(n,)`` and ``T2`` has shape ``(n, M + 1)`` including the
two Dirichlet nodes.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .thermo import OmegaRegularization, ThermoProps, diffusion_coeff

# annulus widths below this fraction of gamma are treated as equilibrated
DEGENERATE_WIDTH = 1.0e-3


class Regime(enum.IntEnum):
    ICE_PRESENT = 0
    MELTED = 1


@dataclass
class MicroCellState:
    """Reduced-model cell: front radius, nodal temperatures and regime flag.

    Fields may be scalars/1-D (one cell) or batched with a leading cell axis.
    """

    s_iw: np.ndarray
    T2: np.ndarray
    regime: np.ndarray

    @classmethod
    def initial(cls, n_cells: int, M: int, s0: float, T_init: float) -> "MicroCellState":
        return cls(np.full(n_cells, s0), np.full((n_cells, M + 1), T_init),
                   np.full(n_cells, Regime.ICE_PRESENT, dtype=np.int8))

    @property
    def M(self) -> int:
        return np.shape(self.T2)[-1] - 1

    def nodes(self, gamma: float) -> np.ndarray:
        s = np.asarray(self.s_iw, dtype=float)[..., None]
        xi = np.linspace(0.0, 1.0, self.M + 1)
        return s + xi * (gamma - s)


def water_diffusion(T2, props: ThermoProps, reg: OmegaRegularization | None = None):
    """D on the water annulus, which is liquid by construction.

    Enthalpies are clamped to the liquid branch (``H >= H_w``), where D is
    the constant ``k_w / rho_w``; the result therefore does not depend on
    ``T2`` and no enthalpy inversion is needed.
    """
    return np.full(np.shape(T2), float(diffusion_coeff(props.H_w, props)))


def _grid(s, gamma, M):
    s = np.asarray(s, dtype=float)
    L = gamma - s
    xi = np.arange(M + 1) / M
    y = s[..., None] + xi * L[..., None]
    return L, xi, y


def micro_heat_rhs(state: MicroCellState, T1_trace, ds_dt, gamma: float, props: ThermoProps,
                   reg: OmegaRegularization, D=None):
    """``dT2/dt`` at the interior nodes ``j = 1..M-1`` at fixed ``xi``.

    ``D`` may be given as nodal values to skip the property evaluation.  The
    Dirichlet values at ``j = 0`` (T_c) and ``j = M`` (``T1_trace``) are
    imposed here, overriding whatever the state holds at those nodes.
    """
    T = np.array(state.T2, dtype=float, ndmin=2)
    s = np.atleast_1d(np.asarray(state.s_iw, dtype=float))
    M = T.shape[-1] - 1
    T[:, 0] = props.T_c
    T[:, M] = T1_trace
    L, xi, y = _grid(s, gamma, M)
    if D is None:
        D = water_diffusion(T, props, reg)
    D = np.array(D, dtype=float, ndmin=2)
    dxi = 1.0 / M
    y_face = 0.5 * (y[:, 1:] + y[:, :-1])
    D_face = 0.5 * (D[:, 1:] + D[:, :-1])
    flux = y_face * D_face * np.diff(T, axis=1) / dxi
    lap = np.diff(flux, axis=1) / (dxi * y[:, 1:-1] * (L ** 2)[:, None])
    dT_dxi = (T[:, 2:] - T[:, :-2]) / (2 * dxi)
    advect = (1.0 - xi[1:-1]) * (np.atleast_1d(ds_dt) / L)[:, None] * dT_dxi
    rate = lap / props.c_w + advect
    rate[L < DEGENERATE_WIDTH * gamma] = 0.0
    return rate


def front_gradient(state: MicroCellState, gamma: float):
    """Second-order one-sided ``dT2/dy`` at the ice front."""
    T = np.array(state.T2, dtype=float, ndmin=2)
    M = T.shape[-1] - 1
    dy = (gamma - np.atleast_1d(state.s_iw)) / M
    return (-3 * T[:, 0] + 4 * T[:, 1] - T[:, 2]) / (2 * dy)


def outer_gradient(state: MicroCellState, gamma: float):
    """Second-order one-sided ``dT2/dy`` at the artificial boundary."""
    T = np.array(state.T2, dtype=float, ndmin=2)
    M = T.shape[-1] - 1
    dy = (gamma - np.atleast_1d(state.s_iw)) / M
    return (3 * T[:, M] - 4 * T[:, M - 1] + T[:, M - 2]) / (2 * dy)


def stefan_rate(state: MicroCellState, props: ThermoProps, reg: OmegaRegularization, gamma: float):
    """Front velocity ``ds_iw/dt``; negative while the ice melts."""
    T = np.array(state.T2, dtype=float, ndmin=2)
    D0 = water_diffusion(T[:, 0], props, reg)
    return -D0 / props.latent * front_gradient(state, gamma)


def boundary_flux(state: MicroCellState, props: ThermoProps, reg: OmegaRegularization, gamma: float):
    """Heat drawn out of the fluid cell through the artificial circle.

    Positive when heat flows into the annulus (warm macro trace, ice present).
    """
    T = np.array(state.T2, dtype=float, ndmin=2)
    DM = water_diffusion(T[:, -1], props, reg)
    return 2 * np.pi * gamma * DM * outer_gradient(state, gamma)


def melt_event_value(state: MicroCellState):
    """Ice-bar radius; melting completes when it reaches zero."""
    return np.asarray(state.s_iw, dtype=float)


def log_steady_profile(y, s, gamma, T_c, T1):
    """Steady radial conduction profile between the front and ``gamma``."""
    return T_c + (T1 - T_c) * np.log(y / s) / np.log(gamma / s)
