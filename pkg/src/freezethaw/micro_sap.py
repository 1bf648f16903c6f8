"""Fiber/vessel sap-exudation cell model.

Each fiber holds a central gas bubble (radius ``s_gi``) inside an ice layer
(outer radius ``s_iw``) surrounded by melt water up to the wall at ``R_f``.
Water crosses the porous wall into the vessel, compressing the vessel gas
bubble of radius ``r``.  ``U`` is the cumulative volume moved per fiber.

Melt water cannot leave a fiber faster than it is produced.  Outflow is the
Darcy/osmotic wall flow capped by the melt rate plus a fast drain of any
water already lying between ice and wall (relaxation time ``drain_time``).
While the wall can carry everything that melts, the ice stays pressed
against the wall; the front detaches once melting outpaces the wall flow.
The layer term is signed and smooth in ``s_iw``, so the switch neither
chatters nor puts the equilibrium on a kink.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .corrector import CellGeometry
from .micro_reduced import Regime
from .thermo import ThermoProps

# radii below this are treated as a collapsed closure
RADIUS_FLOOR = 1.0e-12


class ClosureError(ArithmeticError):
    """A radius reached zero; the algebraic closures are singular."""


@dataclass(frozen=True)
class SapProps:
    sigma: float = 0.076
    M_g: float = 0.029
    R_gas: float = 8.314
    C_s: float = 58.4
    Lp: float = 5.54e-13
    A_wall: float = 2.20e-8
    p_gf0: float = 2.0e5
    p_gv0: float = 1.0e5
    r0: float = 6.0e-6
    s_gi0: float | None = None
    rho_gv0: float | None = None
    T_ref: float = 273.15
    drain_time: float = 1.0e-3

    def __post_init__(self):
        if self.s_gi0 is None:
            object.__setattr__(self, "s_gi0", CellGeometry().R_f / math.sqrt(2.0))
        if self.rho_gv0 is None:
            # ideal gas at the initial vessel pressure and temperature
            object.__setattr__(self, "rho_gv0", self.p_gv0 * self.M_g / (self.R_gas * self.T_ref))
        for name in ("sigma", "M_g", "R_gas", "C_s", "Lp", "A_wall", "p_gf0", "p_gv0", "r0",
                     "s_gi0", "rho_gv0", "T_ref", "drain_time"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise ValueError(f"{name} must be positive and finite, got {value!r}")

    @classmethod
    def for_geometry(cls, geom: CellGeometry, **kw) -> "SapProps":
        kw.setdefault("s_gi0", geom.R_f / math.sqrt(2.0))
        return cls(**kw)


@dataclass
class SapCellState:
    """Batched sap cell; ``s_gx`` is ``s_gi`` while ice is present, else ``s_gw``."""

    s_iw: np.ndarray
    s_gx: np.ndarray
    r: np.ndarray
    U: np.ndarray
    T2: np.ndarray
    regime: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.regime is None:
            self.regime = np.zeros(np.shape(self.s_iw), dtype=np.int8)

    @classmethod
    def initial(cls, n_cells: int, M: int, geom: CellGeometry, sap: SapProps, T_init: float):
        return cls(np.full(n_cells, geom.R_f), np.full(n_cells, sap.s_gi0), np.full(n_cells, sap.r0),
                   np.zeros(n_cells), np.full((n_cells, M + 1), T_init))

    @property
    def s_gi(self):
        return np.where(self.regime == Regime.ICE_PRESENT, self.s_gx, np.nan)

    @property
    def s_gw(self):
        return np.where(self.regime == Regime.MELTED, self.s_gx, np.nan)


@dataclass(frozen=True)
class PressureSet:
    p_wf: np.ndarray
    p_wv: np.ndarray
    p_gv: np.ndarray
    p_gf: np.ndarray
    rho_gv: np.ndarray


def _check_radii(*radii):
    for x in radii:
        bad = ~(np.asarray(x) > RADIUS_FLOOR)
        if np.any(bad):
            raise ClosureError(f"radius at or below {RADIUS_FLOOR:g} m in cells {np.flatnonzero(np.atleast_1d(bad)).tolist()}")


def algebraic_update(s_gx, r, T1, props: SapProps) -> PressureSet:
    """Fiber and vessel pressures from the bubble radii and temperature.

    ``s_gx`` is the fiber bubble radius (``s_gi`` or ``s_gw``).
    """
    s_gx = np.asarray(s_gx, dtype=float)
    r = np.asarray(r, dtype=float)
    _check_radii(s_gx, r)
    p_gf = props.p_gf0 * (props.s_gi0 / s_gx) ** 2
    p_wf = p_gf - 2 * props.sigma / s_gx
    rho_gv = props.rho_gv0 * (props.r0 / r) ** 2
    p_gv = rho_gv * props.R_gas * np.asarray(T1, dtype=float) / props.M_g
    p_wv = p_gv - 2 * props.sigma / r
    return PressureSet(p_wf, p_wv, p_gv, p_gf, rho_gv)


def wall_flow(pressures: PressureSet, T1, props: SapProps, geom: CellGeometry):
    """Darcy/osmotic volume flow per fiber into the vessel (m^3/s)."""
    osmotic = props.R_gas * props.C_s * np.asarray(T1, dtype=float)
    return -(props.Lp * props.A_wall / geom.N_f) * (pressures.p_wv - pressures.p_wf - osmotic)


def sap_rates(state: SapCellState, T1, pressures: PressureSet, gradT2_at_front, props: SapProps,
              thermo: ThermoProps, geom: CellGeometry, D_front):
    """``(ds_iw/dt, ds_gi/dt, dr/dt, dU/dt)`` while ice is present.

    ``D_front`` is the water diffusion coefficient at the front.
    """
    s_iw = np.asarray(state.s_iw, dtype=float)
    s_gi = np.asarray(state.s_gx, dtype=float)
    r = np.asarray(state.r, dtype=float)
    _check_radii(s_iw, s_gi, r)
    melt_speed = np.asarray(D_front) / thermo.latent * np.asarray(gradT2_at_front)
    darcy = wall_flow(pressures, T1, props, geom)
    melt_volume = 2 * np.pi * s_iw * geom.L_f * melt_speed
    # signed, so an overshoot past the wall is pulled back smoothly
    layer = np.pi * (geom.R_f ** 2 - s_iw ** 2) * geom.L_f
    dU = np.minimum(darcy, melt_volume + layer / props.drain_time)
    ds_iw = -melt_speed + dU / (2 * np.pi * s_iw * geom.L_f)
    ds_gi = (-(thermo.rho_w - thermo.rho_i) * s_iw * ds_iw / (s_gi * thermo.rho_i)
             + thermo.rho_w * dU / (2 * np.pi * s_gi * thermo.rho_i * geom.L_f))
    dr = -geom.N_f * dU / (2 * np.pi * r * geom.L_v)
    return ds_iw, ds_gi, dr, dU


def melted_rates(state: SapCellState, T1, pressures: PressureSet, props: SapProps, geom: CellGeometry):
    """``(ds_gw/dt, dr/dt, dU/dt)`` once the fiber ice is gone."""
    s_gw = np.asarray(state.s_gx, dtype=float)
    r = np.asarray(state.r, dtype=float)
    _check_radii(s_gw, r)
    dU = wall_flow(pressures, T1, props, geom)
    # an empty fiber cannot deliver more water
    dU = np.where((s_gw >= geom.R_f) & (dU > 0), 0.0, dU)
    ds_gw = dU / (2 * np.pi * s_gw * geom.L_f)
    dr = -geom.N_f * dU / (2 * np.pi * r * geom.L_v)
    return ds_gw, dr, dU


def ice_thickness_event(state: SapCellState):
    """Ice-layer thickness ``s_iw - s_gi``; melting completes at zero."""
    return np.asarray(state.s_iw, dtype=float) - np.asarray(state.s_gx, dtype=float)
