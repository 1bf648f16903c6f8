"""Material constants and the constitutive temperature/enthalpy maps.

Temperature is a regularized, strictly increasing, C1 function of enthalpy
built from three affine pieces (ice, mushy plateau, water) whose corners are
rounded by cubic Hermite blends.  The plateau and water lines both pass
through ``(H_w, T_c)``, so liquid water at the freezing point carries no
spurious latent heat; the ice line is the plain ``H / c_i``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ThermoProps:
    """Physical constants for the ice/water system (SI units)."""

    rho_w: float = 1000.0
    rho_i: float = 917.0
    k_w: float = 0.556
    k_i: float = 2.22
    c_w: float = 4180.0
    c_i: float = 2100.0
    H_i: float = 5.74e5
    H_w: float = 9.07e5
    T_c: float = 273.15
    T_a: float = 283.15
    alpha: float = 10.0

    def __post_init__(self):
        for name in ("rho_w", "rho_i", "k_w", "k_i", "c_w", "c_i", "H_i", "H_w", "T_c", "T_a", "alpha"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise ValueError(f"{name} must be positive and finite, got {value!r}")
        if self.H_i >= self.H_w:
            raise ValueError("H_i must be smaller than H_w")

    @property
    def latent(self) -> float:
        """Latent heat of fusion ``H_w - H_i`` (J/kg)."""
        return self.H_w - self.H_i

    @property
    def D_ice(self) -> float:
        return self.k_i / self.rho_i

    @property
    def D_water(self) -> float:
        return self.k_w / self.rho_w


@dataclass(frozen=True)
class OmegaRegularization:
    """Breakpoints and blends of the regularized map ``T = omega(H)``.

    Build instances with :meth:`from_props`; the constructor only stores the
    pieces and checks their ordering.
    """

    H_i_minus: float
    H_i_plus: float
    H_w_minus: float
    H_w_plus: float
    c_inf: float
    # Hermite data per blend: (left value, right value, left slope, right slope)
    ice_blend: tuple[float, float, float, float]
    water_blend: tuple[float, float, float, float]
    # line data: T = T_c + (H - H_anchor) * slope for plateau and water
    H_anchor: float
    T_c: float
    c_i: float
    c_w: float

    @classmethod
    def from_props(cls, props: ThermoProps, width_i: float = 1.0e4, width_w: float = 1.0e4,
                   c_inf: float = 1.0e7) -> "OmegaRegularization":
        if min(width_i, width_w, c_inf) <= 0:
            raise ValueError("regularization widths and c_inf must be positive")
        H_anchor = props.H_w
        # ice line H/c_i meets plateau line T_c + (H - H_anchor)/c_inf
        H_corner_i = (props.T_c - H_anchor / c_inf) / (1.0 / props.c_i - 1.0 / c_inf)
        H_i_minus, H_i_plus = H_corner_i - width_i, H_corner_i + width_i
        H_w_minus, H_w_plus = H_anchor - width_w, H_anchor + width_w
        if not (H_i_minus < props.H_i < H_i_plus <= H_w_minus < props.H_w < H_w_plus):
            raise ValueError(
                "regularization breakpoints out of order: need "
                "H_i- < H_i < H_i+ <= H_w- < H_w < H_w+ "
                f"(got {H_i_minus:.6g}, {props.H_i:.6g}, {H_i_plus:.6g}, {H_w_minus:.6g}, "
                f"{props.H_w:.6g}, {H_w_plus:.6g})")

        def plateau(H):
            return props.T_c + (H - H_anchor) / c_inf

        ice_blend = (H_i_minus / props.c_i, plateau(H_i_plus), 1.0 / props.c_i, 1.0 / c_inf)
        water_blend = (plateau(H_w_minus), props.T_c + (H_w_plus - H_anchor) / props.c_w,
                       1.0 / c_inf, 1.0 / props.c_w)
        return cls(H_i_minus, H_i_plus, H_w_minus, H_w_plus, c_inf, ice_blend, water_blend,
                   H_anchor, props.T_c, props.c_i, props.c_w)

    @property
    def breakpoints(self) -> tuple[float, float, float, float]:
        return (self.H_i_minus, self.H_i_plus, self.H_w_minus, self.H_w_plus)


def _check_finite(x):
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input")
    return x


def _hermite(u, h, p0, p1, m0, m1):
    t = u / h
    t2 = t * t
    t3 = t2 * t
    value = ((2 * t3 - 3 * t2 + 1) * p0 + (t3 - 2 * t2 + t) * h * m0
             + (-2 * t3 + 3 * t2) * p1 + (t3 - t2) * h * m1)
    slope = ((6 * t2 - 6 * t) * p0 + (3 * t2 - 4 * t + 1) * h * m0
             + (-6 * t2 + 6 * t) * p1 + (3 * t2 - 2 * t) * h * m1) / h
    return value, slope


def _omega_and_slope(H, reg: OmegaRegularization):
    H = np.asarray(H, dtype=float)
    T = np.empty_like(H)
    dT = np.empty_like(H)
    a, b, c, d = reg.breakpoints

    m = H < a
    T[m] = H[m] / reg.c_i
    dT[m] = 1.0 / reg.c_i

    m = (H >= a) & (H < b)
    T[m], dT[m] = _hermite(H[m] - a, b - a, *reg.ice_blend)

    m = (H >= b) & (H < c)
    T[m] = reg.T_c + (H[m] - reg.H_anchor) / reg.c_inf
    dT[m] = 1.0 / reg.c_inf

    m = (H >= c) & (H < d)
    T[m], dT[m] = _hermite(H[m] - c, d - c, *reg.water_blend)

    m = H >= d
    T[m] = reg.T_c + (H[m] - reg.H_anchor) / reg.c_w
    dT[m] = 1.0 / reg.c_w
    return T, dT


def temp_from_enthalpy(H, props: ThermoProps, reg: OmegaRegularization):
    """Temperature ``omega(H)`` (K) for enthalpy ``H`` (J/kg); scalar or array."""
    H = _check_finite(H)
    T, _ = _omega_and_slope(H, reg)
    return T if T.ndim else float(T)


def d_omega(H, props: ThermoProps, reg: OmegaRegularization):
    """Slope ``d omega / dH`` (K kg/J)."""
    H = _check_finite(H)
    _, dT = _omega_and_slope(H, reg)
    return dT if dT.ndim else float(dT)


def _invert_blend(T, H0, width, blend):
    """Safeguarded Newton for the monotone Hermite piece on [H0, H0 + width]."""
    p0, p1, m0, m1 = blend
    lo = np.zeros_like(T)
    hi = np.full_like(T, width)
    u = width * np.clip((T - p0) / (p1 - p0), 0.0, 1.0)
    for _ in range(60):
        val, slope = _hermite(u, width, p0, p1, m0, m1)
        f = val - T
        lo = np.where(f < 0, u, lo)
        hi = np.where(f > 0, u, hi)
        step = f / slope
        u_new = u - step
        outside = (u_new <= lo) | (u_new >= hi)
        u_new = np.where(outside, 0.5 * (lo + hi), u_new)
        if np.all(np.abs(u_new - u) <= 1e-13 * width):
            u = u_new
            break
        u = u_new
    return H0 + u


def enthalpy_from_temp(T, props: ThermoProps, reg: OmegaRegularization):
    """Inverse map ``omega^{-1}(T)`` (J/kg); exact per branch."""
    T = _check_finite(T)
    a, b, c, d = reg.breakpoints
    Ta, Tb = reg.ice_blend[0], reg.ice_blend[1]
    Tc_, Td = reg.water_blend[0], reg.water_blend[1]
    H = np.empty_like(T)

    m = T < Ta
    H[m] = T[m] * reg.c_i

    m = (T >= Ta) & (T < Tb)
    if np.any(m):
        H[m] = _invert_blend(T[m], a, b - a, reg.ice_blend)

    m = (T >= Tb) & (T < Tc_)
    H[m] = reg.H_anchor + (T[m] - reg.T_c) * reg.c_inf

    m = (T >= Tc_) & (T < Td)
    if np.any(m):
        H[m] = _invert_blend(T[m], c, d - c, reg.water_blend)

    m = T >= Td
    H[m] = reg.H_anchor + (T[m] - reg.T_c) * reg.c_w
    return H if H.ndim else float(H)


def diffusion_coeff(H, props: ThermoProps):
    """Thermal diffusion coefficient D(H) (W m^2 / kg K), piecewise affine."""
    H = np.asarray(H, dtype=float)
    frac = np.clip((H - props.H_i) / props.latent, 0.0, 1.0)
    D = props.D_ice + frac * (props.D_water - props.D_ice)
    return D if D.ndim else float(D)


def diffusivity_bounds(props: ThermoProps, reg: OmegaRegularization) -> tuple[float, float]:
    """Bounds ``(lam, Lam)`` with ``lam <= D(H) omega'(H) <= Lam`` for all H."""
    slopes = (1.0 / props.c_i, 1.0 / props.c_w, 1.0 / reg.c_inf)
    Ds = (props.D_ice, props.D_water)
    return min(Ds) * min(slopes), max(Ds) * max(slopes)
