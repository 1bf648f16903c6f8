"""Two-scale time loop for the reduced and sap-exudation thaw models.

The default ``monolithic`` coupling integrates macro enthalpy, interface
variables and micro temperatures as one stiff system with a single adaptive
step.  ``split`` advances the frozen-coefficient sequence (micro heat, macro
enthalpy, interface variables) with fixed backward-Euler substeps; it is
kept for comparison and is only stable for small steps.
"""

from __future__ import annotations

import logging
import math
import time as _time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import micro_reduced as mr
from . import micro_sap as ms
from .corrector import CellGeometry, EffectiveTensor, compute_effective_tensor, read_tensor
from .integrator import TRBDF2, IntegrationError, Tolerances, W, D as STAGE_D, integrate
from .macro import RadialGrid, macro_diffusivity, macro_fluxes, macro_rhs, stored_energy
from .thermo import OmegaRegularization, ThermoProps, enthalpy_from_temp, temp_from_enthalpy

log = logging.getLogger(__name__)

STAGE_WEIGHTS = (W, W, STAGE_D)
HOUR = 3600.0


@dataclass
class SimConfig:
    """Scenario parameters; every physical constant has a home here."""

    model: str = "reduced"
    thermo: ThermoProps = field(default_factory=ThermoProps)
    geom: CellGeometry = field(default_factory=CellGeometry)
    sap: ms.SapProps = field(default_factory=ms.SapProps)
    width_i: float = 1.0e4
    width_w: float = 1.0e3
    c_inf: float = 1.0e7
    M_macro: int = 40
    M_micro: int = 4
    t_end: float | None = None
    output_times: tuple = ()
    abs_tol: float = 7.0e-8
    rel_tol: float = 2.0e-14
    post_melt_D: float | None = None
    gas_diffusion_factor: float = 10.0
    coupling: str = "monolithic"
    split_dt: float = 1.0e-3
    face_mean: str = "harmonic"
    mesh_h: float = 0.025
    pi_file: str | None = None
    probe_x: float = 0.15
    stop_after_melt: float | None = None
    threads: int = 1

    def __post_init__(self):
        self.model = self.model.lower()
        if self.model not in ("reduced", "sap"):
            raise ValueError("model must be 'reduced' or 'sap'")
        if self.t_end is None:
            self.t_end = 24 * HOUR if self.model == "reduced" else 3 * HOUR
        if not self.t_end > 0:
            raise ValueError("t_end must be positive")
        if self.abs_tol <= 0 or self.rel_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.M_micro < 2:
            raise ValueError("M_micro must be >= 2")
        if self.M_macro < 4:
            raise ValueError("M_macro must be >= 4")
        if self.coupling not in ("monolithic", "split"):
            raise ValueError("coupling must be 'monolithic' or 'split'")
        if self.face_mean not in ("harmonic", "arithmetic"):
            raise ValueError("face_mean must be 'harmonic' or 'arithmetic'")
        if self.gas_diffusion_factor <= 0:
            raise ValueError("gas_diffusion_factor must be positive")
        if self.post_melt_D is not None and self.post_melt_D <= 0:
            raise ValueError("post_melt_D must be positive")
        self.output_times = tuple(sorted(float(t) for t in self.output_times))
        if any(t < 0 or t > self.t_end for t in self.output_times):
            raise ValueError("output_times must lie in [0, t_end]")

    @property
    def regularization(self) -> OmegaRegularization:
        return OmegaRegularization.from_props(self.thermo, self.width_i, self.width_w, self.c_inf)

    @property
    def diffusion_factor(self) -> float:
        """Macro diffusivity multiplier: the gas phase only exists in the sap model."""
        return self.gas_diffusion_factor if self.model == "sap" else 1.0

    @property
    def effective_post_melt_D(self) -> float:
        if self.post_melt_D is not None:
            return self.post_melt_D
        return self.diffusion_factor * self.thermo.D_water


@dataclass
class SimResult:
    config: SimConfig
    x: np.ndarray
    times: np.ndarray
    snapshots: list  # dicts of per-node arrays
    events: list  # (node, melt time)
    probe: dict  # per-step series at the probe node
    budget: dict
    stats: dict
    tensor: EffectiveTensor

    @property
    def melt_times(self) -> np.ndarray:
        out = np.full(len(self.x), np.nan)
        for node, t in self.events:
            out[node] = t
        return out

    @property
    def final_melt_time(self) -> float:
        m = self.melt_times
        return float(np.max(m)) if np.all(np.isfinite(m)) else math.nan


def load_tensor(cfg: SimConfig) -> EffectiveTensor:
    if cfg.pi_file:
        tensor, values = read_tensor(cfg.pi_file)
        if not (math.isclose(values["delta"], cfg.geom.delta, rel_tol=1e-12)
                and math.isclose(values["gamma"], cfg.geom.gamma, rel_tol=1e-12)):
            raise ValueError(f"{cfg.pi_file}: tensor geometry does not match the scenario")
        return tensor
    return compute_effective_tensor(cfg.geom, cfg.mesh_h, threads=cfg.threads)


class ThawSystem:
    """Joint state vector, right-hand side and regime bookkeeping.

    Layout: ``[H1 | s_iw | (s_gx | r | U) | T2 interior (cell-major)]``,
    with the bracketed block present only for the sap model.
    """

    def __init__(self, cfg: SimConfig, tensor: EffectiveTensor):
        self.cfg = cfg
        self.props = cfg.thermo
        self.reg = cfg.regularization
        self.geom = cfg.geom
        self.sap = cfg.sap
        self.tensor = tensor
        self.grid = RadialGrid(cfg.geom.R_tree, cfg.M_macro)
        self.n = cfg.M_macro
        self.M = cfg.M_micro
        self.is_sap = cfg.model == "sap"
        self.n_scalar = 5 if self.is_sap else 2
        self.size = self.n * self.n_scalar + self.n * (self.M - 1)
        self.melted = np.zeros(self.n, dtype=bool)
        self.Pi_ratio = tensor.ratio
        self.Y1 = tensor.Y1_area
        self.gamma = cfg.geom.gamma
        self.D_post = cfg.effective_post_melt_D
        self.factor = cfg.diffusion_factor
        self.H_init = enthalpy_from_temp(self.props.T_c, self.props, self.reg)

    # -- layout helpers -------------------------------------------------
    def unpack(self, y):
        n = self.n
        parts = {"H1": y[:n], "s_iw": y[n:2 * n]}
        if self.is_sap:
            parts["s_gx"] = y[2 * n:3 * n]
            parts["r"] = y[3 * n:4 * n]
            parts["U"] = y[4 * n:5 * n]
        parts["T2"] = y[self.n_scalar * n:].reshape(n, self.M - 1)
        return parts

    def initial_state(self):
        n = self.n
        T_c = self.props.T_c
        y = np.empty(self.size)
        y[:n] = self.H_init
        if self.is_sap:
            y[n:2 * n] = self.geom.R_f
            y[2 * n:3 * n] = self.sap.s_gi0
            y[3 * n:4 * n] = self.sap.r0
            y[4 * n:5 * n] = 0.0
        else:
            y[n:2 * n] = self.geom.R_f / math.sqrt(2.0)
        y[self.n_scalar * n:] = T_c
        return y

    def scale(self):
        n = self.n
        sc = np.empty(self.size)
        sc[:n] = self.props.latent
        sc[n:2 * n] = self.gamma
        if self.is_sap:
            sc[2 * n:3 * n] = self.gamma
            sc[3 * n:4 * n] = self.sap.r0
            sc[4 * n:5 * n] = math.pi * self.geom.R_f ** 2 * self.geom.L_f
        sc[self.n_scalar * n:] = 1.0
        return sc

    def pattern(self):
        """Structural Jacobian sparsity."""
        n, k = self.n, self.n_scalar
        m = self.M - 1
        rows, cols = [], []

        def couple(a, b):
            rows.append(a)
            cols.append(b)

        for i in range(n):
            cell = [v * n + i for v in range(k)] + [k * n + i * m + j for j in range(m)]
            for a in cell:
                for b in cell:
                    couple(a, b)
            for nb in (i - 1, i + 1):
                if 0 <= nb < n:
                    couple(i, nb)
        P = sp.csc_matrix((np.ones(len(rows), dtype=bool), (rows, cols)), shape=(self.size, self.size))
        return P

    # -- physics --------------------------------------------------------
    def full_T2(self, T2_int, T1):
        n = T2_int.shape[0]
        return np.column_stack([np.full(n, self.props.T_c), T2_int, T1])

    def evaluate(self, y):
        p = self.unpack(y)
        H1 = p["H1"]
        T1 = temp_from_enthalpy(H1, self.props, self.reg)
        ice = ~self.melted
        idx = np.flatnonzero(ice)
        dy = np.zeros_like(y)
        d = self.unpack(dy)
        flux = np.zeros(self.n)
        if idx.size:
            T2 = self.full_T2(p["T2"][idx], T1[idx])
            D2 = mr.water_diffusion(T2, self.props, self.reg)
            state = mr.MicroCellState(p["s_iw"][idx], T2, None)
            grad_front = mr.front_gradient(state, self.gamma)
            if self.is_sap:
                pres = ms.algebraic_update(p["s_gx"][idx], p["r"][idx], T1[idx], self.sap)
                sstate = ms.SapCellState(p["s_iw"][idx], p["s_gx"][idx], p["r"][idx], p["U"][idx], T2)
                ds_iw, ds_gi, dr, dU = ms.sap_rates(sstate, T1[idx], pres, grad_front, self.sap,
                                                    self.props, self.geom, D2[:, 0])
                d["s_gx"][idx] = ds_gi
                d["r"][idx] = dr
                d["U"][idx] = dU
            else:
                ds_iw = -D2[:, 0] / self.props.latent * grad_front
            d["s_iw"][idx] = ds_iw
            d["T2"][idx] = mr.micro_heat_rhs(state, T1[idx], ds_iw, self.gamma, self.props, self.reg, D=D2)
            flux[idx] = 2 * np.pi * self.gamma * D2[:, -1] * mr.outer_gradient(state, self.gamma)
        melted_idx = np.flatnonzero(self.melted)
        if self.is_sap and melted_idx.size:
            pres = ms.algebraic_update(p["s_gx"][melted_idx], p["r"][melted_idx], T1[melted_idx], self.sap)
            mstate = ms.SapCellState(p["s_iw"][melted_idx], p["s_gx"][melted_idx], p["r"][melted_idx],
                                     p["U"][melted_idx], None)
            ds_gw, dr, dU = ms.melted_rates(mstate, T1[melted_idx], pres, self.sap, self.geom)
            d["s_gx"][melted_idx] = ds_gw
            d["r"][melted_idx] = dr
            d["U"][melted_idx] = dU
        d["H1"][:] = self._macro(H1, T1, flux)
        return dy

    def _coefficients(self, H1):
        return macro_diffusivity(H1, self.melted, self.Pi_ratio, self.props, self.D_post, self.factor)

    def _macro(self, H1, T1, flux):
        if self.cfg.face_mean == "harmonic":
            return macro_rhs(H1, self.melted, flux, self.Pi_ratio, self.Y1, self.grid, self.props, self.reg,
                             self.D_post, self.factor, self._boundary_scale())
        A = self._coefficients(H1)
        A_face = 0.5 * (A[1:] + A[:-1])
        interior = self.grid.faces * A_face * np.diff(T1) / self.grid.dx
        _, bark = macro_fluxes(T1, A, self._boundary_scale(), self.grid, self.props)
        net = np.zeros_like(H1)
        net[:-1] += interior
        net[1:] -= interior
        net[-1] += bark
        return net / self.grid.volumes - np.where(self.melted, 0.0, flux / self.Y1)

    def _boundary_scale(self):
        return 1.0 if self.melted[-1] else self.Pi_ratio

    def _diagnostics(self, H1, T1, flux):
        A = self._coefficients(H1)
        _, bark = macro_fluxes(T1, A, self._boundary_scale(), self.grid, self.props)
        # stored energy derivative = |Y1| * bark - sum flux * V (the 2 pi factor dropped)
        inflow = self.Y1 * bark
        sink = float(np.sum(np.where(self.melted, 0.0, flux) * self.grid.volumes))
        return inflow, sink

    def budget_terms(self, y):
        """``(robin inflow, micro sink)`` without evaluating the full right-hand side."""
        p = self.unpack(y)
        T1 = temp_from_enthalpy(p["H1"], self.props, self.reg)
        flux = np.zeros(self.n)
        idx = np.flatnonzero(~self.melted)
        if idx.size:
            state = mr.MicroCellState(p["s_iw"][idx], self.full_T2(p["T2"][idx], T1[idx]), None)
            flux[idx] = 2 * np.pi * self.gamma * self.props.D_water * mr.outer_gradient(state, self.gamma)
        return self._diagnostics(p["H1"], T1, flux)

    def rhs(self, t, y):
        return self.evaluate(y)

    def event_values(self, t, y):
        p = self.unpack(y)
        g = p["s_iw"] - p["s_gx"] if self.is_sap else p["s_iw"].copy()
        g = np.array(g, dtype=float)
        g[self.melted] = np.inf
        return g

    def switch(self, y, cells):
        """Flip ``cells`` to the melted regime and merge their fields."""
        y = y.copy()
        p = self.unpack(y)
        T1 = temp_from_enthalpy(p["H1"], self.props, self.reg)
        for i in cells:
            self.melted[i] = True
            if self.is_sap:
                # gas/water interface takes the common radius (the gas side keeps p_wf continuous)
                p["s_iw"][i] = p["s_gx"][i]
            else:
                p["s_iw"][i] = 0.0
            p["T2"][i] = T1[i]
        return y

    def pressures(self, y):
        p = self.unpack(y)
        if not self.is_sap:
            return None
        T1 = temp_from_enthalpy(p["H1"], self.props, self.reg)
        return ms.algebraic_update(p["s_gx"], p["r"], T1, self.sap)

    def snapshot(self, t, y):
        p = self.unpack(y)
        snap = {"t": t, "H1": p["H1"].copy(), "T1": temp_from_enthalpy(p["H1"], self.props, self.reg),
                "s_iw": p["s_iw"].copy(), "regime": self.melted.copy()}
        if self.is_sap:
            pres = self.pressures(y)
            snap.update(s_gx=p["s_gx"].copy(), r=p["r"].copy(), U=p["U"].copy(),
                        p_wf=pres.p_wf.copy(), p_wv=pres.p_wv.copy())
        return snap


class _Recorder:
    """Collects snapshots, probe series, energy budget and events."""

    def __init__(self, system: ThawSystem, probe_node: int):
        self.sys = system
        self.node = probe_node
        self.snapshots = []
        self.events = []
        self.probe = {k: [] for k in ("t", "T1", "s_iw", "s_gx", "r", "U", "p_wf", "p_wv")}
        self.inflow = 0.0
        self.sink = 0.0
        self.budget_rows = []

    def record_probe(self, t, y):
        snap = self.sys.snapshot(t, y)
        self.probe["t"].append(t)
        for key in ("T1", "s_iw", "s_gx", "r", "U", "p_wf", "p_wv"):
            if key in snap:
                self.probe[key].append(float(snap[key][self.node]))

    def on_step(self, t, h, res):
        q_in, q_out = 0.0, 0.0
        for w, z in zip(STAGE_WEIGHTS, res.stages):
            a, b = self.sys.budget_terms(z)
            q_in += w * a
            q_out += w * b
        self.inflow += h * q_in
        self.sink += h * q_out
        self.record_probe(t + h, res.y_new)


def _dump_state(system: ThawSystem, rec: _Recorder) -> None:
    t = rec.probe["t"][-1] if rec.probe["t"] else 0.0
    log.error("integration failed after t = %.9g s; melted nodes %s", t,
              np.flatnonzero(system.melted).tolist())
    for key, series in rec.probe.items():
        if series:
            log.error("  probe %s = %.17g", key, series[-1])


def _probe_node(grid: RadialGrid, x: float) -> int:
    return int(np.argmin(np.abs(grid.x - x)))


def _make_result(cfg, system, rec, y0, y_end, stats, t_final, wall):
    stored = stored_energy(system.unpack(y_end)["H1"], system.grid, system.Y1) - stored_energy(
        system.unpack(y0)["H1"], system.grid, system.Y1)
    budget = {"stored_change": stored, "robin_inflow": rec.inflow, "micro_sink": rec.sink,
              "residual": stored - (rec.inflow - rec.sink), "t_final": t_final}
    probe = {k: np.asarray(v) for k, v in rec.probe.items() if v}
    snaps = sorted(rec.snapshots, key=lambda s: s["t"])
    return SimResult(cfg, system.grid.x.copy(), np.array([s["t"] for s in snaps]), snaps,
                     sorted(rec.events, key=lambda e: (e[1], e[0])), probe, budget,
                     dict(stats, wall_time=wall), system.tensor)


def run_simulation(cfg: SimConfig, tensor: EffectiveTensor | None = None) -> SimResult:
    """Run one thaw scenario from the frozen initial state."""
    tensor = tensor or load_tensor(cfg)
    if cfg.coupling == "split":
        return run_split(cfg, tensor)
    system = ThawSystem(cfg, tensor)
    y0 = system.initial_state()
    rec = _Recorder(system, _probe_node(system.grid, cfg.probe_x))
    rec.record_probe(0.0, y0)
    if 0.0 in cfg.output_times:
        rec.snapshots.append(system.snapshot(0.0, y0))
    tol = Tolerances(cfg.abs_tol, cfg.rel_tol, system.scale())
    solver = TRBDF2(system.rhs, system.size, tol, system.pattern())

    def on_event(t, y, k, g):
        cells = sorted(set([k]) | set(np.flatnonzero(g <= 0).tolist()) - set(np.flatnonzero(system.melted)))
        for c in cells:
            rec.events.append((int(c), t))
            log.info("node %d (x = %.4f m) melted at t = %.2f s", c, system.grid.x[c], t)
        return system.switch(y, cells)

    def on_stop(t, y):
        rec.snapshots.append(system.snapshot(t, y))

    def stop_when(t, y):
        if cfg.stop_after_melt is None or not np.all(system.melted):
            return False
        return t >= max(e[1] for e in rec.events) + cfg.stop_after_melt

    started = _time.perf_counter()
    try:
        t_final, y_end, stats = integrate(solver, 0.0, y0, cfg.t_end, h0=1e-4, stop_times=cfg.output_times,
                                          event_fn=system.event_values, on_event=on_event,
                                          on_step=rec.on_step, on_stop=on_stop, stop_when=stop_when)
    except IntegrationError:
        _dump_state(system, rec)
        raise
    wall = _time.perf_counter() - started
    if not rec.snapshots or rec.snapshots[-1]["t"] != t_final:
        rec.snapshots.append(system.snapshot(t_final, y_end))
    info = {"steps": stats.steps, "rejected": stats.rejected, "newton_failures": stats.newton_failures,
            "rhs_evals": solver.n_rhs, "jacobians": solver.n_jac, "factorizations": solver.n_lu}
    log.info("finished at t = %.1f s after %d steps (%.1f s wall)", t_final, stats.steps, wall)
    return _make_result(cfg, system, rec, y0, y_end, info, t_final, wall)


# -- frozen-coefficient splitting ---------------------------------------------

def _backward_euler(fun, y, dt, scale, tol=1e-10, max_iter=20):
    """Newton solve of ``z = y + dt f(z)`` with a finite-difference Jacobian."""
    z = y.copy()
    n = len(y)
    for _ in range(max_iter):
        f = fun(z)
        res = z - y - dt * f
        J = np.eye(n)
        for j in range(n):
            dz = 1e-7 * max(abs(z[j]), scale[j])
            zp = z.copy()
            zp[j] += dz
            J[:, j] -= dt * (fun(zp) - f) / dz
        step = np.linalg.solve(J, -res)
        z = z + step
        if np.max(np.abs(step) / scale) < tol:
            return z
    raise IntegrationError("backward Euler substep did not converge")


def run_split(cfg: SimConfig, tensor: EffectiveTensor) -> SimResult:
    """Fixed-step frozen-coefficient splitting (micro heat, macro, interfaces)."""
    system = ThawSystem(cfg, tensor)
    n, M = system.n, system.M
    y = system.initial_state()
    y0 = y.copy()
    rec = _Recorder(system, _probe_node(system.grid, cfg.probe_x))
    rec.record_probe(0.0, y)
    dt = cfg.split_dt
    n_steps = int(round(cfg.t_end / dt))
    if not math.isclose(n_steps * dt, cfg.t_end, rel_tol=1e-9):
        raise ValueError("split_dt must divide t_end")
    out_steps = {int(round(t / dt)) for t in cfg.output_times}
    if 0 in out_steps:
        rec.snapshots.append(system.snapshot(0.0, y))
    scale = system.scale()
    sl_T = slice(system.n_scalar * n, None)
    sl_H = slice(0, n)
    sl_iface = slice(n, system.n_scalar * n)
    started = _time.perf_counter()
    for step in range(1, n_steps + 1):
        t = step * dt
        # micro heat with macro values and interfaces frozen, one cell at a time
        p = system.unpack(y)
        T1 = temp_from_enthalpy(p["H1"], system.props, system.reg)
        ds = system.unpack(system.evaluate(y))["s_iw"]
        for i in np.flatnonzero(~system.melted):
            cell = mr.MicroCellState(np.array([p["s_iw"][i]]), None, None)

            def heat(Tint, i=i, cell=cell):
                full = system.full_T2(Tint[None, :], np.array([T1[i]]))
                cell.T2 = full
                return mr.micro_heat_rhs(cell, T1[i], ds[i], system.gamma, system.props, system.reg)[0]

            y[sl_T].reshape(n, M - 1)[i] = _backward_euler(heat, p["T2"][i].copy(), dt, np.ones(M - 1))
        # macro enthalpy with the micro flux frozen
        flux_y = y.copy()
        _, flux = _split_flux(system, flux_y)

        def macro(H1):
            T1m = temp_from_enthalpy(H1, system.props, system.reg)
            return system._macro(H1, T1m, flux)

        H_old = y[sl_H].copy()
        y[sl_H] = _backward_euler(macro, H_old, dt, scale[sl_H])
        dH = y[sl_H] - H_old
        rec.inflow += dt * system._diagnostics(y[sl_H], temp_from_enthalpy(y[sl_H], system.props, system.reg), flux)[0]
        rec.sink += dt * float(np.sum(np.where(system.melted, 0.0, flux) * system.grid.volumes))
        del dH
        # interface variables with temperatures frozen
        frozen = y.copy()

        def iface(v):
            z = frozen.copy()
            z[sl_iface] = v
            return system.evaluate(z)[sl_iface]

        y[sl_iface] = _backward_euler(iface, y[sl_iface].copy(), dt, scale[sl_iface])
        g = system.event_values(t, y)
        hit = np.flatnonzero(g <= 0)
        if hit.size:
            for c in hit:
                rec.events.append((int(c), t))
            y = system.switch(y, hit)
        rec.record_probe(t, y)
        if step in out_steps:
            rec.snapshots.append(system.snapshot(t, y))
    wall = _time.perf_counter() - started
    if not rec.snapshots or rec.snapshots[-1]["t"] != cfg.t_end:
        rec.snapshots.append(system.snapshot(cfg.t_end, y))
    return _make_result(cfg, system, rec, y0, y, {"steps": n_steps}, cfg.t_end, wall)


def _split_flux(system: ThawSystem, y):
    p = system.unpack(y)
    T1 = temp_from_enthalpy(p["H1"], system.props, system.reg)
    flux = np.zeros(system.n)
    idx = np.flatnonzero(~system.melted)
    if idx.size:
        T2 = system.full_T2(p["T2"][idx], T1[idx])
        state = mr.MicroCellState(p["s_iw"][idx], T2, None)
        D2 = mr.water_diffusion(T2, system.props, system.reg)
        flux[idx] = 2 * np.pi * system.gamma * D2[:, -1] * mr.outer_gradient(state, system.gamma)
    return T1, flux
