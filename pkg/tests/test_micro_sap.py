import numpy as np
import pytest
from hypothesis import given, strategies as st

from freezethaw import micro_sap as ms
from freezethaw.corrector import CellGeometry
from freezethaw.micro_reduced import Regime
from freezethaw.thermo import ThermoProps

GEOM = CellGeometry()
SAP = ms.SapProps()
THERMO = ThermoProps()
T_C = 273.15


def initial_state(n=1):
    return ms.SapCellState.initial(n, 4, GEOM, SAP, T_C)


class TestProps:
    def test_derived_defaults(self):
        assert SAP.s_gi0 == pytest.approx(2.4749e-6, rel=1e-4)
        # 1e5 * 0.029 / (8.314 * 273.15)
        assert SAP.rho_gv0 == pytest.approx(1.276988, rel=1e-6)

    @pytest.mark.parametrize("name", ["sigma", "Lp", "r0", "drain_time"])
    def test_rejects_non_positive(self, name):
        with pytest.raises(ValueError):
            ms.SapProps(**{name: 0.0})


class TestPressures:
    def test_initial_values(self):
        p = ms.algebraic_update(SAP.s_gi0, SAP.r0, T_C, SAP)
        assert p.p_gf == pytest.approx(2.0e5, rel=1e-14)
        assert p.p_wf == pytest.approx(2.0e5 - 2 * 0.076 / 2.4748737e-6, rel=1e-7)
        assert p.p_wf == pytest.approx(1.386e5, rel=1e-3)
        assert p.p_gv == pytest.approx(1.0e5, rel=1e-12)
        assert p.p_wv == pytest.approx(1.0e5 - 2 * 0.076 / 6.0e-6, rel=1e-12)

    def test_vessel_gas_quartered_when_radius_doubles(self):
        a = ms.algebraic_update(SAP.s_gi0, SAP.r0, 280.0, SAP)
        b = ms.algebraic_update(SAP.s_gi0, 2 * SAP.r0, 280.0, SAP)
        assert a.p_gv / b.p_gv == pytest.approx(4.0, rel=1e-14)

    def test_boyle_factor(self):
        p = ms.algebraic_update(SAP.s_gi0 / np.sqrt(2), SAP.r0, T_C, SAP)
        assert p.p_gf == pytest.approx(4.0e5, rel=1e-12)

    @given(st.floats(1e-6, 2e-5))
    def test_vessel_gas_mass_conserved(self, r):
        p = ms.algebraic_update(SAP.s_gi0, r, T_C, SAP)
        assert p.rho_gv * r ** 2 == pytest.approx(SAP.rho_gv0 * SAP.r0 ** 2, rel=1e-12)

    @pytest.mark.parametrize("radius", [0.0, -1e-6, 1e-13])
    def test_singular_closure(self, radius):
        with pytest.raises(ms.ClosureError):
            ms.algebraic_update(radius, SAP.r0, T_C, SAP)
        with pytest.raises(ms.ClosureError):
            ms.algebraic_update(SAP.s_gi0, radius, T_C, SAP)


class TestRates:
    def test_initial_wall_flow(self):
        p = ms.algebraic_update(SAP.s_gi0, SAP.r0, T_C, SAP)
        osmotic = 8.314 * 58.4 * 273.15
        assert osmotic == pytest.approx(1.326e5, rel=1e-3)
        q = ms.wall_flow(p, T_C, SAP, GEOM)
        assert q == pytest.approx(-(5.54e-13 * 2.2e-8 / 16) * (p.p_wv - p.p_wf - osmotic), rel=1e-14)
        assert q == pytest.approx(1.5e-16, rel=0.01)

    def test_frozen_fiber_without_heat_is_at_rest(self):
        s = initial_state()
        p = ms.algebraic_update(s.s_gx, s.r, T_C, SAP)
        rates = ms.sap_rates(s, T_C, p, np.zeros(1), SAP, THERMO, GEOM, np.full(1, THERMO.D_water))
        assert all(np.all(r == 0.0) for r in rates)

    def test_zero_flow_and_gradient_all_zero(self):
        # pressures balanced so the wall flow vanishes
        s = ms.SapCellState(np.array([3.0e-6]), np.array([2.9e-6]), np.array([5e-6]), np.zeros(1), None)
        p = ms.algebraic_update(s.s_gx, s.r, T_C, SAP)
        osmotic = SAP.R_gas * SAP.C_s * T_C
        balanced = ms.PressureSet(p.p_wf, p.p_wf + osmotic, p.p_gv, p.p_gf, p.rho_gv)
        rates = ms.sap_rates(s, T_C, balanced, np.zeros(1), SAP, THERMO, GEOM, np.full(1, THERMO.D_water))
        assert all(np.allclose(r, 0.0, atol=1e-30) for r in rates)

    def test_detached_front_uses_wall_flow(self):
        s = ms.SapCellState(np.array([3.0e-6]), np.array([2.6e-6]), np.array([SAP.r0]), np.zeros(1), None)
        p = ms.algebraic_update(s.s_gx, s.r, T_C, SAP)
        grad = np.array([1.0e3])
        ds_iw, ds_gi, dr, dU = ms.sap_rates(s, T_C, p, grad, SAP, THERMO, GEOM, np.full(1, THERMO.D_water))
        q = ms.wall_flow(p, T_C, SAP, GEOM)
        assert dU[0] == pytest.approx(q[0])
        melt = THERMO.D_water / THERMO.latent * grad[0]
        assert ds_iw[0] == pytest.approx(-melt + q[0] / (2 * np.pi * 3.0e-6 * GEOM.L_f))
        expect_gi = (-(THERMO.rho_w - THERMO.rho_i) * 3.0e-6 * ds_iw[0] / (2.6e-6 * THERMO.rho_i)
                     + THERMO.rho_w * q[0] / (2 * np.pi * 2.6e-6 * THERMO.rho_i * GEOM.L_f))
        assert ds_gi[0] == pytest.approx(expect_gi)
        assert dr[0] == pytest.approx(-16 * q[0] / (2 * np.pi * SAP.r0 * GEOM.L_v))

    def test_outflow_capped_by_melt_at_wall(self):
        s = initial_state()
        p = ms.algebraic_update(s.s_gx, s.r, T_C, SAP)
        grad = np.array([1.0e-3])  # barely warm: melt volume below the wall capacity
        ds_iw, ds_gi, dr, dU = ms.sap_rates(s, T_C, p, grad, SAP, THERMO, GEOM, np.full(1, THERMO.D_water))
        melt_vol = 2 * np.pi * GEOM.R_f * GEOM.L_f * THERMO.D_water / THERMO.latent * grad[0]
        assert dU[0] == pytest.approx(melt_vol, rel=1e-12)
        assert ds_iw[0] == pytest.approx(0.0, abs=1e-25)
        assert ds_gi[0] > 0 and dr[0] < 0

    def test_positive_inflow_shrinks_vessel_bubble(self):
        s = ms.SapCellState(np.array([3.0e-6]), np.array([2.6e-6]), np.array([SAP.r0]), np.zeros(1), None)
        p = ms.algebraic_update(s.s_gx, s.r, T_C, SAP)
        _, _, dr, dU = ms.sap_rates(s, T_C, p, np.array([10.0]), SAP, THERMO, GEOM, np.full(1, THERMO.D_water))
        assert dU[0] > 0 and dr[0] < 0


class TestMelted:
    def test_gas_bubble_grows_with_outflow(self):
        s = ms.SapCellState(np.array([2.7e-6]), np.array([2.7e-6]), np.array([SAP.r0]), np.zeros(1), None,
                            np.array([Regime.MELTED]))
        p = ms.algebraic_update(s.s_gx, s.r, T_C, SAP)
        ds_gw, dr, dU = ms.melted_rates(s, T_C, p, SAP, GEOM)
        assert dU[0] > 0 and ds_gw[0] > 0
        assert ds_gw[0] == pytest.approx(dU[0] / (2 * np.pi * 2.7e-6 * GEOM.L_f))

    def test_zero_flow_zero_rate(self):
        s = ms.SapCellState(np.array([2.7e-6]), np.array([2.7e-6]), np.array([SAP.r0]), np.zeros(1), None,
                            np.array([Regime.MELTED]))
        p = ms.algebraic_update(s.s_gx, s.r, T_C, SAP)
        osmotic = SAP.R_gas * SAP.C_s * T_C
        balanced = ms.PressureSet(p.p_wf, p.p_wf + osmotic, p.p_gv, p.p_gf, p.rho_gv)
        ds_gw, dr, dU = ms.melted_rates(s, T_C, balanced, SAP, GEOM)
        assert ds_gw[0] == 0 and dU[0] == 0

    def test_fiber_water_budget_by_quadrature(self):
        # integrate the melted rates and check the fiber gas area grows by U / L_f
        s_gw, r, U = 2.7e-6, SAP.r0, 0.0
        dt = 1e-3
        for _ in range(2000):
            st_ = ms.SapCellState(np.array([s_gw]), np.array([s_gw]), np.array([r]), np.array([U]), None,
                                  np.array([Regime.MELTED]))
            p = ms.algebraic_update(st_.s_gx, st_.r, T_C, SAP)
            # midpoint rule
            k1 = ms.melted_rates(st_, T_C, p, SAP, GEOM)
            mid = ms.SapCellState(np.array([s_gw + 0.5 * dt * k1[0][0]]), None, np.array([r + 0.5 * dt * k1[1][0]]),
                                  None, None, np.array([Regime.MELTED]))
            mid.s_gx = mid.s_iw
            pm = ms.algebraic_update(mid.s_gx, mid.r, T_C, SAP)
            k2 = ms.melted_rates(mid, T_C, pm, SAP, GEOM)
            s_gw += dt * k2[0][0]
            r += dt * k2[1][0]
            U += dt * k2[2][0]
        area_gain = np.pi * (s_gw ** 2 - 2.7e-6 ** 2) * GEOM.L_f
        assert area_gain == pytest.approx(U, rel=1e-6)
        vessel_loss = np.pi * (SAP.r0 ** 2 - r ** 2) * GEOM.L_v
        assert vessel_loss == pytest.approx(GEOM.N_f * U, rel=1e-6)


class TestEvent:
    def test_thickness(self):
        s = ms.SapCellState(np.array([3.0e-6]), np.array([2.9e-6]), np.array([SAP.r0]), np.zeros(1), None)
        assert ms.ice_thickness_event(s)[0] == pytest.approx(1.0e-7)

    def test_regime_views(self):
        s = ms.SapCellState(np.array([3.0e-6, 2.8e-6]), np.array([2.9e-6, 2.8e-6]), np.full(2, SAP.r0),
                            np.zeros(2), None, np.array([Regime.ICE_PRESENT, Regime.MELTED]))
        assert s.s_gi[0] == 2.9e-6 and np.isnan(s.s_gi[1])
        assert s.s_gw[1] == 2.8e-6 and np.isnan(s.s_gw[0])
