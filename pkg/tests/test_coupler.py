import dataclasses

import numpy as np
import pytest

from freezethaw import cli_io
from freezethaw.corrector import CellGeometry, compute_effective_tensor
from freezethaw.coupler import SimConfig, ThawSystem, run_simulation
from freezethaw.thermo import ThermoProps

SMALL = CellGeometry(R_tree=0.02)


@pytest.fixture(scope="module")
def tensor():
    return compute_effective_tensor(SMALL, 0.05)


def small(model, **kw):
    kw.setdefault("t_end", 3600.0)
    kw.setdefault("stop_after_melt", 5.0)
    return SimConfig(model=model, geom=SMALL, M_macro=8, **kw)


@pytest.fixture(scope="module")
def reduced_run(tensor):
    return run_simulation(small("reduced", output_times=(60.0, 120.0)), tensor)


@pytest.fixture(scope="module")
def sap_run(tensor):
    return run_simulation(small("sap", output_times=(30.0, 60.0)), tensor)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(t_end=0.0), dict(abs_tol=-1.0), dict(M_micro=1), dict(M_macro=3),
                                    dict(model="full"), dict(coupling="both"), dict(output_times=(5e5,))])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SimConfig(**kw)

    def test_model_defaults(self):
        assert SimConfig().t_end == 24 * 3600.0
        assert SimConfig(model="sap").t_end == 3 * 3600.0
        assert SimConfig().diffusion_factor == 1.0
        assert SimConfig(model="sap").effective_post_melt_D == pytest.approx(10 * 0.556 / 1000)


class TestEquilibrium:
    @pytest.mark.parametrize("model", ["reduced", "sap"])
    def test_no_forcing_no_melting(self, tensor, model):
        cfg = small(model, thermo=ThermoProps(T_a=273.15), t_end=600.0, stop_after_melt=None)
        res = run_simulation(cfg, tensor)
        assert res.events == []
        snap = res.snapshots[-1]
        assert res.times[-1] == 600.0
        assert np.allclose(snap["T1"], 273.15, rtol=0, atol=1e-9)
        start = ThawSystem(cfg, tensor).initial_state()[8:16]
        assert np.allclose(snap["s_iw"], start, rtol=1e-9)


class TestReduced:
    def test_all_cells_melt_outside_in(self, reduced_run):
        m = reduced_run.melt_times
        assert np.all(np.isfinite(m))
        assert np.all(np.diff(m) < 0)

    def test_budget_closes(self, reduced_run):
        b = reduced_run.budget
        scale = max(abs(b["stored_change"]), abs(b["robin_inflow"]), abs(b["micro_sink"]))
        # round-off only; the stage-weighted budget is exact in exact arithmetic
        assert abs(b["residual"]) <= 1e-6 * scale

    def test_snapshots_increasing(self, reduced_run):
        assert np.all(np.diff(reduced_run.times) > 0)
        assert reduced_run.times[0] == 60.0

    def test_monotone_warm_up(self, reduced_run):
        T = reduced_run.probe["T1"]
        assert np.all(np.diff(T) >= -1e-6)

    def test_events_in_range(self, reduced_run):
        for _, t in reduced_run.events:
            assert 0 <= t <= reduced_run.config.t_end

    def test_tighter_tolerance_same_melt_time(self, tensor, reduced_run):
        cfg = dataclasses.replace(reduced_run.config, abs_tol=7e-9, rel_tol=1e-7, output_times=())
        loose = dataclasses.replace(reduced_run.config, abs_tol=7e-8, rel_tol=1e-6, output_times=())
        a = run_simulation(loose, tensor).final_melt_time
        b = run_simulation(cfg, tensor).final_melt_time
        assert abs(a - b) < 0.01 * b
        assert abs(b - reduced_run.final_melt_time) < 0.01 * b


class TestSap:
    def test_all_cells_melt_outside_in(self, sap_run):
        m = sap_run.melt_times
        assert np.all(np.isfinite(m))
        assert np.all(np.diff(m) < 0)

    def test_faster_than_reduced(self, sap_run, reduced_run):
        assert reduced_run.final_melt_time > 3 * sap_run.final_melt_time

    def test_pressures_positive(self, sap_run):
        assert np.all(sap_run.probe["p_wv"] > -1e6)
        for snap in sap_run.snapshots:
            assert np.all(snap["p_wf"] > 0)

    def test_vessel_pressure_rises(self, sap_run):
        p = sap_run.probe["p_wv"]
        assert p[-1] - p[0] > 5e4

    def test_ice_layer_never_regrows(self, sap_run):
        b = sap_run.probe["s_iw"] - sap_run.probe["s_gx"]
        ice = b > 0
        assert np.all(np.diff(b[ice]) <= 1e-12)

    def test_continuous_fields_across_event(self, sap_run):
        node = np.argmin(np.abs(sap_run.x - sap_run.config.probe_x))
        t_melt = sap_run.melt_times[node]
        t = sap_run.probe["t"]
        k = np.searchsorted(t, t_melt)
        for key in ("T1", "r", "U"):
            series = sap_run.probe[key]
            scale = max(np.ptp(series), 1e-30)
            assert abs(series[k] - series[k - 1]) < 0.05 * scale


class TestDeterminism:
    def test_byte_identical_csv(self, tensor, tmp_path):
        cfg = small("sap", t_end=120.0, stop_after_melt=None, output_times=(60.0, 120.0))
        paths = []
        for i in range(2):
            res = run_simulation(cfg, tensor)
            paths.append(tmp_path / f"run{i}.csv")
            cli_io.emit_snapshots(res, paths[-1])
        assert paths[0].read_bytes() == paths[1].read_bytes()


class TestSplit:
    def test_first_order_in_dt(self, tensor):
        def front(dt):
            cfg = SimConfig(model="reduced", geom=SMALL, M_macro=4, coupling="split", split_dt=dt, t_end=0.004,
                            thermo=ThermoProps(T_a=300.0))
            return run_simulation(cfg, tensor)

        ref = front(1.25e-4).snapshots[-1]["T1"]
        errs = [np.max(np.abs(front(dt).snapshots[-1]["T1"] - ref)) for dt in (2e-3, 1e-3, 5e-4)]
        assert errs[0] > errs[1] > errs[2]
        ratios = np.array(errs[:-1]) / np.array(errs[1:])
        assert np.all(ratios > 1.5)

    def test_split_requires_divisor(self, tensor):
        cfg = SimConfig(model="reduced", geom=SMALL, M_macro=4, coupling="split", split_dt=3e-3, t_end=0.01)
        with pytest.raises(ValueError, match="divide"):
            run_simulation(cfg, tensor)
