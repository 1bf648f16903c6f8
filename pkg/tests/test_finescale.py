import numpy as np
import pytest

from freezethaw import finescale as fs


class TestProblem:
    @pytest.mark.parametrize("eps", [0.3, 1 / 4.5])
    def test_rejects_non_integer_cell_count(self, eps):
        with pytest.raises(ValueError, match="integer"):
            fs.FineScaleProblem(eps)

    def test_rejects_under_resolved_cells(self):
        with pytest.raises(ValueError, match="nodes per cell"):
            fs.FineScaleProblem(0.25, nodes_per_cell=6)

    def test_inclusions_are_interior_and_periodic(self):
        p = fs.FineScaleProblem(0.25, nodes_per_cell=16)
        mask = p.inclusion_mask()
        assert mask.shape == (64, 64)
        assert not mask[0].any() and not mask[-1].any() and not mask[:, 0].any() and not mask[:, -1].any()
        block = mask[:16, :16]
        assert np.array_equal(mask[16:32, 48:64], block)
        assert block.sum() == 24
        assert np.allclose(p.kappa()[mask], 0.0625)

    def test_no_hole_means_unit_kappa(self):
        assert np.all(fs.FineScaleProblem(0.5, 8, hole_radius=0.0).kappa() == 1.0)


class TestFineSolver:
    def test_constant_state_is_preserved(self):
        p = fs.FineScaleProblem(0.25, 8, theta_init=3.0, theta_boundary=3.0)
        tr = fs.solve_fine(p, [0.01, 0.02], dt=1e-3)
        for f in tr.fields:
            assert np.allclose(f, 3.0, rtol=0, atol=1e-13)

    def test_heat_kernel_series(self):
        p = fs.FineScaleProblem(0.25, 16, hole_radius=0.0)
        tr = fs.solve_fine(p, [0.05], dt=1e-4)
        xs = p.coordinates()
        X, Y = np.meshgrid(xs, xs, indexing="ij")
        exact = fs.heat_kernel_square(X, Y, 0.05)
        assert np.max(np.abs(tr.fields[-1] - exact)) < 1e-3

    def test_series_limits(self):
        # far from the edges at t -> 0 the series returns the initial value
        assert fs.heat_kernel_square(0.5, 0.5, 1e-4) == pytest.approx(0.0, abs=1e-6)
        assert fs.heat_kernel_square(0.5, 0.5, 5.0) == pytest.approx(1.0, abs=1e-12)

    def test_maximum_principle_and_energy_decay(self):
        p = fs.FineScaleProblem(0.25, 8)
        times = np.round(np.arange(1, 21) * 2e-3, 12)
        tr = fs.solve_fine(p, times, dt=1e-3)
        energy = [0.5 * np.sum((f - 1.0) ** 2) * p.h ** 2 for f in tr.fields]
        for f in tr.fields:
            assert f.min() >= -1e-12 and f.max() <= 1.0 + 1e-12
        assert np.all(np.diff(energy) <= 1e-15)

    def test_dihedral_symmetry(self):
        p = fs.FineScaleProblem(0.25, 8)
        f = fs.solve_fine(p, [0.02], dt=1e-3).fields[-1]
        for g in (f.T, f[::-1], f[:, ::-1], np.rot90(f)):
            assert np.allclose(g, f, atol=1e-12)


@pytest.fixture(scope="module")
def hom():
    Pi = np.diag([0.8115, 0.8115])
    return fs.solve_homogenized([0.01, 0.02], 1e-3, Pi, 1 - np.pi * 0.182 ** 2, 0.182, n_macro=16, n_shell=6)


class TestLimit:

    def test_reconstruction_of_itself_is_exact(self, hom):
        p = fs.FineScaleProblem(0.25, 8, hole_radius=0.182)
        rec = [fs.reconstruct(hom, p, k) for k in range(2)]
        fine = fs.Trajectory(hom.times, rec)
        assert np.all(fs.compare_to_limit(fine, hom, p) == 0.0)

    def test_constant_offset_norm(self, hom):
        p = fs.FineScaleProblem(0.25, 8, hole_radius=0.182)
        fine = fs.Trajectory(hom.times, [fs.reconstruct(hom, p, k) + 0.3 for k in range(2)])
        assert np.allclose(fs.compare_to_limit(fine, hom, p), 0.3 * 1.0, rtol=1e-12)

    def test_mismatched_times(self, hom):
        p = fs.FineScaleProblem(0.25, 8)
        with pytest.raises(ValueError, match="times"):
            fs.compare_to_limit(fs.Trajectory(np.array([0.01]), [np.zeros((32, 32))]), hom, p)

    def test_limit_stays_in_data_range(self, hom):
        for t1, t2 in zip(hom.theta1, hom.theta2):
            assert t1.min() >= -1e-12 and t1.max() <= 1 + 1e-12
            assert t2.min() >= -1e-12 and t2.max() <= 1 + 1e-12

    def test_inclusions_lag_the_matrix(self, hom):
        # the slow disks heat up after the surrounding matrix
        t1, t2 = hom.theta1[0], hom.theta2[0]
        assert np.all(t2[1:-1, 1:-1, 0] <= t1[1:-1, 1:-1] + 1e-14)

    def test_snapshot_grid_check(self):
        with pytest.raises(ValueError, match="multiples"):
            fs.solve_fine(fs.FineScaleProblem(0.5, 8), [0.0015], dt=1e-3)


class TestTrend:
    def test_error_decreases_with_eps(self):
        table = fs.convergence_study([2, 4], setup=fs.LadderSetup(times=(0.02,), dt=1e-3, nodes_per_cell=8,
                                                                  n_macro=32, n_shell=6), mesh_h=0.05)
        errs = [e for _, _, e in table]
        assert errs[1] < errs[0]
