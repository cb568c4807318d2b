import math
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from _oracles import (fd_interface_eigs, fd_interface_tridiag, rk4_transfer,
                      tridiag_char_log)
from thinwg import solvable1d as s1
from thinwg.errors import (BracketExhaustionError, ContractError,
                           ResolutionError)

FREE = s1.PointModel1d(-1.0, 1.0)
BETA1 = s1.PointModel1d(-1.0, 1.0, s1.PointInteraction.delta_prime(1.0))
V0 = s1.PiecewisePotential.constant(0.0)


class TestDomainTypes:
    def test_interaction_validation(self):
        with pytest.raises(ContractError):
            s1.PointInteraction.delta_prime(-0.5)
        with pytest.raises(ContractError):
            s1.PointInteraction.delta(math.inf)
        with pytest.raises(ContractError):
            s1.PointInteraction("bogus")

    def test_infinite_delta_prime_is_decoupled(self):
        it = s1.PointInteraction.delta_prime(math.inf)
        assert it.decoupled
        assert it.kind == s1.NEUMANN_DECOUPLED

    def test_potential_validation(self):
        with pytest.raises(ContractError):
            s1.PiecewisePotential((0.5, 0.5), (1.0, 2.0, 3.0))
        with pytest.raises(ContractError):
            s1.PiecewisePotential((0.5,), (1.0,))
        with pytest.raises(ContractError):
            s1.PiecewisePotential((), (-1.0,))

    def test_potential_lookup_and_slabs(self):
        pot = s1.PiecewisePotential((-0.25, 0.5), (1.0, 0.0, 3.0))
        assert pot.value_at(-1.0) == 1.0
        assert pot.value_at(0.0) == 0.0
        assert pot.value_at(0.75) == 3.0
        assert pot.sup == 3.0
        slabs = pot.slabs(-1.0, 1.0)
        assert [v for _, _, v in slabs] == [1.0, 0.0, 3.0]
        assert slabs[0][0] == -1.0 and slabs[-1][1] == 1.0

    def test_model_validation(self):
        with pytest.raises(ContractError):
            s1.PointModel1d(0.5, 1.0)
        with pytest.raises(ContractError):
            s1.PointModel1d(-1.0, -0.5)


class TestTransferFree:
    def test_zero_limit(self):
        t = s1.transfer_matrix_free(0.0, 1.0, 0.0)
        assert np.allclose(t.as_array(), [[1, 1], [0, 1]], atol=1e-14)

    def test_half_period(self):
        t = s1.transfer_matrix_free(math.pi ** 2, 1.0, 0.0)
        assert np.allclose(t.as_array(), [[-1, 0], [0, -1]], atol=1e-12)

    def test_against_rk4(self):
        t = s1.transfer_matrix_free(1.0, 0.7, 3.0)
        ref = rk4_transfer(1.0, 0.7, 3.0)
        assert np.max(np.abs(t.as_array() - ref)) <= 1e-10

    def test_determinant_one_over_sampling_envelope(self):
        rng = np.random.default_rng(7)
        for _ in range(300):
            lam = rng.uniform(0.0, 120.0)
            v = rng.uniform(0.0, 4.0)
            a = rng.uniform(0.1, 2.0)
            t = s1.transfer_matrix_free(lam, a, v)
            assert abs(t.det() - 1.0) <= 1e-12

    def test_determinant_one_hyperbolic_and_tiny(self):
        for lam, a, v in [(-3.0, 1.5, 0.0), (0.5, 2.0, 4.0), (1e-13, 1.0, 0.0),
                          (-1e-13, 0.3, 0.0), (2.0, 0.1, 2.0)]:
            t = s1.transfer_matrix_free(lam, a, v)
            assert abs(t.det() - 1.0) <= 1e-12

    def test_continuity_at_turning_value(self):
        base = s1.transfer_matrix_free(2.0, 1.3, 2.0).as_array()
        lo = s1.transfer_matrix_free(2.0 - 1e-13, 1.3, 2.0).as_array()
        hi = s1.transfer_matrix_free(2.0 + 1e-13, 1.3, 2.0).as_array()
        assert np.max(np.abs(lo - base)) <= 1e-10
        assert np.max(np.abs(hi - base)) <= 1e-10

    def test_product_keeps_determinant(self):
        t = (s1.transfer_matrix_free(5.0, 0.4, 1.0)
             @ s1.transfer_matrix_point(s1.PointInteraction.delta_prime(2.0))
             @ s1.transfer_matrix_free(5.0, 0.8, 0.0))
        assert abs(t.det() - 1.0) <= 1e-12


class TestTransferPoint:
    def test_matrices(self):
        eye = np.eye(2)
        assert np.allclose(
            s1.transfer_matrix_point(s1.PointInteraction.delta_prime(0.0)).as_array(), eye)
        assert np.allclose(
            s1.transfer_matrix_point(s1.PointInteraction.none()).as_array(), eye)
        assert np.allclose(
            s1.transfer_matrix_point(s1.PointInteraction.delta_prime(1.0)).as_array(),
            [[1, 1], [0, 1]])
        assert np.allclose(
            s1.transfer_matrix_point(s1.PointInteraction.delta(2.0)).as_array(),
            [[1, 0], [2, 1]])

    def test_decoupled_rejected(self):
        with pytest.raises(ContractError):
            s1.transfer_matrix_point(s1.PointInteraction.neumann_decoupled())


class TestSecular:
    def test_free_roots(self):
        assert s1.secular_function(FREE, 0.0) == 0.0
        assert abs(s1.secular_function(FREE, (math.pi / 2) ** 2)) <= 1e-12

    def test_sign_and_ratio_match_fd_characteristic_determinant(self):
        kd, ko, md = fd_interface_tridiag(-1, 1, 1e-4, "delta_prime", 1.0)
        lams = [0.3, 1.0, 2.2, 5.0]
        svals = [s1.secular_function(BETA1, x) for x in lams]
        logs = [tridiag_char_log(kd, ko, md, x) for x in lams]
        for sv, (sign, _) in zip(svals, logs):
            assert math.copysign(1.0, sv) == sign
        for i in range(1, len(lams)):
            s_ratio = svals[i] / svals[0]
            d_ratio = logs[i][0] * logs[0][0] * math.exp(logs[i][1] - logs[0][1])
            assert abs(s_ratio - d_ratio) <= 1e-6 * abs(s_ratio)

    def test_no_overflow_deep_below_spectrum(self):
        val = s1.secular_function(BETA1, -1e4)
        assert math.isfinite(val)

    def test_decoupled_rejected(self):
        dec = s1.PointModel1d(-1.0, 1.0, s1.PointInteraction.neumann_decoupled())
        with pytest.raises(ContractError):
            s1.secular_function(dec, 1.0)


class TestEigenvalues1d:
    def test_free_interval(self):
        spec = s1.eigenvalues_1d(FREE, 3)
        ref = [0.0, (math.pi / 2) ** 2, math.pi ** 2]
        assert np.max(np.abs(spec.values - ref)) <= 1e-9

    def test_decoupled_doubles(self):
        dec = s1.PointModel1d(-1.0, 1.0, s1.PointInteraction.neumann_decoupled())
        spec = s1.eigenvalues_1d(dec, 4)
        ref = [0.0, 0.0, math.pi ** 2, math.pi ** 2]
        assert np.max(np.abs(spec.values - ref)) <= 1e-9

    def test_delta_prime_against_fd_richardson(self):
        coarse = fd_interface_eigs(-1, 1, 4e-3, "delta_prime", 1.0, 5)
        fine = fd_interface_eigs(-1, 1, 2e-3, "delta_prime", 1.0, 5)
        rich = (4 * fine - coarse) / 3
        spec = s1.eigenvalues_1d(BETA1, 5)
        assert np.max(np.abs(spec.values - rich)) <= 1e-6

    def test_negative_delta_against_fd_richardson(self):
        model = s1.PointModel1d(-1.0, 1.0, s1.PointInteraction.delta(-3.0))
        coarse = fd_interface_eigs(-1, 1, 4e-3, "delta", -3.0, 4)
        fine = fd_interface_eigs(-1, 1, 2e-3, "delta", -3.0, 4)
        rich = (4 * fine - coarse) / 3
        spec = s1.eigenvalues_1d(model, 4)
        assert spec.values[0] < 0
        assert np.max(np.abs(spec.values - rich)) <= 1e-6

    def test_interlacing_strict_for_finite_beta(self):
        for beta in (0.0, 1.0, 10.0):
            model = s1.PointModel1d(-1.0, 1.0, s1.PointInteraction.delta_prime(beta))
            vals = s1.eigenvalues_1d(model, 6).values
            assert np.all(np.diff(vals) > 0)

    def test_beta_chain_monotone_toward_decoupled(self):
        chain = [0.0, 1.0, 10.0, 100.0, math.inf]
        rows = []
        for beta in chain:
            model = s1.PointModel1d(-1.0, 1.0, s1.PointInteraction.delta_prime(beta))
            rows.append(s1.eigenvalues_1d(model, 5).values)
        rows = np.array(rows)
        assert np.all(np.diff(rows, axis=0) <= 1e-8)
        assert np.all(rows[:-1] >= rows[-1][None, :] - 1e-8)
        # derivative-jump-free modes do not feel beta at all
        for k in (0, 2, 4):
            assert np.max(np.abs(rows[:, k] - rows[0, k])) <= 1e-8

    def test_potential_step_against_fd_richardson(self):
        pot = s1.PiecewisePotential((0.0,), (0.0, 4.0))
        model = s1.PointModel1d(-1.0, 1.0, s1.PointInteraction.delta_prime(1.0), pot)
        coarse = fd_interface_eigs(-1, 1, 4e-3, "delta_prime", 1.0, 4)
        spec = s1.eigenvalues_1d(model, 4)
        # spot check with step potential assembled on the oracle side
        from _oracles import fd_interface_dense
        k, mdiag = fd_interface_dense(-1, 1, 2e-3, "delta_prime", 1.0,
                                      v_left=0.0, v_right=4.0)
        scale = 1 / np.sqrt(mdiag)
        sym = k * scale[:, None] * scale[None, :]
        fine = np.linalg.eigvalsh(0.5 * (sym + sym.T))[:4]
        k, mdiag = fd_interface_dense(-1, 1, 4e-3, "delta_prime", 1.0,
                                      v_left=0.0, v_right=4.0)
        scale = 1 / np.sqrt(mdiag)
        sym = k * scale[:, None] * scale[None, :]
        coarse = np.linalg.eigvalsh(0.5 * (sym + sym.T))[:4]
        rich = (4 * fine - coarse) / 3
        assert np.max(np.abs(spec.values - rich)) <= 1e-6

    def test_budget_exhaustion(self, monkeypatch):
        monkeypatch.setattr(s1, "_SCAN_CAP", 40)
        with pytest.raises(BracketExhaustionError):
            s1.eigenvalues_1d(BETA1, 6)


class TestFdEigenvalues:
    def test_free_example(self):
        spec = s1.fd_eigenvalues_1d(FREE, 1e-3, 2)
        assert abs(spec.values[0]) <= 1e-8
        assert abs(spec.values[1] - (math.pi / 2) ** 2) <= 1e-5

    def test_decoupled_double_zero(self):
        dec = s1.PointModel1d(-1.0, 1.0, s1.PointInteraction.neumann_decoupled())
        spec = s1.fd_eigenvalues_1d(dec, 1e-3, 2)
        assert np.max(np.abs(spec.values)) <= 1e-8

    def test_second_order_convergence_to_shooting(self):
        ref = s1.eigenvalues_1d(BETA1, 5).values
        errs = []
        for h in (8e-3, 4e-3, 2e-3):
            fd = s1.fd_eigenvalues_1d(BETA1, h, 5).values
            errs.append(np.max(np.abs(fd - ref)))
        for e_coarse, e_fine in zip(errs, errs[1:]):
            assert math.log2(e_coarse / e_fine) >= 1.9

    def test_delta_cross_model(self):
        model = s1.PointModel1d(-1.0, 1.0, s1.PointInteraction.delta(2.0))
        fd = s1.fd_eigenvalues_1d(model, 1e-3, 4).values
        ref = s1.eigenvalues_1d(model, 4).values
        assert np.max(np.abs(fd - ref)) <= 1e-4

    def test_breakpoint_potential(self):
        pot = s1.PiecewisePotential((-0.3, 0.5), (0.0, 2.0, 1.0))
        model = s1.PointModel1d(-1.0, 1.0, s1.PointInteraction.delta_prime(1.0), pot)
        fd = s1.fd_eigenvalues_1d(model, 1e-3, 4).values
        ref = s1.eigenvalues_1d(model, 4).values
        assert np.max(np.abs(fd - ref)) <= 1e-4

    def test_resolution_error(self):
        with pytest.raises(ResolutionError):
            s1.fd_eigenvalues_1d(FREE, 0.2, 2)


class TestFloquet:
    def test_zero_limit(self):
        d = s1.floquet_discriminant(1.0, s1.PointInteraction.delta_prime(1.0), V0, 1e-12)
        assert abs(d - 2.0) <= 1e-5

    def test_pinned_values(self):
        it = s1.PointInteraction.delta_prime(1.0)
        assert abs(s1.floquet_discriminant(1.0, it, V0, math.pi ** 2) + 2.0) <= 1e-12
        d = s1.floquet_discriminant(1.0, it, V0, (math.pi / 2) ** 2)
        assert abs(d + math.pi / 2) <= 1e-12

    def test_band_edge_identity(self):
        for a in (1.0, 2.0):
            for beta in (0.7, 3.0):
                it = s1.PointInteraction.delta_prime(beta)
                for n in range(1, 6):
                    lam = (n * math.pi / a) ** 2
                    d = s1.floquet_discriminant(a, it, V0, lam)
                    assert abs(abs(d) - 2.0) <= 1e-10

    def test_decoupled_rejected(self):
        with pytest.raises(ContractError):
            s1.floquet_discriminant(1.0, s1.PointInteraction.neumann_decoupled(), V0, 1.0)


class TestKpBands:
    def test_free_lattice_single_band(self):
        bs = s1.kp_bands(1.0, s1.PointInteraction.delta_prime(0.0), V0, 50.0)
        assert bs.bands == ((0.0, 50.0),)
        assert bs.gaps == ()
        assert s1.count_gaps(bs) == 0

    def test_decoupled_point_bands(self):
        bs = s1.kp_bands(1.0, s1.PointInteraction.neumann_decoupled(), V0, 50.0)
        ref = [(n * math.pi) ** 2 for n in range(3)]
        assert len(bs.bands) == 3
        for (l, r), v in zip(bs.bands, ref):
            assert abs(l - v) <= 1e-9 and abs(r - v) <= 1e-9

    def test_against_grid_oracle(self):
        bs = s1.kp_bands(1.0, s1.PointInteraction.delta_prime(1.0), V0, 100.0)
        lam = np.arange(0.0, 100.0001, 1e-4)
        k = np.sqrt(lam)
        disc = 2 * np.cos(k) - k * np.sin(k)
        inside = np.abs(disc) <= 2.0
        flips = np.nonzero(np.diff(inside.astype(int)))[0]
        oracle_edges = lam[flips]
        mine = []
        for l, r in bs.bands:
            if l > 0.0:
                mine.append(l)
            if r < 100.0:
                mine.append(r)
        assert len(mine) == len(oracle_edges)
        assert np.max(np.abs(np.array(mine) - oracle_edges)) <= 2e-4
        oracle_bands = (len(oracle_edges) + (1 if inside[0] else 0)
                        + (1 if inside[-1] else 0)) // 2
        assert len(bs.bands) == oracle_bands
        oracle_gaps = len(bs.bands) - 1 + (0 if inside[-1] else 1)
        assert s1.count_gaps(bs) == oracle_gaps

    def test_wide_cell_gap_edges(self):
        bs = s1.kp_bands(2.0, s1.PointInteraction.delta_prime(0.5), V0, 100.0)
        lo, hi = bs.gaps[0]
        assert abs(hi - (math.pi / 2) ** 2) <= 1e-8
        assert 1.55 <= lo <= 1.65

    def test_partition_tiles_range(self):
        bs = s1.kp_bands(1.0, s1.PointInteraction.delta_prime(1.0), V0, 100.0)
        pieces = sorted(list(bs.bands) + list(bs.gaps))
        assert abs(pieces[0][0] - bs.bands[0][0]) <= 1e-12
        assert abs(pieces[-1][1] - 100.0) <= 1e-9
        for (_, r0), (l1, _) in zip(pieces, pieces[1:]):
            assert abs(l1 - r0) <= 1e-9

    def test_count_gaps_trivial(self):
        one = s1.BandStructure(((0.0, 5.0),), (), 5.0)
        assert s1.count_gaps(one) == 0
        two = s1.BandStructure(((0.0, 1.0), (2.0, 3.0)), ((1.0, 2.0), (3.0, 4.0)), 4.0)
        assert s1.count_gaps(two) == 2


class TestSerialization:
    def test_band_json_fields(self):
        import json
        bs = s1.kp_bands(1.0, s1.PointInteraction.delta_prime(1.0), V0, 30.0)
        doc = json.loads(s1.band_structure_to_json(bs))
        assert set(doc) == {"bands", "gaps", "lambda_max"}
        assert doc["lambda_max"] == 30.0
        assert len(doc["bands"]) == len(bs.bands)

    def test_spectrum_json_fields(self):
        import json
        spec = s1.eigenvalues_1d(FREE, 3)
        doc = json.loads(s1.spectrum_to_json(spec))
        assert set(doc) == {"values", "residuals", "tol", "converged", "method"}
        assert len(doc["values"]) == 3

    def test_csv_round_trip(self, tmp_path):
        import csv as csvmod
        bs = s1.kp_bands(1.0, s1.PointInteraction.delta_prime(1.0), V0, 30.0)
        path = tmp_path / "bands.csv"
        s1.write_band_csv(bs, path)
        with open(path, newline="") as fh:
            rows = list(csvmod.reader(fh))
        assert rows[0] == ["kind", "lower", "upper"]
        bands = [(float(l), float(r)) for kind, l, r in rows[1:] if kind == "band"]
        assert bands == list(bs.bands)

        spec = s1.eigenvalues_1d(FREE, 3)
        spath = tmp_path / "spec.csv"
        s1.write_spectrum_csv(spec, spath)
        with open(spath, newline="") as fh:
            rows = list(csvmod.reader(fh))
        assert rows[0] == ["index", "value", "residual"]
        assert [float(r[1]) for r in rows[1:]] == list(spec.values)
