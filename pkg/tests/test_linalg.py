import numpy as np
import pytest

from thinwg import linalg
from thinwg.errors import (
    ContractError,
    IterationLimitError,
    SizeError,
    StructuralError,
)

from _oracles import dense_pair_eigenvalues, fem1d_pair, gauss_solve


def random_spd(n, seed, cond=None):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, n))
    spd = a @ a.T + n * np.eye(n)
    if cond is not None:
        w, v = np.linalg.eigh(spd)
        w = np.geomspace(1.0, cond, n)
        spd = (v * w) @ v.T
        spd = 0.5 * (spd + spd.T)
    return spd


def csr_from_dense(a, symmetric=False):
    rows, cols = np.nonzero(np.ones_like(a))
    return linalg.csr_from_triplets(a.shape[0], a.shape[1], rows, cols,
                                    a[rows, cols], symmetric=symmetric)


class TestCsr:
    def test_diagonal_matvec(self):
        a = linalg.csr_from_triplets(2, 2, [0, 1], [0, 1], [2.0, 3.0])
        assert np.allclose(a.matvec(np.array([1.0, 1.0])), [2.0, 3.0])

    def test_duplicates_summed(self):
        a = linalg.csr_from_triplets(1, 2, [0, 0], [1, 1], [1.0, 2.0])
        assert a.nnz == 1
        assert a.values[0] == 3.0

    def test_out_of_range_rejected(self):
        with pytest.raises(StructuralError):
            linalg.csr_from_triplets(2, 2, [0, 2], [0, 0], [1.0, 1.0])
        with pytest.raises(StructuralError):
            linalg.csr_from_triplets(2, 2, [0, 1], [0, -1], [1.0, 1.0])

    def test_explicit_zeros_retained(self):
        a = linalg.csr_from_triplets(2, 2, [0, 1], [1, 0], [0.0, 0.0])
        assert a.nnz == 2

    def test_matvec_matches_dense(self):
        rng = np.random.default_rng(7)
        for trial in range(20):
            n, m = rng.integers(1, 30, size=2)
            density = rng.uniform(0.05, 0.6)
            mask = rng.random((n, m)) < density
            dense = np.where(mask, rng.standard_normal((n, m)), 0.0)
            rows, cols = np.nonzero(mask)
            a = linalg.csr_from_triplets(n, m, rows, cols, dense[rows, cols])
            x = rng.standard_normal(m)
            assert np.allclose(a.matvec(x), dense @ x, atol=1e-13)
            xb = rng.standard_normal((m, 3))
            assert np.allclose(a.matmat(xb), dense @ xb, atol=1e-13)

    def test_empty_rows_handled(self):
        a = linalg.csr_from_triplets(4, 4, [0, 3], [1, 2], [5.0, 7.0])
        out = a.matvec(np.arange(4.0))
        assert np.allclose(out, [5.0, 0.0, 0.0, 14.0])

    def test_row_offsets_structure(self):
        a = linalg.csr_from_triplets(3, 3, [2, 0, 2], [1, 0, 0], [1.0, 2.0, 3.0])
        assert a.row_offsets.tolist() == [0, 1, 1, 3]
        assert a.col_indices.tolist() == [0, 0, 1]
        assert a.row_offsets.dtype == np.int64
        assert a.col_indices.dtype == np.int64

    def test_symmetric_flag_validated(self):
        with pytest.raises(StructuralError):
            linalg.csr_from_triplets(2, 2, [0], [1], [1.0], symmetric=True)
        a = linalg.csr_from_triplets(2, 2, [0, 1], [1, 0], [1.0, 1.0], symmetric=True)
        assert a.symmetric

    def test_csr_add(self):
        a = csr_from_dense(np.array([[1.0, 2.0], [0.0, 1.0]]))
        b = csr_from_dense(np.array([[0.0, 1.0], [1.0, 0.0]]))
        c = linalg.csr_add(a, b, 2.0, 3.0)
        assert np.allclose(c.to_dense(), [[2.0, 7.0], [3.0, 2.0]])

    def test_diagonal(self):
        d = np.diag([4.0, 5.0, 6.0])
        d[0, 2] = 1.0
        a = csr_from_dense(d)
        assert np.allclose(a.diagonal(), [4.0, 5.0, 6.0])


class TestCg:
    def test_small_exact(self):
        a = csr_from_dense(np.array([[4.0, 1.0], [1.0, 3.0]]), symmetric=True)
        x = linalg.cg_solve(a, np.array([6.0, 7.0]), tol=1e-12)
        assert np.allclose(x, [1.0, 2.0], atol=1e-10)

    def test_against_gauss_oracle(self):
        spd = random_spd(50, seed=3)
        a = csr_from_dense(spd, symmetric=True)
        rng = np.random.default_rng(4)
        b = rng.standard_normal(50)
        x = linalg.cg_solve(a, b, tol=1e-12)
        assert np.linalg.norm(x - gauss_solve(spd, b)) <= 1e-8

    def test_iteration_limit(self):
        spd = random_spd(40, seed=5, cond=1e8)
        a = csr_from_dense(spd, symmetric=True)
        b = np.ones(40)
        with pytest.raises(IterationLimitError) as exc:
            linalg.cg_solve(a, b, tol=1e-14, max_iter=1)
        assert exc.value.residual is not None
        assert exc.value.residual > 0

    def test_zero_rhs(self):
        a = csr_from_dense(np.eye(3), symmetric=True)
        assert np.array_equal(linalg.cg_solve(a, np.zeros(3)), np.zeros(3))

    def test_energy_error_monotone(self):
        # the A-norm of the error is non-increasing across CG iterates
        spd = random_spd(30, seed=11, cond=1e4)
        a = csr_from_dense(spd, symmetric=True)
        rng = np.random.default_rng(12)
        b = rng.standard_normal(30)
        x_true = gauss_solve(spd, b)
        errs = []

        def watch(_k, x, _r):
            e = x - x_true
            errs.append(float(e @ spd @ e))

        linalg.cg_solve(a, b, tol=1e-13, on_iterate=watch)
        errs = np.array(errs)
        assert np.all(np.diff(errs) <= 1e-12 * errs[0])

    def test_shape_checks(self):
        a = csr_from_dense(np.eye(3))
        with pytest.raises(SizeError):
            linalg.cg_solve(a, np.ones(2))


class TestSmallestEigenpairs:
    def test_diag_problem(self):
        k = csr_from_dense(np.diag([1.0, 2.0, 3.0]), symmetric=True)
        m = csr_from_dense(np.eye(3), symmetric=True)
        spec, u = linalg.smallest_eigenpairs(k, m, 2, tol=1e-10)
        assert np.allclose(spec.values, [1.0, 2.0], atol=1e-9)
        assert spec.converged

    def test_neumann_fd_kernel(self):
        # 5-node Neumann difference Laplacian has a zero mode
        n = 5
        h = 0.25
        dense = np.zeros((n, n))
        for i in range(n - 1):
            dense[i, i] += 1 / h
            dense[i + 1, i + 1] += 1 / h
            dense[i, i + 1] -= 1 / h
            dense[i + 1, i] -= 1 / h
        k = csr_from_dense(dense, symmetric=True)
        m = csr_from_dense(np.eye(n), symmetric=True)
        spec, _ = linalg.smallest_eigenpairs(k, m, 1, tol=1e-10)
        assert abs(spec.values[0]) <= 1e-9

    def test_fem_pair_matches_dense_oracle(self):
        k, m = fem1d_pair(120)
        spec, u = linalg.smallest_eigenpairs(k, m, 5, tol=1e-9, seed=1)
        ref = dense_pair_eigenvalues(k.to_dense(), m.to_dense())[:5]
        assert np.all(np.abs(spec.values - ref) <= 1e-8 * (1 + np.abs(ref)))
        # eigenvectors come back M-orthonormal
        gram = u.T @ m.matvec(u)
        assert np.allclose(gram, np.eye(5), atol=1e-8)

    def test_residuals_below_tol(self):
        k, m = fem1d_pair(60)
        spec, _ = linalg.smallest_eigenpairs(k, m, 4, tol=1e-10, seed=2)
        assert spec.converged
        assert np.all(spec.residuals <= 1e-10)

    def test_deterministic(self):
        k, m = fem1d_pair(80)
        s1, u1 = linalg.smallest_eigenpairs(k, m, 3, tol=1e-10, seed=9)
        s2, u2 = linalg.smallest_eigenpairs(k, m, 3, tol=1e-10, seed=9)
        assert np.array_equal(s1.values, s2.values)
        assert np.array_equal(u1, u2)

    def test_deflation_skips_kernel(self):
        k, m = fem1d_pair(50)
        ones = np.ones(k.nrows)
        spec, u = linalg.smallest_eigenpairs(k, m, 3, tol=1e-10, deflation=ones)
        ref = dense_pair_eigenvalues(k.to_dense(), m.to_dense())[1:4]
        assert np.all(np.abs(spec.values - ref) <= 1e-8 * (1 + np.abs(ref)))
        # iterates stayed M-orthogonal to the deflated constant
        overlap = ones @ m.matvec(u)
        assert np.all(np.abs(overlap) <= 1e-8)

    def test_size_errors(self):
        k, m = fem1d_pair(4)
        with pytest.raises(SizeError):
            linalg.smallest_eigenpairs(k, m, k.nrows, tol=1e-8)
        with pytest.raises(SizeError):
            linalg.smallest_eigenpairs(k, m, 0)

    def test_random_spd_pair(self):
        rng = np.random.default_rng(21)
        n = 60
        kd = random_spd(n, seed=22, cond=1e4)
        b = rng.standard_normal((n, n))
        md = b @ b.T + n * np.eye(n)
        k = csr_from_dense(kd, symmetric=True)
        m = csr_from_dense(0.5 * (md + md.T), symmetric=True)
        spec, _ = linalg.smallest_eigenpairs(k, m, 4, tol=1e-10, seed=3)
        ref = dense_pair_eigenvalues(kd, 0.5 * (md + md.T))[:4]
        assert np.all(np.abs(spec.values - ref) <= 1e-8 * (1 + np.abs(ref)))


class TestTridiagSturm:
    def test_laplacian_closed_form(self):
        # second-difference matrix: eigenvalues 2 - 2 cos(j pi / (n+1))
        n = 400
        spec = linalg.tridiag_smallest_eigenvalues(
            np.full(n, 2.0), np.full(n - 1, -1.0), 6)
        j = np.arange(1, 7)
        ref = 2 - 2 * np.cos(j * np.pi / (n + 1))
        assert np.all(np.abs(spec.values - ref) <= 1e-10 * (1 + np.abs(ref)))

    def test_matches_dense_with_multiplicity(self):
        # block-diagonal copy pairs up every eigenvalue; counts must not skip
        rng = np.random.default_rng(5)
        n = 30
        d = rng.uniform(1, 3, n)
        e = rng.uniform(-1, 1, n - 1)
        e[n // 2 - 1] = 0.0  # decouples two identical-size blocks
        d2 = np.concatenate([d[: n // 2], d[: n // 2]])
        e2 = np.concatenate([e[: n // 2 - 1], [0.0], e[: n // 2 - 1]])
        dense = np.diag(d2) + np.diag(e2, 1) + np.diag(e2, -1)
        ref = np.linalg.eigvalsh(dense)[:8]
        spec = linalg.tridiag_smallest_eigenvalues(d2, e2, 8)
        assert np.all(np.abs(spec.values - ref) <= 1e-9 * (1 + np.abs(ref)))

    def test_size_errors(self):
        with pytest.raises(SizeError):
            linalg.tridiag_smallest_eigenvalues(np.ones(4), np.zeros(2), 2)
        with pytest.raises(SizeError):
            linalg.tridiag_smallest_eigenvalues(np.ones(4), np.zeros(3), 5)


class TestDenseEig:
    def test_two_by_two(self):
        spec, _ = linalg.dense_eig_small(np.array([[2.0, 1.0], [1.0, 2.0]]))
        assert np.allclose(spec.values, [1.0, 3.0], atol=1e-12)

    def test_full_spectrum_trace(self):
        a = random_spd(30, seed=31)
        spec, v = linalg.dense_eig_small(a)
        assert spec.values.size == 30
        assert abs(spec.values.sum() - np.trace(a)) <= 1e-8 * abs(np.trace(a))
        assert np.allclose(a @ v - v * spec.values, 0, atol=1e-8)

    def test_rejects_nonsymmetric(self):
        with pytest.raises(ContractError):
            linalg.dense_eig_small(np.array([[1.0, 2.0], [0.0, 1.0]]))

    def test_rejects_oversize(self):
        with pytest.raises(SizeError):
            linalg.dense_eig_small(np.eye(2001))


class TestMatrixMarket:
    def test_header_and_roundtrip(self, tmp_path):
        k, _ = fem1d_pair(6)
        path = tmp_path / "k.mtx"
        linalg.write_matrix_market(k, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "%%MatrixMarket matrix coordinate real symmetric"
        n, m, nnz = (int(t) for t in lines[1].split())
        assert (n, m) == k.shape
        assert nnz == len(lines) - 2
        dense = np.zeros((n, m))
        for ln in lines[2:]:
            i, j, v = ln.split()
            i, j = int(i) - 1, int(j) - 1
            dense[i, j] = float(v)
            dense[j, i] = float(v)
        assert np.allclose(dense, k.to_dense(), atol=0)
