import numpy as np
import numpy.testing as npt
import pytest

from sgdscope.linalg import (
    ConvergenceError,
    LinAlgError,
    NotPositiveDefiniteError,
    SymMatrix,
    SymmetryError,
    read_matrix_csv,
    solve_lyapunov,
    sqrt_spd,
    sym_eigendecompose,
    trace,
    write_matrix_csv,
)

from _oracles import lyapunov_kron_oracle, random_spd, random_symmetric


class TestSymMatrix:
    def test_valid_construction_copies_and_freezes(self):
        raw = np.array([[2.0, 1.0], [1.0, 2.0]])
        m = SymMatrix(raw)
        raw[0, 0] = 99.0
        assert m.entries[0, 0] == 2.0
        assert m.dim == 2
        with pytest.raises(ValueError):
            m.entries[0, 0] = 5.0

    def test_asymmetric_rejected(self):
        with pytest.raises(SymmetryError):
            SymMatrix(np.array([[1.0, 2.0], [2.1, 1.0]]))

    def test_symmetry_tolerance_is_relative(self):
        # Mirror mismatch just inside 1e-12 * max(1, |entry|) passes.
        big = 1e6
        ok = np.array([[1.0, big], [big + big * 0.5e-12, 1.0]])
        SymMatrix(ok)
        bad = np.array([[1.0, big], [big + big * 5e-12, 1.0]])
        with pytest.raises(SymmetryError):
            SymMatrix(bad)

    def test_rejects_nonsquare_and_nonfinite(self):
        with pytest.raises(LinAlgError):
            SymMatrix(np.zeros((2, 3)))
        with pytest.raises(LinAlgError):
            SymMatrix(np.array([[np.nan, 0.0], [0.0, 1.0]]))
        with pytest.raises(LinAlgError):
            SymMatrix(np.zeros((0, 0)))

    def test_constructors(self):
        npt.assert_array_equal(SymMatrix.identity(3).entries, np.eye(3))
        npt.assert_array_equal(
            SymMatrix.diagonal([1.0, 2.0]).entries, np.diag([1.0, 2.0])
        )
        assert SymMatrix.zero(4).dim == 4


class TestEigendecompose:
    def test_known_two_by_two(self):
        # Characteristic polynomial of [[2,1],[1,2]] factors as (x-1)(x-3).
        eig = sym_eigendecompose(SymMatrix(np.array([[2.0, 1.0], [1.0, 2.0]])))
        npt.assert_allclose(eig.eigenvalues, [1.0, 3.0], rtol=1e-12)
        low = eig.eigenvectors[:, 0]
        high = eig.eigenvectors[:, 1]
        inv_sqrt2 = 1.0 / np.sqrt(2.0)
        assert abs(np.dot(low, [inv_sqrt2, -inv_sqrt2])) == pytest.approx(1.0, abs=1e-12)
        assert abs(np.dot(high, [inv_sqrt2, inv_sqrt2])) == pytest.approx(1.0, abs=1e-12)

    def test_identity_and_diagonal(self):
        eig = sym_eigendecompose(SymMatrix.identity(4))
        npt.assert_allclose(eig.eigenvalues, np.ones(4))
        eig = sym_eigendecompose(SymMatrix.diagonal([3.0, -1.0, 2.0]))
        npt.assert_allclose(eig.eigenvalues, [-1.0, 2.0, 3.0])
        # Eigenvectors of a diagonal matrix are coordinate axes.
        npt.assert_allclose(np.abs(eig.eigenvectors.T @ eig.eigenvectors), np.eye(3), atol=1e-14)

    def test_dim_one(self):
        eig = sym_eigendecompose(SymMatrix(np.array([[7.0]])))
        npt.assert_allclose(eig.eigenvalues, [7.0])
        npt.assert_allclose(eig.eigenvectors, [[1.0]])

    def test_matches_reference_solver_on_random_matrices(self):
        # 100 seeded symmetric matrices, dims 1..50, against numpy's eigh.
        for seed in range(100):
            rng = np.random.default_rng(seed)
            dim = int(rng.integers(1, 51))
            m = random_symmetric(rng, dim) * float(rng.uniform(0.1, 10.0))
            eig = sym_eigendecompose(SymMatrix(m))
            ref = np.linalg.eigvalsh(m)
            scale = max(1.0, float(np.abs(ref).max()))
            npt.assert_allclose(eig.eigenvalues, ref, rtol=1e-10, atol=1e-10 * scale)

    def test_reconstruction_and_orthogonality(self):
        for seed in range(20):
            rng = np.random.default_rng(1000 + seed)
            dim = int(rng.integers(2, 51))
            m = random_symmetric(rng, dim)
            eig = sym_eigendecompose(SymMatrix(m))
            fro = np.linalg.norm(m)
            assert np.linalg.norm(eig.reconstruct() - m) <= 1e-10 * max(1.0, fro)
            gram = eig.eigenvectors.T @ eig.eigenvectors
            assert np.abs(gram - np.eye(dim)).max() <= 1e-12

    def test_eigenvalues_sorted_ascending(self):
        rng = np.random.default_rng(42)
        m = random_symmetric(rng, 12)
        eig = sym_eigendecompose(SymMatrix(m))
        assert (np.diff(eig.eigenvalues) >= 0).all()

    def test_budget_exhaustion_raises(self):
        rng = np.random.default_rng(3)
        m = random_symmetric(rng, 30)
        with pytest.raises(ConvergenceError, match="sweeps"):
            sym_eigendecompose(SymMatrix(m), max_sweeps=1)


class TestSqrtSpd:
    def test_diagonal_case(self):
        r = sqrt_spd(SymMatrix.diagonal([4.0, 9.0]))
        npt.assert_allclose(r @ r.T, np.diag([4.0, 9.0]), atol=1e-12)

    def test_dense_case_reconstructs(self):
        m = np.array([[2.0, 1.0], [1.0, 2.0]])
        r = sqrt_spd(SymMatrix(m))
        npt.assert_allclose(r @ r.T, m, atol=1e-12)

    def test_random_psd_reconstruction(self):
        for seed in range(25):
            rng = np.random.default_rng(2000 + seed)
            dim = int(rng.integers(1, 30))
            m = random_spd(rng, dim, shift=0.0)  # may be near-singular
            r = sqrt_spd(SymMatrix(m))
            npt.assert_allclose(r @ r.T, m, atol=1e-10 * max(1.0, np.linalg.norm(m)))

    def test_tiny_negative_eigenvalue_clamped(self):
        m = SymMatrix.diagonal([1.0, -1e-13])
        r = sqrt_spd(m)
        npt.assert_allclose(r @ r.T, np.diag([1.0, 0.0]), atol=1e-12)

    def test_indefinite_rejected_with_eigenvalue_in_message(self):
        with pytest.raises(NotPositiveDefiniteError) as excinfo:
            sqrt_spd(SymMatrix.diagonal([1.0, -1e-3]))
        assert "-1.000000e-03" in str(excinfo.value)


class TestSolveLyapunov:
    def test_hand_solved_two_by_two(self):
        # In the eigenbasis of [[2,1],[1,2]] the equation decouples into
        # 2*lambda_i * g_i = 1, giving G = [[1/3, -1/6], [-1/6, 1/3]].
        h = SymMatrix(np.array([[2.0, 1.0], [1.0, 2.0]]))
        g = solve_lyapunov(h, SymMatrix.identity(2))
        expected = np.array([[1.0 / 3.0, -1.0 / 6.0], [-1.0 / 6.0, 1.0 / 3.0]])
        npt.assert_allclose(g.entries, expected, atol=1e-12)

    def test_identity_curvature_halves_rhs(self):
        q = np.array([[2.0, 0.4], [0.4, 1.0]])
        g = solve_lyapunov(SymMatrix.identity(2), SymMatrix(q))
        npt.assert_allclose(g.entries, q / 2.0, atol=1e-13)

    def test_matches_kronecker_oracle_on_random_pairs(self):
        for seed in range(100):
            rng = np.random.default_rng(3000 + seed)
            dim = int(rng.integers(1, 21))
            h = random_spd(rng, dim)
            q = random_spd(rng, dim)
            g = solve_lyapunov(SymMatrix(h), SymMatrix(q))
            oracle = lyapunov_kron_oracle(h, q)
            npt.assert_allclose(g.entries, oracle, atol=1e-9)
            residual = g.entries @ h + h @ g.entries - q
            assert np.linalg.norm(residual) < 1e-10 * np.linalg.norm(q)

    def test_trace_identities(self):
        # trace(H G) = trace(Q)/2 and trace(H^2 G) = trace(Q H)/2 follow from
        # taking traces of G H + H G = Q against I and H.
        for seed in range(20):
            rng = np.random.default_rng(4000 + seed)
            dim = int(rng.integers(2, 16))
            h = random_spd(rng, dim)
            q = random_spd(rng, dim)
            g = solve_lyapunov(SymMatrix(h), SymMatrix(q)).entries
            npt.assert_allclose(
                np.trace(h @ g), 0.5 * np.trace(q), rtol=1e-10
            )
            npt.assert_allclose(
                np.trace(h @ h @ g), 0.5 * np.trace(q @ h), rtol=1e-10
            )

    def test_semidefinite_curvature_rejected(self):
        h = SymMatrix.diagonal([1.0, 1e-13])
        with pytest.raises(NotPositiveDefiniteError, match="stationary covariance undefined"):
            solve_lyapunov(h, SymMatrix.identity(2))

    def test_dimension_mismatch(self):
        with pytest.raises(LinAlgError, match="dimension mismatch"):
            solve_lyapunov(SymMatrix.identity(2), SymMatrix.identity(3))


class TestTrace:
    def test_trace(self):
        assert trace(SymMatrix.diagonal([1.0, 2.0, 3.5])) == pytest.approx(6.5)


class TestMatrixCsv:
    def test_round_trip_is_exact(self, tmp_path):
        rng = np.random.default_rng(7)
        m = SymMatrix(random_spd(rng, 5))
        path = tmp_path / "m.csv"
        write_matrix_csv(path, m)
        back = read_matrix_csv(path)
        npt.assert_array_equal(back.entries, m.entries)
        first = path.read_text().splitlines()[0]
        assert first == "# dim=5"

    def test_missing_header_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("1.0,0.0\n0.0,1.0\n")
        with pytest.raises(LinAlgError, match="header"):
            read_matrix_csv(path)

    def test_wrong_row_count_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("# dim=3\n1.0,0.0,0.0\n0.0,1.0,0.0\n")
        with pytest.raises(LinAlgError, match="rows"):
            read_matrix_csv(path)
