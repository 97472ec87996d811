"""Tests for proximity construction, eigenvector extraction and extension."""

import numpy as np
import pytest

from spwarp.basis import (build_contiguity_proximity, build_kernel_proximity,
                          extend_basis, extract_basis, mst_longest_edge)
from spwarp.errors import DataError, NumericError

from conftest import make_basis


def dense_centered_eigh(values):
    """Independent brute-force eigendecomposition of the centered matrix."""
    n = values.shape[0]
    m = np.eye(n) - np.ones((n, n)) / n
    eigval, eigvec = np.linalg.eigh(m @ values @ m)
    order = np.argsort(eigval)[::-1]
    return eigval[order], eigvec[:, order]


class TestKernelProximity:
    def test_two_sites_single_edge(self):
        """Two sites at distance d give off-diagonal exp(-1): r equals d."""
        prox = build_kernel_proximity([(0.0, 0.0), (3.0, 4.0)])
        assert prox.values[0, 1] == pytest.approx(np.exp(-1.0), abs=1e-12)
        assert prox.values[0, 0] == 0.0
        assert prox.range_ == pytest.approx(5.0)

    def test_three_collinear_sites(self):
        """Equal-spaced collinear sites: r = 1, far pair entry exp(-2)."""
        prox = build_kernel_proximity([(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)])
        assert prox.range_ == pytest.approx(1.0)
        assert prox.values[0, 2] == pytest.approx(np.exp(-2.0), rel=1e-12)

    def test_duplicate_coordinates_allowed(self):
        """Coinciding distinct sites get proximity exp(0) = 1."""
        prox = build_kernel_proximity([(0.0, 0.0), (0.0, 0.0), (1.0, 0.0)])
        assert prox.values[0, 1] == 1.0

    def test_degenerate_geometry_rejected(self):
        with pytest.raises(DataError, match="degenerate geometry"):
            build_kernel_proximity([(1.0, 1.0), (1.0, 1.0), (1.0, 1.0)])

    def test_mst_longest_edge_chain(self):
        coords = np.array([[0, 0], [1, 0], [1, 2], [4, 2]], dtype=float)
        assert mst_longest_edge(coords) == pytest.approx(3.0)


class TestContiguityProximity:
    def test_valid_pair(self):
        prox = build_contiguity_proximity([[0, 1], [1, 0]])
        assert prox.kind == "binary_contiguity"

    def test_nonzero_diagonal_named(self):
        with pytest.raises(DataError, match="index 1"):
            build_contiguity_proximity([[0, 1], [1, 1]])

    def test_asymmetry_named(self):
        adj = np.zeros((3, 3))
        adj[0, 1] = 1.0
        with pytest.raises(DataError, match=r"\(0, 1\)"):
            build_contiguity_proximity(adj)

    def test_non_binary_rejected(self):
        with pytest.raises(DataError, match="0/1"):
            build_contiguity_proximity([[0, 0.5], [0.5, 0]])


class TestExtractBasis:
    def test_path_graph_matches_dense_oracle(self):
        """Path-graph contiguity: eigenvalues match a dense eigensolver to 1e-10."""
        n = 6
        path = np.zeros((n, n))
        for i in range(n - 1):
            path[i, i + 1] = path[i + 1, i] = 1.0
        prox = build_contiguity_proximity(path)
        basis = extract_basis(prox, threshold=0.0)
        ref_val, _ = dense_centered_eigh(path)
        keep = ref_val > 1e-12 * ref_val[0]
        np.testing.assert_allclose(basis.eigenvalues, ref_val[keep],
                                   rtol=1e-10, atol=1e-12)

    @pytest.mark.parametrize("seed,n", [(0, 23), (1, 50), (2, 37)])
    def test_spectral_agreement_random(self, seed, n):
        """Random kernels up to N=50 match the brute-force eigensolver."""
        rng = np.random.default_rng(seed)
        prox = build_kernel_proximity(rng.uniform(0, 5, size=(n, 2)))
        basis = extract_basis(prox)
        ref_val, ref_vec = dense_centered_eigh(prox.values)
        L = basis.n_components
        np.testing.assert_allclose(basis.eigenvalues, ref_val[:L], rtol=1e-10)
        # vectors agree up to sign with the reference decomposition
        for j in range(L):
            dot = abs(float(basis.vectors[:, j] @ ref_vec[:, j]))
            assert dot == pytest.approx(1.0, abs=1e-8)

    def test_orthonormal_centered_positive(self):
        _, _, basis = make_basis(n=80, seed=5)
        e = basis.vectors
        gram = e.T @ e
        assert np.abs(gram - np.eye(e.shape[1])).max() < 1e-8
        assert np.abs(e.sum(axis=0)).max() < 1e-8
        assert (basis.eigenvalues > 0).all()
        assert (np.diff(basis.eigenvalues) <= 1e-12).all()
        assert basis.n_components <= basis.n_sites - 1

    def test_sign_convention(self):
        _, _, basis = make_basis(n=40, seed=9)
        for j in range(basis.n_components):
            col = basis.vectors[:, j]
            assert col[np.argmax(np.abs(col))] > 0

    def test_threshold_monotone(self):
        _, prox, _ = make_basis(n=60, seed=3)
        sizes = [extract_basis(prox, threshold=t).n_components
                 for t in (0.0, 0.1, 0.25, 0.5, 0.9)]
        assert sizes == sorted(sizes, reverse=True)

    def test_forced_count(self):
        _, prox, basis = make_basis(n=60, seed=3)
        forced = extract_basis(prox, count=4)
        assert forced.n_components == 4
        np.testing.assert_allclose(forced.vectors, basis.vectors[:, :4])

    def test_no_positive_dependence(self):
        # centered -J has only non-positive eigenvalues
        n = 6
        vals = np.ones((n, n)) - np.eye(n)
        prox = build_contiguity_proximity(vals)
        with pytest.raises(NumericError, match="no positive spatial dependence"):
            extract_basis(prox)

    def test_bad_threshold(self):
        _, prox, _ = make_basis(n=20, seed=1)
        with pytest.raises(DataError):
            extract_basis(prox, threshold=1.0)


class TestExtendBasis:
    def test_self_consistency(self):
        """Extension at the training coordinates reproduces the basis."""
        coords, _, basis = make_basis(n=70, seed=11)
        ext = extend_basis(basis, coords)
        assert np.abs(ext.vectors0 - basis.vectors).max() < 1e-6

    def test_mirror_symmetry_cancels(self):
        """Columns antisymmetric under a mirror fixing the prediction point
        extend to 0 there."""
        grid = np.array([(i, j) for i in range(3) for j in range(3)], dtype=float)
        prox = build_kernel_proximity(grid)
        basis = extract_basis(prox, threshold=0.0)
        center = np.array([[1.0, 1.0]])
        ext = extend_basis(basis, center)
        # point reflection through the center; robust to tied eigenvalues,
        # which mix the axis-mirror patterns arbitrarily
        reflected = 2.0 - grid
        swap = np.array([int(np.where((grid == row).all(axis=1))[0][0])
                         for row in reflected])
        checked = 0
        for j in range(basis.n_components):
            col = basis.vectors[:, j]
            if np.abs(col + col[swap]).max() < 1e-8:
                assert abs(ext.vectors0[0, j]) < 1e-10
                checked += 1
        assert checked > 0

    def test_component_count_preserved(self):
        coords, _, basis = make_basis(n=50, seed=2)
        rng = np.random.default_rng(0)
        ext = extend_basis(basis, rng.uniform(0, 10, size=(17, 2)))
        assert ext.n_components == basis.n_components
        assert ext.vectors0.shape == (17, basis.n_components)

    def test_adjacency_basis_not_extendable(self):
        n = 6
        path = np.zeros((n, n))
        for i in range(n - 1):
            path[i, i + 1] = path[i + 1, i] = 1.0
        basis = extract_basis(build_contiguity_proximity(path), threshold=0.0)
        with pytest.raises(DataError, match="extension requires kernel basis"):
            extend_basis(basis, np.array([[0.0, 0.0]]))

    def test_empty_prediction_sites(self):
        _, _, basis = make_basis(n=30, seed=4)
        with pytest.raises(DataError, match="no prediction sites"):
            extend_basis(basis, np.zeros((0, 2)))
