import time

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st

from sparforest.areal import InputError, build_adjacency, lattice_map
from sparforest.spatial import (
    Bym2Hyperparams, bym2_compose, icar_precision, leroux_precision, scale_icar, scaled_icar,
)

PATH3 = np.array([[1, -1, 0], [-1, 2, -1], [0, -1, 1]], dtype=float)


def random_connected_map(rng, k):
    # random spanning tree plus a few extra edges
    edges = [(int(rng.integers(0, i)), i) for i in range(1, k)]
    for _ in range(int(rng.integers(0, k))):
        a, b = rng.choice(k, 2, replace=False)
        edges.append((int(a), int(b)))
    return build_adjacency(edges, k)


def test_icar_examples():
    np.testing.assert_array_equal(icar_precision(build_adjacency([(0, 1), (1, 2)], 3)).toarray(), PATH3)
    np.testing.assert_array_equal(icar_precision(build_adjacency([(0, 1)], 2)).toarray(),
                                  [[1, -1], [-1, 1]])
    with pytest.raises(InputError):
        icar_precision(build_adjacency([], 2))


def test_icar_row_sums_zero():
    q = icar_precision(lattice_map(4))
    np.testing.assert_array_equal(np.asarray(q.sum(axis=1)).ravel(), 0.0)


def test_single_edge_scale_is_quarter():
    s = scale_icar(sp.csr_matrix([[1.0, -1.0], [-1.0, 1.0]]))
    assert s.scale_factor[0] == pytest.approx(0.25, abs=1e-14)
    np.testing.assert_allclose(s.q_matrix.toarray(), 0.25 * np.array([[1, -1], [-1, 1]]), atol=1e-14)


def test_path3_scale_matches_pseudoinverse():
    # pinv(PATH3) has diagonal (5/9, 2/9, 5/9); geometric mean (50/729)^(1/3)
    s = scale_icar(sp.csr_matrix(PATH3))
    assert s.scale_factor[0] == pytest.approx((50 / 729) ** (1 / 3), rel=1e-12)
    assert s.scale_factor[0] == pytest.approx(0.4093368331822651, rel=1e-12)


def test_scaling_twice_is_noop():
    s = scaled_icar(lattice_map(4))
    again = scale_icar(s.q_matrix, s.components)
    assert again.scale_factor[0] == pytest.approx(1.0, abs=1e-8)


def test_precision_scaling_random_graphs():
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    for _ in range(20):
        k = int(rng.integers(2, 31))
        s = scaled_icar(random_connected_map(rng, k))
        pinv_var = np.diag(np.linalg.pinv(s.q_matrix.toarray()))
        assert np.exp(np.mean(np.log(pinv_var))) == pytest.approx(1.0, abs=1e-8)
        np.testing.assert_allclose(s.marginal_variances(), pinv_var, atol=1e-8)
    assert time.perf_counter() - t0 < 1.0


def test_disconnected_components_scaled_separately():
    amap = build_adjacency([(0, 1), (2, 3), (3, 4)], 5)
    s = scaled_icar(amap)
    assert s.n_components == 2
    assert s.rank == 3
    var = s.marginal_variances()
    for idx in ([0, 1], [2, 3, 4]):
        assert np.exp(np.mean(np.log(var[idx]))) == pytest.approx(1.0, abs=1e-10)


def test_singleton_component_fallback():
    q = sp.csr_matrix(np.array([[1, -1, 0], [-1, 1, 0], [0, 0, 0]], dtype=float))
    s = scale_icar(q)
    assert s.q_matrix[2, 2] == 1.0
    assert s.marginal_variances()[2] == pytest.approx(1.0)


def test_null_space_is_componentwise_constant():
    s = scaled_icar(build_adjacency([(0, 1), (1, 2), (3, 4)], 5))
    q = s.q_matrix.toarray()
    lam, vec = np.linalg.eigh(q)
    assert lam.min() > -1e-12
    null = vec[:, lam < 1e-10]
    assert null.shape[1] == 2
    for idx in ([0, 1, 2], [3, 4]):
        proj = null[idx]
        assert np.allclose(proj - proj.mean(axis=0), 0.0, atol=1e-10)
    # basis spans the complement and is orthogonal to per-component constants
    ones = np.zeros((5, 2))
    ones[:3, 0] = ones[3:, 1] = 1.0
    np.testing.assert_allclose(ones.T @ s.basis, 0.0, atol=1e-12)


def test_bym2_examples():
    v = np.array([1.0, -2.0, 0.5])
    u = np.array([0.3, 0.1, -0.4])
    np.testing.assert_allclose(bym2_compose(v, u, 0.0, 4.0), v / 2)
    np.testing.assert_allclose(bym2_compose(v, u, 1.0, 4.0), u / 2)
    np.testing.assert_allclose(bym2_compose(np.ones(3), np.ones(3), 0.5, 4.0), np.sqrt(0.5))
    with pytest.raises(ValueError):
        bym2_compose(v, u, 1.5, 1.0)
    with pytest.raises(ValueError):
        bym2_compose(v, u, 0.5, 0.0)


vecs = st.lists(st.floats(-5, 5), min_size=4, max_size=4).map(np.array)


@given(vecs, vecs, vecs, vecs, st.floats(0, 1), st.floats(0.01, 100), st.floats(-3, 3), st.floats(0.1, 10))
def test_bym2_linear_and_homogeneous(v1, u1, v2, u2, rho, tau, a, c):
    lhs = bym2_compose(v1 + a * v2, u1 + a * u2, rho, tau)
    rhs = bym2_compose(v1, u1, rho, tau) + a * bym2_compose(v2, u2, rho, tau)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)
    np.testing.assert_allclose(bym2_compose(v1, u1, rho, c * tau),
                               c ** -0.5 * bym2_compose(v1, u1, rho, tau), atol=1e-9)


def test_hyperparams_validation():
    with pytest.raises(ValueError):
        Bym2Hyperparams(tau_phi=0.0)
    with pytest.raises(ValueError):
        Bym2Hyperparams(rho=1.2)
    h = Bym2Hyperparams()
    assert h.tau0 == 0.001


def test_leroux_precision():
    amap = build_adjacency([(0, 1), (1, 2)], 3)
    np.testing.assert_allclose(leroux_precision(amap, 0.5).toarray(), 0.5 * PATH3 + 0.5 * np.eye(3))
