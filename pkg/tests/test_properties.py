"""Property-based checks of metric, scale and permutation invariants."""
import numpy as np
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from ddfactor.downstream import bray_curtis, total_variation
from ddfactor.model import compose_measures, gram_normalize
from ddfactor.ordination import compromise, rv_coefficient, rv_matrix

finite = st.floats(0.0, 10.0, allow_nan=False, allow_infinity=False)


@st.composite
def simplex(draw, n):
    w = draw(arrays(float, n, elements=finite))
    w = w + 1e-3
    return w / w.sum()


@st.composite
def simplex_triple(draw):
    n = draw(st.integers(1, 12))
    return draw(simplex(n)), draw(simplex(n)), draw(simplex(n))


@st.composite
def gram_stack(draw):
    K = draw(st.integers(1, 5))
    J = draw(st.integers(2, 6))
    A = draw(arrays(float, (K, J, J + 1), elements=st.floats(-3, 3)))
    G = np.einsum("kij,klj->kil", A, A) + 1e-3 * np.eye(J)
    return G


@given(simplex_triple())
def test_tv_metric(pqr):
    p, q, r = pqr
    assert 0 <= total_variation(p, q) <= 1 + 1e-12
    assert total_variation(p, q) == total_variation(q, p)
    assert total_variation(p, p) == 0
    assert total_variation(p, r) <= total_variation(p, q) + total_variation(q, r) + 1e-12


@given(simplex_triple())
def test_bray_curtis_forms(pqr):
    p, q, _ = pqr
    bc = bray_curtis(p, q)
    assert -1e-12 <= bc <= 1 + 1e-12
    assert abs(bc - bray_curtis(q, p)) < 1e-15
    assert abs(bray_curtis(p, p)) < 1e-12


@given(arrays(float, (4, 3), elements=st.floats(-5, 5)),
       arrays(float, 4, elements=st.floats(0.01, 1)),
       st.floats(0.01, 100))
def test_compose_scale_invariance(Q, sigma, c):
    Q = Q.copy()
    Q[0] = np.abs(Q[0]) + 0.1  # every column has a positive cell
    a = compose_measures(sigma, Q)
    np.testing.assert_allclose(compose_measures(c * sigma, Q), a, atol=1e-12)
    np.testing.assert_allclose(compose_measures(sigma, np.sqrt(c) * Q), a, atol=1e-12)
    np.testing.assert_allclose(a.sum(axis=0), 1.0, atol=1e-12)


@given(gram_stack(), st.randoms(use_true_random=False))
def test_compromise_commutes_with_permutation(S, rnd):
    J = S.shape[1]
    perm = np.array(rnd.sample(range(J), J))
    Sp = S[:, perm][:, :, perm]
    np.testing.assert_allclose(compromise(Sp), compromise(S)[np.ix_(perm, perm)], atol=1e-12)


@given(gram_stack())
def test_rv_range_psd(S):
    R = rv_matrix(S)
    assert np.all(R >= -1e-12) and np.all(R <= 1 + 1e-12)
    np.testing.assert_allclose(np.diag(R), 1.0, atol=1e-12)
    assert abs(R[0, -1] - rv_coefficient(S[0], S[-1])) < 1e-10


@given(gram_stack())
def test_normalized_gram_invariants(S):
    G = gram_normalize(S[0])
    np.testing.assert_allclose(np.diag(G), 1.0, atol=1e-12)
    np.testing.assert_allclose(G, G.T, atol=1e-15)
    assert np.linalg.eigvalsh(G).min() > -1e-8
