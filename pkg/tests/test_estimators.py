import numpy as np
import pytest
from sklearn.base import clone

from ddfactor import (ConsensusOrdination, DirichletFactorSampler,
                      PosteriorCoclustering, SelfConsistentCorrelation)
from ddfactor.model import simulate_design


@pytest.fixture(scope="module")
def X():
    sim = simulate_design(25, 6, 2, 400, np.random.default_rng(0), alpha=2.0)
    keep = sim.counts.counts.sum(axis=1) > 0
    return sim.counts.counts[keep].T  # samples x OTUs


@pytest.fixture(scope="module")
def fitted(X):
    return DirichletFactorSampler(alpha=2.0, n_factors=3, iterations=80, burn_in=20,
                                  thin=4, random_state=3).fit(X)


class TestSampler:
    def test_params_and_clone(self):
        est = DirichletFactorSampler(alpha=3.0, iterations=10)
        p = est.get_params()
        assert p["alpha"] == 3.0 and p["iterations"] == 10
        assert clone(est).get_params() == p

    def test_fit_transform(self, X, fitted):
        assert len(fitted.draws_) == 15
        out = fitted.transform(X)
        assert out.shape == X.shape
        np.testing.assert_allclose(out.sum(axis=1), 1.0)
        np.testing.assert_allclose(np.diag(fitted.gram_), 1.0)

    def test_transductive(self, X, fitted):
        with pytest.raises(ValueError, match="transductive"):
            fitted.transform(X[:, ::-1])

    def test_deterministic(self, X, fitted):
        again = clone(fitted).fit(X)
        np.testing.assert_array_equal(again.posterior_mean_, fitted.posterior_mean_)

    def test_rejects_empty_otu(self, X):
        Z = np.hstack([X, np.zeros((X.shape[0], 1), dtype=int)])
        with pytest.raises(ValueError, match="zero"):
            DirichletFactorSampler(alpha=2.0, iterations=5, burn_in=1).fit(Z)


def test_self_consistent_correlation(X):
    est = SelfConsistentCorrelation(D=5, max_iter=5, random_state=0).fit(X)
    J = X.shape[0]
    assert est.correlation_.shape == (J, J)
    np.testing.assert_allclose(np.diag(est.correlation_), 1.0)
    assert est.n_iter_ <= 5


def test_consensus_ordination(fitted):
    est = ConsensusOrdination(n_components=2).fit(fitted.draws_)
    pts = est.transform(fitted.draws_.S)
    assert pts.shape == (15, fitted.draws_.S.shape[1], 2)
    np.testing.assert_allclose(est.transform(est.compromise_), est.compromise_ @ est.axes_)


def test_posterior_coclustering(fitted):
    est = PosteriorCoclustering(n_clusters=2)
    labels = est.fit_predict(fitted.draws_.P)
    assert labels.shape == (fitted.draws_.P.shape[2],)
    assert set(labels) <= {0, 1}
    np.testing.assert_array_equal(np.diag(est.probs_), 1.0)
