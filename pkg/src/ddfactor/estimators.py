"""scikit-learn style wrappers.

Count matrices follow the scikit-learn layout: one row per biological
sample, one column per OTU.  They are transposed internally to the
OTU-by-sample tables used elsewhere in the package.
"""
import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_count_matrix
from .downstream import cocluster, pam_cluster, posterior_mean_P
from .em import run_em
from .gibbs import PosteriorDraws, run_chain
from .model import CountTable, Hyperparams
from .ordination import compromise, consensus_axes, project_draw


def _table(X):
    counts = check_count_matrix(X, name="X").T
    empty = np.flatnonzero(counts.sum(axis=1) == 0)
    if empty.size:
        raise ValueError(f"OTU column(s) {empty.tolist()} are all zero; drop them first")
    return CountTable(np.ascontiguousarray(counts))


class DirichletFactorSampler(TransformerMixin, BaseEstimator):
    """Posterior sampling of the dependent Dirichlet factor model.

    The model is transductive: ``transform`` only accepts the table it was
    fitted on and returns posterior-mean distributions, one row per sample.
    """

    def __init__(self, alpha=10.0, n_factors=None, a1=2.0, a2=3.0, v=3.0,
                 tau_prior=(1.0, 1.0), iterations=50000, burn_in=10000, thin=10,
                 init="em", block_size=256, n_jobs=None, random_state=0):
        self.alpha = alpha
        self.n_factors = n_factors
        self.a1 = a1
        self.a2 = a2
        self.v = v
        self.tau_prior = tau_prior
        self.iterations = iterations
        self.burn_in = burn_in
        self.thin = thin
        self.init = init
        self.block_size = block_size
        self.n_jobs = n_jobs
        self.random_state = random_state

    def _hyper(self):
        return Hyperparams(alpha=self.alpha, m=self.n_factors, a1=self.a1, a2=self.a2,
                           v=self.v, tau_prior=tuple(self.tau_prior),
                           iterations=self.iterations, burn_in=self.burn_in,
                           thin=self.thin, seed=0)

    def fit(self, X, y=None):
        table = _table(X)
        rng = 0 if self.random_state is None else self.random_state
        draws, diag = run_chain(table, self._hyper(), rng, n_jobs=self.n_jobs,
                                block_size=self.block_size, init=self.init)
        if len(draws) == 0:
            raise ValueError("no draws were recorded; check iterations, burn_in and thin")
        self.draws_ = draws
        self.diagnostics_ = diag
        self.posterior_mean_ = posterior_mean_P(draws)
        self.gram_ = draws.S.mean(axis=0)
        self._fit_counts = table.counts
        self.n_features_in_ = table.n_otus
        return self

    def transform(self, X):
        check_is_fitted(self, "posterior_mean_")
        counts = check_count_matrix(X, name="X").T
        if counts.shape != self._fit_counts.shape or not np.array_equal(counts, self._fit_counts):
            raise ValueError("this model is transductive: transform takes the fitted table")
        return self.posterior_mean_.T.copy()


class SelfConsistentCorrelation(BaseEstimator):
    """EM-type estimate of the between-sample correlation matrix."""

    def __init__(self, D=50, tol=1e-3, max_iter=100, random_state=None):
        self.D = D
        self.tol = tol
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y=None):
        table = _table(X)
        res = run_em(table, D=self.D, tol=self.tol, max_iter=self.max_iter,
                     rng=self.random_state)
        self.correlation_ = res.gram
        self.covariance_ = res.covariance
        self.converged_ = res.converged
        self.n_iter_ = res.n_iter
        self.step_sizes_ = np.asarray(res.step_sizes)
        self.n_features_in_ = table.n_otus
        return self


def _gram_stack(S):
    if isinstance(S, PosteriorDraws):
        S = S.S
    S = np.asarray(S, dtype=float)
    if S.ndim == 2:
        S = S[None]
    if S.ndim != 3 or S.shape[1] != S.shape[2]:
        raise ValueError(f"expected a (K, J, J) stack of Gram matrices, got {S.shape}")
    return S


class ConsensusOrdination(TransformerMixin, BaseEstimator):
    """Shared low-dimensional space for a stack of posterior Gram draws."""

    def __init__(self, n_components=3, mode="mean"):
        self.n_components = n_components
        self.mode = mode

    def fit(self, S, y=None):
        S = _gram_stack(S)
        self.compromise_ = compromise(S, self.mode)
        self.space_ = consensus_axes(self.compromise_, self.n_components)
        self.axes_ = self.space_.axes
        self.eigenvalues_ = self.space_.eigenvalues
        self.variance_ratios_ = self.space_.variance_ratios
        return self

    def transform(self, S):
        check_is_fitted(self, "space_")
        single = not isinstance(S, PosteriorDraws) and np.ndim(S) == 2
        out = project_draw(_gram_stack(S), self.space_)
        return out[0] if single else out


class PosteriorCoclustering(BaseEstimator):
    """Co-clustering probabilities of samples across posterior P draws.

    ``fit_predict`` returns a consensus partition: PAM on ``1 - probs``.
    """

    def __init__(self, n_clusters="auto"):
        self.n_clusters = n_clusters

    def fit(self, P, y=None):
        res = cocluster(P, self.n_clusters)
        self.probs_ = res.probs
        self.n_clusters_ = res.k
        self.labels_ = pam_cluster(1.0 - self.probs_, res.k).labels
        return self

    def fit_predict(self, P, y=None):
        return self.fit(P).labels_
