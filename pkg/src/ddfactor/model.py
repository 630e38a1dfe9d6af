"""Core model: data containers, prior simulation and dependent measures.

Each OTU ``i`` carries a weight ``sigma[i]`` in (0, 1) and each biological
sample ``j`` a latent vector ``Y[:, j]``.  The distribution of sample ``j``
puts mass proportional to ``sigma[i] * max(Q[i, j], 0)**2`` on OTU ``i``
where ``Q[i, j] = <X[:, i], Y[:, j]> + eps[i, j]``.
"""
from dataclasses import dataclass, field
import warnings

import numpy as np

from ._rng import as_generator
from ._validation import check_count, check_count_matrix, check_positive

# smallest/largest representable OTU weights; Beta draws with tiny shape can
# underflow to exactly 0
SIGMA_FLOOR = 1e-300
SIGMA_CEIL = float(np.nextafter(1.0, 0.0))


class DegenerateColumnError(ValueError):
    """A sample column has no positive latent weight, so it cannot be normalized."""

    def __init__(self, columns):
        self.columns = list(columns)
        super().__init__(
            f"column(s) {self.columns} have no positive weight; "
            "the normalized distribution is undefined"
        )


@dataclass
class CountTable:
    """OTU-by-sample read counts (rows are OTUs, columns are biological samples)."""

    counts: np.ndarray
    otu_ids: list = None
    sample_ids: list = None

    def __post_init__(self):
        self.counts = check_count_matrix(self.counts, allow_empty_columns=True)
        I, J = self.counts.shape
        if self.otu_ids is None:
            self.otu_ids = [f"otu{i}" for i in range(I)]
        if self.sample_ids is None:
            self.sample_ids = [f"sample{j}" for j in range(J)]
        self.otu_ids = [str(x) for x in self.otu_ids]
        self.sample_ids = [str(x) for x in self.sample_ids]
        if len(self.otu_ids) != I or len(self.sample_ids) != J:
            raise ValueError("label lengths do not match the count matrix shape")
        for kind, ids in (("OTU", self.otu_ids), ("sample", self.sample_ids)):
            if len(set(ids)) != len(ids):
                raise ValueError(f"duplicate {kind} ids")

    @property
    def n_otus(self):
        return self.counts.shape[0]

    @property
    def n_samples(self):
        return self.counts.shape[1]

    @property
    def sample_totals(self):
        return self.counts.sum(axis=0)

    @property
    def otu_totals(self):
        return self.counts.sum(axis=1)

    def check_fittable(self):
        empty = np.flatnonzero(self.sample_totals == 0)
        if empty.size:
            raise ValueError(
                f"samples {[self.sample_ids[j] for j in empty]} have zero total count"
            )
        return self

    def __eq__(self, other):
        if not isinstance(other, CountTable):
            return NotImplemented
        return (
            np.array_equal(self.counts, other.counts)
            and self.otu_ids == other.otu_ids
            and self.sample_ids == other.sample_ids
        )


@dataclass
class Hyperparams:
    """Prior and chain settings.

    ``m=None`` resolves to ``min(J, 15)`` once the number of samples is known.
    The shrinkage shape is ``a1`` for the first factor and ``a2`` for the rest.
    """

    alpha: float = 10.0
    m: int = None
    a1: float = 2.0
    a2: float = 3.0
    v: float = 3.0
    tau_prior: tuple = (1.0, 1.0)
    iterations: int = 50_000
    burn_in: int = 10_000
    thin: int = 10
    seed: int = 0

    def validate(self, n_otus=None):
        check_positive(self.alpha, "alpha")
        check_positive(self.a1, "a1")
        check_positive(self.a2, "a2")
        if self.a2 <= 1:
            raise ValueError(f"a2 must be > 1 for increasing shrinkage, got {self.a2}")
        check_positive(self.v, "v")
        if len(self.tau_prior) != 2:
            raise ValueError("tau_prior must be a (shape, rate) pair")
        check_positive(self.tau_prior[0], "tau_prior shape")
        check_positive(self.tau_prior[1], "tau_prior rate")
        if self.m is not None:
            check_count(self.m, "m")
        check_count(self.iterations, "iterations")
        check_count(self.burn_in, "burn_in", minimum=0)
        check_count(self.thin, "thin")
        if self.burn_in >= self.iterations:
            raise ValueError("burn_in must be smaller than iterations")
        if n_otus is not None and self.alpha / n_otus >= 0.5:
            raise ValueError(
                f"alpha/I must be < 1/2 (alpha={self.alpha}, I={n_otus})"
            )
        return self

    def n_factors(self, n_samples):
        return int(self.m) if self.m is not None else min(int(n_samples), 15)

    def shrinkage_shapes(self, m):
        a = np.full(m, float(self.a2))
        a[0] = self.a1
        return a


@dataclass
class LatentState:
    sigma: np.ndarray
    Q: np.ndarray
    T: np.ndarray


@dataclass
class FactorState:
    """Shrinkage-prior factors; ``X`` is m x I, ``Y`` is m x J."""

    X: np.ndarray
    Y: np.ndarray
    gamma: np.ndarray
    gamma_local: np.ndarray
    tau_eps: float

    def copy(self):
        return FactorState(
            self.X.copy(), self.Y.copy(), self.gamma.copy(),
            self.gamma_local.copy(), float(self.tau_eps),
        )

    def covariance(self):
        """Covariance of a row of Q: ``Y'Y + I / tau_eps``."""
        J = self.Y.shape[1]
        return self.Y.T @ self.Y + np.eye(J) / self.tau_eps


def clip_sigma(sigma):
    return np.clip(sigma, SIGMA_FLOOR, SIGMA_CEIL)


def sample_prior_sigma(I, alpha, rng=None):
    """I i.i.d. Beta(alpha/I, 1/2 - alpha/I) OTU weights."""
    I = check_count(I, "I")
    alpha = check_positive(alpha, "alpha")
    eps = alpha / I
    if eps >= 0.5:
        raise ValueError(f"alpha/I must be < 1/2, got {eps}")
    rng = as_generator(rng)
    return clip_sigma(rng.beta(eps, 0.5 - eps, size=I))


def sample_prior_factors(J, hyper, rng=None, n_otus=0):
    """Draw (X, Y, gamma, gamma_local, tau_eps) from the shrinkage prior."""
    rng = as_generator(rng)
    m = hyper.n_factors(J)
    a = hyper.shrinkage_shapes(m)
    gamma = rng.gamma(a, 1.0)
    gamma_local = rng.gamma(hyper.v / 2, 2.0 / hyper.v, size=(m, J))
    precision = gamma_local * np.cumprod(gamma)[:, None]
    Y = rng.standard_normal((m, J)) / np.sqrt(precision)
    X = rng.standard_normal((m, n_otus))
    shape, rate = hyper.tau_prior
    tau_eps = rng.gamma(shape, 1.0 / rate)
    return FactorState(X, Y, gamma, gamma_local, float(tau_eps))


def _normalize_columns(W, tol=0.0):
    totals = W.sum(axis=0)
    bad = np.flatnonzero(~(totals > tol))
    if bad.size:
        raise DegenerateColumnError(bad)
    return W / totals


def compose_measures(sigma, Q):
    """Sample distributions ``P[i, j] ∝ sigma[i] * max(Q[i, j], 0)**2``."""
    sigma = np.asarray(sigma, dtype=float)
    Q = np.asarray(Q, dtype=float)
    if Q.ndim == 1:
        Q = Q[:, None]
    W = sigma[:, None] * np.square(np.maximum(Q, 0.0))
    return _normalize_columns(W)


def simulate_misspecified(sigma, X, Y, a):
    """Distributions with weights ``sigma[i] * max(<X_i, Y^j>, 0)**a``.

    ``a=2`` recovers :func:`compose_measures` with ``Q = X'Y``.
    """
    a = check_positive(a, "a")
    sigma = np.asarray(sigma, dtype=float)
    inner = np.asarray(X, dtype=float).T @ np.asarray(Y, dtype=float)
    W = sigma[:, None] * np.maximum(inner, 0.0) ** a
    return _normalize_columns(W)


def simulate_dataset(P, totals, rng=None, otu_ids=None, sample_ids=None):
    """Multinomial counts with fixed column totals."""
    rng = as_generator(rng)
    P = np.asarray(P, dtype=float)
    totals = np.broadcast_to(np.asarray(totals), (P.shape[1],))
    if (totals < 1).any():
        raise ValueError("totals must be >= 1")
    counts = np.empty(P.shape, dtype=np.int64)
    for j in range(P.shape[1]):
        p = np.clip(P[:, j], 0.0, None)
        counts[:, j] = rng.multinomial(int(totals[j]), p / p.sum())
    return CountTable(counts, otu_ids, sample_ids)


def gram_normalize(G, zero_tol=1e-10):
    """Unit-diagonal normalization of a Gram matrix.

    Rows/columns whose norm is below ``zero_tol`` get diagonal 1 and zero
    off-diagonals.
    """
    G = np.asarray(G, dtype=float)
    d = np.sqrt(np.clip(np.diag(G), 0.0, None))
    dead = d < zero_tol
    d_safe = np.where(dead, 1.0, d)
    S = G / np.outer(d_safe, d_safe)
    S[dead, :] = 0.0
    S[:, dead] = 0.0
    S = 0.5 * (S + S.T)
    np.fill_diagonal(S, 1.0)
    return S


def normalized_gram(Y):
    """Normalized Gram matrix of the columns of ``Y`` (m x J)."""
    Y = np.asarray(Y, dtype=float)
    return gram_normalize(Y.T @ Y)


def estimate_eta(phi, alpha, I, mc_reps=2000, rng=None):
    """Monte-Carlo correlation of ``P^j(A)`` and ``P^j'(A)`` for cosine ``phi``.

    Uses the ratio of expectations that does not depend on ``A``:
    E[sum s^2 q^2 q'^2 / (S S')] / E[sum s^2 q^4 / S^2] where
    ``S = sum s q^2``.  Replicates with an all-nonpositive column are skipped.
    """
    mc_reps = check_count(mc_reps, "mc_reps", minimum=100)
    if not -1.0 <= phi <= 1.0:
        raise ValueError("phi must lie in [-1, 1]")
    rng = as_generator(rng)
    eps = alpha / I
    if eps >= 0.5:
        raise ValueError("alpha/I must be < 1/2")
    sigma = clip_sigma(rng.beta(eps, 0.5 - eps, size=(mc_reps, I)))
    z1 = rng.standard_normal((mc_reps, I))
    z2 = rng.standard_normal((mc_reps, I))
    q1 = z1
    q2 = phi * z1 + np.sqrt(max(1.0 - phi * phi, 0.0)) * z2
    w1 = sigma * np.maximum(q1, 0.0) ** 2
    w2 = sigma * np.maximum(q2, 0.0) ** 2
    s1 = w1.sum(axis=1)
    s2 = w2.sum(axis=1)
    ok = (s1 > 0) & (s2 > 0)
    if not ok.any():
        raise RuntimeError("every replicate had a degenerate column")
    w1, w2, s1, s2 = w1[ok], w2[ok], s1[ok], s2[ok]
    cross = (w1 * w2).sum(axis=1) / (s1 * s2)
    var1 = (w1 * w1).sum(axis=1) / (s1 * s1)
    var2 = (w2 * w2).sum(axis=1) / (s2 * s2)
    return float(cross.mean() / (0.5 * (var1.mean() + var2.mean())))


# ---------------------------------------------------------------------------
# simulation designs


@dataclass
class SimulatedData:
    counts: CountTable
    P: np.ndarray
    sigma: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    labels: np.ndarray = field(default=None)

    @property
    def S_true(self):
        return normalized_gram(self.Y)


def block_loadings(J, L, rng, theta=None):
    """Block-structured loadings: the first J//2 samples use the first
    ceil(L/2) factors, the rest use the remaining factors.

    Non-zero entries are standard normal, or equicorrelated with correlation
    ``theta`` across samples when ``theta`` is given.
    """
    rng = as_generator(rng)
    half = J // 2
    split = (L + 1) // 2
    if theta is None:
        Y = rng.standard_normal((L, J))
    else:
        if not 0.0 <= theta < 1.0:
            raise ValueError("theta must lie in [0, 1)")
        shared = rng.standard_normal((L, 1))
        Y = np.sqrt(theta) * shared + np.sqrt(1.0 - theta) * rng.standard_normal((L, J))
    Y[split:, :half] = 0.0
    Y[:split, half:] = 0.0
    return Y


def two_cluster_loadings(J, L, rng, shift=3.0):
    rng = as_generator(rng)
    half = J // 2
    Y = rng.standard_normal((L, J))
    Y[:, :half] -= shift
    Y[:, half:] += shift
    return Y


def simulate_design(I=68, J=22, L=3, total=1000, rng=None, *, alpha=10.0,
                    theta=None, power=2.0, two_clusters=False, shift=3.0):
    """Simulated count table from the block or two-cluster designs.

    ``power`` other than 2 uses the misspecified weights
    ``sigma * <X, Y>^power``.
    """
    rng = as_generator(rng)
    I = check_count(I, "I")
    J = check_count(J, "J", minimum=2)
    L = check_count(L, "L")
    for _ in range(1000):
        sigma = sample_prior_sigma(I, alpha, rng)
        if two_clusters:
            Y = two_cluster_loadings(J, L, rng, shift)
        else:
            Y = block_loadings(J, L, rng, theta)
        X = rng.standard_normal((L, I))
        try:
            P = simulate_misspecified(sigma, X, Y, power)
        except DegenerateColumnError:
            continue
        break
    else:
        raise RuntimeError("could not draw a non-degenerate design")
    counts = simulate_dataset(P, total, rng)
    labels = (np.arange(J) >= J // 2).astype(int)
    return SimulatedData(counts, P, sigma, X, Y, labels)


def warn_clipped(n, what):
    if n:
        warnings.warn(f"{n} {what} clipped into (0, 1)", RuntimeWarning, stacklevel=3)
