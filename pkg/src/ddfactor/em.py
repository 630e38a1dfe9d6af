"""Self-consistent EM-type estimate of the sample correlation matrix.

Counts are mapped to ``sqrt(n_ij / sigma_i)`` where positive and treated as
censored-negative latent values where zero.  The Monte-Carlo E-step imputes
the censored entries from the truncated conditional normal, the M-step takes
the uncentred second-moment matrix.
"""
from dataclasses import dataclass
import warnings

import numpy as np
from scipy.special import log_ndtr, ndtri_exp

from ._rng import as_generator
from ._validation import check_count, check_positive
from .model import CountTable, gram_normalize

SIGMA_HAT_BOUNDS = (1e-8, 1.0 - 1e-8)


@dataclass
class TruncatedData:
    """Observed ``q_tilde`` values; NaN marks a censored (negative) entry."""

    q_tilde: np.ndarray
    sigma_hat: np.ndarray

    @property
    def censored(self):
        return np.isnan(self.q_tilde)


@dataclass
class EMResult:
    gram: np.ndarray
    covariance: np.ndarray
    converged: bool
    n_iter: int
    step_sizes: list


def _as_counts(counts):
    return counts.counts if isinstance(counts, CountTable) else np.asarray(counts)


def moment_sigma(counts, warn=True):
    """Moment estimate ``mean_j n_ij / (n^j - n_ij)`` clipped into (0, 1)."""
    n = _as_counts(counts).astype(float)
    tot = n.sum(axis=0)
    if (tot <= 0).any():
        raise ValueError("every sample needs a positive total count")
    rest = tot[None, :] - n
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(rest > 0, n / rest, np.where(n > 0, np.inf, 0.0))
    raw = ratio.mean(axis=1)
    lo, hi = SIGMA_HAT_BOUNDS
    clipped = np.clip(raw, lo, hi)
    n_high = int(np.sum(raw > hi))
    if warn and n_high:
        warnings.warn(f"{n_high} moment estimate(s) of sigma exceeded 1 and were clipped",
                      RuntimeWarning, stacklevel=2)
    return clipped


def truncate_counts(counts, sigma_hat=None):
    n = _as_counts(counts).astype(float)
    if sigma_hat is None:
        sigma_hat = moment_sigma(counts, warn=False)
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(n > 0, np.sqrt(n / sigma_hat[:, None]), np.nan)
    return TruncatedData(q, np.asarray(sigma_hat, dtype=float))


def _negative_truncnorm(mean, sd, u):
    z = ndtri_exp(np.log1p(-u) + log_ndtr(-mean / sd))
    return np.minimum(mean + sd * z, 0.0)


def _precision(Sigma):
    J = Sigma.shape[0]
    try:
        L = np.linalg.cholesky(Sigma)
        ridge = False
    except np.linalg.LinAlgError:
        ridge = True
    if ridge or np.linalg.cond(Sigma) > 1e12:
        warnings.warn("ill-conditioned covariance in E-step; adding ridge 1e-6",
                      RuntimeWarning, stacklevel=3)
        Sigma = Sigma + 1e-6 * np.trace(Sigma) / J * np.eye(J)
        L = np.linalg.cholesky(Sigma)
    Linv = np.linalg.solve(L, np.eye(J))
    return Linv.T @ Linv


def e_step(Sigma_t, data, D, rng=None, *, start=None, burn=5):
    """Impute censored coordinates ``D`` times per row.

    Each row's censored entries are drawn by Gibbs sweeps of univariate
    negative-truncated normals given everything else in the row.  Returns an
    array of shape (D, I, J).  ``start`` optionally gives the current
    censored values (e.g. from the previous EM iteration).
    """
    rng = as_generator(rng)
    D = check_count(D, "D")
    q = data.q_tilde
    cens = data.censored
    I, J = q.shape
    prec = _precision(np.asarray(Sigma_t, dtype=float))
    diag = np.diag(prec)
    cur = np.where(cens, -0.1, q) if start is None else np.where(cens, start, q)
    out = np.empty((D, I, J))
    cols = [j for j in range(J) if cens[:, j].any()]
    if not cols:
        out[:] = q
        return out
    for sweep in range(burn + D):
        U = rng.random((len(cols), I))
        for k, j in enumerate(cols):
            rows = cens[:, j]
            s2 = 1.0 / diag[j]
            mu = -s2 * (cur[rows] @ prec[:, j] - cur[rows, j] * diag[j])
            cur[rows, j] = _negative_truncnorm(mu, np.sqrt(s2), U[k, rows])
        if sweep >= burn:
            out[sweep - burn] = cur
    return out


def m_step(samples):
    """Uncentred second moment ``(1 / (I D)) sum q q'`` over imputed rows."""
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[None, :]
    flat = samples.reshape(-1, samples.shape[-1])
    if flat.shape[0] == 0:
        raise ValueError("m_step needs at least one sample")
    Sigma = flat.T @ flat / flat.shape[0]
    return 0.5 * (Sigma + Sigma.T)


def run_em(counts, D=50, tol=1e-3, max_iter=100, rng=None, *, sigma_hat=None):
    """Iterate E and M steps from the identity until the correlation settles.

    Convergence is declared when the Frobenius distance between successive
    correlation matrices drops below ``tol``.  Returns :class:`EMResult`;
    ``converged`` is False when ``max_iter`` was reached.
    """
    rng = as_generator(rng)
    D = check_count(D, "D")
    max_iter = check_count(max_iter, "max_iter")
    tol = check_positive(tol, "tol")
    data = truncate_counts(counts, sigma_hat)
    J = data.q_tilde.shape[1]
    if not data.censored.any():
        # nothing to impute: a single M-step is the fixed point
        Sigma = m_step(data.q_tilde)
        return EMResult(gram_normalize(Sigma), Sigma, True, 1, [0.0])
    Sigma = np.eye(J)
    corr = np.eye(J)
    steps = []
    state = None
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        samples = e_step(Sigma, data, D, rng, start=state)
        state = samples[-1]
        new_Sigma = m_step(samples)
        new_corr = gram_normalize(new_Sigma)
        step = float(np.linalg.norm(new_corr - corr))
        steps.append(step)
        Sigma, corr = new_Sigma, new_corr
        if step < tol:
            converged = True
            break
    return EMResult(corr, Sigma, converged, it, steps)
