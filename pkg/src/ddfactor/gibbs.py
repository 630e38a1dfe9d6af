"""Gibbs sampler over (sigma, Q, T, X, Y, gamma, gamma_local, tau_eps).

One iteration runs:

1. ``T_j | Q, sigma ~ Gamma(n^j, sum_i sigma_i Q_ij+^2)``;
2. a systematic scan over ``Q_ij`` given the rest of row ``i`` (X integrated
   out), using a two-piece truncated-normal mixture for zero counts and an
   independence Metropolis-Hastings step with a Laplace proposal otherwise;
3. ``sigma_i`` by envelope rejection;
4. one sweep of conjugate updates for the shrinkage factor model.

Steps 2 and 3 are conditionally independent across OTUs and run over fixed
row blocks, each with its own random substream.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import logging
import math
import os
import time

import numpy as np
from scipy import integrate
from scipy.special import (betainc, betaincinv, expit, gammainc, gammaincc,
                           gammainccinv, gammaincinv, gammaln, log_ndtr,
                           ndtri_exp)

from ._rng import root_entropy, substream
from .model import (CountTable, DegenerateColumnError, FactorState,
                    Hyperparams, LatentState, SIGMA_CEIL, SIGMA_FLOOR,
                    compose_measures, normalized_gram, sample_prior_sigma)

logger = logging.getLogger(__name__)

RATE_FLOOR = 1e-300
# upper edges of the n_ij bins used for acceptance bookkeeping
ACCEPT_BINS = (1, 2, 4, 9, 19, 49, 99, 999, np.inf)

# stage tags for substreams
_STAGE_T, _STAGE_ROWS, _STAGE_FACTORS = 0, 1, 2


class ChainError(RuntimeError):
    """Failure inside the sampler, annotated with where it happened."""


@dataclass
class PosteriorDraws:
    """Thinned posterior snapshots stacked along the first axis."""

    sigma: np.ndarray
    Q: np.ndarray
    Y: np.ndarray
    S: np.ndarray
    P: np.ndarray
    iterations: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.sigma.shape[0]

    def snapshot(self, k):
        return {name: getattr(self, name)[k] for name in ("sigma", "Q", "Y", "S", "P")}

    @classmethod
    def empty(cls, I, J, m, meta=None):
        return cls(
            np.empty((0, I)), np.empty((0, I, J)), np.empty((0, m, J)),
            np.empty((0, J, J)), np.empty((0, I, J)), np.empty(0, dtype=np.int64),
            dict(meta or {}),
        )

    @classmethod
    def from_snapshots(cls, snaps, iterations, meta=None):
        return cls(
            np.array([s["sigma"] for s in snaps]), np.array([s["Q"] for s in snaps]),
            np.array([s["Y"] for s in snaps]), np.array([s["S"] for s in snaps]),
            np.array([s["P"] for s in snaps]), np.asarray(iterations, dtype=np.int64),
            dict(meta or {}),
        )


@dataclass
class ChainDiagnostics:
    mh_acceptance_rate: float
    acceptance_by_count: dict
    traces: dict
    seconds: float = 0.0

    def as_dict(self):
        return {
            "mh_acceptance_rate": self.mh_acceptance_rate,
            "acceptance_by_count": self.acceptance_by_count,
            "traces": self.traces,
            "seconds": self.seconds,
        }


# ---------------------------------------------------------------------------
# Step 1


def update_T(state, counts, rng):
    """Draw the latent totals ``T_j``."""
    n = counts.sample_totals if isinstance(counts, CountTable) else np.asarray(counts).sum(axis=0)
    rate = (state.sigma[:, None] * np.square(np.maximum(state.Q, 0.0))).sum(axis=0)
    bad = np.flatnonzero(~(rate > 0))
    if bad.size:
        raise DegenerateColumnError(bad)
    return rng.gamma(n, 1.0 / np.maximum(rate, RATE_FLOOR))


# ---------------------------------------------------------------------------
# Step 2


def conditional_mean_var(Sigma, q_others, j):
    """Mean and variance of coordinate ``j`` of N(0, Sigma) given the others."""
    Sigma = np.asarray(Sigma, dtype=float)
    J = Sigma.shape[0]
    try:
        L = np.linalg.cholesky(Sigma)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("Sigma is not positive definite") from exc
    eye = np.eye(J)
    prec = np.linalg.solve(L.T, np.linalg.solve(L, eye))
    others = np.delete(np.arange(J), j)
    q_others = np.asarray(q_others, dtype=float)
    s2 = 1.0 / prec[j, j]
    mu = -s2 * (prec[j, others] @ q_others)
    return float(mu), float(s2)


def precision_from_factors(Y, tau_eps):
    """Inverse of ``Y'Y + I/tau`` via the Woodbury identity."""
    m, J = Y.shape
    inner = np.eye(m) + tau_eps * (Y @ Y.T)
    try:
        L = np.linalg.cholesky(inner)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("factor precision is not positive definite") from exc
    W = np.linalg.solve(L, Y)
    prec = tau_eps * np.eye(J) - tau_eps**2 * (W.T @ W)
    return 0.5 * (prec + prec.T)


def zero_count_mixture(mu, s2, sigma_T):
    """Components of the n_ij = 0 conditional.

    Returns ``(p1, pos_mean, pos_var)``: the probability of the nonpositive
    piece N(mu, s2) restricted to (-inf, 0], and the moments of the positive
    piece N(mu/D, s2/D) restricted to (0, inf), ``D = 1 + 2 sigma_T s2``.
    """
    mu = np.asarray(mu, dtype=float)
    s = np.sqrt(s2)
    delta = 1.0 + 2.0 * sigma_T * s2
    log_neg = log_ndtr(-mu / s)
    log_pos = (-0.5 * np.log(delta) - mu**2 * (1.0 - 1.0 / delta) / (2.0 * s2)
               + log_ndtr(mu / (s * np.sqrt(delta))))
    p1 = expit(log_neg - log_pos)
    return p1, mu / delta, s2 / delta


def _truncnorm_above(mean, sd, u):
    """Inverse-CDF draw of N(mean, sd^2) restricted to (0, inf); ``u`` in [0, 1)."""
    a = -mean / sd
    z = -ndtri_exp(np.log1p(-u) + log_ndtr(-a))
    return np.maximum(mean + sd * z, np.finfo(float).tiny)


def _truncnorm_below(mean, sd, u):
    """Inverse-CDF draw of N(mean, sd^2) restricted to (-inf, 0]."""
    b = -mean / sd
    z = ndtri_exp(np.log1p(-u) + log_ndtr(b))
    return np.minimum(mean + sd * z, 0.0)


def _draw_zero(mu, s2, sigma_T, u_pick, u_draw):
    p1, m_pos, v_pos = zero_count_mixture(mu, s2, sigma_T)
    neg = u_pick < p1
    out = np.where(
        neg,
        _truncnorm_below(mu, np.sqrt(s2), u_draw),
        _truncnorm_above(m_pos, np.sqrt(v_pos), u_draw),
    )
    return out


def update_Q_zero(mu, s2, sigma_i, T_j, rng):
    """One draw of ``Q_ij`` for a zero-count cell."""
    u = rng.random(2)
    return float(_draw_zero(mu, s2, sigma_i * T_j, u[0], u[1]))


def laplace_params(n_ij, mu, s2, sigma_i, T_j):
    """Mode and inverse curvature of ``q^{2n} exp(-sigma T q^2) N(q; mu, s2)``."""
    n = np.asarray(n_ij, dtype=float)
    A = 2.0 * sigma_i * T_j + 1.0 / s2
    b = mu / s2
    root = np.sqrt(b * b + 8.0 * n * A)
    # two algebraically equal forms, each free of cancellation on its side
    with np.errstate(divide="ignore", invalid="ignore"):
        mu_hat = np.where(b >= 0, (b + root) / (2.0 * A), 4.0 * n / (root - b))
        s2_hat = 1.0 / (2.0 * n / mu_hat**2 + A)
    if np.ndim(mu_hat) == 0:
        return float(mu_hat), float(s2_hat)
    return mu_hat, s2_hat


def log_conditional(q, n_ij, mu, s2, sigma_T):
    """Unnormalized log density of ``Q_ij`` given the rest of the row."""
    q = np.asarray(q, dtype=float)
    pos = np.maximum(q, 0.0)
    with np.errstate(divide="ignore"):
        logq = np.where(n_ij > 0, 2.0 * n_ij * np.log(pos), 0.0)
    return logq - sigma_T * pos**2 - (q - mu) ** 2 / (2.0 * s2)


def _mh_positive(q, n, mu, s2, sigma_T, z, u):
    mu_hat, s2_hat = laplace_params(n, mu, s2, sigma_T, 1.0)
    prop = mu_hat + np.sqrt(s2_hat) * z
    with np.errstate(divide="ignore", invalid="ignore"):
        log_ratio = (
            log_conditional(prop, n, mu, s2, sigma_T)
            - log_conditional(q, n, mu, s2, sigma_T)
            + ((prop - mu_hat) ** 2 - (q - mu_hat) ** 2) / (2.0 * s2_hat)
        )
        accept = (prop > 0) & ((q <= 0) | (np.log1p(-u) < log_ratio))
    return np.where(accept, prop, q), accept


def update_Q_positive(current_q, n_ij, mu, s2, sigma_i, T_j, rng):
    """Independence MH step with the Laplace proposal; returns (value, accepted)."""
    z = rng.standard_normal()
    u = rng.random()
    q, acc = _mh_positive(np.float64(current_q), n_ij, mu, s2, sigma_i * T_j, z, u)
    return float(q), bool(acc)


# ---------------------------------------------------------------------------
# Step 3


_UNIFORM_GRID = np.linspace(0.0, 1.0, 17)
_GEOM_PIECES = 48
_GEOM_GRID = 1.0 - 0.5 ** np.arange(_GEOM_PIECES + 1)  # 0, 1/2, 3/4, ...


def _pick(logw, u):
    w = np.exp(logw - logw.max(axis=1, keepdims=True))
    cw = np.cumsum(w, axis=1)
    k = (cw < u[:, None] * cw[:, -1:]).sum(axis=1)
    return np.minimum(k, logw.shape[1] - 1)


class _BetaEnvelope:
    """Beta(a, b) kernel times a left-endpoint bound on exp(-c sigma)."""

    def __init__(self, a, b, c, grid):
        self.a, self.b, self.c, self.grid = a, b, c, grid
        F = betainc(a[:, None], b[:, None], grid[None, :])
        G = betainc(b[:, None], a[:, None], 1.0 - grid[None, :])
        lower = F[:, 1:] - F[:, :-1]
        upper = G[:, :-1] - G[:, 1:]
        # difference the CDF on the side where it is accurate
        self.use_lower = F[:, 1:] <= 0.5
        mass = np.clip(np.where(self.use_lower, lower, upper), 0.0, None)
        with np.errstate(divide="ignore"):
            self.logw = np.log(mass) - c[:, None] * grid[None, :-1]
        self.F, self.G = F, G
        self.F_half = betainc(a, b, 0.5)

    def draw(self, idx, rng):
        u = rng.random((idx.size, 3))
        k = _pick(self.logw[idx], u[:, 0])
        a, b, c = self.a[idx], self.b[idx], self.c[idx]
        F, G = self.F[idx], self.G[idx]
        rows = np.arange(idx.size)
        lo, hi = self.grid[k], self.grid[k + 1]
        p_lower = F[rows, k] + u[:, 1] * (F[rows, k + 1] - F[rows, k])
        p_upper = G[rows, k] - u[:, 1] * (G[rows, k] - G[rows, k + 1])
        with np.errstate(invalid="ignore"):
            # invert from the nearer end of (0, 1) to keep relative precision
            x = np.where(p_lower <= self.F_half[idx], betaincinv(a, b, p_lower),
                         1.0 - betaincinv(b, a, p_upper))
        x = np.clip(x, lo, hi)
        return x, u[:, 2] < np.exp(-c * (x - lo))


class _GammaEnvelope:
    """Gamma(a, c) kernel times a right-endpoint bound on (1 - sigma)^(b - 1).

    Pieces shrink geometrically towards 1; the last piece [1 - d, 1) uses the
    exact (1 - sigma)^(b - 1) kernel with the Gamma factor bounded above.
    """

    def __init__(self, a, b, c):
        grid = _GEOM_GRID
        self.a, self.b, self.c = a, b, c
        x_grid = c[:, None] * grid[None, :]
        F = gammainc(a[:, None], x_grid)
        G = gammaincc(a[:, None], x_grid)
        lower = F[:, 1:] - F[:, :-1]
        upper = G[:, :-1] - G[:, 1:]
        self.use_lower = F[:, 1:] <= 0.5
        mass = np.clip(np.where(self.use_lower, lower, upper), 0.0, None)
        log_scale = gammaln(a) - a * np.log(c)
        with np.errstate(divide="ignore"):
            logw_body = (np.log(mass) + log_scale[:, None]
                         + (b[:, None] - 1.0) * np.log1p(-grid[None, 1:]))
        self.d = 1.0 - grid[-1]
        start = grid[-1]
        mode = np.clip((a - 1.0) / c, start, 1.0)
        cand = np.stack([np.full_like(a, start), mode, np.ones_like(a)], axis=1)
        log_gk = (a[:, None] - 1.0) * np.log(cand) - c[:, None] * cand
        self.log_M = log_gk.max(axis=1)
        logw_tail = self.log_M + b * np.log(self.d) - np.log(b)
        self.logw = np.concatenate([logw_body, logw_tail[:, None]], axis=1)
        self.F, self.G = F, G

    def draw(self, idx, rng):
        grid = _GEOM_GRID
        u = rng.random((idx.size, 3))
        k = _pick(self.logw[idx], u[:, 0])
        a, b, c = self.a[idx], self.b[idx], self.c[idx]
        F, G = self.F[idx], self.G[idx]
        rows = np.arange(idx.size)
        tail = k == grid.size - 1
        kk = np.minimum(k, grid.size - 2)
        p_lower = F[rows, kk] + u[:, 1] * (F[rows, kk + 1] - F[rows, kk])
        p_upper = G[rows, kk] - u[:, 1] * (G[rows, kk] - G[rows, kk + 1])
        with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
            x_body = np.where(p_lower <= 0.5, gammaincinv(a, p_lower),
                              gammainccinv(a, p_upper)) / c
            x_body = np.clip(x_body, grid[kk], grid[kk + 1])
            acc_body = u[:, 2] < np.exp(
                (b - 1.0) * (np.log1p(-x_body) - np.log1p(-grid[kk + 1])))
            x_tail = 1.0 - self.d * (1.0 - u[:, 1]) ** (1.0 / b)
            log_g = (a - 1.0) * np.log(x_tail) - c * x_tail
            acc_tail = u[:, 2] < np.exp(log_g - self.log_M[idx])
        return np.where(tail, x_tail, x_body), np.where(tail, acc_tail, acc_body)


def sample_sigma_conditional(a, b, c, rng, max_rounds=100_000, stats=None):
    """Exact draws from ``sigma^(a-1) (1-sigma)^(b-1) exp(-c sigma)`` on (0, 1).

    Vectorized over rows; ``b`` is below 1 so the density may diverge at 1.
    Small ``c`` uses 16 equal pieces with the exponential factor bounded on
    each; large ``c`` switches to a Gamma kernel (or, when the Gamma factor
    increases across (0, 1), to at least 2c equal pieces).

    If ``stats`` is a dict, the number of envelope proposals is added to
    ``stats["proposals"]``.
    """
    a = np.atleast_1d(np.asarray(a, dtype=float))
    c = np.broadcast_to(np.asarray(c, dtype=float), a.shape).copy()
    b = np.broadcast_to(np.asarray(b, dtype=float), a.shape).copy()
    out = np.full(a.shape, np.nan)
    small = c <= 16.0
    rising = ~small & (a - 1.0 >= c)
    gam = ~small & ~rising
    groups = []
    for mask in (small, gam):
        rows = np.flatnonzero(mask)
        if rows.size:
            env = (_BetaEnvelope(a[rows], b[rows], c[rows], _UNIFORM_GRID) if mask is small
                   else _GammaEnvelope(a[rows], b[rows], c[rows]))
            groups.append((rows, env))
    # at least 2c equal pieces, rounded up to a power of two so rows share grids
    rising_rows = np.flatnonzero(rising)
    K_rows = np.minimum(2 ** np.ceil(np.log2(2.0 * c[rising_rows])), 8192).astype(int)
    for K in np.unique(K_rows):
        rows = rising_rows[K_rows == K]
        grid = np.linspace(0.0, 1.0, K + 1)
        groups.append((rows, _BetaEnvelope(a[rows], b[rows], c[rows], grid)))
    proposals = 0
    for rows, env in groups:
        todo = np.arange(rows.size)
        for _ in range(max_rounds):
            proposals += todo.size
            x, acc = env.draw(todo, rng)
            acc &= np.isfinite(x)
            out[rows[todo[acc]]] = x[acc]
            todo = todo[~acc]
            if todo.size == 0:
                break
        else:
            raise ChainError("sigma envelope sampler did not accept")
    if stats is not None:
        stats["proposals"] = stats.get("proposals", 0) + proposals
    return np.clip(out, SIGMA_FLOOR, SIGMA_CEIL)


def update_sigma(i, n_i, c_i, hyper, rng, n_otus):
    """Draw ``sigma_i`` given its total count ``n_i`` and ``c_i = sum_j T_j Q_ij+^2``."""
    eps = hyper.alpha / n_otus
    return float(sample_sigma_conditional(eps + n_i, 0.5 - eps, c_i, rng)[0])


# ---------------------------------------------------------------------------
# factor model


def y_conditional(Q, X, gamma, gamma_local, tau, factor=False):
    """Normal conditional of each column Y^j given X, the shrinkage and tau.

    Returns the (J, m) means and the (J, m, m) precisions, or their lower
    Cholesky factors with ``factor=True``.
    """
    m, J = gamma_local.shape
    prior_prec = gamma_local * np.cumprod(gamma)[:, None]  # m x J
    prec = np.broadcast_to(tau * (X @ X.T), (J, m, m)).copy()
    idx = np.arange(m)
    prec[:, idx, idx] += prior_prec.T
    try:
        L = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("Y posterior precision is singular") from exc
    rhs = (tau * (X @ Q)).T[:, :, None]  # J x m x 1
    mean = np.linalg.solve(np.swapaxes(L, 1, 2), np.linalg.solve(L, rhs))[:, :, 0]
    return mean, (L if factor else prec)


def update_factors(Q, fs, hyper, rng):
    """One sweep of conjugate updates for the shrinkage factor model on ``Q``."""
    Q = np.asarray(Q, dtype=float)
    I, J = Q.shape
    m = fs.Y.shape[0]
    a = hyper.shrinkage_shapes(m)
    Y = fs.Y
    tau = fs.tau_eps
    gamma = fs.gamma.copy()
    gamma_local = fs.gamma_local

    # X_i | Y, tau, Q  (shared precision across rows)
    prec_x = np.eye(m) + tau * (Y @ Y.T)
    try:
        Lx = np.linalg.cholesky(prec_x)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("X posterior precision is singular") from exc
    mean_x = np.linalg.solve(Lx.T, np.linalg.solve(Lx, tau * (Y @ Q.T)))
    X = mean_x + np.linalg.solve(Lx.T, rng.standard_normal((m, I)))

    # Y^j | X, gamma, gamma_local, tau, Q
    phi = np.cumprod(gamma)
    mean_y, Ly = y_conditional(Q, X, gamma, gamma_local, tau, factor=True)
    noise = np.linalg.solve(np.swapaxes(Ly, 1, 2), rng.standard_normal((J, m, 1)))
    Y = (mean_y[:, :, None] + noise)[:, :, 0].T

    # local shrinkage
    Y2 = Y**2
    rate = (hyper.v + phi[:, None] * Y2) / 2.0
    gamma_local = rng.gamma((hyper.v + 1.0) / 2.0, 1.0 / np.maximum(rate, RATE_FLOOR))

    # global multiplicative shrinkage, one gamma_h at a time
    weighted = (gamma_local * Y2).sum(axis=1)  # per factor l
    for h in range(m):
        phi_minus = np.cumprod(gamma) / gamma[h]
        shape = a[h] + J * (m - h) / 2.0
        rate_h = 1.0 + 0.5 * (phi_minus[h:] * weighted[h:]).sum()
        gamma[h] = rng.gamma(shape, 1.0 / max(rate_h, RATE_FLOOR))

    # residual precision
    resid = Q - X.T @ Y
    shape0, rate0 = hyper.tau_prior
    rate_tau = rate0 + 0.5 * float(np.sum(resid**2))
    tau = rng.gamma(shape0 + I * J / 2.0, 1.0 / max(rate_tau, RATE_FLOOR))
    return FactorState(X, Y, gamma, gamma_local, float(tau))


# ---------------------------------------------------------------------------
# row block worker


def _row_block(rows, counts, sigma, Q, T, prec, eps, gen):
    """Step 2 then Step 3 for a block of OTU rows; updates Q/sigma in place."""
    n = counts[rows]
    q = Q[rows]
    sig = sigma[rows]
    J = q.shape[1]
    nr = rows.size
    diag = np.diag(prec)
    s2_all = 1.0 / diag
    U = gen.random((J, nr, 2))
    Z = gen.standard_normal((J, nr))
    zero = n == 0
    trials = np.zeros(q.shape, dtype=bool)
    accepted = np.zeros(q.shape, dtype=bool)
    for j in range(J):
        s2 = s2_all[j]
        mu = -s2 * (q @ prec[:, j] - q[:, j] * diag[j])
        sT = sig * T[j]
        zj = zero[:, j]
        if zj.any():
            new_zero = _draw_zero(mu, s2, sT, U[j, :, 0], U[j, :, 1])
        if not zj.all():
            new_pos, acc = _mh_positive(q[:, j], n[:, j], mu, s2, sT, Z[j], U[j, :, 0])
            trials[:, j] = ~zj
            accepted[:, j] = acc & ~zj
            q[:, j] = np.where(zj, new_zero, new_pos) if zj.any() else new_pos
        else:
            q[:, j] = new_zero
    Q[rows] = q
    c = (T[None, :] * np.square(np.maximum(q, 0.0))).sum(axis=1)
    sigma[rows] = sample_sigma_conditional(eps + n.sum(axis=1), 0.5 - eps, c, gen)
    return trials, accepted


# ---------------------------------------------------------------------------
# chain driver


def _summaries(trace):
    x = np.asarray(trace, dtype=float)
    if x.size < 3:
        return {"mean": float(np.mean(x)) if x.size else float("nan"),
                "variance": float("nan"), "lag1_autocorrelation": float("nan")}
    xc = x - x.mean()
    var = float(xc @ xc / x.size)
    ac = float((xc[1:] @ xc[:-1]) / (xc @ xc)) if var > 0 else float("nan")
    return {"mean": float(x.mean()), "variance": var, "lag1_autocorrelation": ac}


def initial_state(counts, hyper, rng, *, init="em", em_kwargs=None):
    """Starting (LatentState, FactorState) for a chain.

    ``init="em"`` seeds Q from the self-consistent transform of the counts
    and Y from the eigendecomposition of the EM correlation estimate.
    """
    from .em import moment_sigma, run_em

    n = counts.counts
    I, J = n.shape
    m = hyper.n_factors(J)
    sigma = sample_prior_sigma(I, hyper.alpha, rng)
    if init == "em":
        kw = {"D": 20, "tol": 1e-3, "max_iter": 30}
        kw.update(em_kwargs or {})
        S = run_em(counts, rng=rng, **kw).gram
        sig_hat = moment_sigma(counts, warn=False)
        with np.errstate(divide="ignore"):
            qt = np.sqrt(n / sig_hat[:, None])
        scale = np.sqrt((qt**2).sum(axis=0) / np.maximum((n > 0).sum(axis=0), 1))
        Q = np.where(n > 0, qt / scale, -0.1)
        lam, vec = np.linalg.eigh(S)
        order = np.argsort(lam)[::-1][:m]
        Y = np.zeros((m, J))
        k = min(m, order.size)
        Y[:k] = (vec[:, order[:k]] * np.sqrt(np.clip(lam[order[:k]], 0.0, None))).T
    elif init == "prior":
        Q = np.where(n > 0, 1.0, -0.1)
        Y = rng.standard_normal((m, J)) * 0.5
    else:
        raise ValueError(f"unknown init {init!r}")
    fs = FactorState(np.zeros((m, I)), Y, np.ones(m), np.ones((m, J)), 1.0)
    state = LatentState(sigma, Q, np.ones(J))
    return state, fs


def gibbs_sweep(state, fs, counts, hyper, entropy, it, *, blocks=None, pool=None):
    """One full iteration; updates ``state`` in place and returns the new factors.

    Returns ``(FactorState, block_results)`` where each block result holds
    the MH trial and acceptance masks of that row block.
    """
    n = counts.counts
    I = n.shape[0]
    if blocks is None:
        blocks = [np.arange(I)]
    stage = "T"
    try:
        state.T = update_T(state, counts, substream(entropy, it, _STAGE_T))
        stage = "Q/sigma"
        prec = precision_from_factors(fs.Y, fs.tau_eps)
        eps = hyper.alpha / I
        jobs = [(rows, n, state.sigma, state.Q, state.T, prec, eps,
                 substream(entropy, it, _STAGE_ROWS, b))
                for b, rows in enumerate(blocks)]
        if pool is not None:
            results = list(pool.map(lambda args: _row_block(*args), jobs))
        else:
            results = [_row_block(*args) for args in jobs]
        stage = "factors"
        fs = update_factors(state.Q, fs, hyper, substream(entropy, it, _STAGE_FACTORS))
    except (np.linalg.LinAlgError, ValueError, ChainError) as exc:
        raise ChainError(f"iteration {it}, stage {stage}: {exc}") from exc
    return fs, results


def run_chain(counts, hyper=None, rng=None, *, n_jobs=None, block_size=256,
              init="em", em_kwargs=None, sink=None, store=True, progress=None,
              initial=None):
    """Run the sampler and collect thinned snapshots after burn-in.

    Parameters
    ----------
    counts : CountTable
    hyper : Hyperparams
    rng : int, SeedSequence or Generator, optional
        Root seed; defaults to ``hyper.seed``.
    n_jobs : int, optional
        Worker threads for the row blocks.  Results do not depend on it.
    block_size : int
        Rows per random substream.  Changing it changes the draws.
    sink : callable, optional
        Called as ``sink(iteration, snapshot)`` for every recorded snapshot.
    store : bool
        Keep snapshots in memory.
    initial : (LatentState, FactorState), optional
        Explicit starting point instead of ``init``.

    Returns
    -------
    (PosteriorDraws, ChainDiagnostics)
    """
    if not isinstance(counts, CountTable):
        counts = CountTable(np.asarray(counts))
    counts.check_fittable()
    hyper = (hyper or Hyperparams()).validate(counts.n_otus)
    n = counts.counts
    I, J = n.shape
    m = hyper.n_factors(J)
    entropy = root_entropy(hyper.seed if rng is None else rng)
    if n_jobs is None:
        n_jobs = int(os.environ.get("DDFACTOR_WORKERS", "1"))
    n_jobs = max(1, int(n_jobs))
    blocks = [np.arange(s, min(s + block_size, I)) for s in range(0, I, block_size)]

    if initial is None:
        state, fs = initial_state(counts, hyper, substream(entropy, 2**31 - 1),
                                  init=init, em_kwargs=em_kwargs)
    else:
        state, fs = initial[0], initial[1].copy()
        state = LatentState(state.sigma.copy(), state.Q.copy(), state.T.copy())
    sigma, Q = state.sigma, state.Q
    if initial is None:
        fs = update_factors(Q, fs, hyper, substream(entropy, 2**31 - 2))

    meta = {"I": I, "J": J, "m": m, "iterations": hyper.iterations,
            "burn_in": hyper.burn_in, "thin": hyper.thin, "seed": entropy,
            "block_size": block_size, "init": init}
    bins = np.asarray(ACCEPT_BINS)
    cell_bin = np.searchsorted(bins, n, side="left")
    n_bins = bins.size
    acc_trials = np.zeros(n_bins, dtype=np.int64)
    acc_hits = np.zeros(n_bins, dtype=np.int64)
    snaps, recorded = [], []
    trace = {"tau_eps": [], "mean_log_sigma": [], "leading_gram_eigenvalue": [],
             "log_T_mean": []}
    t0 = time.perf_counter()
    pool = ThreadPoolExecutor(n_jobs) if n_jobs > 1 and len(blocks) > 1 else None
    try:
        for it in range(hyper.iterations):
            fs, results = gibbs_sweep(state, fs, counts, hyper, entropy, it,
                                      blocks=blocks, pool=pool)
            T = state.T
            for rows, (tr, ac) in zip(blocks, results):
                cb = cell_bin[rows]
                acc_trials += np.bincount(cb[tr], minlength=n_bins)
                acc_hits += np.bincount(cb[ac], minlength=n_bins)

            if it >= hyper.burn_in and (it - hyper.burn_in + 1) % hyper.thin == 0:
                S = normalized_gram(fs.Y)
                snap = {"sigma": sigma.copy(), "Q": Q.copy(), "Y": fs.Y.copy(),
                        "S": S, "P": compose_measures(sigma, Q)}
                trace["tau_eps"].append(fs.tau_eps)
                trace["mean_log_sigma"].append(float(np.mean(np.log(sigma))))
                trace["leading_gram_eigenvalue"].append(float(np.linalg.eigvalsh(S)[-1]))
                trace["log_T_mean"].append(float(np.mean(np.log(T))))
                if sink is not None:
                    sink(it, snap)
                if store:
                    snaps.append(snap)
                    recorded.append(it)
            if progress is not None:
                progress(it)
    finally:
        if pool is not None:
            pool.shutdown()

    seconds = time.perf_counter() - t0
    if store and snaps:
        draws = PosteriorDraws.from_snapshots(snaps, recorded, meta)
    else:
        draws = PosteriorDraws.empty(I, J, m, meta)
    labels = []
    lo = 0
    for hi in ACCEPT_BINS:
        labels.append(f"{lo + 1}+" if np.isinf(hi) else (f"{hi}" if lo + 1 == hi else f"{lo + 1}-{hi}"))
        lo = int(hi) if np.isfinite(hi) else lo
    by_count = {
        lab: {"trials": int(t), "accepted": int(h),
              "rate": (float(h / t) if t else None)}
        for lab, t, h in zip(labels, acc_trials, acc_hits)
    }
    total_trials = int(acc_trials.sum())
    rate = float(acc_hits.sum() / total_trials) if total_trials else 1.0
    diag = ChainDiagnostics(rate, by_count,
                            {k: _summaries(v) for k, v in trace.items()}, seconds)
    draws.meta["acceptance_trials"] = acc_trials.tolist()
    draws.meta["acceptance_hits"] = acc_hits.tolist()
    draws.meta["acceptance_bins"] = [float(b) for b in ACCEPT_BINS]
    return draws, diag


def acceptance_rate_above(diag_or_meta, min_count):
    """Pooled MH acceptance over cells with ``n_ij >= min_count``."""
    meta = diag_or_meta.meta if isinstance(diag_or_meta, PosteriorDraws) else diag_or_meta
    bins = np.asarray(meta["acceptance_bins"], dtype=float)
    lower = np.concatenate([[1.0], bins[:-1] + 1])
    keep = lower >= min_count
    t = np.asarray(meta["acceptance_trials"])[keep].sum()
    h = np.asarray(meta["acceptance_hits"])[keep].sum()
    return float(h / t) if t else float("nan")


# ---------------------------------------------------------------------------
# Laplace approximation diagnostic


def _tv_log_parts(k):
    """log of x^{2k} e^{-2k(x-1)} sqrt(k/pi), the tilted target, as a callable."""
    c = 0.5 * math.log(k / math.pi)

    def log_target(x):
        return c + 2 * k * math.log(x) - 2 * k * (x - 1.0)

    def log_normal(x):
        return c - k * (x - 1.0) ** 2

    return log_target, log_normal


def tv_bound(k):
    """Upper bound on the total variation between the Laplace proposal and
    the ``n_ij = k`` conditional, as the larger of the two one-sided
    integrals around the mode (the bound is free of mu and s2)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    log_target, log_normal = _tv_log_parts(k)
    sd = 1.0 / math.sqrt(2 * k)

    def right(x):
        return math.exp(log_target(x)) - math.exp(log_normal(x))

    def left(x):
        g = math.exp(log_target(x)) if x > 0 else 0.0
        return math.exp(log_normal(x)) - g

    opts = {"limit": 400, "epsabs": 1e-13, "epsrel": 1e-11}
    r1, _ = integrate.quad(right, 1.0, 1.0 + 12 * sd, **opts)
    r2, _ = integrate.quad(right, 1.0 + 12 * sd, np.inf, **opts)
    l1, _ = integrate.quad(left, 0.0, 1.0, points=[max(1.0 - 12 * sd, 0.0)], **opts)
    l2, _ = integrate.quad(lambda x: math.exp(log_normal(x)), -np.inf, 0.0, **opts)
    return float(min(max(r1 + r2, l1 + l2), 1.0))
