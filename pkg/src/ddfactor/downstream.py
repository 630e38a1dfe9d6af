"""Posterior summaries, dissimilarities and medoid clustering of samples."""
from dataclasses import dataclass

import numpy as np
from sklearn.metrics import silhouette_score

from ._validation import check_count
from .model import CountTable


def posterior_mean_P(draws):
    """Average of the P snapshots, renormalized column by column."""
    P = np.asarray(draws.P if hasattr(draws, "P") else draws, dtype=float)
    if P.ndim == 2:
        P = P[None]
    if P.shape[0] < 1:
        raise ValueError("posterior_mean_P needs at least one draw")
    mean = P.mean(axis=0)
    return mean / mean.sum(axis=0, keepdims=True)


def empirical_P(counts):
    n = counts.counts if isinstance(counts, CountTable) else np.asarray(counts)
    n = np.asarray(n, dtype=float)
    tot = n.sum(axis=0)
    bad = np.flatnonzero(tot <= 0)
    if bad.size:
        raise ValueError(f"sample column(s) {bad.tolist()} have zero total count")
    return n / tot


def total_variation(p, q):
    p, q = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    return 0.5 * np.abs(p - q).sum(axis=0)


def bray_curtis(p, q):
    p, q = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    return 1.0 - np.minimum(p, q).sum(axis=0)


def bray_curtis_matrix(P, chunk=64):
    """J x J Bray-Curtis dissimilarities between the columns of ``P``."""
    P = np.asarray(P, dtype=float)
    J = P.shape[1]
    D = np.empty((J, J))
    for s in range(0, J, chunk):
        blk = P[:, s:s + chunk]
        D[s:s + chunk] = 1.0 - np.minimum(blk.T[:, :, None], P[None, :, :]).sum(axis=1)
    D = 0.5 * (D + D.T)
    np.fill_diagonal(D, 0.0)
    return np.clip(D, 0.0, 1.0)


# ---------------------------------------------------------------------------
# PAM


@dataclass
class PAMResult:
    labels: np.ndarray
    medoids: np.ndarray
    cost: float
    build_cost: float
    n_swaps: int


def _check_dist(dist):
    D = np.asarray(dist, dtype=float)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise ValueError(f"distance matrix must be square, got {D.shape}")
    if not np.allclose(D, D.T, rtol=0, atol=1e-12):
        raise ValueError("distance matrix must be symmetric")
    if np.any(D < 0) or np.any(np.diag(D) != 0):
        raise ValueError("distance matrix must be nonnegative with zero diagonal")
    return D


def _build(D, k):
    medoids = [int(np.argmin(D.sum(axis=1)))]
    near = D[medoids[0]].copy()
    for _ in range(1, k):
        gain = np.maximum(near[None, :] - D, 0.0).sum(axis=1)
        gain[medoids] = -np.inf
        h = int(np.argmax(gain))
        medoids.append(h)
        near = np.minimum(near, D[h])
    return medoids


def pam_cluster(dist, k, max_swaps=10_000):
    """k-medoids by greedy BUILD then best-improvement SWAP.

    Fully deterministic: ties go to the lowest index.  Labels number the
    clusters by increasing medoid index.
    """
    D = _check_dist(dist)
    J = D.shape[0]
    k = check_count(k, "k")
    if k > J:
        raise ValueError(f"k={k} exceeds the number of points {J}")
    med = _build(D, k)
    build_cost = float(D[med].min(axis=0).sum())
    cost = build_cost
    n_swaps = 0
    tol = 1e-12 * max(1.0, cost)
    while n_swaps < max_swaps and k < J:
        Dm = D[med]
        order = np.argsort(Dm, axis=0, kind="stable")
        nearest = Dm[order[0], np.arange(J)]
        second = Dm[order[1], np.arange(J)] if k > 1 else np.full(J, np.inf)
        best = (cost - tol, None, None)
        is_med = np.zeros(J, dtype=bool)
        is_med[med] = True
        for slot in range(k):
            base = np.where(order[0] == slot, second, nearest)
            new = np.minimum(base[None, :], D).sum(axis=1)
            new[is_med] = np.inf
            h = int(np.argmin(new))
            if new[h] < best[0]:
                best = (float(new[h]), slot, h)
        if best[1] is None:
            break
        med[best[1]] = best[2]
        cost = best[0]
        n_swaps += 1
    med = np.sort(np.asarray(med))
    labels = np.argmin(D[med], axis=0)
    cost = float(D[med[labels], np.arange(J)].sum())
    return PAMResult(labels, med, cost, build_cost, n_swaps)


def choose_k(dist, k_max=10):
    """k in 2..min(k_max, J-1) with the largest mean silhouette width."""
    D = _check_dist(dist)
    J = D.shape[0]
    upper = min(k_max, J - 1)
    if upper < 2:
        raise ValueError("automatic k needs at least 3 samples")
    best_k, best_s = 2, -np.inf
    for k in range(2, upper + 1):
        labels = pam_cluster(D, k).labels
        if np.unique(labels).size < 2:
            continue
        s = silhouette_score(D, labels, metric="precomputed")
        if s > best_s + 1e-12:
            best_k, best_s = k, s
    return best_k


@dataclass
class CoclusterMatrix:
    probs: np.ndarray
    k: int
    n_draws: int


def cocluster(draws, k="auto"):
    """Posterior probability that each pair of samples shares a PAM cluster.

    ``k="auto"`` picks k by silhouette on the posterior-mean Bray-Curtis
    matrix and then uses it for every draw.
    """
    P = np.asarray(draws.P if hasattr(draws, "P") else draws, dtype=float)
    if P.ndim == 2:
        P = P[None]
    K, _, J = P.shape
    if K < 1:
        raise ValueError("cocluster needs at least one draw")
    if k == "auto":
        k = choose_k(bray_curtis_matrix(posterior_mean_P(P)))
    k = check_count(k, "k")
    together = np.zeros((J, J))
    for P_k in P:
        labels = pam_cluster(bray_curtis_matrix(P_k), k).labels
        together += labels[:, None] == labels[None, :]
    return CoclusterMatrix(together / K, k, K)
