"""Consensus ordination of posterior Gram draws.

All draws are projected onto one shared space built from a compromise
matrix, so axis signs and order cannot switch between draws.  Credible
regions are KDE superlevel sets drawn around each sample's point cloud.
"""
from dataclasses import dataclass, field
import warnings

import contourpy
import numpy as np


def _sym(A, name):
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {A.shape}")
    return A


def rv_coefficient(A, B):
    """Matrix correlation ``tr(AB) / sqrt(tr(AA) tr(BB))`` of symmetric matrices."""
    A, B = _sym(A, "A"), _sym(B, "B")
    if A.shape != B.shape:
        raise ValueError(f"shape mismatch: {A.shape} vs {B.shape}")
    na, nb = np.sum(A * A), np.sum(B * B)
    if na == 0 or nb == 0:
        raise ValueError("RV coefficient is undefined for a zero matrix")
    return float(np.clip(np.sum(A * B) / np.sqrt(na * nb), -1.0, 1.0))


def rv_matrix(S_list):
    """K x K matrix of pairwise RV coefficients."""
    S = np.asarray(S_list, dtype=float)
    flat = S.reshape(S.shape[0], -1)
    G = flat @ flat.T
    norms = np.sqrt(np.diag(G))
    if np.any(norms == 0):
        raise ValueError("RV coefficient is undefined for a zero matrix")
    return np.clip(G / np.outer(norms, norms), -1.0, 1.0)


def statis_weights(S_list):
    """Perron eigenvector of the RV similarity matrix, scaled to sum to one."""
    R = rv_matrix(S_list)
    if R.shape[0] == 1:
        return np.ones(1)
    _, vec = np.linalg.eigh(R)
    w = np.abs(vec[:, -1])
    return w / w.sum()


def compromise(S_list, mode="mean"):
    """Summary Gram matrix of K draws; ``mode`` is ``"mean"`` or ``"rv_weighted"``."""
    S = np.asarray(S_list, dtype=float)
    if S.ndim == 2:
        S = S[None]
    if S.ndim != 3 or S.shape[1] != S.shape[2] or S.shape[0] < 1:
        raise ValueError(f"expected a (K, J, J) stack, got shape {S.shape}")
    if mode == "mean":
        return S.mean(axis=0)
    if mode == "rv_weighted":
        return np.tensordot(statis_weights(S), S, axes=1)
    raise ValueError(f"unknown compromise mode {mode!r}")


@dataclass
class ConsensusSpace:
    """Leading eigen-axes of a compromise matrix.

    ``axes[:, r]`` is ``v_r / sqrt(lambda_r)`` so that ``S @ axes`` gives
    coordinates whose outer product is the best rank-d approximation of S.
    """

    axes: np.ndarray
    eigenvalues: np.ndarray
    variance_ratios: np.ndarray
    spectrum: np.ndarray = field(repr=False)

    @property
    def d(self):
        return self.axes.shape[1]

    @property
    def n_samples(self):
        return self.axes.shape[0]


def consensus_axes(S0, d=3):
    S0 = _sym(S0, "S0")
    J = S0.shape[0]
    if not 1 <= d <= J:
        raise ValueError(f"d must be in 1..{J}, got {d}")
    lam, vec = np.linalg.eigh(0.5 * (S0 + S0.T))
    order = np.argsort(lam)[::-1]
    lam, vec = lam[order], vec[:, order]
    trace = float(np.trace(S0))
    tol = max(abs(lam[0]), 1.0) * J * np.finfo(float).eps
    n_pos = int(np.sum(lam > tol))
    if n_pos == 0:
        raise ValueError("compromise matrix has no positive eigenvalue")
    if n_pos < d:
        warnings.warn(f"only {n_pos} positive eigenvalue(s); reducing d from {d}",
                      RuntimeWarning, stacklevel=2)
        d = n_pos
    v = vec[:, :d].copy()
    # deterministic sign: largest-magnitude coordinate positive
    lead = np.argmax(np.abs(v), axis=0)
    v *= np.sign(v[lead, np.arange(d)])
    axes = v / np.sqrt(lam[:d])
    return ConsensusSpace(axes, lam[:d].copy(), lam[:d] / trace, lam / trace)


def project_draw(S_k, space):
    S_k = np.asarray(S_k, dtype=float)
    if S_k.shape[-2:] != (space.n_samples, space.n_samples):
        raise ValueError(f"draw shape {S_k.shape} does not match a space over "
                         f"{space.n_samples} samples")
    return S_k @ space.axes


# ---------------------------------------------------------------------------
# credible regions

GRID_SIZE = 128
BANDWIDTH_FLOOR = 1e-6


def scott_bandwidth(points):
    points = np.asarray(points, dtype=float)
    K = points.shape[0]
    sd = points.std(axis=0, ddof=1) if K > 1 else np.zeros(points.shape[1])
    return np.maximum(sd * K ** (-1.0 / (points.shape[1] + 4)), BANDWIDTH_FLOOR)


def _kde(points, h, x, y):
    """Product-Gaussian KDE evaluated on the outer grid ``x`` by ``y``."""
    kx = np.exp(-0.5 * ((x[:, None] - points[None, :, 0]) / h[0]) ** 2)
    ky = np.exp(-0.5 * ((y[:, None] - points[None, :, 1]) / h[1]) ** 2)
    norm = 2.0 * np.pi * h[0] * h[1] * points.shape[0]
    return (ky @ kx.T) / norm  # rows index y


def _kde_at(points, h, where):
    z = (where[:, None, :] - points[None, :, :]) / h
    return np.exp(-0.5 * np.sum(z * z, axis=2)).sum(axis=1) / (
        2.0 * np.pi * h[0] * h[1] * points.shape[0])


def points_in_polygons(points, polygons):
    """Even-odd membership of ``points`` in the union of closed polygons."""
    points = np.asarray(points, dtype=float)
    inside = np.zeros(points.shape[0], dtype=bool)
    px, py = points[:, 0][:, None], points[:, 1][:, None]
    for poly in polygons:
        x0, y0 = poly[:, 0], poly[:, 1]
        x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
        crosses = (y0 > py) != (y1 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
        inside ^= (np.sum(crosses & (px < xint), axis=1) % 2).astype(bool)
    return inside


def polygon_area(poly):
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def credible_region(points, level=0.95):
    """Closed polygons bounding a KDE superlevel set holding ``level`` of the points.

    Returns a list of (n_vertices, 2) arrays; usually a single polygon, more
    when the cloud is multimodal.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[1] != 2:
        raise ValueError(f"expected (K, 2) points, got shape {points.shape}")
    if points.shape[0] < 10:
        raise ValueError("credible_region needs at least 10 points")
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    h = scott_bandwidth(points)
    lo = points.min(axis=0) - 3.0 * h
    hi = points.max(axis=0) + 3.0 * h
    x = np.linspace(lo[0], hi[0], GRID_SIZE)
    y = np.linspace(lo[1], hi[1], GRID_SIZE)
    dens = _kde(points, h, x, y)
    # zero border so every contour closes inside the grid
    dx, dy = x[1] - x[0], y[1] - y[0]
    xp = np.concatenate([[x[0] - dx], x, [x[-1] + dx]])
    yp = np.concatenate([[y[0] - dy], y, [y[-1] + dy]])
    zp = np.zeros((GRID_SIZE + 2, GRID_SIZE + 2))
    zp[1:-1, 1:-1] = dens
    gen = contourpy.contour_generator(xp, yp, zp, line_type=contourpy.LineType.Separate)

    at_points = np.sort(_kde_at(points, h, points))
    K = points.shape[0]
    k = int(np.floor((1.0 - level) * K))
    threshold = at_points[min(k, K - 1)]
    floor = dens.max() * 1e-12
    while True:
        polys = [np.asarray(p) for p in gen.lines(threshold) if len(p) >= 3]
        if polys and points_in_polygons(points, polys).mean() >= level:
            # density bumps that enclose no draw add nothing to coverage
            kept = [p for p in polys if points_in_polygons(points, [p]).any()]
            return kept or polys
        if threshold <= floor:
            return polys
        threshold *= 0.9


@dataclass
class ProjectionCloud:
    """Per-draw coordinates of every sample in a consensus space.

    ``points`` has shape (K, J, d); ``points[:, j]`` is sample j's cloud.
    """

    points: np.ndarray
    center: np.ndarray
    _regions: dict = field(default_factory=dict, repr=False)

    @property
    def n_draws(self):
        return self.points.shape[0]

    def regions(self, level=0.95, pair=(0, 1)):
        """Credible-region polygons for every sample on one pair of axes."""
        key = (float(level), tuple(pair))
        if key not in self._regions:
            a, b = pair
            self._regions[key] = [credible_region(self.points[:, j][:, [a, b]], level)
                                  for j in range(self.points.shape[1])]
        return self._regions[key]


def project_draws(S_draws, space):
    """Project every Gram draw onto ``space``; returns a ProjectionCloud."""
    S = np.asarray(S_draws, dtype=float)
    if S.ndim == 2:
        S = S[None]
    pts = project_draw(S, space)
    return ProjectionCloud(pts, pts.mean(axis=0))


def ordinate(S_draws, d=3, mode="mean"):
    """Compromise, consensus axes and projected cloud in one call."""
    S0 = compromise(S_draws, mode)
    space = consensus_axes(S0, d)
    return S0, space, project_draws(S_draws, space)
