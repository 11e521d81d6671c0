"""Discrepancies between point sets and their per-particle gradients.

Gradient fields follow one convention throughout: the value at source point
``i`` is ``N_src`` times the Euclidean partial derivative of the objective
with respect to that point.  This is the Wasserstein gradient of the
objective evaluated at the particle, so a forward-Euler particle update
``x_i -= h * eta * grad[i]`` integrates the gradient flow.  The Laplacian
regulariser is the one exception: it is a sum over vertices rather than a
mean, and its gradient is the per-vertex umbrella vector (see
:func:`laplacian_gradient`).
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import check_points, make_rng

__all__ = [
    "ObjectiveConfig",
    "Transport1D",
    "sample_projections",
    "wasserstein_1d",
    "rank_pairings",
    "sliced_wasserstein",
    "sliced_wasserstein_sq",
    "swd_gradient",
    "swd_frozen_objective",
    "nearest_neighbors",
    "chamfer",
    "chamfer_gradient",
    "chamfer_frozen_objective",
    "icp_objective",
    "icp_gradient",
    "icp_frozen_objective",
    "laplacian_energy",
    "laplacian_gradient",
    "laplacian_partial",
    "hybrid_gradient",
    "save_gradfield_csv",
    "default_workers",
]


def default_workers():
    """Worker count for KD-tree queries (``SWFLOW_THREADS``, default 1)."""
    try:
        return max(1, int(os.environ.get("SWFLOW_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class ObjectiveConfig:
    lambda_cham: float = 0.0
    lambda_sw: float = 1.0
    lambda_lap: float = 2.0
    n_projections: int = 4

    def __post_init__(self):
        for name in ("lambda_cham", "lambda_sw", "lambda_lap"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.n_projections < 1:
            raise ValueError("n_projections must be >= 1")


@dataclass(frozen=True)
class Transport1D:
    """Monotone coupling between two equal-size 1D samples.

    ``target_index[i]`` is the index in ``b`` paired with ``a[i]``.
    """

    a: np.ndarray
    b: np.ndarray
    source_order: np.ndarray
    target_order: np.ndarray
    target_index: np.ndarray

    def mapped(self):
        """Image of each source value under the transport map."""
        return self.b[self.target_index]


def sample_projections(n_projections, rng=None):
    """``n_projections`` directions drawn uniformly from the unit sphere."""
    if n_projections < 1:
        raise ValueError("n_projections must be >= 1")
    rng = make_rng(0 if rng is None else rng)
    theta = rng.standard_normal((n_projections, 3))
    norms = np.linalg.norm(theta, axis=1)
    while np.any(norms == 0.0):
        bad = norms == 0.0
        theta[bad] = rng.standard_normal((int(bad.sum()), 3))
        norms = np.linalg.norm(theta, axis=1)
    return theta / norms[:, None]


def wasserstein_1d(a, b):
    """Squared 2-Wasserstein distance between two uniform 1D samples.

    Returns ``(w2_squared, Transport1D)``.  Values are paired by sorted
    rank; equal values keep their original index order.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if len(a) != len(b):
        raise ValueError(f"unequal sample sizes: {len(a)} vs {len(b)}")
    if len(a) == 0:
        raise ValueError("empty samples")
    sa = np.argsort(a, kind="stable")
    sb = np.argsort(b, kind="stable")
    tgt = np.empty_like(sa)
    tgt[sa] = sb
    d2 = float(np.mean((a[sa] - b[sb]) ** 2))
    return d2, Transport1D(a, b, sa, sb, tgt)


def rank_pairings(src, tgt, proj):
    """Per-projection rank pairings, shape ``(L, N)``: ``src[i] -> tgt[p[l, i]]``."""
    xs = src @ proj.T
    ys = tgt @ proj.T
    sa = np.argsort(xs, axis=0, kind="stable")
    sb = np.argsort(ys, axis=0, kind="stable")
    pair = np.empty_like(sa)
    cols = np.arange(proj.shape[0])[None, :]
    pair[sa, cols] = sb
    return pair.T


def _check_pair(src, tgt):
    src = check_points(src, "src")
    tgt = check_points(tgt, "tgt")
    if len(src) != len(tgt):
        raise ValueError(f"unequal point counts: {len(src)} vs {len(tgt)}")
    return src, tgt


def _projected_residuals(src, tgt, proj):
    # (L, N) array of theta_l . x_i - T_l(theta_l . x_i); rows are contiguous
    proj = np.atleast_2d(np.asarray(proj, dtype=np.float64))
    xs = proj @ src.T
    ys = proj @ tgt.T
    sa = np.argsort(xs, axis=1, kind="stable")
    sb = np.argsort(ys, axis=1, kind="stable")
    resid = np.empty_like(xs)
    rows = np.arange(proj.shape[0])[:, None]
    resid[rows, sa] = np.take_along_axis(xs, sa, 1) - np.take_along_axis(ys, sb, 1)
    return resid, proj


def sliced_wasserstein_sq(src, tgt, proj):
    """Monte Carlo estimate of ``SW_2^2`` over the given directions."""
    src, tgt = _check_pair(src, tgt)
    proj = np.atleast_2d(np.asarray(proj, dtype=np.float64))
    # value only needs sorted projections, not the pairing; rows are contiguous
    xs = np.sort(proj @ src.T, axis=1)
    ys = np.sort(proj @ tgt.T, axis=1)
    return float(np.mean(np.mean((xs - ys) ** 2, axis=1)))


def sliced_wasserstein(src, tgt, proj):
    """Monte Carlo sliced 2-Wasserstein distance."""
    return float(np.sqrt(sliced_wasserstein_sq(src, tgt, proj)))


def swd_gradient(src, tgt, proj):
    """Wasserstein gradient of ``0.5 * SW_2^2`` at every source point."""
    src, tgt = _check_pair(src, tgt)
    resid, proj = _projected_residuals(src, tgt, proj)
    return resid.T @ proj / proj.shape[0]


def swd_frozen_objective(src, tgt, proj, pairings):
    """``0.5 * SW_2^2`` with the rank pairings held fixed (smooth in ``src``)."""
    proj = np.atleast_2d(proj)
    total = 0.0
    for l in range(proj.shape[0]):
        d = src @ proj[l] - tgt[pairings[l]] @ proj[l]
        total += np.mean(d**2)
    return 0.5 * total / proj.shape[0]


# ---------------------------------------------------------------------------
# nearest-neighbour objectives

def nearest_neighbors(query, ref, workers=None):
    """Index of, and squared distance to, the nearest ``ref`` point of each query.

    Exact distance ties resolve to the lowest reference index.
    """
    query = np.asarray(query, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    workers = default_workers() if workers is None else workers
    tree = cKDTree(ref)
    k = min(2, len(ref))
    d, idx = tree.query(query, k=k, workers=workers)
    if k == 1:
        d = d[:, None]
        idx = idx[:, None]
    best = idx[:, 0].copy()
    if k == 2:
        tied = np.flatnonzero(d[:, 0] == d[:, 1])
        for q in tied:
            cand = np.asarray(tree.query_ball_point(query[q], d[q, 0] * (1 + 1e-12) + 1e-300))
            dist = np.sum((ref[cand] - query[q]) ** 2, axis=1)
            best[q] = cand[dist == dist.min()].min()
    dist2 = np.sum((query - ref[best]) ** 2, axis=1)
    return best, dist2


def icp_objective(src, tgt, workers=None):
    """Half the mean squared distance from each source point to its nearest target."""
    src = check_points(src, "src")
    tgt = check_points(tgt, "tgt")
    _, d2 = nearest_neighbors(src, tgt, workers)
    return 0.5 * float(d2.mean())


def icp_gradient(src, tgt, workers=None):
    src = check_points(src, "src")
    tgt = check_points(tgt, "tgt")
    nn, _ = nearest_neighbors(src, tgt, workers)
    return src - tgt[nn]


def icp_frozen_objective(src, tgt, nn):
    return 0.5 * float(np.mean(np.sum((src - tgt[nn]) ** 2, axis=1)))


def chamfer(src, tgt, workers=None):
    """Symmetric Chamfer discrepancy: half forward plus half reverse mean squared NN distance."""
    src = check_points(src, "src")
    tgt = check_points(tgt, "tgt")
    _, fwd = nearest_neighbors(src, tgt, workers)
    _, rev = nearest_neighbors(tgt, src, workers)
    return 0.5 * float(fwd.mean()) + 0.5 * float(rev.mean())


def chamfer_gradient(src, tgt, workers=None):
    """Per-particle gradient of :func:`chamfer` with respect to the source points.

    ``grad[i] = (x_i - T(x_i)) + (N_src / N_tgt) * sum_{j -> i} (x_i - y_j)``,
    where ``T`` is the forward nearest-target map and the sum runs over
    target points ``y_j`` whose nearest source point is ``x_i``.
    """
    src = check_points(src, "src")
    tgt = check_points(tgt, "tgt")
    fwd, _ = nearest_neighbors(src, tgt, workers)
    rev, _ = nearest_neighbors(tgt, src, workers)
    grad = src - tgt[fwd]
    back = np.zeros_like(src)
    # unbuffered scatter-add runs in target index order, so the sum is reproducible
    np.add.at(back, rev, src[rev] - tgt)
    grad += back * (len(src) / len(tgt))
    return grad


def chamfer_frozen_objective(src, tgt, fwd, rev):
    f = np.sum((src - tgt[fwd]) ** 2, axis=1).mean()
    r = np.sum((tgt - src[rev]) ** 2, axis=1).mean()
    return 0.5 * float(f) + 0.5 * float(r)


# ---------------------------------------------------------------------------
# mesh Laplacian

def _flatten_adj(adj, n):
    if len(adj) != n:
        raise ValueError(f"adjacency has {len(adj)} entries for {n} vertices")
    counts = np.array([len(a) for a in adj])
    if np.any(counts == 0):
        raise ValueError(f"isolated vertex {int(np.flatnonzero(counts == 0)[0])} has no neighbours")
    rows = np.repeat(np.arange(n), counts)
    cols = np.fromiter((j for a in adj for j in a), dtype=np.int64, count=int(counts.sum()))
    return rows, cols, counts


def laplacian_energy(rest, disp, adj):
    """``sum_i 1/|A(i)| sum_{j in A(i)} 0.5 * |x_i - x_j|^2`` with ``x = rest + disp``."""
    rest = np.asarray(rest, dtype=np.float64)
    disp = np.asarray(disp, dtype=np.float64)
    if rest.shape != disp.shape:
        raise ValueError("rest and disp shapes differ")
    rows, cols, counts = _flatten_adj(adj, len(rest))
    x = rest + disp
    d = x[rows] - x[cols]
    per_edge = 0.5 * np.sum(d * d, axis=1) / counts[rows]
    return float(per_edge.sum())


def laplacian_gradient(rest, disp, adj):
    """Umbrella vector ``1/|A(i)| sum_{j in A(i)} (x_i - x_j)`` at every vertex.

    This is the regulariser's gradient as used by the registration flow.
    The exact partial derivative of :func:`laplacian_energy` adds the mirrored
    term ``sum_{j : i in A(j)} (x_i - x_j) / |A(j)|``; on meshes with uniform
    valence the two terms coincide, so the partial is exactly twice this
    field (see :func:`laplacian_partial`).
    """
    rest = np.asarray(rest, dtype=np.float64)
    disp = np.asarray(disp, dtype=np.float64)
    rows, cols, counts = _flatten_adj(adj, len(rest))
    x = rest + disp
    out = np.zeros_like(x)
    np.add.at(out, rows, x[rows] - x[cols])
    return out / counts[:, None]


def laplacian_partial(rest, disp, adj):
    """Exact Euclidean gradient of :func:`laplacian_energy` with respect to ``disp``."""
    rest = np.asarray(rest, dtype=np.float64)
    disp = np.asarray(disp, dtype=np.float64)
    rows, cols, counts = _flatten_adj(adj, len(rest))
    x = rest + disp
    w = (1.0 / counts[rows])[:, None]
    d = x[rows] - x[cols]
    out = np.zeros_like(x)
    np.add.at(out, rows, w * d)
    np.add.at(out, cols, -w * d)
    return out


def hybrid_gradient(src, rest, tgt, adj, proj, cfg, workers=None):
    """Weighted sum of the Chamfer, sliced-Wasserstein and Laplacian gradients.

    Terms whose weight is zero are skipped entirely, so ``proj`` may be
    ``None`` when ``cfg.lambda_sw == 0``.
    """
    src = check_points(src, "src")
    grad = np.zeros_like(src)
    if cfg.lambda_cham:
        grad += cfg.lambda_cham * chamfer_gradient(src, tgt, workers)
    if cfg.lambda_sw:
        grad += cfg.lambda_sw * swd_gradient(src, tgt, proj)
    if cfg.lambda_lap:
        grad += cfg.lambda_lap * laplacian_gradient(rest, src - rest, adj)
    return grad


def save_gradfield_csv(grad, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "gx", "gy", "gz"])
        for i, g in enumerate(np.asarray(grad)):
            w.writerow([i] + [repr(float(c)) for c in g])
