"""Balanced assignment of mask features to class centroids, plus k-means.

The transport plan ``Q`` is ``k x m`` (clusters by masks) with row sums
``1/k`` and column sums ``1/m``. It maximizes ``<Q, S> + eps * H(Q)`` and has
the closed form ``diag(u) exp(S / eps) diag(v)``; the scaling vectors are
found by alternating row/column renormalization, optionally refined by
Newton steps on the same scaling equations.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import InsufficientPoints, NonFinite, ShapeMismatch
from .numerics import normalize_rows, substream, STREAM_KMEANS

SINKHORN_TOL = 1e-6
SINKHORN_MAX_ITER = 1000


@dataclass
class AssignmentMatrix:
    Q: np.ndarray
    epsilon: float
    iterations_used: int
    marginal_error: float

    @property
    def k(self) -> int:
        return self.Q.shape[0]

    @property
    def m(self) -> int:
        return self.Q.shape[1]


@dataclass
class TargetMaskStack:
    targets: np.ndarray  # k x H x W bool
    coverage: np.ndarray  # H x W bool


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia_history: list = field(default_factory=list)

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1]


def class_mask_affinity(mask_features, class_features) -> np.ndarray:
    """Cosine affinity, ``k x m``: entry ``(j, i)`` compares class ``j`` with mask ``i``."""
    fm, _ = normalize_rows(np.atleast_2d(mask_features))
    fc, _ = normalize_rows(np.atleast_2d(class_features))
    return np.clip(fc @ fm.T, -1.0, 1.0)


def marginal_error(Q: np.ndarray) -> float:
    k, m = Q.shape
    return float(max(np.max(np.abs(Q.sum(axis=1) - 1.0 / k)), np.max(np.abs(Q.sum(axis=0) - 1.0 / m))))


def _sinkhorn_log(logK: np.ndarray, r: np.ndarray, c: np.ndarray, tol: float, max_iter: int):
    # log-domain scaling; used only when the plain kernel under/overflows
    log_r, log_c = np.log(r), np.log(c)
    f = np.zeros(logK.shape[0])
    g = np.zeros(logK.shape[1])
    it = 0
    for it in range(1, max_iter + 1):
        a = logK + g[None, :]
        amax = a.max(axis=1)
        f = log_r - (amax + np.log(np.exp(a - amax[:, None]).sum(axis=1)))
        b = logK + f[:, None]
        bmax = b.max(axis=0)
        g = log_c - (bmax + np.log(np.exp(b - bmax[None, :]).sum(axis=0)))
        rows = np.exp(logK + f[:, None] + g[None, :]).sum(axis=1)
        if np.max(np.abs(rows - r)) < tol:
            break
    return f, g, it


def _newton_polish(logK: np.ndarray, f: np.ndarray, g: np.ndarray, r: np.ndarray, c: np.ndarray,
                   max_steps: int = 30) -> tuple[np.ndarray, np.ndarray]:
    """Newton steps on the log-scalings ``f, g`` to drive the marginal residual to round-off.

    Alternating scaling converges sublinearly when the optimal plan is close
    to a permutation; a few Newton steps on the scaling equations finish
    the job. The ``(k+m)``-dimensional system is reduced to its ``k x k``
    Schur complement with ``df[0] = 0`` fixing the ``(f + t, g - t)`` gauge.
    """

    def residual(f, g):
        Q = np.exp(logK + f[:, None] + g[None, :])
        R, C = Q.sum(axis=1), Q.sum(axis=0)
        return Q, R, C, max(np.max(np.abs(R - r)), np.max(np.abs(C - c)))

    Q, R, C, err = residual(f, g)
    if len(f) == 1 or len(g) == 1:
        return f, g
    for _ in range(max_steps):
        if err < 1e-15:
            break
        Fr, Fc = R - r, C - c
        W = Q / C[None, :]
        A = np.diag(R) - W @ Q.T
        b = -Fr + W @ Fc
        df = np.zeros_like(f)
        try:
            df[1:] = np.linalg.solve(A[1:, 1:], b[1:])
        except np.linalg.LinAlgError:
            break
        dg = (-Fc - Q.T @ df) / C
        t = 1.0
        while t > 1e-8:
            Qn, Rn, Cn, en = residual(f + t * df, g + t * dg)
            if en < err and np.isfinite(en):
                break
            t *= 0.5
        else:
            break
        f, g, Q, R, C, err = f + t * df, g + t * dg, Qn, Rn, Cn, en
    return f, g


def sinkhorn_solve(S, epsilon: float, tol: float = SINKHORN_TOL, max_iter: int = SINKHORN_MAX_ITER,
                   polish: bool = True) -> AssignmentMatrix:
    """Entropy-regularized balanced transport plan for the affinity ``S``.

    Alternating row/column scaling of ``exp(S / epsilon)`` (shifted by its
    max) until the marginal error drops below ``tol``; with ``polish`` the
    scalings are then refined by Newton steps, which matters when the plan
    is nearly a permutation (small ``epsilon``).
    """
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or min(S.shape) < 1:
        raise ShapeMismatch(f"affinity must be a non-empty k x m matrix, got {S.shape}")
    if not epsilon > 0 or not tol > 0 or max_iter < 1:
        raise ValueError("need epsilon > 0, tol > 0, max_iter >= 1")
    if not np.all(np.isfinite(S)):
        raise NonFinite("affinity contains non-finite entries")
    k, m = S.shape
    r = np.full(k, 1.0 / k)
    c = np.full(m, 1.0 / m)
    logK = S / epsilon
    logK = logK - logK.max()
    u, v, it, _ = _kernels.sinkhorn_scale(np.exp(logK), r, c, tol, max_iter)
    if np.all(np.isfinite(u)) and np.all(np.isfinite(v)) and np.all(u > 0) and np.all(v > 0):
        f, g = np.log(u), np.log(v)
    else:
        f, g, it = _sinkhorn_log(logK, r, c, tol, max_iter)
    if polish:
        f, g = _newton_polish(logK, f, g, r, c)
    Q = np.exp(logK + f[:, None] + g[None, :])
    if not np.all(np.isfinite(Q)):
        raise NonFinite("transport plan became non-finite")
    return AssignmentMatrix(Q=Q, epsilon=float(epsilon), iterations_used=int(it), marginal_error=marginal_error(Q))


def entropy(Q) -> float:
    Q = np.asarray(Q, dtype=np.float64)
    pos = Q[Q > 0]
    return float(-np.sum(pos * np.log(pos)))


def clustering_objective(Q, S, epsilon: float) -> float:
    """``sum(Q * S) + epsilon * H(Q)`` with ``0 log 0 = 0``."""
    Q = np.asarray(getattr(Q, "Q", Q), dtype=np.float64)
    S = np.asarray(S, dtype=np.float64)
    if Q.shape != S.shape:
        raise ShapeMismatch(f"Q {Q.shape} and S {S.shape} differ")
    value = float(np.sum(Q * S))
    if epsilon:
        value += epsilon * entropy(Q)
    return value


def hard_assign(Q) -> np.ndarray:
    """Column-wise argmax; ties go to the lowest cluster index."""
    Q = np.asarray(getattr(Q, "Q", Q))
    return np.argmax(Q, axis=0)


def union_masks(masks, assignment, k: int) -> TargetMaskStack:
    masks = np.asarray(masks, dtype=bool)
    assignment = np.asarray(assignment, dtype=np.int64)
    if masks.ndim != 3 or masks.shape[0] != assignment.shape[0]:
        raise ShapeMismatch(f"{assignment.shape[0]} assignments for masks of shape {masks.shape}")
    targets = np.zeros((k, *masks.shape[1:]), dtype=bool)
    for n, j in enumerate(assignment):
        targets[j] |= masks[n]
    coverage = masks.any(axis=0) if len(masks) else np.zeros(masks.shape[1:], dtype=bool)
    return TargetMaskStack(targets=targets, coverage=coverage)


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # direct differences: exact zero for coincident points
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _kmeanspp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    chosen = [int(rng.integers(n))]
    closest = _sq_dists(points, points[chosen])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            # all remaining points coincide with a centroid
            free = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(free))
        chosen.append(idx)
        closest = np.minimum(closest, _sq_dists(points, points[idx : idx + 1])[:, 0])
    return points[chosen].copy()


def kmeans(points, k: int, iters: int = 100, seed: int = 0) -> KMeansResult:
    """Lloyd iterations from k-means++ seeds.

    Empty clusters are re-seeded at the point farthest from its centroid.
    ``inertia_history`` holds the inertia after every assignment step and is
    non-increasing.
    """
    X = np.asarray(points, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n = len(X)
    if k < 1 or n < k:
        raise InsufficientPoints(f"need n >= k >= 1, got n={n}, k={k}")
    rng = substream(seed, STREAM_KMEANS)
    centroids = _kmeanspp(X, k, rng)
    labels = None
    history = []
    for _ in range(max(1, iters)):
        d = _sq_dists(X, centroids)
        new_labels = np.argmin(d, axis=1)
        history.append(float(d[np.arange(n), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, X)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        empty = np.flatnonzero(~nonempty)
        if len(empty):
            dist = _sq_dists(X, centroids)[np.arange(n), labels]
            order = np.argsort(-dist, kind="stable")
            for j, idx in zip(empty, order):
                centroids[j] = X[idx]
    return KMeansResult(centroids=centroids, labels=labels, inertia_history=history)


def connected_components(mask) -> list[np.ndarray]:
    """Split a binary mask into its 4-connected components (raster order)."""
    labels, count = _kernels.label_components(np.asarray(mask, dtype=np.uint8))
    return [labels == i for i in range(1, count + 1)]


def feature_map_to_masks(features, k: int, seed: int = 0, split_components: bool = False,
                         out_shape: tuple[int, int] | None = None, iters: int = 100) -> np.ndarray:
    """Cluster pixel features with k-means and return one mask per cluster.

    Masks are nearest-neighbor upsampled to ``out_shape`` (default: the
    feature resolution) and optionally split into connected components.
    """
    f = np.asarray(features, dtype=np.float64)
    h, w, d = f.shape
    H, W = out_shape or (h, w)
    if H % h or W % w:
        raise ShapeMismatch(f"output {H}x{W} is not a multiple of features {h}x{w}")
    res = kmeans(f.reshape(-1, d), k, iters=iters, seed=seed)
    labels = res.labels.reshape(h, w)
    masks = []
    for j in range(k):
        m = labels == j
        if not m.any():
            continue
        m = np.repeat(np.repeat(m, H // h, axis=0), W // w, axis=1)
        masks.extend(connected_components(m) if split_components else [m])
    return np.stack(masks).astype(bool)
