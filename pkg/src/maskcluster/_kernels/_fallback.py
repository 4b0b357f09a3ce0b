"""Pure numpy / Python implementations of the hot kernels.

Every function here has a twin with the same signature in ``_ext.pyx``.
"""
from collections import deque

import numpy as np


def sinkhorn_scale(K, r, c, tol, max_iter):
    """Alternate row/column scaling of a positive kernel ``K``.

    Returns ``(u, v, iterations, row_error)`` such that
    ``diag(u) @ K @ diag(v)`` has column sums ``c`` exactly and row sums
    within ``row_error`` of ``r``.
    """
    K = np.ascontiguousarray(K, dtype=np.float64)
    u = np.ones(K.shape[0])
    v = np.ones(K.shape[1])
    Kv = K @ v
    err = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        u = r / Kv
        v = c / (K.T @ u)
        Kv = K @ v
        err = float(np.max(np.abs(u * Kv - r)))
        if err < tol or not np.isfinite(err):
            break
    return u, v, it, err


def hungarian_min(cost):
    """Minimum-cost assignment for an ``n x m`` matrix with ``n <= m``.

    Shortest augmenting path with row/column potentials. Returns the
    assigned column for every row.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n > m:
        raise ValueError("hungarian_min needs rows <= columns")
    a = cost.tolist()
    inf = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    p = [0] * (m + 1)
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = a[i0 - 1]
            ui0 = u[i0]
            delta = inf
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    out = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            out[p[j] - 1] = j - 1
    return out


def label_components(mask):
    """4-connected component labels, numbered from 1 in raster discovery order."""
    mask = np.asarray(mask, dtype=bool)
    H, W = mask.shape
    labels = np.zeros((H, W), dtype=np.int32)
    count = 0
    queue = deque()
    for y0 in range(H):
        for x0 in range(W):
            if not mask[y0, x0] or labels[y0, x0]:
                continue
            count += 1
            labels[y0, x0] = count
            queue.append((y0, x0))
            while queue:
                y, x = queue.popleft()
                for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    if 0 <= ny < H and 0 <= nx < W and mask[ny, nx] and not labels[ny, nx]:
                        labels[ny, nx] = count
                        queue.append((ny, nx))
    return labels, count


def conv3x3_same(x, kernel, bias):
    """Zero-padded 3x3 cross-correlation, ``(h, w, cin) -> (h, w, cout)``."""
    h, w, _ = x.shape
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    out = np.broadcast_to(bias, (h, w, kernel.shape[3])).copy()
    for dy in range(3):
        for dx in range(3):
            out += xp[dy:dy + h, dx:dx + w] @ kernel[dy, dx]
    return out


def conv3x3_same_backward(x, kernel, grad):
    """Gradients of ``conv3x3_same`` w.r.t. input, kernel and bias."""
    h, w, cin = x.shape
    cout = kernel.shape[3]
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    dxp = np.zeros_like(xp)
    dk = np.empty_like(kernel)
    g2 = grad.reshape(-1, cout)
    for dy in range(3):
        for dx in range(3):
            dk[dy, dx] = xp[dy:dy + h, dx:dx + w].reshape(-1, cin).T @ g2
            dxp[dy:dy + h, dx:dx + w] += grad @ kernel[dy, dx].T
    return dxp[1:-1, 1:-1], dk, grad.sum(axis=(0, 1))
