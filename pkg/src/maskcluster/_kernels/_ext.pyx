# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in ``_fallback.py`` (same signatures)."""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, INFINITY, isfinite

cnp.import_array()


def sinkhorn_scale(K, r, c, double tol, int max_iter):
    cdef double[:, ::1] k = np.ascontiguousarray(K, dtype=np.float64)
    cdef double[::1] rr = np.ascontiguousarray(r, dtype=np.float64)
    cdef double[::1] cc = np.ascontiguousarray(c, dtype=np.float64)
    cdef Py_ssize_t n = k.shape[0], m = k.shape[1], i, j
    u_arr = np.ones(n)
    v_arr = np.ones(m)
    kv_arr = np.empty(n)
    ktu_arr = np.empty(m)
    cdef double[::1] u = u_arr, v = v_arr, kv = kv_arr, ktu = ktu_arr
    cdef double *row
    cdef double *vp = &v[0]
    cdef double *tp = &ktu[0]
    cdef double s, ui, err = INFINITY, dev
    cdef int it = 0

    for i in range(n):
        row = &k[i, 0]
        s = 0.0
        for j in range(m):
            s += row[j]
        kv[i] = s
    while it < max_iter:
        it += 1
        for j in range(m):
            tp[j] = 0.0
        for i in range(n):
            ui = rr[i] / kv[i]
            u[i] = ui
            row = &k[i, 0]
            for j in range(m):
                tp[j] += row[j] * ui
        for j in range(m):
            vp[j] = cc[j] / tp[j]
        err = 0.0
        for i in range(n):
            row = &k[i, 0]
            s = 0.0
            for j in range(m):
                s += row[j] * vp[j]
            kv[i] = s
            dev = fabs(u[i] * s - rr[i])
            if dev > err or not isfinite(dev):
                err = dev
        if err < tol or not isfinite(err):
            break
    return u_arr, v_arr, it, float(err)


def hungarian_min(cost):
    cdef double[:, ::1] a = np.ascontiguousarray(cost, dtype=np.float64)
    cdef Py_ssize_t n = a.shape[0], m = a.shape[1]
    if n > m:
        raise ValueError("hungarian_min needs rows <= columns")
    cdef double[::1] u = np.zeros(n + 1), v = np.zeros(m + 1), minv = np.empty(m + 1)
    cdef Py_ssize_t[::1] p = np.zeros(m + 1, dtype=np.intp), way = np.zeros(m + 1, dtype=np.intp)
    cdef unsigned char[::1] used = np.empty(m + 1, dtype=np.uint8)
    cdef Py_ssize_t i, j, i0, j0, j1
    cdef double delta, cur
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        for j in range(m + 1):
            minv[j] = INFINITY
            used[j] = 0
        while True:
            used[j0] = 1
            i0 = p[j0]
            delta = INFINITY
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = a[i0 - 1, j - 1] - u[i0] - v[j]
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
    cdef cnp.int64_t[::1] o = out
    for j in range(1, m + 1):
        if p[j]:
            o[p[j] - 1] = j - 1
    return out


def label_components(mask):
    cdef unsigned char[:, ::1] mk = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef Py_ssize_t H = mk.shape[0], W = mk.shape[1]
    labels_arr = np.zeros((H, W), dtype=np.int32)
    cdef int[:, ::1] lab = labels_arr
    cdef Py_ssize_t[::1] stack = np.empty(H * W + 1, dtype=np.intp)
    cdef Py_ssize_t top, y0, x0, y, x, q
    cdef int count = 0
    for y0 in range(H):
        for x0 in range(W):
            if mk[y0, x0] == 0 or lab[y0, x0] != 0:
                continue
            count += 1
            lab[y0, x0] = count
            top = 0
            stack[top] = y0 * W + x0
            top += 1
            while top > 0:
                top -= 1
                q = stack[top]
                y = q // W
                x = q - y * W
                if y > 0 and mk[y - 1, x] and lab[y - 1, x] == 0:
                    lab[y - 1, x] = count
                    stack[top] = q - W
                    top += 1
                if y + 1 < H and mk[y + 1, x] and lab[y + 1, x] == 0:
                    lab[y + 1, x] = count
                    stack[top] = q + W
                    top += 1
                if x > 0 and mk[y, x - 1] and lab[y, x - 1] == 0:
                    lab[y, x - 1] = count
                    stack[top] = q - 1
                    top += 1
                if x + 1 < W and mk[y, x + 1] and lab[y, x + 1] == 0:
                    lab[y, x + 1] = count
                    stack[top] = q + 1
                    top += 1
    return labels_arr, int(count)


def conv3x3_same(x, kernel, bias):
    cdef double[:, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, :, :, ::1] kv = np.ascontiguousarray(kernel, dtype=np.float64)
    cdef double[::1] bv = np.ascontiguousarray(bias, dtype=np.float64)
    cdef Py_ssize_t h = xv.shape[0], w = xv.shape[1], cin = xv.shape[2], cout = kv.shape[3]
    out_arr = np.empty((h, w, cout))
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t y, x_, dy, dx, yy, xx, i, o
    cdef double xin
    cdef double *op
    cdef double *kp
    for y in range(h):
        for x_ in range(w):
            op = &out[y, x_, 0]
            for o in range(cout):
                op[o] = bv[o]
            for dy in range(3):
                yy = y + dy - 1
                if yy < 0 or yy >= h:
                    continue
                for dx in range(3):
                    xx = x_ + dx - 1
                    if xx < 0 or xx >= w:
                        continue
                    for i in range(cin):
                        xin = xv[yy, xx, i]
                        kp = &kv[dy, dx, i, 0]
                        for o in range(cout):
                            op[o] += xin * kp[o]
    return out_arr


def conv3x3_same_backward(x, kernel, grad):
    cdef double[:, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, :, :, ::1] kv = np.ascontiguousarray(kernel, dtype=np.float64)
    cdef double[:, :, ::1] g = np.ascontiguousarray(grad, dtype=np.float64)
    cdef Py_ssize_t h = xv.shape[0], w = xv.shape[1], cin = xv.shape[2], cout = kv.shape[3]
    dx_arr = np.zeros((h, w, cin))
    dk_arr = np.zeros((3, 3, cin, cout))
    db_arr = np.zeros(cout)
    cdef double[:, :, ::1] dxv = dx_arr
    cdef double[:, :, :, ::1] dk = dk_arr
    cdef double[::1] db = db_arr
    cdef Py_ssize_t y, x_, dy, dxo, yy, xx, i, o
    cdef double xin, acc
    cdef double *gp
    cdef double *kp
    cdef double *dkp
    for y in range(h):
        for x_ in range(w):
            gp = &g[y, x_, 0]
            for o in range(cout):
                db[o] += gp[o]
            for dy in range(3):
                yy = y + dy - 1
                if yy < 0 or yy >= h:
                    continue
                for dxo in range(3):
                    xx = x_ + dxo - 1
                    if xx < 0 or xx >= w:
                        continue
                    for i in range(cin):
                        xin = xv[yy, xx, i]
                        kp = &kv[dy, dxo, i, 0]
                        dkp = &dk[dy, dxo, i, 0]
                        acc = 0.0
                        for o in range(cout):
                            dkp[o] += xin * gp[o]
                            acc += kp[o] * gp[o]
                        dxv[yy, xx, i] += acc
    return dx_arr, dk_arr, db_arr
