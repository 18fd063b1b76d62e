# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: batched AIS interval construction and volume compositing.

Results match ``_pykernels`` bit for bit on the AIS path (same operation
order, no FMA contraction).
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor, exp, expm1
from libc.stdlib cimport malloc, free

cnp.import_array()

DEF BACKGROUND = 0
DEF BORDER = 1
DEF OBJECT = 2


cdef inline bint _below(double ox, double oy, double oz,
                        double dx, double dy, double dz, double t,
                        const double[:, ::1] grid, double gx, double gy, double cs,
                        Py_ssize_t nrows, Py_ssize_t ncols) noexcept nogil:
    cdef double x = ox + t * dx
    cdef double y = oy + t * dy
    cdef double z = oz + t * dz
    cdef double fc = floor((x - gx) / cs)
    cdef double fr = floor((y - gy) / cs)
    cdef double h = 0.0
    if fc >= 0 and fr >= 0 and fc < ncols and fr < nrows:
        h = grid[<Py_ssize_t>fr, <Py_ssize_t>fc]
    return z <= h


def ais_edges(const double[:, ::1] origins, const double[:, ::1] dirs,
              const double[::1] near, const double[::1] far,
              const double[:, ::1] grid, double gx, double gy, double cs,
              int n, int bsplit, int osplit):
    cdef Py_ssize_t r = origins.shape[0]
    cdef Py_ssize_t nrows = grid.shape[0], ncols = grid.shape[1]
    edges_np = np.empty((r, n + 1), dtype=np.float64)
    labels_np = np.empty((r, n), dtype=np.int8)
    border_np = np.zeros(r, dtype=np.bool_)
    cdef double[:, ::1] edges = edges_np
    cdef signed char[:, ::1] labels = labels_np
    cdef cnp.npy_bool[::1] has_border = border_np

    cdef int maxs = n * (bsplit if bsplit > osplit else osplit) + 2
    # work buffers: uniform edges/labels, merged runs, refined list (t0 array + last end)
    cdef double* ue = <double*> malloc((n + 1) * sizeof(double))
    cdef bint* ub = <bint*> malloc((n + 1) * sizeof(bint))
    cdef int* ul = <int*> malloc(n * sizeof(int))
    cdef double* mt0 = <double*> malloc((n + 1) * sizeof(double))
    cdef int* ml = <int*> malloc(n * sizeof(int))
    cdef double* rt = <double*> malloc((maxs + n + 2) * sizeof(double))
    cdef int* rl = <int*> malloc((maxs + n + 2) * sizeof(int))
    if not (ue and ub and ul and mt0 and ml and rt and rl):
        free(ue); free(ub); free(ul); free(mt0); free(ml); free(rt); free(rl)
        raise MemoryError()

    cdef Py_ssize_t i, j, k, nm, nr, parts, shift, c, p, nfine, u
    cdef double span, a, b, w, mid, ox, oy, oz, dx, dy, dz
    cdef int lab
    cdef bint border
    try:
        with nogil:
            for i in range(r):
                ox = origins[i, 0]; oy = origins[i, 1]; oz = origins[i, 2]
                dx = dirs[i, 0]; dy = dirs[i, 1]; dz = dirs[i, 2]
                span = far[i] - near[i]
                for j in range(n + 1):
                    ue[j] = near[i] + span * (<double>j / n)
                ue[n] = far[i]
                for j in range(n + 1):
                    ub[j] = _below(ox, oy, oz, dx, dy, dz, ue[j], grid, gx, gy, cs, nrows, ncols)
                border = False
                for j in range(n):
                    if ub[j] and ub[j + 1]:
                        ul[j] = OBJECT
                    elif ub[j] or ub[j + 1]:
                        ul[j] = BORDER
                        border = True
                    else:
                        ul[j] = BACKGROUND
                has_border[i] = border

                # merge runs; mt0[k] is the start of run k, mt0[nm] the end
                nm = 1
                mt0[0] = ue[0]
                ml[0] = ul[0]
                for j in range(1, n):
                    if ul[j] != ml[nm - 1]:
                        mt0[nm] = ue[j]
                        ml[nm] = ul[j]
                        nm += 1
                mt0[nm] = ue[n]

                if nm == 1 and ml[0] == BACKGROUND:
                    for j in range(n + 1):
                        edges[i, j] = ue[j]
                    for j in range(n):
                        labels[i, j] = ul[j]
                    continue

                # refine, leaving n slots at the front for bisections
                nr = 0
                shift = n
                for k in range(nm):
                    a = mt0[k]
                    b = mt0[k + 1]
                    lab = ml[k]
                    if lab == BORDER:
                        parts = bsplit
                    elif lab == OBJECT:
                        parts = osplit
                    else:
                        parts = 1
                    if parts == 1:
                        rt[shift + nr] = a
                        rl[shift + nr] = lab
                        nr += 1
                    else:
                        w = b - a
                        for j in range(parts):
                            rt[shift + nr] = a + w * j / parts
                            rl[shift + nr] = lab
                            nr += 1
                rt[shift + nr] = mt0[nm]

                # cut the nearest interval into c near-equal dyadic pieces
                if nr < n:
                    c = n - nr + 1
                    p = 1
                    while p * 2 <= c:
                        p *= 2
                    nfine = 2 * (c - p)
                    a = rt[shift]
                    b = rt[shift + 1]
                    w = b - a
                    lab = rl[shift]
                    shift -= c - 1
                    rt[shift] = a
                    for j in range(1, c):
                        u = j if j <= nfine else nfine + 2 * (j - nfine)
                        rt[shift + j] = a + w * (<double>u / (2 * p))
                    for j in range(c):
                        rl[shift + j] = lab
                    nr = n
                # merge the two farthest until n remain: drop interior edges
                if nr > n:
                    rt[shift + n] = rt[shift + nr]
                    nr = n
                for j in range(n):
                    edges[i, j] = rt[shift + j]
                    labels[i, j] = rl[shift + j]
                edges[i, n] = rt[shift + n]
    finally:
        free(ue); free(ub); free(ul); free(mt0); free(ml); free(rt); free(rl)
    return edges_np, labels_np, border_np


def composite_forward(const double[:, ::1] sigma, const double[:, ::1] deltas,
                      const double[:, :, ::1] rgb):
    cdef Py_ssize_t r = sigma.shape[0], s = sigma.shape[1]
    color_np = np.zeros((r, 3), dtype=np.float64)
    weights_np = np.empty((r, s), dtype=np.float64)
    trans_np = np.empty((r, s), dtype=np.float64)
    final_np = np.empty(r, dtype=np.float64)
    cdef double[:, ::1] color = color_np
    cdef double[:, ::1] weights = weights_np
    cdef double[:, ::1] trans = trans_np
    cdef double[::1] final = final_np
    cdef Py_ssize_t i, j
    cdef double acc, tau, w
    with nogil:
        for i in range(r):
            acc = 0.0
            for j in range(s):
                tau = sigma[i, j] * deltas[i, j]
                trans[i, j] = exp(-acc)
                w = trans[i, j] * (-expm1(-tau))
                weights[i, j] = w
                color[i, 0] += w * rgb[i, j, 0]
                color[i, 1] += w * rgb[i, j, 1]
                color[i, 2] += w * rgb[i, j, 2]
                acc = acc + tau
            final[i] = exp(-acc)
    return color_np, weights_np, trans_np, final_np


def composite_backward(const double[:, ::1] sigma, const double[:, ::1] deltas,
                       const double[:, :, ::1] rgb, const double[:, ::1] weights,
                       const double[:, ::1] trans, const double[::1] final,
                       const double[:, ::1] dcolor, const double[::1] dfinal):
    cdef Py_ssize_t r = sigma.shape[0], s = sigma.shape[1]
    dsigma_np = np.empty((r, s), dtype=np.float64)
    drgb_np = np.empty((r, s, 3), dtype=np.float64)
    cdef double[:, ::1] dsigma = dsigma_np
    cdef double[:, :, ::1] drgb = drgb_np
    cdef Py_ssize_t i, j
    cdef double later, g, gc0, gc1, gc2, w
    with nogil:
        for i in range(r):
            gc0 = dcolor[i, 0]; gc1 = dcolor[i, 1]; gc2 = dcolor[i, 2]
            later = 0.0
            for j in range(s - 1, -1, -1):
                w = weights[i, j]
                g = rgb[i, j, 0] * gc0 + rgb[i, j, 1] * gc1 + rgb[i, j, 2] * gc2
                drgb[i, j, 0] = w * gc0
                drgb[i, j, 1] = w * gc1
                drgb[i, j, 2] = w * gc2
                dsigma[i, j] = deltas[i, j] * (trans[i, j] * exp(-sigma[i, j] * deltas[i, j]) * g - later) \
                    - deltas[i, j] * final[i] * dfinal[i]
                later = later + w * g
    return dsigma_np, drgb_np
