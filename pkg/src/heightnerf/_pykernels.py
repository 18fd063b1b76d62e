"""Pure-Python/NumPy kernels. Same signatures and results as ``_core``."""
from __future__ import annotations

import math

import numpy as np

BACKGROUND, BORDER, OBJECT = 0, 1, 2


def _below(ox, oy, oz, dx, dy, dz, t, grid, gx, gy, cs, nrows, ncols):
    x = ox + t * dx
    y = oy + t * dy
    z = oz + t * dz
    col = math.floor((x - gx) / cs)
    row = math.floor((y - gy) / cs)
    if col < 0 or row < 0 or col >= ncols or row >= nrows:
        h = 0.0
    else:
        h = grid[row][col]
    return z <= h


def _ais_one(o, d, t_near, t_far, grid, gx, gy, cs, nrows, ncols, n, bsplit, osplit):
    span = t_far - t_near
    edges = [t_near + span * (i / n) for i in range(n + 1)]
    edges[-1] = t_far
    below = [_below(o[0], o[1], o[2], d[0], d[1], d[2], t, grid, gx, gy, cs, nrows, ncols) for t in edges]
    labels = []
    for i in range(n):
        if below[i] and below[i + 1]:
            labels.append(OBJECT)
        elif below[i] or below[i + 1]:
            labels.append(BORDER)
        else:
            labels.append(BACKGROUND)
    has_border = BORDER in labels

    # merge runs
    m_t0, m_t1, m_lab = [edges[0]], [], [labels[0]]
    for i in range(1, n):
        if labels[i] != m_lab[-1]:
            m_t1.append(edges[i])
            m_t0.append(edges[i])
            m_lab.append(labels[i])
    m_t1.append(edges[n])
    if len(m_lab) == 1 and m_lab[0] == BACKGROUND:
        return edges, labels, has_border

    # refine
    r_t0, r_t1, r_lab = [], [], []
    for a, b, lab in zip(m_t0, m_t1, m_lab):
        parts = bsplit if lab == BORDER else osplit if lab == OBJECT else 1
        if parts == 1:
            r_t0.append(a)
            r_t1.append(b)
            r_lab.append(lab)
            continue
        w = b - a
        sub = [a + w * k / parts for k in range(parts)] + [b]
        for k in range(parts):
            r_t0.append(sub[k])
            r_t1.append(sub[k + 1])
            r_lab.append(lab)

    # adjust count: cut the first interval into c near-equal dyadic pieces
    if len(r_t0) < n:
        c = n - len(r_t0) + 1
        p = 1 << (c.bit_length() - 1)
        nfine = 2 * (c - p)
        a, b = r_t0[0], r_t1[0]
        w = b - a
        cuts = [a] + [a + w * ((j if j <= nfine else nfine + 2 * (j - nfine)) / (2 * p)) for j in range(1, c)] + [b]
        r_t0[0:1] = cuts[:-1]
        r_t1[0:1] = cuts[1:]
        r_lab[0:1] = [r_lab[0]] * c
    while len(r_t0) > n:
        r_t1[-2] = r_t1[-1]
        del r_t0[-1], r_t1[-1], r_lab[-1]
    return r_t0 + [r_t1[-1]], r_lab, has_border


def ais_edges(origins, dirs, near, far, grid, gx, gy, cs, n, bsplit, osplit):
    r = origins.shape[0]
    edges = np.empty((r, n + 1))
    labels = np.empty((r, n), dtype=np.int8)
    has_border = np.empty(r, dtype=bool)
    nrows, ncols = grid.shape
    rows = grid.tolist()
    olist, dlist = origins.tolist(), dirs.tolist()
    for i in range(r):
        e, lab, hb = _ais_one(olist[i], dlist[i], float(near[i]), float(far[i]),
                              rows, gx, gy, cs, nrows, ncols, n, bsplit, osplit)
        edges[i] = e
        labels[i] = lab
        has_border[i] = hb
    return edges, labels, has_border


def composite_forward(sigma, deltas, rgb):
    """Returns ``(color, weights, trans, final_trans)`` for ray batches."""
    tau = sigma * deltas
    alpha = -np.expm1(-tau)
    acc = np.cumsum(tau, axis=1)
    trans = np.exp(-np.concatenate([np.zeros((tau.shape[0], 1)), acc[:, :-1]], axis=1))
    weights = trans * alpha
    color = np.einsum("rs,rsc->rc", weights, rgb)
    final = np.exp(-acc[:, -1]) if tau.shape[1] else np.ones(tau.shape[0])
    return color, weights, trans, final


def composite_backward(sigma, deltas, rgb, weights, trans, final, dcolor, dfinal):
    """Gradients of a loss w.r.t. ``sigma`` and ``rgb``.

    ``dcolor`` is dL/dcolor per ray; ``dfinal`` is dL/d(final transparency)
    per ray (nonzero only when a background color is blended in).
    """
    drgb = weights[:, :, None] * dcolor[:, None, :]
    g = np.einsum("rsc,rc->rs", rgb, dcolor)  # c_i . dL/dC
    wg = weights * g
    # suffix sums of later samples' contributions
    later = np.cumsum(wg[:, ::-1], axis=1)[:, ::-1] - wg
    trans_next = trans * np.exp(-sigma * deltas)
    dsigma = deltas * (trans_next * g - later) - deltas * final[:, None] * dfinal[:, None]
    return dsigma, drgb
