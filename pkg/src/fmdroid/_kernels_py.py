"""Vectorised numpy versions of the scoring and gradient kernels.

Used when the compiled extension is unavailable (or disabled with
``FMDROID_PURE_PYTHON=1``). Signatures mirror ``fmdroid._kernels``.

Both kernels work on a compressed-row batch. ``cat`` maps every feature to a
category code and ``allowed`` is a symmetric 0/1 matrix over category codes;
a full FM is the special case of a single category with ``allowed=[[1]]``.
"""

import numpy as np


def _gather(indptr, indices, rows):
    starts = indptr[rows]
    lens = indptr[rows + 1] - starts
    row_of = np.repeat(np.arange(len(rows)), lens)
    first = np.cumsum(lens) - lens
    offs = np.arange(int(lens.sum())) - np.repeat(first, lens) + np.repeat(starts, lens)
    return row_of, indices[offs]


def _category_sums(row_of, idx, m, V, cat, ncat):
    k = V.shape[1]
    key = row_of * ncat + cat[idx]
    Vi = V[idx]
    S = np.empty((m * ncat, k))
    Q = np.empty((m * ncat, k))
    for f in range(k):
        S[:, f] = np.bincount(key, weights=Vi[:, f], minlength=m * ncat)
        Q[:, f] = np.bincount(key, weights=Vi[:, f] ** 2, minlength=m * ncat)
    return Vi, S.reshape(m, ncat, k), Q.reshape(m, ncat, k)


def _raw_scores(row_of, idx, m, w0, w, V, cat, allowed):
    A = np.asarray(allowed, dtype=np.float64)
    ncat = A.shape[0]
    lin = w0 + np.bincount(row_of, weights=w[idx], minlength=m)
    Vi, S, Q = _category_sums(row_of, idx, m, V, cat, ncat)
    pair = 0.5 * np.einsum("mcf,cd,mdf->m", S, A, S)
    self_sq = 0.5 * np.einsum("c,mcf->m", np.diag(A), Q)
    return lin + pair - self_sq, Vi, S


def scores(indptr, indices, w0, w, V, cat, allowed):
    rows = np.arange(len(indptr) - 1)
    row_of, idx = _gather(indptr, indices, rows)
    h, _, _ = _raw_scores(row_of, idx, len(rows), w0, w, V, cat, allowed)
    return h


def accumulate_gradient(indptr, indices, rows, y, w0, w, V, cat, allowed, l2_w, l2_v, grad_w, grad_V):
    """Add the summed per-sample gradients of the batch ``rows`` into
    ``grad_w``/``grad_V``; return ``(loss_sum, grad_w0_sum)``."""
    rows = np.asarray(rows, dtype=np.int64)
    m = len(rows)
    row_of, idx = _gather(indptr, indices, rows)
    h, Vi, S = _raw_scores(row_of, idx, m, w0, w, V, cat, allowed)
    A = np.asarray(allowed, dtype=np.float64)

    z = -y[rows] * h
    # softplus(z) and dloss/dh = -y * sigmoid(z), both overflow-safe
    loss = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    ez = np.exp(-np.abs(z))
    sig = np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))
    g = -y[rows] * sig

    wi = w[idx]
    loss_sum = loss.sum() + 0.5 * l2_w * np.dot(wi, wi) + 0.5 * l2_v * np.sum(Vi * Vi)

    ci = cat[idx]
    T = np.einsum("cd,mdf->mcf", A, S)
    G = T[row_of, ci] - np.diag(A)[ci][:, None] * Vi
    gi = g[row_of]
    np.add.at(grad_w, idx, gi + l2_w * wi)
    np.add.at(grad_V, idx, gi[:, None] * G + l2_v * Vi)
    return float(loss_sum), float(g.sum())
