"""Hot inner loops, each in two flavours.

``*_jit`` functions are explicit loops compiled by numba; ``*_numpy`` functions
are vectorized equivalents. The public names at the bottom dispatch on
``mlcl._accel.USE_NUMBA``. Both flavours must agree to ~1e-12; the test-suite
checks this directly, and ``benchmarks/bench_kernels.py`` times them.
"""

import math

import numpy as np

from mlcl._accel import njit, pick


# ---------------------------------------------------------------------------
# contrastive loss: per-anchor values and the logit-gradient coefficients
# ---------------------------------------------------------------------------
#
# For logits l_ij = z_i.z_j / tau, anchor i with positives P(i) and weights w:
#   L^i = -(1/|P(i)|) sum_p w_ip (l_ip - lse_i),  lse_i = log sum_{a != i} e^{l_ia}
# dL/dl_ij = -coef_ij with coef_ij = w_ij [j in P(i)] / |P(i)| - c_i S_ij,
# c_i = sum_p w_ip / |P(i)| and S the row softmax over A(i).
# Anchors with an empty positive set contribute nothing.


@njit
def contrastive_terms_jit(z, mask, weights, tau):
    n, d = z.shape
    logits = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            acc = 0.0
            for k in range(d):
                acc += z[i, k] * z[j, k]
            logits[i, j] = acc / tau
            logits[j, i] = logits[i, j]

    per_anchor = np.zeros(n)
    coef = np.zeros((n, n))
    for i in range(n):
        npos = 0
        for j in range(n):
            if mask[i, j]:
                npos += 1
        if npos == 0:
            continue
        m = -np.inf
        for j in range(n):
            if j != i and logits[i, j] > m:
                m = logits[i, j]
        s = 0.0
        for j in range(n):
            if j != i:
                s += math.exp(logits[i, j] - m)
        lse = m + math.log(s)
        acc = 0.0
        wsum = 0.0
        for j in range(n):
            if mask[i, j]:
                acc += weights[i, j] * (logits[i, j] - lse)
                wsum += weights[i, j]
        per_anchor[i] = -acc / npos
        c = wsum / npos
        for j in range(n):
            if j == i:
                continue
            sij = math.exp(logits[i, j] - m) / s
            if mask[i, j]:
                coef[i, j] = weights[i, j] / npos - c * sij
            else:
                coef[i, j] = -c * sij
    return per_anchor, coef


def contrastive_terms_numpy(z, mask, weights, tau):
    n = z.shape[0]
    logits = (z @ z.T) / tau
    off = ~np.eye(n, dtype=bool)
    npos = mask.sum(axis=1)
    active = npos > 0

    masked = np.where(off, logits, -np.inf)
    m = masked.max(axis=1, keepdims=True)
    e = np.where(off, np.exp(masked - m), 0.0)
    s = e.sum(axis=1, keepdims=True)
    lse = m + np.log(s)
    soft = e / s

    w = np.where(mask, weights, 0.0)
    safe = np.where(active, npos, 1)
    per_anchor = -(w * (logits - lse)).sum(axis=1) / safe
    per_anchor[~active] = 0.0

    c = w.sum(axis=1) / safe
    coef = w / safe[:, None] - c[:, None] * soft
    coef[~active] = 0.0
    return per_anchor, coef


# ---------------------------------------------------------------------------
# Jaccard similarity matrix over multi-level labels
# ---------------------------------------------------------------------------


@njit
def jaccard_matrix_jit(levels):
    n, L = levels.shape
    out = np.empty((n, n))
    for i in range(n):
        out[i, i] = 1.0
        for j in range(i + 1, n):
            agree = 0
            for l in range(L):
                if levels[i, l] == levels[j, l]:
                    agree += 1
            v = agree / (2 * L - agree)
            out[i, j] = v
            out[j, i] = v
    return out


def jaccard_matrix_numpy(levels):
    L = levels.shape[1]
    agree = (levels[:, None, :] == levels[None, :, :]).sum(axis=2).astype(np.float64)
    return agree / (2 * L - agree)


# ---------------------------------------------------------------------------
# k-nearest-neighbour label agreement
# ---------------------------------------------------------------------------


@njit
def knn_agreement_jit(x, labels, k):
    n, d = x.shape
    total = 0.0
    best_d = np.empty(k)
    best_j = np.empty(k, dtype=np.int64)
    for i in range(n):
        # insertion selection of the k nearest; strict < keeps the lower index on ties
        filled = 0
        for j in range(n):
            if j == i:
                continue
            acc = 0.0
            for c in range(d):
                diff = x[i, c] - x[j, c]
                acc += diff * diff
            if filled == k and acc >= best_d[k - 1]:
                continue
            pos = filled if filled < k else k - 1
            while pos > 0 and best_d[pos - 1] > acc:
                if pos < k:
                    best_d[pos] = best_d[pos - 1]
                    best_j[pos] = best_j[pos - 1]
                pos -= 1
            best_d[pos] = acc
            best_j[pos] = j
            if filled < k:
                filled += 1
        hits = 0
        for r in range(k):
            if labels[best_j[r]] == labels[i]:
                hits += 1
        total += hits / k
    return total / n


def knn_agreement_numpy(x, labels, k):
    sq = (x * x).sum(axis=1)
    dist = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (x @ x.T), 0.0)
    np.fill_diagonal(dist, np.inf)
    order = np.argsort(dist, axis=1, kind="stable")[:, :k]
    hits = labels[order] == labels[:, None]
    return float(hits.mean(axis=1).mean())


contrastive_terms = pick(contrastive_terms_jit, contrastive_terms_numpy)
jaccard_matrix = pick(jaccard_matrix_jit, jaccard_matrix_numpy)
knn_agreement = pick(knn_agreement_jit, knn_agreement_numpy)
