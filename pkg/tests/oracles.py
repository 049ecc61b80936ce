"""Independent reference constructions used by the tests.

Nothing here calls into the package's convolution or filter-bank code.
"""
import itertools
import math

import numpy as np


def conv_matrix(taps, center, n):
    """Dense same-length zero-padded convolution: out[i] = sum_k taps[k] x[i-k+center]."""
    A = np.zeros((n, n))
    for i in range(n):
        for k, t in enumerate(taps):
            j = i - k + center
            if 0 <= j < n:
                A[i, j] += t
    return A


def decimation_matrix(n, M):
    D = np.zeros((n // M, n))
    for i in range(n // M):
        D[i, i * M] = 1.0
    return D


def analysis_matrices(bank_taps, centers, n, M):
    D = decimation_matrix(n, M)
    return [D @ conv_matrix(t, c, n) for t, c in zip(bank_taps, centers)]


def synthesis_matrices(bank_taps, centers, n, M):
    U = decimation_matrix(n, M).T
    return [conv_matrix(t, c, n) @ U for t, c in zip(bank_taps, centers)]


def wilcoxon_bruteforce(diffs):
    """Two-sided exact p by enumerating every sign assignment of the |diffs| ranks."""
    d = np.asarray([v for v in diffs if v != 0], dtype=float)
    n = d.size
    mags = np.abs(d)
    # average ranks computed by hand
    order = sorted(range(n), key=lambda i: mags[i])
    ranks = [0.0] * n
    i = 0
    while i < n:
        j = i
        while j + 1 < n and mags[order[j + 1]] == mags[order[i]]:
            j += 1
        for k in range(i, j + 1):
            ranks[order[k]] = (i + j) / 2.0 + 1.0
        i = j + 1
    observed = sum(r for r, v in zip(ranks, d) if v > 0)
    sums = [sum(r for r, s in zip(ranks, signs) if s) for signs in itertools.product((0, 1), repeat=n)]
    total = len(sums)
    lower = sum(1 for s in sums if s <= observed + 1e-9)
    upper = sum(1 for s in sums if s >= observed - 1e-9)
    return observed, min(1.0, 2.0 * min(lower, upper) / total)


def rel_err(numeric, analytic, floor):
    numeric = np.asarray(numeric, dtype=float)
    analytic = np.asarray(analytic, dtype=float)
    denom = np.maximum(np.maximum(np.abs(numeric), np.abs(analytic)), floor)
    return float(np.max(np.abs(numeric - analytic) / denom))


def haar_taps():
    s = 1.0 / math.sqrt(2.0)
    return [s, s], [s, -s]
