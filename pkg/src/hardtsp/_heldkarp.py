"""Held-Karp subset dynamic program, compiled with numba.

The last node is the fixed depot; ``dp[S, j]`` is the shortest path that
starts at the depot, visits exactly the nodes in bitmask ``S`` (over the
first ``n - 1`` nodes) and ends at ``j``. Unset entries stay ``inf``, which
lets the inner minimum run branch-free.
"""

import numba
import numpy as np

# no "ninf": the table relies on inf sentinels
_FLAGS = {"nnan", "nsz", "arcp"}


@numba.njit(cache=True, fastmath=_FLAGS)
def _fill(dist):
    n = dist.shape[0]
    m = n - 1
    full = 1 << m
    dp = np.full((full, m), np.inf)
    into = np.ascontiguousarray(dist[:m, :m].T)  # into[j, k] = dist[k, j]
    for j in range(m):
        dp[1 << j, j] = dist[m, j]
    for s in range(1, full):
        for j in range(m):
            if not (s >> j) & 1:
                continue
            prev = s ^ (1 << j)
            if prev == 0:
                continue
            row = dp[prev]
            col = into[j]
            best = np.inf
            for k in range(m):
                best = min(best, row[k] + col[k])
            dp[s, j] = best
    return dp


@numba.njit(cache=True)
def _trace(dp, dist):
    n = dist.shape[0]
    m = n - 1
    s = (1 << m) - 1
    order = np.empty(n, dtype=np.int64)
    order[0] = m
    best = np.inf
    last = -1
    for j in range(m):
        v = dp[s, j] + dist[j, m]
        if v < best:
            best = v
            last = j
    pos = n - 1
    while True:
        order[pos] = last
        pos -= 1
        prev = s ^ (1 << last)
        if prev == 0:
            break
        best = np.inf
        arg = -1
        for k in range(m):
            if (prev >> k) & 1:
                v = dp[prev, k] + dist[k, last]
                if v < best:
                    best = v
                    arg = k
        s = prev
        last = arg
    return order


def held_karp_tour(dist: np.ndarray) -> np.ndarray:
    dist = np.ascontiguousarray(dist, dtype=np.float64)
    return _trace(_fill(dist), dist)
