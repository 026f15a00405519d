"""Compiled inner loops: reward polynomials, assignment solvers, CUCB steps."""
import numpy as np
from numba import njit

AFFINE, PRODUCT, MINIMUM, TOPL = 0, 1, 2, 3
TIE_RTOL = 1e-12


@njit(cache=True)
def v_row(kind, a, b, L, lam):
    M = lam.shape[0]
    if kind == AFFINE:
        s = 0.0
        for m in range(M):
            s += a[m] + b[m] * lam[m]
        return s
    if kind == PRODUCT:
        s = 1.0
        for m in range(M):
            s *= lam[m]
        return s
    if kind == MINIMUM:
        s = lam[0]
        for m in range(1, M):
            if lam[m] < s:
                s = lam[m]
        return s
    dist = np.zeros(M + 1)
    dist[0] = 1.0
    for m in range(M):
        p = lam[m]
        for j in range(m + 1, 0, -1):
            dist[j] = dist[j] * (1.0 - p) + dist[j - 1] * p
        dist[0] *= 1.0 - p
    s = 0.0
    for j in range(M + 1):
        s += dist[j] * min(j, L)
    return s


@njit(cache=True)
def v_rows(kind, a, b, L, lams):
    out = np.empty(lams.shape[0])
    for i in range(lams.shape[0]):
        out[i] = v_row(kind, a, b, L, lams[i])
    return out


@njit(cache=True)
def tie_tol(value):
    return TIE_RTOL * (1.0 + abs(value))


@njit(cache=True)
def _search(vals, kind, a, b, L, prune, first_mode, threshold, order):
    """Depth-first walk over injective assignments.

    Player m tries arms in the sequence ``order[m]``.
    first_mode=False: return the maximum value.
    first_mode=True: return the first assignment whose value >= threshold.
    Pruning uses the bound v(prefix, per-player max over free arms), admissible
    for monotone v.
    """
    K, M = vals.shape
    row = np.empty(M)
    brow = np.empty(M)
    pos = np.full(M, -1, dtype=np.int64)
    choice = np.full(M, -1, dtype=np.int64)
    found = np.full(M, -1, dtype=np.int64)
    used = np.zeros(K, dtype=np.bool_)
    best = -np.inf
    m = 0
    while m >= 0:
        if pos[m] >= 0:
            used[choice[m]] = False
        i = pos[m] + 1
        while i < K and used[order[m, i]]:
            i += 1
        if i == K:
            pos[m] = -1
            choice[m] = -1
            m -= 1
            continue
        pos[m] = i
        k = order[m, i]
        choice[m] = k
        used[k] = True
        row[m] = vals[k, m]
        if m == M - 1:
            val = v_row(kind, a, b, L, row)
            if first_mode:
                if val >= threshold:
                    found[:] = choice
                    return found, val
            elif val > best:
                best = val
            continue
        if prune:
            for j in range(m + 1):
                brow[j] = row[j]
            for j in range(m + 1, M):
                mx = -np.inf
                for kk in range(K):
                    if not used[kk] and vals[kk, j] > mx:
                        mx = vals[kk, j]
                brow[j] = mx
            bound = v_row(kind, a, b, L, brow)
            if first_mode:
                if bound < threshold - tie_tol(threshold):
                    continue
            elif bound <= best:
                continue
        m += 1
    return found, best


@njit(cache=True)
def exhaustive(vals, kind, a, b, L, prune):
    """Lexicographically first injective assignment within tie tolerance of the max.

    The max pass tries each player's arms best-first so the bound bites early;
    the second pass walks in lexicographic order against the known maximum.
    """
    K, M = vals.shape
    lex = np.empty((M, K), dtype=np.int64)
    greedy = np.empty((M, K), dtype=np.int64)
    for m in range(M):
        lex[m] = np.arange(K)
        greedy[m] = np.argsort(-vals[:, m], kind="mergesort")
    _, vmax = _search(vals, kind, a, b, L, prune, False, 0.0, greedy if prune else lex)
    arms, val = _search(vals, kind, a, b, L, prune, True, vmax - tie_tol(vmax), lex)
    return arms, val


@njit(cache=True)
def hungarian(w):
    """Max-weight injective assignment of players (columns of w) to arms (rows).

    Shortest augmenting path with potentials on the rectangular M x K cost
    matrix -w (rows = players); requires M <= K.
    """
    K, M = w.shape
    n, m = M, K
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)
    way = np.zeros(m + 1, dtype=np.int64)
    minv = np.empty(m + 1)
    used = np.empty(m + 1, dtype=np.bool_)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv[:] = np.inf
        used[:] = False
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = np.inf
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = -w[j - 1, i0 - 1] - u[i0] - v[j]
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
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    arms = np.empty(M, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j] != 0:
            arms[p[j] - 1] = j - 1
    total = 0.0
    for i in range(M):
        total += w[arms[i], i]
    return arms, total


@njit(cache=True)
def hungarian_lex_thr(w, thr):
    """Lexicographically smallest assignment with total weight >= thr.

    Fixes players in order and, for each, tries smaller arms by re-solving the
    remaining sub-problem.  ``thr`` must not exceed the optimum.
    """
    K, M = w.shape
    arms, V = hungarian(w)
    used = np.zeros(K, dtype=np.bool_)
    prefix = 0.0
    for m in range(M):
        cur = arms[m]
        for a in range(cur):
            if used[a]:
                continue
            if m == M - 1:
                if prefix + w[a, m] >= thr:
                    arms[m] = a
                    break
                continue
            free = np.empty(K - m - 1, dtype=np.int64)
            c = 0
            for k in range(K):
                if not used[k] and k != a:
                    free[c] = k
                    c += 1
            sub = np.empty((K - m - 1, M - m - 1))
            for i in range(K - m - 1):
                for j in range(M - m - 1):
                    sub[i, j] = w[free[i], m + 1 + j]
            sarms, sval = hungarian(sub)
            if prefix + w[a, m] + sval >= thr:
                arms[m] = a
                for j in range(M - m - 1):
                    arms[m + 1 + j] = free[sarms[j]]
                break
        used[arms[m]] = True
        prefix += w[arms[m], m]
    return arms


@njit(cache=True)
def hungarian_lex(w):
    """Hungarian optimum, then the lexicographically smallest assignment among
    those within tie tolerance of it."""
    _, V = hungarian(w)
    return hungarian_lex_thr(w, V - tie_tol(V))


@njit(cache=True)
def solve(vals, kind, a, b, L, prune):
    """Exact oracle with the enumeration tie-break.

    Affine rewards are a linear assignment on b*vals; products of positive
    values are one on log(vals).  Everything else is enumerated.
    """
    K, M = vals.shape
    if kind == AFFINE:
        w = np.empty((K, M))
        off = 0.0
        for m in range(M):
            off += a[m]
            for k in range(K):
                w[k, m] = b[m] * vals[k, m]
        _, V = hungarian(w)
        return hungarian_lex_thr(w, V - tie_tol(V + off))
    if kind == PRODUCT and vals.min() > 0.0:
        w = np.log(vals)
        arms, _ = hungarian(w)
        V = 1.0
        for m in range(M):
            V *= vals[arms[m], m]
        return hungarian_lex_thr(w, np.log(V - tie_tol(V)))
    arms, _ = exhaustive(vals, kind, a, b, L, prune)
    return arms


@njit(cache=True)
def cucb_run(t_start, n_steps, counts, sums, kind, a, b, L, prune,
             support, cdf, sizes, ubuf, upos, arms_out, x_out):
    """Advance CUCB for up to ``n_steps`` steps.

    ``ubuf[k, m, :]`` holds the next uniforms of pair (k, m) from position
    ``upos[k, m]``; the loop stops early when a needed pair runs dry.
    Returns the number of steps played.
    """
    K, M = counts.shape
    B = ubuf.shape[2]
    ucb = np.empty((K, M))
    for s in range(n_steps):
        t = t_start + s
        rad = 3.0 * np.log(t) / 2.0
        for k in range(K):
            for m in range(M):
                ucb[k, m] = sums[k, m] / counts[k, m] + np.sqrt(rad / counts[k, m])
        arms = solve(ucb, kind, a, b, L, prune)
        for m in range(M):
            if upos[arms[m], m] >= B:
                return s
        for m in range(M):
            k = arms[m]
            u = ubuf[k, m, upos[k, m]]
            upos[k, m] += 1
            j = 0
            while j < sizes[k, m] - 1 and not u < cdf[k, m, j]:
                j += 1
            x = support[k, m, j]
            counts[k, m] += 1
            sums[k, m] += x
            arms_out[s, m] = k
            x_out[s, m] = x
    return n_steps
