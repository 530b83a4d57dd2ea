"""Simplicial sparse Cholesky kernels.

All kernels work on a symmetric matrix that has already been permuted, stored
as compressed sparse columns (full pattern, sorted row indices). The factor L
is kept in CSC form with the diagonal entry first in each column.
"""

import heapq
import math

import numpy as np
from numba import njit


def minimum_degree(indptr, indices, n):
    """Greedy minimum-degree ordering on the elimination graph.

    Nodes whose degree exceeds ``max(16, 10 * sqrt(n))`` are treated as dense:
    they are removed from the graph and placed last, which keeps the clique
    updates cheap for arrow-shaped matrices (fixed effects touching everything).
    """
    adj = [set() for _ in range(n)]
    for j in range(n):
        for i in indices[indptr[j]:indptr[j + 1]]:
            if i != j:
                adj[j].add(int(i))
                adj[int(i)].add(j)
    threshold = max(16, int(10 * math.sqrt(n)))
    dense = sorted((v for v in range(n) if len(adj[v]) > threshold),
                   key=lambda v: (len(adj[v]), v))
    dense_set = set(dense)
    for v in range(n):
        if v in dense_set:
            adj[v] = set()
        else:
            adj[v] -= dense_set

    heap = [(len(adj[v]), v) for v in range(n) if v not in dense_set]
    heapq.heapify(heap)
    done = np.zeros(n, dtype=bool)
    order = []
    while heap:
        deg, v = heapq.heappop(heap)
        if done[v] or deg != len(adj[v]):
            continue
        done[v] = True
        order.append(v)
        nbrs = adj[v]
        for u in nbrs:
            au = adj[u]
            au.discard(v)
            au |= nbrs
            au.discard(u)
            heapq.heappush(heap, (len(au), u))
        adj[v] = set()
    order.extend(dense)
    return np.asarray(order, dtype=np.int64)


@njit(cache=True, nogil=True)
def etree(n, Ap, Ai):
    parent = -np.ones(n, dtype=np.int64)
    ancestor = -np.ones(n, dtype=np.int64)
    for k in range(n):
        for p in range(Ap[k], Ap[k + 1]):
            i = Ai[p]
            while i != -1 and i < k:
                inext = ancestor[i]
                ancestor[i] = k
                if inext == -1:
                    parent[i] = k
                i = inext
    return parent


@njit(cache=True, nogil=True)
def _ereach(k, Ap, Ai, parent, mark, stack):
    # columns j < k with L[k, j] != 0 (row subtree of k)
    top = 0
    mark[k] = k
    for p in range(Ap[k], Ap[k + 1]):
        i = Ai[p]
        if i >= k:
            continue
        while mark[i] != k:
            stack[top] = i
            top += 1
            mark[i] = k
            i = parent[i]
    return top


@njit(cache=True, nogil=True)
def symbolic(n, Ap, Ai, parent):
    mark = -np.ones(n, dtype=np.int64)
    stack = np.empty(n, dtype=np.int64)
    colcount = np.ones(n, dtype=np.int64)
    rowcount = np.zeros(n, dtype=np.int64)
    for k in range(n):
        top = _ereach(k, Ap, Ai, parent, mark, stack)
        rowcount[k] = top
        for t in range(top):
            colcount[stack[t]] += 1
    Lp = np.zeros(n + 1, dtype=np.int64)
    Rp = np.zeros(n + 1, dtype=np.int64)
    for j in range(n):
        Lp[j + 1] = Lp[j] + colcount[j]
        Rp[j + 1] = Rp[j] + rowcount[j]
    Li = np.empty(Lp[n], dtype=np.int64)
    Rcol = np.empty(Rp[n], dtype=np.int64)
    Rpos = np.empty(Rp[n], dtype=np.int64)
    nxt = Lp[:n].copy()
    mark[:] = -1
    for k in range(n):
        top = _ereach(k, Ap, Ai, parent, mark, stack)
        r = Rp[k]
        for t in range(top):
            j = stack[t]
            Li[nxt[j]] = k
            Rcol[r] = j
            Rpos[r] = nxt[j]
            nxt[j] += 1
            r += 1
        Li[nxt[k]] = k
        nxt[k] += 1
    return Lp, Li, Rp, Rcol, Rpos


@njit(cache=True, nogil=True)
def numeric(n, Lp, Li, Rp, Rcol, Rpos, Lx):
    """Left-looking factorization in place; ``Lx`` holds the lower part of A.

    Returns -1 on success, otherwise the failing pivot position.
    """
    x = np.zeros(n, dtype=np.float64)
    for j in range(n):
        for q in range(Lp[j], Lp[j + 1]):
            x[Li[q]] = Lx[q]
        for t in range(Rp[j], Rp[j + 1]):
            k = Rcol[t]
            pos = Rpos[t]
            ljk = Lx[pos]
            for q in range(pos, Lp[k + 1]):
                x[Li[q]] -= ljk * Lx[q]
        d = x[j]
        if not d > 0.0:
            Lx[Lp[j]] = d
            return j
        ljj = math.sqrt(d)
        Lx[Lp[j]] = ljj
        x[j] = 0.0
        for q in range(Lp[j] + 1, Lp[j + 1]):
            Lx[q] = x[Li[q]] / ljj
            x[Li[q]] = 0.0
    return -1


@njit(cache=True, nogil=True)
def solve_lower(n, Lp, Li, Lx, B):
    Y = B.copy()
    for c in range(Y.shape[1]):
        for j in range(n):
            yj = Y[j, c] / Lx[Lp[j]]
            Y[j, c] = yj
            if yj != 0.0:
                for q in range(Lp[j] + 1, Lp[j + 1]):
                    Y[Li[q], c] -= Lx[q] * yj
    return Y


@njit(cache=True, nogil=True)
def solve_upper(n, Lp, Li, Lx, B):
    X = B.copy()
    for c in range(X.shape[1]):
        for j in range(n - 1, -1, -1):
            s = X[j, c]
            for q in range(Lp[j] + 1, Lp[j + 1]):
                s -= Lx[q] * X[Li[q], c]
            X[j, c] = s / Lx[Lp[j]]
    return X


@njit(cache=True, nogil=True)
def _lookup(Lp, Li, S, row, col):
    # S[row, col] for row >= col on the factor pattern; binary search in col
    lo = Lp[col]
    hi = Lp[col + 1] - 1
    while lo <= hi:
        mid = (lo + hi) // 2
        r = Li[mid]
        if r == row:
            return S[mid]
        if r < row:
            lo = mid + 1
        else:
            hi = mid - 1
    return np.nan


@njit(cache=True, nogil=True)
def selected_inverse(n, Lp, Li, Lx):
    """Entries of (L L')^{-1} on the pattern of L (Takahashi recursions)."""
    S = np.zeros(Lp[n], dtype=np.float64)
    for i in range(n - 1, -1, -1):
        start = Lp[i]
        end = Lp[i + 1]
        lii = Lx[start]
        for qj in range(end - 1, start, -1):
            j = Li[qj]
            s = 0.0
            for qk in range(start + 1, end):
                k = Li[qk]
                if k >= j:
                    s += Lx[qk] * _lookup(Lp, Li, S, k, j)
                else:
                    s += Lx[qk] * _lookup(Lp, Li, S, j, k)
            S[qj] = -s / lii
        s = 0.0
        for qk in range(start + 1, end):
            s += Lx[qk] * S[qk]
        S[start] = (1.0 / lii - s) / lii
    return S


@njit(cache=True, nogil=True)
def row_quadratic_forms(Bp, Bj, Bx, Sp, Si, Sx, out):
    """out[r] = b_r' S b_r for CSR rows b_r and full symmetric CSC S.

    Pairs absent from the pattern of S count as zero; the number of such
    pairs is returned.
    """
    missing = 0
    for r in range(Bp.shape[0] - 1):
        acc = 0.0
        for a in range(Bp[r], Bp[r + 1]):
            ja = Bj[a]
            for b in range(Bp[r], Bp[r + 1]):
                jb = Bj[b]
                lo = Sp[jb]
                hi = Sp[jb + 1] - 1
                val = 0.0
                found = False
                while lo <= hi:
                    mid = (lo + hi) // 2
                    rr = Si[mid]
                    if rr == ja:
                        val = Sx[mid]
                        found = True
                        break
                    if rr < ja:
                        lo = mid + 1
                    else:
                        hi = mid - 1
                if not found:
                    missing += 1
                acc += Bx[a] * Bx[b] * val
        out[r] = acc
    return missing
