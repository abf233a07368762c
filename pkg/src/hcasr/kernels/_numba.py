"""Numba-compiled dynamic-programming kernels."""

import math

import numpy as np
from numba import njit

NEG_INF = -np.inf


@njit(cache=True)
def _lse2(a, b):
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


@njit(cache=True)
def ctc_forward_backward(log_probs, ext):
    T = log_probs.shape[0]
    C = log_probs.shape[1]
    S = ext.shape[0]
    alpha = np.full((T, S), NEG_INF)
    beta = np.full((T, S), NEG_INF)
    grad = np.zeros((T, C))

    alpha[0, 0] = log_probs[0, ext[0]]
    if S > 1:
        alpha[0, 1] = log_probs[0, ext[1]]
    for t in range(1, T):
        for s in range(S):
            v = alpha[t - 1, s]
            if s >= 1:
                v = _lse2(v, alpha[t - 1, s - 1])
            if s >= 2 and ext[s] != 0 and ext[s] != ext[s - 2]:
                v = _lse2(v, alpha[t - 1, s - 2])
            if v != NEG_INF:
                alpha[t, s] = v + log_probs[t, ext[s]]

    log_lik = alpha[T - 1, S - 1]
    if S > 1:
        log_lik = _lse2(log_lik, alpha[T - 1, S - 2])
    if log_lik == NEG_INF:
        return log_lik, grad

    beta[T - 1, S - 1] = log_probs[T - 1, ext[S - 1]]
    if S > 1:
        beta[T - 1, S - 2] = log_probs[T - 1, ext[S - 2]]
    for t in range(T - 2, -1, -1):
        for s in range(S):
            v = beta[t + 1, s]
            if s + 1 < S:
                v = _lse2(v, beta[t + 1, s + 1])
            if s + 2 < S and ext[s] != 0 and ext[s] != ext[s + 2]:
                v = _lse2(v, beta[t + 1, s + 2])
            if v != NEG_INF:
                beta[t, s] = v + log_probs[t, ext[s]]

    acc = np.full(C, NEG_INF)
    for t in range(T):
        acc[:] = NEG_INF
        for s in range(S):
            acc[ext[s]] = _lse2(acc[ext[s]], alpha[t, s] + beta[t, s])
        for k in range(C):
            if acc[k] != NEG_INF:
                grad[t, k] = -math.exp(acc[k] - log_probs[t, k] - log_lik)
    return log_lik, grad


@njit(cache=True)
def ctc_prefix_extend(log_probs, r_n, r_b, last, tokens):
    T = log_probs.shape[0]
    H = r_n.shape[0]
    K = tokens.shape[0]
    new_n = np.full((H, K, T), NEG_INF)
    new_b = np.full((H, K, T), NEG_INF)
    psi = np.full((H, K), NEG_INF)
    phi = np.empty(T)
    for h in range(H):
        for j in range(K):
            c = tokens[j]
            for t in range(T):
                if c == last[h]:
                    phi[t] = r_b[h, t]
                else:
                    phi[t] = _lse2(r_b[h, t], r_n[h, t])
            if last[h] < 0:
                new_n[h, j, 0] = log_probs[0, c]
            p = new_n[h, j, 0]
            for t in range(1, T):
                new_n[h, j, t] = _lse2(new_n[h, j, t - 1], phi[t - 1]) + log_probs[t, c]
                new_b[h, j, t] = _lse2(new_b[h, j, t - 1], new_n[h, j, t - 1]) + log_probs[t, 0]
                p = _lse2(p, phi[t - 1] + log_probs[t, c])
            psi[h, j] = p
    return new_n, new_b, psi


@njit(cache=True)
def edit_distance_table(ref, hyp):
    n = ref.shape[0]
    m = hyp.shape[0]
    big = n + m + 1
    gap = big + 1
    d = np.empty((n + 1, m + 1), dtype=np.int64)
    for i in range(n + 1):
        d[i, 0] = i * gap
    for j in range(m + 1):
        d[0, j] = j * gap
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            best = d[i - 1, j - 1] + (0 if ref[i - 1] == hyp[j - 1] else big)
            if d[i - 1, j] + gap < best:
                best = d[i - 1, j] + gap
            if d[i, j - 1] + gap < best:
                best = d[i, j - 1] + gap
            d[i, j] = best
    return d, big


@njit(cache=True)
def edit_ops(ref, hyp):
    d, big = edit_distance_table(ref, hyp)
    gap = big + 1
    i = ref.shape[0]
    j = hyp.shape[0]
    subs = 0
    dels = 0
    ins = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            if d[i, j] == d[i - 1, j - 1] + big * cost:
                subs += cost
                i -= 1
                j -= 1
                continue
        if i > 0 and d[i, j] == d[i - 1, j] + gap:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return subs, dels, ins
