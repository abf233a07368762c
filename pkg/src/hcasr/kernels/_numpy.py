"""Pure-numpy versions of the DP kernels, vectorized over the non-recurrent axis."""

import numpy as np

NEG_INF = -np.inf


def _lse(*arrays):
    stacked = np.stack(np.broadcast_arrays(*arrays))
    m = stacked.max(axis=0)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = safe + np.log(np.exp(stacked - safe).sum(axis=0))
    return np.where(np.isfinite(m), out, m)


def _shift(x, k):
    out = np.full_like(x, NEG_INF)
    if k < x.shape[-1]:
        out[..., k:] = x[..., : x.shape[-1] - k]
    return out


def _unshift(x, k):
    out = np.full_like(x, NEG_INF)
    if k < x.shape[-1]:
        out[..., : x.shape[-1] - k] = x[..., k:]
    return out


def ctc_forward_backward(log_probs, ext):
    T, C = log_probs.shape
    S = ext.shape[0]
    emit = log_probs[:, ext]
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != 0) & (ext[2:] != ext[:-2])
    skip_back = np.zeros(S, dtype=bool)
    skip_back[:-2] = skip[2:]

    alpha = np.full((T, S), NEG_INF)
    alpha[0, : min(2, S)] = emit[0, : min(2, S)]
    for t in range(1, T):
        prev = alpha[t - 1]
        two = np.where(skip, _shift(prev, 2), NEG_INF)
        alpha[t] = _lse(prev, _shift(prev, 1), two) + emit[t]

    log_lik = float(_lse(*alpha[T - 1, max(0, S - 2):]))
    grad = np.zeros((T, C))
    if log_lik == NEG_INF:
        return log_lik, grad

    beta = np.full((T, S), NEG_INF)
    beta[T - 1, max(0, S - 2):] = emit[T - 1, max(0, S - 2):]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        two = np.where(skip_back, _unshift(nxt, 2), NEG_INF)
        beta[t] = _lse(nxt, _unshift(nxt, 1), two) + emit[t]

    ab = alpha + beta
    acc = np.full((T, C), NEG_INF)
    for k in np.unique(ext):
        acc[:, k] = _lse(*ab[:, ext == k].T)
    finite = np.isfinite(acc)
    grad[finite] = -np.exp(acc[finite] - log_probs[finite] - log_lik)
    return log_lik, grad


def ctc_prefix_extend(log_probs, r_n, r_b, last, tokens):
    T = log_probs.shape[0]
    H = r_n.shape[0]
    K = tokens.shape[0]
    x_c = log_probs[:, tokens].T[None, :, :]  # (1, K, T)
    x_blank = log_probs[:, 0][None, None, :]
    same = last[:, None] == tokens[None, :]
    phi = np.where(same[:, :, None], r_b[:, None, :], _lse(r_b, r_n)[:, None, :])

    new_n = np.full((H, K, T), NEG_INF)
    new_b = np.full((H, K, T), NEG_INF)
    empty = last < 0
    new_n[empty, :, 0] = x_c[0, :, 0]
    for t in range(1, T):
        new_n[:, :, t] = _lse(new_n[:, :, t - 1], phi[:, :, t - 1]) + x_c[:, :, t]
        new_b[:, :, t] = _lse(new_b[:, :, t - 1], new_n[:, :, t - 1]) + x_blank[:, :, t]
    terms = np.concatenate([new_n[:, :, :1], phi[:, :, :-1] + x_c[:, :, 1:]], axis=2)
    psi = _lse(*np.moveaxis(terms, 2, 0))
    return new_n, new_b, psi


def edit_distance_table(ref, hyp):
    """Composite cost ``errors * big + indels``; returns ``(table, big)``."""
    n, m = ref.shape[0], hyp.shape[0]
    big = n + m + 1
    gap = big + 1
    d = np.empty((n + 1, m + 1), dtype=np.int64)
    offs = np.arange(m + 1) * gap
    d[0] = offs
    for i in range(1, n + 1):
        cand = np.empty(m + 1, dtype=np.int64)
        cand[0] = i * gap
        cand[1:] = np.minimum(d[i - 1, :-1] + big * (ref[i - 1] != hyp), d[i - 1, 1:] + gap)
        # insertions chain along the row: row[j] = min_k<=j (cand[k] + (j - k) * gap)
        d[i] = np.minimum.accumulate(cand - offs) + offs
    return d, big


def edit_ops(ref, hyp):
    d, big = edit_distance_table(ref, hyp)
    gap = big + 1
    i, j = ref.shape[0], hyp.shape[0]
    subs = dels = ins = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            cost = int(ref[i - 1] != hyp[j - 1])
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
