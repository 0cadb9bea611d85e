"""Compiled inner loops for permutation scans.

A scan applies one single-triplet MF step per position and re-evaluates the
validation accuracy after each step. A step only touches one user row and two
item rows, so the cached score matrix is patched in place and each user's
ranking is maintained incrementally.

Evaluation state (``E`` evaluated users, ``V`` items, ``cap = k + slack``):

``S``       E x V scores (entries under ``mask`` are never read)
``mask``    E x V exclusion flags (training items)
``target``  E x V held-out target flags
``norm``    per-user normalizer (IDCG, or min(k, |targets|) for recall)
``gain``    rank discounts (``1/log2(r+2)`` for NDCG, ones for recall)
``bs, bi``  E x cap buffer of the best (score, item) pairs, ordered by score
            descending then item ascending; exact top-``cap`` of the user
``cnt``     filled length of each buffer (< cap only if candidates run out)
``val``     per-user metric value
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _dot(a, b):
    acc = 0.0
    for t in range(a.shape[0]):
        acc += a[t] * b[t]
    return acc


@njit(cache=True)
def _better(s1, i1, s2, i2):
    return s1 > s2 or (s1 == s2 and i1 < i2)


@njit(cache=True)
def _rescan(S, mask, e, bs, bi, cnt):
    V = S.shape[1]
    cap = bs.shape[1]
    c = 0
    for v in range(V):
        if mask[e, v]:
            continue
        s = S[e, v]
        if c < cap:
            pos = c
            c += 1
        elif s > bs[e, cap - 1]:
            pos = cap - 1
        else:
            continue
        while pos > 0 and s > bs[e, pos - 1]:
            bs[e, pos] = bs[e, pos - 1]
            bi[e, pos] = bi[e, pos - 1]
            pos -= 1
        bs[e, pos] = s
        bi[e, pos] = v
    cnt[e] = c


@njit(cache=True)
def _user_value(target, e, k, norm, gain, bi, cnt):
    acc = 0.0
    for r in range(min(k, cnt[e])):
        if target[e, bi[e, r]]:
            acc += gain[r]
    return acc / norm[e]


@njit(cache=True)
def _remove(bs, bi, e, c, p):
    for r in range(p, c - 1):
        bs[e, r] = bs[e, r + 1]
        bi[e, r] = bi[e, r + 1]


@njit(cache=True)
def _insert(bs, bi, e, c, s, x):
    # c < cap entries present; returns the new length
    pos = c
    while pos > 0 and _better(s, x, bs[e, pos - 1], bi[e, pos - 1]):
        bs[e, pos] = bs[e, pos - 1]
        bi[e, pos] = bi[e, pos - 1]
        pos -= 1
    bs[e, pos] = s
    bi[e, pos] = x
    return c + 1


@njit(cache=True)
def _find(bi, e, c, x):
    for r in range(c):
        if bi[e, r] == x:
            return r
    return -1


@njit(cache=True)
def _update_item(S, mask, e, x, new, bs, bi, cnt):
    """Set ``S[e, x] = new`` keeping the buffer exact. Returns True if the buffer changed."""
    cap = bs.shape[1]
    old = S[e, x]
    S[e, x] = new
    c = cnt[e]
    if c < cap:
        # every candidate is buffered
        p = _find(bi, e, c, x)
        _remove(bs, bi, e, c, p)
        _insert(bs, bi, e, c - 1, new, x)
        return True
    ls = bs[e, cap - 1]
    li = bi[e, cap - 1]
    member = x == li or _better(old, x, ls, li)
    if member:
        p = _find(bi, e, c, x)
        if p < 0:
            member = False
    if member:
        if new >= old or (p < cap - 1 and _better(new, x, ls, li)):
            _remove(bs, bi, e, c, p)
            _insert(bs, bi, e, c - 1, new, x)
        else:
            _rescan(S, mask, e, bs, bi, cnt)
        return True
    if _better(new, x, ls, li):
        _insert(bs, bi, e, c - 1, new, x)
        return True
    return False


@njit(cache=True)
def _mean(val):
    acc = 0.0
    for e in range(val.shape[0]):
        acc += val[e]
    return acc / val.shape[0]


@njit(cache=True)
def full_eval(P, Q, eval_users, mask, target, norm, gain, k, S, bs, bi, cnt, val):
    """Fill the evaluation state from scratch; return the mean metric."""
    E, V = S.shape
    for e in range(E):
        pu = P[eval_users[e]]
        for v in range(V):
            S[e, v] = 0.0 if mask[e, v] else _dot(pu, Q[v])
        _rescan(S, mask, e, bs, bi, cnt)
        val[e] = _user_value(target, e, k, norm, gain, bi, cnt)
    return _mean(val)


@njit(cache=True)
def refresh(P, Q, u, i, j, eval_rows, eval_users, mask, target, norm, gain, k,
            S, bs, bi, cnt, val, touched):
    """Patch the state after rows ``P[u]``, ``Q[i]``, ``Q[j]`` changed; return the mean.

    Users whose buffer changed are marked in ``touched`` (never cleared here).
    """
    E, V = S.shape
    cap = bs.shape[1]
    eu = eval_rows[u]
    for e in range(E):
        if e == eu:
            continue
        pv = P[eval_users[e]]
        changed = False
        for x in (i, j):
            if mask[e, x]:
                continue
            new = _dot(pv, Q[x])
            if cnt[e] == cap:
                ls = bs[e, cap - 1]
                li = bi[e, cap - 1]
                if x != li and not _better(S[e, x], x, ls, li) and not _better(new, x, ls, li):
                    S[e, x] = new
                    continue
            if _update_item(S, mask, e, x, new, bs, bi, cnt):
                changed = True
        if changed:
            touched[e] = True
            val[e] = _user_value(target, e, k, norm, gain, bi, cnt)
    if eu >= 0:
        pu = P[u]
        for v in range(V):
            if not mask[eu, v]:
                S[eu, v] = _dot(pu, Q[v])
        _rescan(S, mask, eu, bs, bi, cnt)
        val[eu] = _user_value(target, eu, k, norm, gain, bi, cnt)
        touched[eu] = True
    return _mean(val)


@njit(cache=True)
def triplet_grad(P, Q, u, i, j, w, l2, gu, gi, gj):
    """Per-triplet gradient of ``w * softplus(-x) + l2/2 * norms`` into ``gu, gi, gj``."""
    x = 0.0
    for t in range(P.shape[1]):
        x += P[u, t] * (Q[i, t] - Q[j, t])
    g = -w / (1.0 + np.exp(x))
    for t in range(P.shape[1]):
        pu = P[u, t]
        qi = Q[i, t]
        qj = Q[j, t]
        gu[t] = g * (qi - qj) + l2 * pu
        gi[t] = g * pu + l2 * qi
        gj[t] = -g * pu + l2 * qj


@njit(cache=True)
def mf_step(P, Q, u, i, j, w, lr, l2, gu, gi, gj):
    """In-place single-triplet SGD step; False if the update is non-finite."""
    triplet_grad(P, Q, u, i, j, w, l2, gu, gi, gj)
    ok = True
    for t in range(P.shape[1]):
        P[u, t] -= lr * gu[t]
        Q[i, t] -= lr * gi[t]
        Q[j, t] -= lr * gj[t]
        if not (np.isfinite(P[u, t]) and np.isfinite(Q[i, t]) and np.isfinite(Q[j, t])):
            ok = False
    return ok


@njit(cache=True)
def scan_mf(P, Q, us, is_, js, lr, l2, full_acc, tol,
            eval_rows, eval_users, mask, target, norm, gain, k, S, bs, bi, cnt, val, acc_out):
    """Sequential single-triplet steps in the given order.

    ``acc_out[s]`` receives the accuracy after ``s`` steps (``acc_out[0]`` is
    the accuracy of the state passed in). Once the accuracy is within ``tol``
    of ``full_acc`` all later entries repeat the last value.
    Returns the number of steps taken, or ``-(s + 1)`` if step ``s`` produced
    non-finite parameters.
    """
    n = us.shape[0]
    d = P.shape[1]
    E = S.shape[0]
    gu = np.empty(d)
    gi = np.empty(d)
    gj = np.empty(d)
    touched = np.zeros(E, dtype=np.bool_)
    a = _mean(val)
    acc_out[0] = a
    steps = 0
    for s in range(n):
        if abs(full_acc - a) < tol:
            for r in range(s, n):
                acc_out[r + 1] = a
            break
        u, i, j = us[s], is_[s], js[s]
        if not mf_step(P, Q, u, i, j, 1.0, lr, l2, gu, gi, gj):
            return -(s + 1)
        a = refresh(P, Q, u, i, j, eval_rows, eval_users, mask, target, norm, gain, k,
                    S, bs, bi, cnt, val, touched)
        acc_out[s + 1] = a
        steps += 1
    return steps


@njit(cache=True)
def omega_table_mf(P0, Q0, gP, gQ, us, is_, js, lr, l2, betas, cap,
                   eval_rows, eval_users, mask, target, norm, gain, k, out):
    """Covariate marginals ``out[t, g]`` for every triplet at every grid entry.

    For grid entry ``g`` the prefix state is ``theta0 - betas[g] * (G - g_t)``
    with ``G`` (``gP``, ``gQ``) the summed gradient over all triplets at
    ``theta0``; the marginal is the accuracy change from one further
    single-triplet step on ``t``.
    """
    n = us.shape[0]
    d = P0.shape[1]
    E, V = mask.shape
    P = np.empty_like(P0)
    Q = np.empty_like(Q0)
    S = np.empty((E, V))
    bs = np.empty((E, cap))
    bi = np.empty((E, cap), dtype=np.int64)
    cnt = np.empty(E, dtype=np.int64)
    val = np.empty(E)
    S_b = np.empty((E, V))
    bs_b = np.empty((E, cap))
    bi_b = np.empty((E, cap), dtype=np.int64)
    cnt_b = np.empty(E, dtype=np.int64)
    val_b = np.empty(E)
    touched = np.zeros(E, dtype=np.bool_)
    g0u = np.empty(d)
    g0i = np.empty(d)
    g0j = np.empty(d)
    gu = np.empty(d)
    gi = np.empty(d)
    gj = np.empty(d)
    for g in range(betas.shape[0]):
        beta = betas[g]
        for r in range(P0.shape[0]):
            for t in range(d):
                P[r, t] = P0[r, t] - beta * gP[r, t]
        for r in range(Q0.shape[0]):
            for t in range(d):
                Q[r, t] = Q0[r, t] - beta * gQ[r, t]
        full_eval(P, Q, eval_users, mask, target, norm, gain, k, S_b, bs_b, bi_b, cnt_b, val_b)
        S[:, :] = S_b
        bs[:, :] = bs_b
        bi[:, :] = bi_b
        cnt[:] = cnt_b
        val[:] = val_b
        for x in range(n):
            u, i, j = us[x], is_[x], js[x]
            triplet_grad(P0, Q0, u, i, j, 1.0, l2, g0u, g0i, g0j)
            for t in range(d):
                P[u, t] += beta * g0u[t]
                Q[i, t] += beta * g0i[t]
                Q[j, t] += beta * g0j[t]
            a_prefix = refresh(P, Q, u, i, j, eval_rows, eval_users, mask, target, norm, gain, k,
                               S, bs, bi, cnt, val, touched)
            mf_step(P, Q, u, i, j, 1.0, lr, l2, gu, gi, gj)
            a_joined = refresh(P, Q, u, i, j, eval_rows, eval_users, mask, target, norm, gain, k,
                               S, bs, bi, cnt, val, touched)
            out[x, g] = a_joined - a_prefix
            # undo: scores changed only in columns i, j and row u; buffers only where touched
            for e in range(E):
                S[e, i] = S_b[e, i]
                S[e, j] = S_b[e, j]
                if touched[e]:
                    for r in range(cap):
                        bs[e, r] = bs_b[e, r]
                        bi[e, r] = bi_b[e, r]
                    cnt[e] = cnt_b[e]
                    val[e] = val_b[e]
                    touched[e] = False
            eu = eval_rows[u]
            if eu >= 0:
                for v in range(V):
                    S[eu, v] = S_b[eu, v]
            for t in range(d):
                P[u, t] = P0[u, t] - beta * gP[u, t]
                Q[i, t] = Q0[i, t] - beta * gQ[i, t]
                Q[j, t] = Q0[j, t] - beta * gQ[j, t]
    return out


@njit(cache=True)
def sgd_epoch_mf(P, Q, us, is_, js, ws, order, lr, l2):
    """One pass of single-triplet steps in ``order``; returns ``-(x + 1)`` on a non-finite step at triplet ``x``."""
    d = P.shape[1]
    gu = np.empty(d)
    gi = np.empty(d)
    gj = np.empty(d)
    for s in range(order.shape[0]):
        x = order[s]
        if not mf_step(P, Q, us[x], is_[x], js[x], ws[x], lr, l2, gu, gi, gj):
            return -(x + 1)
    return order.shape[0]
