"""Compiled inner loops for network training.

Networks are processed one at a time inside each epoch so that a network's
parameters stay cache-resident across its mini-batches; the large products
go through BLAS via ``np.dot``.  No fastmath: the operation order is fixed,
which is what makes results independent of how networks are grouped.
"""

from __future__ import annotations

import numpy as np
from numba import njit
from numba.typed import List

GAUSSIAN, BERNOULLI, POISSON, BINOMIAL = 0, 1, 2, 3
FAMILY_CODES = {"gaussian": GAUSSIAN, "bernoulli": BERNOULLI, "poisson": POISSON, "binomial": BINOMIAL}

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S32 = np.uint64(32)


@njit(cache=True, nogil=True)
def counter_bits(key, counter):
    """High 32 bits of the SplitMix64 output for ``counter`` under ``key``."""
    z = key + (counter + np.uint64(1)) * _GOLDEN
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    z = z ^ (z >> _S31)
    return z >> _S32


@njit(cache=True, nogil=True)
def _loss_and_dloss(fam, n_trial, y, f):
    if fam == GAUSSIAN:
        return 0.5 * f * f - y * f, f - y
    if fam == POISSON:
        e = np.exp(f)
        return e - y * f, e - y
    k = 1.0 if fam == BERNOULLI else float(n_trial)
    e = np.exp(-abs(f))
    sp = np.log1p(e) + max(f, 0.0)
    if f >= 0:
        sig = 1.0 / (1.0 + e)
    else:
        sig = e / (1.0 + e)
    return k * sp - y * f, k * sig - y


@njit(cache=True, nogil=True)
def batch_grad(ws, bs, xb, yb, m, mults, use_mult, F, fam, n_trial, acts, gates, deltas, gws, gbs):
    """Gradient of the mean loss over the first m rows of (xb, yb), into gws/gbs.

    ws[l] is (fan_in, fan_out), bs[l] is (fan_out,).  acts, gates, deltas
    and mults are per-hidden-layer scratch buffers with at least m rows;
    mults holds the scaled dropout keep factors when ``use_mult``.  The
    output clamp acts on the value; its gradient is the identity inside
    [-F, F] and outside it only where descent moves the output back inward.
    Returns the summed (not averaged) batch loss.
    """
    L = len(ws)
    dt = xb.dtype.type
    a = xb[:m]
    for l in range(L - 1):
        z = acts[l][:m]
        np.dot(a, ws[l], z)
        h = z.shape[1]
        gate = gates[l]
        b = bs[l]
        mult = mults[l]
        for i in range(m):
            for j in range(h):
                v = z[i, j] + b[j]
                if v > 0:
                    c = mult[i, j] if use_mult else dt(1.0)
                else:
                    c = dt(0.0)
                gate[i, j] = c
                z[i, j] = v * c
        a = z
    # output layer by hand: it is a single column
    wl = ws[L - 1]
    bl = bs[L - 1]
    h = wl.shape[0]
    delta = np.empty(m, dtype=xb.dtype)
    total = 0.0
    for i in range(m):
        o = bl[0]
        for j in range(h):
            o += a[i, j] * wl[j, 0]
        raw = o
        if o > F:
            o = dt(F)
        elif o < -F:
            o = dt(-F)
        lo, g = _loss_and_dloss(fam, n_trial, yb[i], o)
        # outside the clamp only a step back toward [-F, F] passes through
        if (raw > F and g < 0) or (raw < -F and g > 0):
            g = 0.0
        total += lo
        delta[i] = g / m
    gwl = gws[L - 1]
    gate = gates[L - 2]
    dl = deltas[L - 2][:m]
    sb = dt(0.0)
    for i in range(m):
        sb += delta[i]
    gbs[L - 1][0] = sb
    for j in range(h):
        s = dt(0.0)
        for i in range(m):
            s += a[i, j] * delta[i]
        gwl[j, 0] = s
    for i in range(m):
        for j in range(h):
            dl[i, j] = delta[i] * wl[j, 0] * gate[i, j]
    for l in range(L - 2, -1, -1):
        prev = xb[:m] if l == 0 else acts[l - 1][:m]
        np.dot(prev.T, dl, gws[l])
        gb = gbs[l]
        for j in range(dl.shape[1]):
            s = dt(0.0)
            for i in range(m):
                s += dl[i, j]
            gb[j] = s
        if l > 0:
            nd = deltas[l - 1][:m]
            np.dot(dl, ws[l].T, nd)
            gate = gates[l - 1]
            for i in range(m):
                for j in range(nd.shape[1]):
                    nd[i, j] *= gate[i, j]
            dl = nd
    return total


@njit(cache=True, nogil=True)
def scratch(Ws, rows, dtype_like):
    """Per-hidden-layer (rows, width) buffers: acts, gates, deltas, mults."""
    acts = List()
    gates = List()
    deltas = List()
    mults = List()
    for l in range(len(Ws) - 1):
        h = Ws[l].shape[-1]
        acts.append(np.empty((rows, h), dtype=dtype_like.dtype))
        gates.append(np.empty((rows, h), dtype=dtype_like.dtype))
        deltas.append(np.empty((rows, h), dtype=dtype_like.dtype))
        mults.append(np.empty((rows, h), dtype=dtype_like.dtype))
    return acts, gates, deltas, mults


@njit(cache=True, nogil=True)
def train_epoch(Ws, Bs, Xs, ys, perm, keys, epoch, threshold, keep_scale, bsz,
                lr, wd, F, fam, n_trial, use_dropout, loss_out):
    """One SGD epoch for every network in the stack.

    Ws[l] is (K, fan_in, fan_out), Bs[l] is (K, fan_out); network k visits
    its rows in the order perm[k].  Dropout keep decisions come from
    counter_bits(keys[k], position) with positions numbered per epoch.
    """
    K, r, p = Xs.shape
    L = len(Ws)
    dt = Xs.dtype.type
    H = 0
    for l in range(L - 1):
        H += Ws[l].shape[2]
    step = dt(lr)
    decay = dt(wd)
    base = np.uint64(epoch) * np.uint64(r) * np.uint64(H)
    acts, gates, deltas, mults = scratch(Ws, bsz, Xs)
    xb = np.empty((bsz, p), dtype=Xs.dtype)
    yb = np.empty(bsz, dtype=Xs.dtype)
    gws = List()
    gbs = List()
    for l in range(L):
        gws.append(np.empty_like(Ws[l][0]))
        gbs.append(np.empty_like(Bs[l][0]))
    for k in range(K):
        ws = List()
        bs = List()
        for l in range(L):
            ws.append(Ws[l][k])
            bs.append(Bs[l][k])
        key = keys[k]
        s = 0
        while s < r:
            m = min(bsz, r - s)
            for i in range(m):
                row = perm[k, s + i]
                for c in range(p):
                    xb[i, c] = Xs[k, row, c]
                yb[i] = ys[k, row]
            if use_dropout:
                off = 0
                for l in range(L - 1):
                    mt = mults[l]
                    h = mt.shape[1]
                    for i in range(m):
                        pos = base + np.uint64((s + i) * H + off)
                        for j in range(h):
                            bits = counter_bits(key, pos + np.uint64(j))
                            mt[i, j] = keep_scale if bits >= threshold else dt(0.0)
                    off += h
            loss_out[k] += batch_grad(ws, bs, xb, yb, m, mults, use_dropout, F, fam, n_trial,
                                      acts, gates, deltas, gws, gbs)
            for l in range(L):
                w = ws[l]
                gw = gws[l]
                for a in range(w.shape[0]):
                    for b in range(w.shape[1]):
                        w[a, b] = w[a, b] - step * (gw[a, b] + decay * w[a, b])
                bv = bs[l]
                gb = gbs[l]
                for b in range(bv.shape[0]):
                    bv[b] = bv[b] - step * gb[b]
            s += m
