"""Pure numpy implementation of the pointer-network forward/backward kernels.

Both kernel backends share one calling convention so ``seq2slate.kernels``
can swap them freely:

``forward(Xe, Xd, go, dec_mask, We, be, Wd, bd, Wenc, Wdec, v, mode, perm, uniforms, n_steps)``
    Xe        (B, n, m)  encoder inputs, already projected and dropped out
    Xd        (B, n, m)  projected item vectors fed back into the decoder
    go        (m,)       first decoder input
    dec_mask  (B, T, m)  multiplicative dropout mask on decoder inputs
    We, Wd    (m + r, 4r) LSTM weights, gate order (input, forget, output, cell)
    be, bd    (4r,)
    Wenc, Wdec (r, r), v (r,)
    mode      FORCED, GREEDY or SAMPLE
    perm      (B, n) int64; read in FORCED mode, written otherwise
    uniforms  (B, n) draws in [0, 1) used by SAMPLE mode
    n_steps   T, number of decoder steps (n for sequential, 1 for one-step)

It returns ``(S, perm, cache)`` with ``S`` of shape (B, T, n). Scores of
already placed items are still computed; callers mask them.

``backward(cache, dS, We, Wd, Wenc, Wdec, v)`` takes dL/dS and returns a dict
of batch-summed parameter gradients plus per-instance ``dXe`` and ``dXd``.
"""

from __future__ import annotations

import numpy as np

FORCED = 0
GREEDY = 1
SAMPLE = 2


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _lstm_step(u, h, c, W, b):
    r = h.shape[-1]
    z = np.concatenate([u, h], axis=-1) @ W + b
    i = _sigmoid(z[..., :r])
    f = _sigmoid(z[..., r:2 * r])
    o = _sigmoid(z[..., 2 * r:3 * r])
    g = np.tanh(z[..., 3 * r:])
    c_new = f * c + i * g
    h_new = o * np.tanh(c_new)
    return h_new, c_new, np.concatenate([i, f, o, g], axis=-1)


def _lstm_step_back(dh, dc, u, h_prev, c_prev, c, gates, W):
    """Backprop through one LSTM step; returns (dz, du, dh_prev, dc_prev)."""
    r = h_prev.shape[-1]
    m = u.shape[-1]
    i, f, o, g = (gates[..., k * r:(k + 1) * r] for k in range(4))
    tc = np.tanh(c)
    do = dh * tc
    dc = dc + dh * o * (1.0 - tc * tc)
    di = dc * g
    dg = dc * i
    df = dc * c_prev
    dc_prev = dc * f
    dz = np.concatenate(
        [di * i * (1.0 - i), df * f * (1.0 - f), do * o * (1.0 - o), dg * (1.0 - g * g)],
        axis=-1,
    )
    dx = dz @ W.T
    return dz, dx[..., :m], dx[..., m:], dc_prev


def forward(Xe, Xd, go, dec_mask, We, be, Wd, bd, Wenc, Wdec, v, mode, perm, uniforms, n_steps):
    B, n, m = Xe.shape
    r = Wenc.shape[0]
    T = int(n_steps)
    rows = np.arange(B)

    enc_h = np.zeros((B, n + 1, r))
    enc_c = np.zeros((B, n + 1, r))
    enc_g = np.empty((B, n, 4 * r))
    for t in range(n):
        enc_h[:, t + 1], enc_c[:, t + 1], enc_g[:, t] = _lstm_step(
            Xe[:, t], enc_h[:, t], enc_c[:, t], We, be)
    A = enc_h[:, 1:] @ Wenc.T

    if mode == FORCED:
        perm = np.array(perm, dtype=np.int64, copy=True)
    else:
        perm = np.zeros((B, n), dtype=np.int64)
    placed = np.zeros((B, n), dtype=bool)
    dec_in = np.empty((B, T, m))
    dec_h = np.empty((B, T + 1, r))
    dec_c = np.empty((B, T + 1, r))
    dec_g = np.empty((B, T, 4 * r))
    tanh_act = np.empty((B, T, n, r))
    S = np.empty((B, T, n))
    dec_h[:, 0] = enc_h[:, n]
    dec_c[:, 0] = enc_c[:, n]
    for j in range(T):
        if j == 0:
            u = np.broadcast_to(go, (B, m))
        else:
            u = Xd[rows, perm[:, j - 1]]
        u = u * dec_mask[:, j]
        dec_in[:, j] = u
        dec_h[:, j + 1], dec_c[:, j + 1], dec_g[:, j] = _lstm_step(
            u, dec_h[:, j], dec_c[:, j], Wd, bd)
        Bq = dec_h[:, j + 1] @ Wdec.T
        tanh_act[:, j] = np.tanh(A + Bq[:, None, :])
        S[:, j] = tanh_act[:, j] @ v
        if mode == GREEDY:
            masked = np.where(placed, -np.inf, S[:, j])
            perm[:, j] = np.argmax(masked, axis=1)
        elif mode == SAMPLE:
            live = ~placed
            top = np.max(np.where(live, S[:, j], -np.inf), axis=1, keepdims=True)
            w = np.where(live, np.exp(np.where(live, S[:, j] - top, 0.0)), 0.0)
            cum = np.cumsum(w, axis=1)
            hit = cum > uniforms[:, j:j + 1] * cum[:, -1:]
            first = np.argmax(hit, axis=1)
            # rounding guard: fall back to the last live index
            none = ~hit.any(axis=1)
            if none.any():
                last_live = n - 1 - np.argmax(live[:, ::-1], axis=1)
                first = np.where(none, last_live, first)
            perm[:, j] = first
        placed[rows, perm[:, j]] = True

    if mode != FORCED and T < n:
        perm[:, T:] = 0

    cache = {
        "Xe": Xe, "enc_h": enc_h, "enc_c": enc_c, "enc_g": enc_g,
        "dec_in": dec_in, "dec_h": dec_h, "dec_c": dec_c, "dec_g": dec_g,
        "tanh": tanh_act, "dec_mask": dec_mask, "perm": perm, "m": m,
    }
    return S, perm, cache


def backward(cache, dS, We, Wd, Wenc, Wdec, v):
    Xe = cache["Xe"]
    enc_h, enc_c, enc_g = cache["enc_h"], cache["enc_c"], cache["enc_g"]
    dec_in, dec_h, dec_c, dec_g = cache["dec_in"], cache["dec_h"], cache["dec_c"], cache["dec_g"]
    tanh_act, dec_mask, perm = cache["tanh"], cache["dec_mask"], cache["perm"]
    B, n, m = Xe.shape
    T = dec_in.shape[1]
    rows = np.arange(B)

    dS = np.asarray(dS, dtype=np.float64)
    dv = np.einsum("bji,bjik->k", dS, tanh_act)
    dpre = dS[..., None] * v * (1.0 - tanh_act * tanh_act)
    dA = dpre.sum(axis=1)
    dBq = dpre.sum(axis=2)
    dWenc = np.einsum("bik,bil->kl", dA, enc_h[:, 1:])
    dWdec = np.einsum("bjk,bjl->kl", dBq, dec_h[:, 1:])
    dE = dA @ Wenc
    dD = dBq @ Wdec

    dWd = np.zeros_like(Wd)
    dbd = np.zeros(Wd.shape[1])
    dgo = np.zeros(m)
    dXd = np.zeros((B, n, m))
    dh = np.zeros((B, enc_h.shape[2]))
    dc = np.zeros_like(dh)
    for j in range(T - 1, -1, -1):
        dh = dh + dD[:, j]
        dz, du, dh, dc = _lstm_step_back(
            dh, dc, dec_in[:, j], dec_h[:, j], dec_c[:, j], dec_c[:, j + 1], dec_g[:, j], Wd)
        dWd += np.concatenate([dec_in[:, j], dec_h[:, j]], axis=1).T @ dz
        dbd += dz.sum(axis=0)
        du = du * dec_mask[:, j]
        if j == 0:
            dgo += du.sum(axis=0)
        else:
            np.add.at(dXd, (rows, perm[:, j - 1]), du)

    dWe = np.zeros_like(We)
    dbe = np.zeros(We.shape[1])
    dXe = np.zeros((B, n, m))
    for t in range(n - 1, -1, -1):
        dh = dh + dE[:, t]
        dz, du, dh, dc = _lstm_step_back(
            dh, dc, Xe[:, t], enc_h[:, t], enc_c[:, t], enc_c[:, t + 1], enc_g[:, t], We)
        dWe += np.concatenate([Xe[:, t], enc_h[:, t]], axis=1).T @ dz
        dbe += dz.sum(axis=0)
        dXe[:, t] = du

    return {
        "We": dWe, "be": dbe, "Wd": dWd, "bd": dbd,
        "Wenc": dWenc, "Wdec": dWdec, "v": dv, "go": dgo,
        "dXe": dXe, "dXd": dXd,
    }
