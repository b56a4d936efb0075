"""Independent reference implementations for the frozen test values.

Everything here is plain Python floats and loops. Nothing imports the
package under test, so a bug there cannot leak into an expected value.
"""
from __future__ import annotations

import itertools
import math


def sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


def matvec(W, x):
    return [sum(W[r][k] * x[k] for k in range(len(x))) for r in range(len(W))]


def lstm_step(x, h, c, w_ih, w_hh, b_ih, b_hh):
    """One LSTM step, gates in order input, forget, cell, output."""
    H = len(h)
    a = matvec(w_ih, x)
    b = matvec(w_hh, h)
    pre = [a[r] + b[r] + b_ih[r] + b_hh[r] for r in range(4 * H)]
    h_new, c_new = [], []
    for j in range(H):
        i = sigmoid(pre[j])
        f = sigmoid(pre[H + j])
        g = math.tanh(pre[2 * H + j])
        o = sigmoid(pre[3 * H + j])
        cj = f * c[j] + i * g
        c_new.append(cj)
        h_new.append(o * math.tanh(cj))
    return h_new, c_new


def sparsemax(z):
    """Euclidean projection onto the simplex by enumerating every support set.

    The unique feasible candidate satisfies the KKT conditions: positive on
    its support, and every excluded coordinate lies at or below the threshold.
    """
    n = len(z)
    best = None
    for size in range(1, n + 1):
        for support in itertools.combinations(range(n), size):
            tau = (sum(z[i] for i in support) - 1.0) / size
            if any(z[i] - tau <= 0 for i in support):
                continue
            if any(z[j] > tau for j in range(n) if j not in support):
                continue
            p = [z[i] - tau if i in support else 0.0 for i in range(n)]
            dist = sum((p[i] - z[i]) ** 2 for i in range(n))
            if best is None or dist < best[0]:
                best = (dist, p)
    return best[1]


def _get(params, name):
    v = params[name]
    return v.tolist() if hasattr(v, "tolist") else v


def _run_direction(xs, params, prefix, h, c, reverse):
    T = len(xs)
    order = range(T - 1, -1, -1) if reverse else range(T)
    out = [None] * T
    w = [_get(params, f"{prefix}.{k}") for k in ("w_ih", "w_hh", "b_ih", "b_hh")]
    for t in order:
        h, c = lstm_step(xs[t], h, c, *w)
        out[t] = h
    return out, h, c


def run_stack(xs, params, stack, layers, hidden, init=None):
    """Returns top-layer per-step states and the last (h, c) per (layer, dir)."""
    last = []
    for layer in range(layers):
        outs = []
        for k, d in enumerate(("fwd", "bwd")):
            if init is None:
                h0, c0 = [0.0] * hidden, [0.0] * hidden
            else:
                h0, c0 = init[2 * layer + k]
            seq, h, c = _run_direction(xs, params, f"{stack}.l{layer}.{d}", h0, c0, d == "bwd")
            outs.append(seq)
            last.append((h, c))
        xs = [outs[0][t] + outs[1][t] for t in range(len(xs))]
    return xs, last


def attention(dec, enc):
    T = len(dec)
    scores = [[sum(a * b for a, b in zip(dec[t], enc[s])) for s in range(T)] for t in range(T)]
    alpha = [sparsemax(row) for row in scores]
    context = [[sum(alpha[t][s] * enc[s][k] for s in range(T)) for k in range(len(enc[0]))]
               for t in range(T)]
    attn = [context[t] + dec[t] for t in range(T)]
    return scores, alpha, context, attn


def forward(X, params, layers, hidden):
    """Full pipeline on one window ``X`` (list of feature lists); raw head output."""
    enc, last = run_stack(X, params, "encoder", layers, hidden)
    dec, _ = run_stack(X, params, "decoder", layers, hidden, init=last)
    _, _, _, attn = attention(dec, enc)
    W1, b1 = _get(params, "head.dense1.weight"), _get(params, "head.dense1.bias")
    W2, b2 = _get(params, "head.dense2.weight"), _get(params, "head.dense2.bias")
    out = []
    for a in attn:
        z = [math.tanh(v + b) for v, b in zip(matvec(W1, a), b1)]
        out.append([v + b for v, b in zip(matvec(W2, z), b2)])
    return out


def hand_param_count(F, H, A, layers):
    """Count entries tensor by tensor."""
    total = 0
    for _stack in ("encoder", "decoder"):
        for layer in range(layers):
            width = F if layer == 0 else 2 * H
            for _d in ("fwd", "bwd"):
                total += 4 * H * width      # w_ih
                total += 4 * H * H          # w_hh
                total += 4 * H + 4 * H      # b_ih, b_hh
    total += H * 4 * H + H                  # dense1
    total += A * H + A                      # dense2
    return total


# -- metrics over flat lists ----------------------------------------------------

def mae(p, y):
    return sum(abs(a - b) for a, b in zip(p, y)) / len(y)


def rmse(p, y):
    return math.sqrt(sum((a - b) ** 2 for a, b in zip(p, y)) / len(y))


def eacc(p, y):
    return 1.0 - sum(abs(a - b) for a, b in zip(p, y)) / (2.0 * sum(y))


def nde(p, y):
    return sum((a - b) ** 2 for a, b in zip(p, y)) / sum(b * b for b in y)


def binomial_central_interval(n, p, mass=0.99):
    """Smallest lo and largest hi with P(X < lo) <= tail and P(X > hi) <= tail."""
    tail = (1.0 - mass) / 2.0
    pmf = [math.comb(n, k) * p ** k * (1 - p) ** (n - k) for k in range(n + 1)]
    lo, acc = 0, 0.0
    while acc + pmf[lo] <= tail:
        acc += pmf[lo]
        lo += 1
    hi, acc = n, 0.0
    while acc + pmf[hi] <= tail:
        acc += pmf[hi]
        hi -= 1
    return lo, hi
