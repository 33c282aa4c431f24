"""Straight-line reference implementations used as independent test oracles.

Everything here is written with explicit Python loops over scalars so it
shares no code path with the vectorized library versions.
"""
from __future__ import annotations

import math

import numpy as np


def conv1d_loop(x, w, b, stride=1):
    """x [B, Cin, L], w [Cout, Cin, K] -> [B, Cout, Lout]."""
    bsz, cin, length = x.shape
    cout, _, k = w.shape
    lout = (length - k) // stride + 1
    y = np.zeros((bsz, cout, lout))
    for n in range(bsz):
        for o in range(cout):
            for t in range(lout):
                acc = b[o]
                for c in range(cin):
                    for j in range(k):
                        acc += w[o, c, j] * x[n, c, t * stride + j]
                y[n, o, t] = acc
    return y


def maxpool_loop(x, k):
    bsz, ch, length = x.shape
    lout = length // k
    y = np.zeros((bsz, ch, lout))
    for n in range(bsz):
        for c in range(ch):
            for t in range(lout):
                y[n, c, t] = max(x[n, c, t * k + j] for j in range(k))
    return y


def dense_loop(x, w, b):
    out = np.zeros((x.shape[0], w.shape[0]))
    for n in range(x.shape[0]):
        for o in range(w.shape[0]):
            out[n, o] = b[o] + sum(w[o, i] * x[n, i] for i in range(w.shape[1]))
    return out


def supcon_double_loop(z, labels, tau):
    """Mean over anchors with at least one positive of
    -1/|P(j)| sum_p log(exp(z_j.z_p/tau) / sum_{q != j} exp(z_j.z_q/tau))."""
    n = len(labels)
    total, count = 0.0, 0
    for j in range(n):
        positives = [p for p in range(n) if p != j and labels[p] == labels[j]]
        if not positives:
            continue
        denom = 0.0
        for q in range(n):
            if q != j:
                denom += math.exp(float(np.dot(z[j], z[q])) / tau)
        acc = 0.0
        for p in positives:
            acc += math.log(math.exp(float(np.dot(z[j], z[p])) / tau) / denom)
        total += -acc / len(positives)
        count += 1
    return total / count if count else 0.0


def softmax_row(v):
    m = max(v)
    e = [math.exp(a - m) for a in v]
    s = sum(e)
    return [a / s for a in e]


def kl_scalar(p, q):
    return sum(pi * math.log(pi / qi) for pi, qi in zip(p, q) if pi > 0)


def kd_scalar(teacher, student, tau):
    """tau^2 / B * sum_i KL(softmax(t_i / tau) || softmax(s_i / tau))."""
    total = 0.0
    for t, s in zip(teacher, student):
        total += kl_scalar(softmax_row([a / tau for a in t]), softmax_row([a / tau for a in s]))
    return tau * tau * total / len(teacher)


def cosine(a, b):
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def moon_scalar(z, zg, zp, tau):
    total = 0.0
    for i in range(len(z)):
        a = math.exp(cosine(z[i], zg[i]) / tau)
        b = math.exp(cosine(z[i], zp[i]) / tau)
        total += -math.log(a / (a + b))
    return total / len(z)


def entropy_rows(probs):
    return sum(-sum(p * math.log(p) for p in row if p > 0) for row in probs) / len(probs)


def central_difference(f, x, h=1e-5):
    """Numerical gradient of scalar ``f`` at array ``x`` (x is restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def max_rel_error(analytic, numeric, floor=1e-6):
    a = np.asarray(analytic).ravel()
    n = np.asarray(numeric).ravel()
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))
