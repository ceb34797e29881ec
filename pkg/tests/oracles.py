"""Slow scalar-loop references, written independently of the vectorized code."""
import math

import numpy as np


def standardize_loop(x, eps=1e-8):
    B, P, T, D = x.shape
    out = np.zeros_like(x)
    for p in range(P):
        for t in range(T):
            for d in range(D):
                col = [x[b, p, t, d] for b in range(B)]
                mu = sum(col) / B
                sd = math.sqrt(sum((v - mu) ** 2 for v in col) / B)
                for b in range(B):
                    out[b, p, t, d] = (col[b] - mu) / (sd + eps)
    return out


def corr_loop(a, b):
    """C[p, t, i, j] = (1/B) sum_b a[b,p,t,i] * b[b,p,t,j]."""
    B, P, T, D = a.shape
    c = np.zeros((P, T, D, D))
    for p in range(P):
        for t in range(T):
            for i in range(D):
                for j in range(D):
                    c[p, t, i, j] = sum(a[k, p, t, i] * b[k, p, t, j] for k in range(B)) / B
    return c


def cross_corr_loop(student, teacher):
    return corr_loop(standardize_loop(student), standardize_loop(teacher))


def self_corr_loop(student):
    s = standardize_loop(student)
    return corr_loop(s, s)


def _log_sigmoid(v):
    return -math.log1p(math.exp(-v)) if v >= 0 else v - math.log1p(math.exp(v))


def _cos(u, v):
    nu = max(math.sqrt(sum(x * x for x in u)), 1e-8)
    nv = max(math.sqrt(sum(x * x for x in v)), 1e-8)
    return sum(x * y for x, y in zip(u, v)) / (nu * nv)


def cos_term_loop(student, teacher):
    B, P, T, _ = student.shape
    total = 0.0
    for b in range(B):
        for p in range(P):
            for t in range(T):
                total += _log_sigmoid(_cos(student[b, p, t], teacher[b, p, t]))
    return total / B


def kd_loop(student, teacher, gamma=1.0):
    B, P, T, D = student.shape
    l1 = 0.0
    for b in range(B):
        for p in range(P):
            for t in range(T):
                l1 += sum(abs(teacher[b, p, t, d] - student[b, p, t, d]) for d in range(D)) / D
    return l1 / B - gamma * cos_term_loop(student, teacher)


def bt_loop(y1, y2, lam=5e-3):
    """Two-dimensional (B, D) views."""
    B, D = y1.shape
    loss = 0.0
    for i in range(D):
        for j in range(D):
            num = sum(y1[b, i] * y2[b, j] for b in range(B))
            den = math.sqrt(sum(y1[b, i] ** 2 for b in range(B))) * math.sqrt(sum(y2[b, j] ** 2 for b in range(B)))
            c = num / den
            loss += (1 - c) ** 2 if i == j else lam * c * c
    return loss


def cl_loop(student, teacher, gamma=1.0, lambda_cc=5e-5, lambda_sc=5e-6):
    _, P, T, D = student.shape
    cc = cross_corr_loop(student, teacher)
    sc = self_corr_loop(student)
    diag = off = soff = 0.0
    for p in range(P):
        for t in range(T):
            for i in range(D):
                for j in range(D):
                    if i == j:
                        diag += (1 - cc[p, t, i, i]) ** 2
                    else:
                        off += cc[p, t, i, j] ** 2
                        soff += sc[p, t, i, j] ** 2
    n = P * T
    return diag / n + lambda_cc * off / n + lambda_sc * soff / n - gamma * cos_term_loop(student, teacher)


def heuristic_loop(snr):
    # straight line through (10, 1/5e-5) and (20, 1/5e-7) in reciprocal space
    inv = 1 / 5e-5 + (snr - 10) * (1 / 5e-7 - 1 / 5e-5) / 10
    return 1 / inv


def random_reps(rng, B=None, P=3, T=None, D=None):
    B = B or int(rng.integers(2, 7))
    T = T or int(rng.integers(1, 4))
    D = D or int(rng.integers(2, 7))
    return rng.normal(size=(B, P, T, D)), rng.normal(size=(B, P, T, D))
