"""Independent reference implementations used as test oracles.

These are deliberately naive scalar loops that share no code with the package.
"""
from __future__ import annotations

import itertools
import math


def cif_scalar_loop(h, alpha, beta=1.0, tail_threshold=0.5):
    """Sequential accumulate / split / carry over frames, one scalar at a time.

    Returns (tokens, weight_rows, fired_via_tail).
    """
    dim = len(h[0])
    tokens, rows = [], []
    acc = 0.0
    cur = [0.0] * dim
    row = [0.0] * len(h)
    for t, (frame, a) in enumerate(zip(h, alpha)):
        remaining = a
        while acc + remaining >= beta:
            take = beta - acc
            for d in range(dim):
                cur[d] += take * frame[d]
            row[t] += take
            tokens.append(cur)
            rows.append(row)
            remaining -= take
            acc = 0.0
            cur = [0.0] * dim
            row = [0.0] * len(h)
        acc += remaining
        for d in range(dim):
            cur[d] += remaining * frame[d]
        row[t] += remaining
    tail = acc >= tail_threshold * beta
    if tail:
        tokens.append(cur)
        rows.append(row)
    return tokens, rows, tail


def ctc_enumerate(probs, target, blank):
    """-log of the summed probability of every frame path that collapses to ``target``."""
    t_len, classes = len(probs), len(probs[0])
    total = 0.0
    for path in itertools.product(range(classes), repeat=t_len):
        collapsed, prev = [], None
        for s in path:
            if s != prev and s != blank:
                collapsed.append(s)
            prev = s
        if collapsed == list(target):
            p = 1.0
            for t, s in enumerate(path):
                p *= probs[t][s]
            total += p
    return -math.log(total) if total > 0 else math.inf


def softmax_rows(logits):
    out = []
    for row in logits:
        m = max(row)
        e = [math.exp(x - m) for x in row]
        z = sum(e)
        out.append([x / z for x in e])
    return out


def ce_scalar(logits, targets):
    probs = softmax_rows(logits)
    return -sum(math.log(p[y]) for p, y in zip(probs, targets)) / len(targets)


def mse_scalar(teacher, student):
    return sum(sum((a - b) ** 2 for a, b in zip(r, s)) for r, s in zip(teacher, student)) / len(teacher)


def edit_distance(a, b):
    rows = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a) + 1):
        rows[i][0] = i
    for j in range(len(b) + 1):
        rows[0][j] = j
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            rows[i][j] = min(rows[i - 1][j] + 1, rows[i][j - 1] + 1,
                             rows[i - 1][j - 1] + (a[i - 1] != b[j - 1]))
    return rows[-1][-1]
