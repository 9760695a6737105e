"""Slow, loop-based reference implementations used only by the tests.

Nothing here imports the vectorized loss code.
"""

import math

import numpy as np

SMOOTH = 1e-5


def softmax_ref(a):
    out = []
    for row in np.asarray(a, dtype=float).reshape(-1, np.shape(a)[-1]):
        m = max(row)
        e = [math.exp(x - m) for x in row]
        s = sum(e)
        out.append([x / s for x in e])
    return np.array(out).reshape(np.shape(a))


def _pixels(probs, target):
    p = np.asarray(probs, dtype=float)
    return p.reshape(-1, p.shape[-1]).tolist(), np.asarray(target).reshape(-1).tolist()


def merge_ref(p_row, groups):
    return [sum(p_row[k] for k in g) for g in groups]


def ce_ref(probs, target, groups=None):
    rows, t = _pixels(probs, target)
    total = 0.0
    for row, y in zip(rows, t):
        q = merge_ref(row, groups) if groups is not None else row
        total += -math.log(max(q[y], 1e-12))
    return total / len(t)


def dice_ref(probs, target, groups=None):
    rows, t = _pixels(probs, target)
    k = len(groups) if groups is not None else len(rows[0])
    value = 0.0
    for c in range(k):
        inter = ysum = psum = 0.0
        for row, y in zip(rows, t):
            q = merge_ref(row, groups) if groups is not None else row
            yc = 1.0 if y == c else 0.0
            inter += yc * q[c]
            ysum += yc
            psum += q[c]
        value += 1.0 - (2 * inter + SMOOTH) / (ysum + psum + SMOOTH)
    return value


def exclusion_vectors_ref(excluded, n):
    table = []
    for members in excluded:
        v = [0] * n
        for k in members:
            v[k] += 1
        table.append(v)
    return table


def exclusion_dice_ref(probs, e_rows):
    rows, _ = _pixels(probs, np.zeros(np.shape(probs)[:-1], int))
    value = 0.0
    for c in range(len(rows[0])):
        a = es = ps = 0.0
        for row, e in zip(rows, e_rows):
            a += e[c] * row[c]
            es += e[c]
            ps += row[c]
        value += 2 * a / (es + ps + SMOOTH)
    return value


def exclusion_ce_ref(probs, e_rows):
    rows, _ = _pixels(probs, np.zeros(np.shape(probs)[:-1], int))
    total = 0.0
    for row, e in zip(rows, e_rows):
        total += sum(ec * math.log(pc + 1.0) for ec, pc in zip(e, row))
    return total / len(rows)


def dice_coefficient_ref(pred, gt, cls):
    a = b = both = 0
    for x, y in zip(np.ravel(pred).tolist(), np.ravel(gt).tolist()):
        a += x == cls
        b += y == cls
        both += x == cls and y == cls
    return 1.0 if a + b == 0 else 2.0 * both / (a + b)


def hausdorff_ref(pred, gt, cls):
    pa = [(i, j) for (i, j), v in np.ndenumerate(pred) if v == cls]
    pb = [(i, j) for (i, j), v in np.ndenumerate(gt) if v == cls]

    def directed(xs, ys):
        return max(min(math.hypot(x[0] - y[0], x[1] - y[1]) for y in ys) for x in xs)

    return max(directed(pa, pb), directed(pb, pa))
