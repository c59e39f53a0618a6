"""Slow, obviously-correct reference implementations used by the tests."""
import math

import numpy as np


def merge_restart(values, min_gap=10.0, longest=2500.0):
    """Leftmost close pair merged, then the scan restarts from the beginning."""
    pool = sorted(float(v) for v in values if v <= longest)
    changed = True
    while changed:
        changed = False
        for i in range(len(pool) - 1):
            if pool[i + 1] - pool[i] < min_gap:
                pool[i : i + 2] = [(pool[i] + pool[i + 1]) / 2.0]
                changed = True
                break
    if pool[-1] != longest:
        pool.append(longest)
    return pool


def cube_index(lam):
    i = math.floor((lam - 400.0) / 10.0 + 0.5)
    return min(max(i, 0), 220)


def nearest(lam, anchors):
    best, best_d = 0, abs(lam - anchors[0])
    for i, a in enumerate(anchors):
        d = abs(lam - a)
        if d < best_d:
            best, best_d = i, d
    return best


def split(wavelengths, anchors, tol):
    claims = {}
    for ch, wl in enumerate(wavelengths):
        a = nearest(wl, anchors)
        d = abs(wl - anchors[a])
        if d <= tol and (a not in claims or d < claims[a][0]):
            claims[a] = (d, ch)
    key = sorted(ch for _, ch in claims.values())
    return key, [c for c in range(len(wavelengths)) if c not in key]


def conv_loops(x, W):
    h, w, n = x.shape
    p, j = W.shape[1], W.shape[3]
    out = np.zeros((h // p, w // p, j))
    for r in range(h // p):
        for c in range(w // p):
            for i in range(n):
                for u in range(p):
                    for v in range(p):
                        out[r, c] += x[r * p + u, c * p + v, i] * W[i, u, v]
    return out


def mask_feature(mask, feats):
    rows, cols, j = feats.shape
    p = mask.shape[0] // rows
    cov = np.zeros((rows, cols))
    for r in range(rows):
        for c in range(cols):
            cov[r, c] = mask[r * p : (r + 1) * p, c * p : (c + 1) * p].sum() / (p * p)
    inside = cov >= 0.5
    if not inside.any():
        best = np.argmax(cov.ravel())  # first maximum in row-major order
        inside = np.zeros(rows * cols, bool)
        inside[best] = True
        inside = inside.reshape(rows, cols)
    total = np.zeros(j)
    for r in range(rows):
        for c in range(cols):
            if inside[r, c]:
                total += feats[r, c]
    return total / inside.sum()


def cosine(a, b):
    na, nb = math.sqrt(float(a @ a)), math.sqrt(float(b @ b))
    if na == 0 or nb == 0:
        return -1.0
    return float(a @ b) / (na * nb)


def iou(a, b):
    inter = union = 0
    for x, y in zip(a.ravel(), b.ravel()):
        inter += bool(x and y)
        union += bool(x or y)
    return inter / union if union else 0.0


def nms_keep(masks, scores, thr, floor=-np.inf):
    k = len(masks)
    areas = [int(m.sum()) for m in masks]
    order = sorted(range(k), key=lambda i: (-scores[i], -areas[i], i))
    kept = []
    for i in order:
        if scores[i] < floor:
            continue
        if all(iou(masks[i], masks[j]) < thr for j in kept):
            kept.append(i)
    return kept


def mann_whitney(scores, truth):
    pos = [s for s, t in zip(scores, truth) if t]
    neg = [s for s, t in zip(scores, truth) if not t]
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))
