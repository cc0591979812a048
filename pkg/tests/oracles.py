"""Slow, obviously-correct reference implementations used by the tests.

Each oracle is written as plain loops over scalars and shares no code with
the package under test.
"""

import math
from collections import deque

import numpy as np


def cosine_volume_loops(f_S, f_Ts):
    """values[j, n, l, i] = cos(f_S[l, :, i], f_T[n][l, :, j]) with flattened spatial i, j."""
    L, C, H, W = f_S.shape
    D = H * W
    N = len(f_Ts)
    out = np.zeros((D, N, L, D))
    for j in range(D):
        for n in range(N):
            for l in range(L):
                for i in range(D):
                    yi, xi = divmod(i, W)
                    yj, xj = divmod(j, W)
                    dot = na = nb = 0.0
                    for c in range(C):
                        a = float(f_S[l, c, yi, xi])
                        b = float(f_Ts[n][l, c, yj, xj])
                        dot += a * b
                        na += a * a
                        nb += b * b
                    out[j, n, l, i] = dot / (math.sqrt(na) * math.sqrt(nb))
    return out


def column_min_loops(volume):
    M, L, H, W = volume.shape
    out = np.empty((L, H, W))
    for l in range(L):
        for y in range(H):
            for x in range(W):
                best = math.inf
                for m in range(M):
                    best = min(best, float(volume[m, l, y, x]))
                out[l, y, x] = best
    return out


def sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


def rcsa_loops(x, w1, w2, ws):
    """Channel-then-spatial residual attention on one (C, D, H, W) volume.

    ``w1 (hidden, C)`` and ``w2 (C, hidden)`` are the shared bias-free MLP,
    ``ws (2, k, k, k)`` the bias-free spatial conv with zero padding k // 2.
    """
    C, D, H, W = x.shape
    hidden = w1.shape[0]

    def mlp(v):
        h = [max(0.0, sum(w1[a, c] * v[c] for c in range(C))) for a in range(hidden)]
        return [sum(w2[c, a] * h[a] for a in range(hidden)) for c in range(C)]

    mp = [max(float(x[c, d, i, j]) for d in range(D) for i in range(H) for j in range(W)) for c in range(C)]
    ap = [sum(float(x[c, d, i, j]) for d in range(D) for i in range(H) for j in range(W)) / (D * H * W) for c in range(C)]
    a, b = mlp(mp), mlp(ap)
    wc = [sigmoid(a[c] + b[c]) for c in range(C)]
    xca = np.empty_like(x)
    for c in range(C):
        for d in range(D):
            for i in range(H):
                for j in range(W):
                    xca[c, d, i, j] = wc[c] * x[c, d, i, j] + x[c, d, i, j]
    pooled = np.empty((2, D, H, W))
    for d in range(D):
        for i in range(H):
            for j in range(W):
                vals = [float(xca[c, d, i, j]) for c in range(C)]
                pooled[0, d, i, j] = sum(vals) / C
                pooled[1, d, i, j] = max(vals)
    k = ws.shape[-1]
    r = k // 2
    out = np.empty_like(x)
    for d in range(D):
        for i in range(H):
            for j in range(W):
                acc = 0.0
                for ch in range(2):
                    for dd in range(k):
                        for di in range(k):
                            for dj in range(k):
                                zd, zi, zj = d + dd - r, i + di - r, j + dj - r
                                if 0 <= zd < D and 0 <= zi < H and 0 <= zj < W:
                                    acc += ws[ch, dd, di, dj] * pooled[ch, zd, zi, zj]
                s = sigmoid(acc)
                for c in range(C):
                    out[c, d, i, j] = s * xca[c, d, i, j] + xca[c, d, i, j]
    return out


def adaptor_loops(deep, weight, bias):
    """Mean over (D, H, W) per channel, then an affine map. ``deep`` is (C, D, H, W)."""
    C = deep.shape[0]
    count = deep[0].size
    means = [sum(float(v) for v in deep[c].ravel()) / count for c in range(C)]
    return np.array([sum(weight[k, c] * means[c] for c in range(C)) + bias[k] for k in range(weight.shape[0])])


def auroc_pairs(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else 0.5 if p == q else 0.0
    return wins / (len(pos) * len(neg))


def ap_rank_walk(scores, labels):
    """Step-wise AP: walk thresholds from high to low, add precision times recall gain."""
    n_pos = sum(1 for y in labels if y)
    total, prev_recall = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        tp = sum(1 for s, y in zip(scores, labels) if s >= t and y)
        fp = sum(1 for s, y in zip(scores, labels) if s >= t and not y)
        recall = tp / n_pos
        total += (recall - prev_recall) * tp / (tp + fp)
        prev_recall = recall
    return total


def f1max_exhaustive(scores, labels):
    n_pos = sum(1 for y in labels if y)
    best = 0.0
    for t in set(scores):
        tp = sum(1 for s, y in zip(scores, labels) if s >= t and y)
        fp = sum(1 for s, y in zip(scores, labels) if s >= t and not y)
        fn = n_pos - tp
        if tp:
            best = max(best, 2 * tp / (2 * tp + fp + fn))
    return best


def label_regions_bfs(mask):
    """8-connected component labels by breadth-first search."""
    H, W = mask.shape
    labels = np.zeros((H, W), dtype=int)
    count = 0
    for y in range(H):
        for x in range(W):
            if mask[y, x] and not labels[y, x]:
                count += 1
                labels[y, x] = count
                queue = deque([(y, x)])
                while queue:
                    cy, cx = queue.popleft()
                    for dy in (-1, 0, 1):
                        for dx in (-1, 0, 1):
                            ny, nx = cy + dy, cx + dx
                            if 0 <= ny < H and 0 <= nx < W and mask[ny, nx] and not labels[ny, nx]:
                                labels[ny, nx] = count
                                queue.append((ny, nx))
    return labels, count


def aupro_sweep(maps, masks, fpr_limit):
    """Evaluate (FPR, mean region overlap) at every threshold from high to low and integrate step-wise.

    Each curve value is held from its FPR until the next one; the curve starts
    at (0, 0) with a threshold above every score.
    """
    region_masks = []
    for b, m in enumerate(masks):
        lab, n = label_regions_bfs(m)
        for r in range(1, n + 1):
            region_masks.append((b, lab == r))
    neg = ~np.asarray(masks, dtype=bool)
    n_neg = neg.sum()
    thresholds = sorted(set(np.asarray(maps).ravel().tolist()), reverse=True)
    points = [(0.0, 0.0)]
    for t in thresholds:
        pred = np.asarray(maps) >= t
        fpr = (pred & neg).sum() / n_neg
        overlaps = [(pred[b] & r).sum() / r.sum() for b, r in region_masks]
        points.append((fpr, sum(overlaps) / len(overlaps)))
    area = 0.0
    for (x0, y0), (x1, _) in zip(points, points[1:] + [(math.inf, None)]):
        lo, hi = min(x0, fpr_limit), min(x1, fpr_limit)
        area += y0 * (hi - lo)
    return area / fpr_limit


def ssim_constant_maps(a, b, c1=1e-4, c2=9e-4):
    """SSIM of two constant maps: the contrast/structure term is c2 / c2 = 1."""
    return (2 * a * b + c1) / (a * a + b * b + c1)


def central_difference(f, x, eps=1e-6, indices=None):
    """Numerical gradient of scalar ``f`` at float64 array ``x`` (optionally at selected flat indices)."""
    x = np.array(x, dtype=np.float64)
    flat = x.ravel()
    idx = range(flat.size) if indices is None else indices
    grad = np.zeros(flat.size)
    for k in idx:
        old = flat[k]
        flat[k] = old + eps
        up = f(x)
        flat[k] = old - eps
        down = f(x)
        flat[k] = old
        grad[k] = (up - down) / (2 * eps)
    return grad.reshape(x.shape)
