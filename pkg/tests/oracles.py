"""Brute-force reference implementations shared by unit and acceptance tests."""

from fractions import Fraction

import numpy as np

from cattransfer.boxes import iou


def brute_force(label_sets, c):
    """Double loop over images and category pairs; exact fractions."""
    m = [0] * c
    mij = [[0] * c for _ in range(c)]
    for s in label_sets:
        s = set(s)
        for i in range(c):
            if i in s:
                m[i] += 1
                for j in range(c):
                    if j in s:
                        mij[i][j] += 1
    P = [[Fraction(mij[i][j], m[i]) if m[i] else Fraction(0) for j in range(c)] for i in range(c)]
    return m, mij, P


def random_label_sets(rng):
    c = int(rng.integers(1, 7))
    n = int(rng.integers(0, 51))
    sets = [set(np.flatnonzero(rng.random(c) < rng.uniform(0.1, 0.7)).tolist()) for _ in range(n)]
    return sets, c


def random_boxes(rng, n):
    xy = rng.uniform(0, 0.7, size=(n, 2))
    wh = rng.uniform(0.05, 0.3, size=(n, 2))
    return np.hstack([xy, xy + wh])


def oracle_ap(dets, gts, thr=0.5):
    """Enumerate every score threshold; match greedily among kept detections."""
    npos = sum(len(v) for v in gts.values())
    if npos == 0:
        return None
    points = []
    for t in sorted({d[1] for d in dets}):
        kept = sorted((d for d in dets if d[1] >= t), key=lambda d: -d[1])
        used = {k: [False] * len(v) for k, v in gts.items()}
        tp = 0
        for img, _, box in kept:
            best, bj = -1.0, -1
            for j, g in enumerate(gts.get(img, [])):
                o = iou(box, g)
                if not used[img][j] and o >= thr and o > best:
                    best, bj = o, j
            if bj >= 0:
                used[img][bj] = True
                tp += 1
        points.append((tp / npos, tp / len(kept)))
    ap = 0.0
    for i in range(11):
        ps = [p for r, p in points if r >= i / 10]
        ap += max(ps) if ps else 0.0
    return ap / 11.0


def tiny_instance(rng):
    images = ["a", "b"]
    gts = {k: random_boxes(rng, int(rng.integers(0, 3))) for k in images}
    if sum(len(v) for v in gts.values()) == 0:
        gts["a"] = random_boxes(rng, 1)
    dets = []
    for _ in range(int(rng.integers(0, 7))):
        img = images[int(rng.integers(0, 2))]
        g = gts[img]
        if len(g) and rng.random() < 0.6:
            box = g[int(rng.integers(0, len(g)))] + rng.normal(0, 0.02, 4)
            box[2:] = np.maximum(box[2:], box[:2] + 1e-3)
        else:
            box = random_boxes(rng, 1)[0]
        # distinct scores; the oracle and the implementation order ties differently
        dets.append((img, float(rng.uniform()), box))
    return dets, gts
