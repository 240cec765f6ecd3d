"""Brute-force reference implementations used only by the tests.

Plain Python loops over voxels; nothing here calls into dualseg.
"""

import itertools
import math

import numpy as np

IGNORE = 255


def percentile_linear(values, gamma):
    xs = sorted(float(v) for v in np.asarray(values).reshape(-1))
    pos = gamma / 100.0 * (len(xs) - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(xs) - 1)
    return xs[lo] + (pos - lo) * (xs[hi] - xs[lo])


def entropy_bits(p):
    return -sum(q * math.log2(q) for q in p if q > 0)


def argmax_first(p):
    best = 0
    for c in range(1, len(p)):
        if p[c] > p[best]:
            best = c
    return best


def voxels(shape):
    return itertools.product(*(range(n) for n in shape))


def efs_labels(prob_src, ent_a, ent_b, tau_a, tau_b):
    shape = ent_a.shape
    out = np.zeros(shape, dtype=np.int64)
    for v in voxels(shape):
        if ent_a[v] > tau_a or ent_b[v] > tau_b:
            out[v] = IGNORE
        else:
            out[v] = argmax_first([prob_src[(c,) + v] for c in range(prob_src.shape[0])])
    return out


def reliability(prob_a, prob_b, ent_a, ent_b, tau_a, tau_b):
    shape = ent_a.shape
    out = np.zeros(shape, dtype=bool)
    C = prob_a.shape[0]
    for v in voxels(shape):
        ya = argmax_first([prob_a[(c,) + v] for c in range(C)])
        yb = argmax_first([prob_b[(c,) + v] for c in range(C)])
        out[v] = ya == yb and ent_a[v] < tau_a and ent_b[v] < tau_b
    return out


def subsets(mask, labels):
    fg, bg, unc = set(), set(), set()
    for v in voxels(mask.shape):
        if not mask[v]:
            unc.add(v)
        elif labels[v] == 1:
            fg.add(v)
        else:
            bg.add(v)
    return fg, bg, unc


def mean_feature(features, members):
    F = features.shape[0]
    if not members:
        return None
    acc = [0.0] * F
    for v in members:
        for k in range(F):
            acc[k] += float(features[(k,) + v])
    return np.array([a / len(members) for a in acc])


def surface_points(mask):
    shape = mask.shape
    pts = []
    for v in voxels(shape):
        if not mask[v]:
            continue
        on_surface = False
        for axis in range(3):
            for step in (-1, 1):
                n = list(v)
                n[axis] += step
                if not 0 <= n[axis] < shape[axis] or not mask[tuple(n)]:
                    on_surface = True
        if on_surface:
            pts.append(v)
    return pts


def surface_distance_pair(pred, gt):
    sp, sg = surface_points(pred), surface_points(gt)

    def directed(src, dst):
        return [min(math.dist(a, b) for b in dst) for a in src]

    d = directed(sp, sg) + directed(sg, sp)
    return percentile_linear(d, 95), sum(d) / len(d), max(d)
