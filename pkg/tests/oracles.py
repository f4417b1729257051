"""Independent reference implementations used by the tests."""

from __future__ import annotations

import math

import numpy as np


def inside_box_bev(px: np.ndarray, py: np.ndarray, box) -> np.ndarray:
    cx, cy, _, l, w, _, t = box
    c, s = math.cos(t), math.sin(t)
    dx, dy = px - cx, py - cy
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (np.abs(u) <= l / 2) & (np.abs(v) <= w / 2)


def monte_carlo_iou(a, b, n: int, rng: np.random.Generator) -> float:
    """BEV IoU by uniform point sampling over the bounding square of both footprints."""
    r = 0.5 * max(math.hypot(a[3], a[4]), math.hypot(b[3], b[4]))
    lo_x, hi_x = min(a[0], b[0]) - r, max(a[0], b[0]) + r
    lo_y, hi_y = min(a[1], b[1]) - r, max(a[1], b[1]) + r
    px = rng.uniform(lo_x, hi_x, n)
    py = rng.uniform(lo_y, hi_y, n)
    ia, ib = inside_box_bev(px, py, a), inside_box_bev(px, py, b)
    union = np.count_nonzero(ia | ib)
    return np.count_nonzero(ia & ib) / union if union else 0.0


def random_box_pair(rng: np.random.Generator):
    """Two boxes close enough that most pairs overlap."""
    a = (rng.uniform(-2, 2), rng.uniform(-2, 2), 0.0, rng.uniform(1, 5), rng.uniform(1, 3), 1.5, rng.uniform(-math.pi, math.pi))
    b = (a[0] + rng.normal(0, 1.5), a[1] + rng.normal(0, 1.0), 0.0, rng.uniform(1, 5), rng.uniform(1, 3), 1.5,
         rng.uniform(-math.pi, math.pi))
    return a, b


def naive_conv(x, w, b, s, p):
    """Direct 7-deep loop convolution over a zero-padded input."""
    cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.zeros((cin, h + 2 * p, wd + 2 * p))
    xp[:, p:p + h, p:p + wd] = x
    ho, wo = (h + 2 * p - k) // s + 1, (wd + 2 * p - k) // s + 1
    out = np.zeros((cout, ho, wo))
    for o in range(cout):
        for i in range(ho):
            for j in range(wo):
                acc = b[o]
                for c in range(cin):
                    for u in range(k):
                        for v in range(k):
                            acc += xp[c, i * s + u, j * s + v] * w[o, c, u, v]
                out[o, i, j] = acc
    return out
