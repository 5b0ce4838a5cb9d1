"""Independent reference implementations used by the evaluation and acceptance tests."""
import math

import numpy as np


def brute_force_ap(x, labels):
    """Per-query AP from an explicit (distance, index) sort in plain Python."""
    x = [list(map(int, row)) for row in np.asarray(x)]
    out = []
    for q in range(len(x)):
        ranked = sorted((sum((a - b) ** 2 for a, b in zip(x[q], x[j])), j)
                        for j in range(len(x)) if j != q)
        hits, precisions = 0, []
        for k, (_, j) in enumerate(ranked, start=1):
            if labels[j] == labels[q]:
                hits += 1
                precisions.append(hits / k)
        out.append(math.fsum(precisions) / hits if hits else None)
    return out


def brute_force_map(x, labels):
    aps = [a for a in brute_force_ap(x, labels) if a is not None]
    return math.fsum(aps) / len(aps)


def two_pass_centroid(f, c):
    """Unit-variance scaling and class-mean difference, each mean computed in two passes."""
    n, dim = f.shape

    def mean(col):
        m = math.fsum(col) / len(col)
        return m + math.fsum(v - m for v in col) / len(col)

    z = np.empty_like(f)
    for j in range(dim):
        m = mean(f[:, j])
        sd = math.sqrt(math.fsum((v - m) ** 2 for v in f[:, j]) / n)
        z[:, j] = f[:, j] / max(sd, 1e-8)
    return np.array([mean(z[c == 1, j]) - mean(z[c == -1, j]) for j in range(dim)])


def grid_bias(s, c, step=1e-3):
    lo, hi = min(1 - s.max(), -1 - s.max()) - 0.01, max(1 - s.min(), -1 - s.min()) + 0.01
    grid = np.arange(lo, hi + step, step)
    loss = np.maximum(0.0, 1.0 - c[None, :] * (s[None, :] + grid[:, None])).sum(axis=1)
    tied = grid[loss <= loss.min() + 1e-12]
    return min(tied, key=lambda v: (abs(v), v)), loss.min()


def breakpoint_interval(s, c, b):
    """The gap between consecutive hinge breakpoints that contains ``b``."""
    breaks = np.unique(np.concatenate([1 - s[c == 1], -1 - s[c == -1]]))
    return breaks[breaks <= b].max(initial=-np.inf), breaks[breaks >= b].min(initial=np.inf)
