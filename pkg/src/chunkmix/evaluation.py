"""Quantitative and qualitative evaluation of chunked features.

* per-chunk nearest-neighbour retrieval mAP and the best-chunk table
* nearest-centroid linear probe with a hinge-optimal bias
* attribute-transfer grids (and binary PPM export)
* shortcut diagnostics: which chunks the decoder and classifier ignore
* the chunk-size sweep
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .mixing import Mask, mix, sample_mask
from .models import ChunkedFeature

CELL = 16


class EvaluationError(ValueError):
    pass


def encode_images(model, images, batch: int = 256) -> np.ndarray:
    """Infer-mode features for an image array, shape (N, n*d)."""
    out = []
    for i in range(0, len(images), batch):
        out.append(model.encode(Tensor(np.asarray(images[i:i + batch])), "infer").numpy().copy())
    return np.concatenate(out).astype(np.float64)


# ---------------------------------------------------------------------------
# retrieval

@dataclass
class FeatureMatrix:
    values: np.ndarray   # (N, n*d)
    labels: np.ndarray   # (N, n_factors)
    n: int
    d: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.labels = np.asarray(self.labels).reshape(len(self.labels), -1)
        if len(self.values) != len(self.labels):
            raise EvaluationError(f"{len(self.values)} feature rows but {len(self.labels)} label rows")
        if self.values.shape[1] != self.n * self.d:
            raise EvaluationError(f"feature width {self.values.shape[1]} != n*d = {self.n * self.d}")
        if not np.all(np.isfinite(self.values)):
            raise EvaluationError("features contain non-finite values")

    def chunk(self, i: int) -> np.ndarray:
        return self.values[:, i * self.d:(i + 1) * self.d]


def query_average_precisions(x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Leave-one-out AP of every item used as a query (NaN if it has no relevant item).

    Others are ranked by ascending Euclidean distance; ties rank lower
    indices first.  AP is the mean of precision@k over the relevant ranks k,
    summed with ``math.fsum`` so the result does not depend on summation order.
    """
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    labels = np.asarray(labels).reshape(-1)
    n = len(x)
    if n < 2:
        raise EvaluationError("retrieval needs at least 2 items")
    if len(np.unique(labels)) < 2:
        raise EvaluationError("retrieval needs at least 2 label classes")
    diff = x[:, None, :] - x[None, :, :]
    dist = np.einsum("ijk,ijk->ij", diff, diff)
    aps = np.full(n, np.nan)
    idx = np.arange(n)
    ranks = np.arange(1, n)
    for q in range(n):
        others = np.delete(idx, q)
        order = others[np.argsort(dist[q, others], kind="stable")]
        rel = labels[order] == labels[q]
        hits = rel.sum()
        if hits:
            aps[q] = math.fsum((np.cumsum(rel) / ranks)[rel]) / hits
    return aps


def mean_average_precision(x: np.ndarray, labels: np.ndarray) -> float:
    """Mean of :func:`query_average_precisions`, skipping queries without a relevant item."""
    aps = query_average_precisions(x, labels)
    aps = aps[~np.isnan(aps)]
    if len(aps) == 0:
        raise EvaluationError("no query has a relevant item (every label is unique)")
    return math.fsum(aps) / len(aps)


def retrieval_map(features: FeatureMatrix, chunk_index: int, factor_index: int) -> float:
    if not 0 <= chunk_index < features.n:
        raise EvaluationError(f"chunk {chunk_index} out of range for n={features.n}")
    return mean_average_precision(features.chunk(chunk_index), features.labels[:, factor_index])


@dataclass
class BestChunkTable:
    maps: np.ndarray        # (n_factors, n_chunks)
    best_chunk: np.ndarray  # (n_factors,)
    best_map: np.ndarray    # (n_factors,)

    @property
    def average(self) -> float:
        return float(self.best_map.mean())

    def as_array(self) -> np.ndarray:
        """Factors x (n + 2): per-chunk mAPs, best chunk index, best mAP."""
        return np.column_stack([self.maps, self.best_chunk, self.best_map])

    def to_tsv(self, factor_names=None) -> str:
        nf, n = self.maps.shape
        names = list(factor_names or [f"factor{i}" for i in range(nf)])
        lines = ["\t".join(["factor"] + [f"chunk{i}" for i in range(n)] + ["best_chunk", "best_mAP"])]
        for f in range(nf):
            cells = [f"{v:.4f}" for v in self.maps[f]] + [str(int(self.best_chunk[f])), f"{self.best_map[f]:.4f}"]
            lines.append("\t".join([names[f]] + cells))
        lines.append("\t".join(["average"] + ["-"] * n + ["-", f"{self.average:.4f}"]))
        return "\n".join(lines) + "\n"


def best_chunk_table(features, labels=None, n: int | None = None, d: int | None = None) -> BestChunkTable:
    """mAP for every (factor, chunk) pair and the best chunk per factor (lowest index on ties)."""
    fm = features if isinstance(features, FeatureMatrix) else FeatureMatrix(features, labels, n, d)
    nf = fm.labels.shape[1]
    maps = np.array([[retrieval_map(fm, c, f) for c in range(fm.n)] for f in range(nf)])
    best = maps.argmax(axis=1)
    return BestChunkTable(maps, best, maps[np.arange(nf), best])


# ---------------------------------------------------------------------------
# linear probe

@dataclass
class ProbeModel:
    w: np.ndarray
    b: float
    scales: np.ndarray

    def predict(self, features) -> np.ndarray:
        s = (np.asarray(features, dtype=np.float64) / self.scales) @ self.w + self.b
        return np.where(s >= 0, 1, -1)


def hinge_loss(scores: np.ndarray, c: np.ndarray, b) -> np.ndarray:
    b = np.atleast_1d(np.asarray(b, dtype=np.float64))
    return np.maximum(0.0, 1.0 - c[None, :] * (scores[None, :] + b[:, None])).sum(axis=1)


def fit_probe(features, labels, normalize: bool = True) -> ProbeModel:
    """Nearest-centroid direction plus the hinge-minimizing bias.

    Labels are +1/-1.  The bias is searched over the hinge breakpoints
    ``1 - s_i`` (positives) and ``-1 - s_i`` (negatives); among minimizers
    the smallest ``|b|`` wins, then the smallest ``b``.
    """
    f = np.asarray(features, dtype=np.float64)
    c = np.asarray(labels).reshape(-1)
    pos, neg = c == 1, c == -1
    if not pos.any() or not neg.any():
        raise EvaluationError("probe training data must contain both classes")
    if not np.all(pos | neg):
        raise EvaluationError("probe labels must be +1 or -1")
    scales = np.maximum(f.std(axis=0), 1e-8) if normalize else np.ones(f.shape[1])
    z = f / scales
    w = z[pos].mean(axis=0) - z[neg].mean(axis=0)
    s = z @ w
    cand = np.unique(np.concatenate([1.0 - s[pos], -1.0 - s[neg]]))
    loss = hinge_loss(s, c.astype(np.float64), cand)
    best = loss.min()
    tied = cand[loss <= best + 1e-12 * max(1.0, abs(best))]
    b = min(tied, key=lambda v: (abs(v), v))
    return ProbeModel(w, float(b), scales)


def linear_probe(train_features, train_labels, test_features, test_labels, normalize: bool = True):
    """Fit on the training set; return (test accuracy, fitted probe)."""
    probe = fit_probe(train_features, train_labels, normalize)
    pred = probe.predict(test_features)
    return float((pred == np.asarray(test_labels).reshape(-1)).mean()), probe


def probe_factor(train_x, train_y, test_x, test_y) -> float:
    """Probe accuracy for a multi-class factor: mean over one-vs-rest probes.

    A two-class factor gets a single probe (class 1 vs class 0).
    """
    classes = np.unique(train_y)
    if len(classes) < 2:
        raise EvaluationError("factor has a single class in the training set")
    targets = classes[1:] if len(classes) == 2 else classes
    accs = []
    for k in targets:
        acc, _ = linear_probe(train_x, np.where(train_y == k, 1, -1), test_x, np.where(test_y == k, 1, -1))
        accs.append(acc)
    return float(np.mean(accs))


# ---------------------------------------------------------------------------
# attribute transfer grids

def _chunk_set(chunk_index, n: int) -> list[int]:
    chunks = [chunk_index] if np.isscalar(chunk_index) else list(chunk_index)
    for c in chunks:
        if not 0 <= int(c) < n:
            raise EvaluationError(f"chunk {c} out of range for n={n}")
    return [int(c) for c in chunks]


def transfer_grid(model, row_images, col_images, chunk_index) -> np.ndarray:
    """Attribute-transfer panel as a (3, (R+1)*16, (C+1)*16) array.

    Top row holds ``col_images``, left column holds ``row_images``; inner
    cell (i, j) decodes the feature of row image i with the chosen chunk(s)
    taken from column image j.  The top-left cell is black.
    """
    rows = np.asarray(row_images, dtype=np.float64)
    cols = np.asarray(col_images, dtype=np.float64)
    if len(rows) < 1 or len(cols) < 1:
        raise EvaluationError("transfer_grid needs at least one row and one column image")
    n, d = model.n, model.d
    chunks = _chunk_set(chunk_index, n)
    r, c = len(rows), len(cols)
    grid = np.zeros((3, (r + 1) * CELL, (c + 1) * CELL))
    for j in range(c):
        grid[:, :CELL, (j + 1) * CELL:(j + 2) * CELL] = cols[j]
    for i in range(r):
        grid[:, (i + 1) * CELL:(i + 2) * CELL, :CELL] = rows[i]

    f_rows = model.encode(Tensor(rows), "infer").numpy()
    f_cols = model.encode(Tensor(cols), "infer").numpy()
    bits = np.zeros(n, dtype=np.int64)
    bits[chunks] = 1
    # every (row, col) pair in one batch: chunk(s) from the column image, rest from the row image
    top = ChunkedFeature(Tensor(np.repeat(f_cols[None], r, axis=0).reshape(r * c, n * d)), n, d)
    left = ChunkedFeature(Tensor(np.repeat(f_rows, c, axis=0)), n, d)
    mixed = mix(top, left, Mask(np.tile(bits, (r * c, 1))))
    out = model.decode(mixed, "infer").numpy().reshape(r, c, 3, CELL, CELL)
    for i in range(r):
        for j in range(c):
            grid[:, (i + 1) * CELL:(i + 2) * CELL, (j + 1) * CELL:(j + 2) * CELL] = out[i, j]
    return grid


def to_bytes_image(grid: np.ndarray) -> np.ndarray:
    """(3, H, W) floats in [0, 1] to (H, W, 3) uint8, rounding half up."""
    v = np.floor(np.clip(np.asarray(grid, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5)
    return v.astype(np.uint8).transpose(1, 2, 0)


def write_ppm(path, grid: np.ndarray) -> None:
    img = to_bytes_image(grid)
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P6" or len(parts) < 4:
        raise EvaluationError(f"{path}: not a binary PPM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)


# ---------------------------------------------------------------------------
# shortcut diagnostics

@dataclass
class ShortcutReport:
    sensitivity: np.ndarray   # per chunk
    accuracy: np.ndarray      # per chunk
    dead: np.ndarray          # per chunk, bool

    @property
    def dead_count(self) -> int:
        return int(self.dead.sum())

    def to_tsv(self) -> str:
        lines = ["chunk\tsensitivity\tcls_accuracy\tdead"]
        for i, (s, a, dd) in enumerate(zip(self.sensitivity, self.accuracy, self.dead)):
            lines.append(f"{i}\t{s:.6f}\t{a:.4f}\t{int(dd)}")
        return "\n".join(lines) + "\n"


def shortcut_report(model, images, pairs: int = 256, seed: int = 0, mode: str = "infer",
                    sensitivity_floor: float = 1e-3, accuracy_floor: float = 0.55) -> ShortcutReport:
    """Per-chunk decoder sensitivity and classifier accuracy on random pairs.

    Sensitivity is the mean squared pixel change of the decoded image when
    one chunk is swapped in from another image.  A chunk is dead when both
    its sensitivity and its mask-bit accuracy are below the floors.

    ``mode="train"`` evaluates with batch statistics (running averages are
    left untouched); use it for networks whose running statistics were never
    populated, e.g. at initialization.
    """
    images = np.asarray(images, dtype=np.float64)
    rng = np.random.default_rng(seed)
    a = rng.integers(0, len(images), size=pairs)
    b = rng.integers(0, len(images), size=pairs)
    x1, x2 = images[a], images[b]
    n = model.n
    kw = {"update_stats": False} if mode == "train" else {}
    f1 = model.encode(Tensor(x1), mode, **kw)
    f2 = model.encode(Tensor(x2), mode, **kw)
    base = model.decode(f1, mode, **kw).numpy()
    sens = np.zeros(n)
    for i in range(n):
        bits = np.ones((pairs, n), dtype=np.int64)
        bits[:, i] = 0
        swapped = model.decode(mix(f1, f2, Mask(bits)), mode, **kw).numpy()
        sens[i] = float(((swapped - base) ** 2).mean())
    m = sample_mask(rng, n, pairs)
    x3 = model.decode(mix(f1, f2, m), mode, **kw)
    y = model.classify(Tensor(x1), Tensor(x2), x3, mode, **kw).numpy()
    acc = ((y > 0.5) == (m.bits == 1)).mean(axis=0)
    dead = (sens < sensitivity_floor) & (acc < accuracy_floor)
    return ShortcutReport(sens, acc, dead)


# ---------------------------------------------------------------------------
# chunk size sweep

def chunk_size_ablation(train_images, test_images, test_labels, sizes=(2, 4, 8, 16, 32, 64),
                        base=None, progress=None) -> list[tuple[int, float]]:
    """Average best-chunk mAP of the full model (MIX+C+G) per chunk size."""
    from .trainer import TrainConfig, train

    base = base or TrainConfig()
    curve = []
    for size in sizes:
        cfg = base.replace(toggles=("mix_cycle", "gan", "cls"), chunk_dim=int(size))
        model = train(cfg, train_images).model
        table = best_chunk_table(encode_images(model, test_images), test_labels, model.n, model.d)
        curve.append((int(size), table.average))
        if progress is not None:
            progress(size, table)
    return curve


def curve_tsv(curve) -> str:
    return "chunk_size\tmean_mAP\n" + "".join(f"{s}\t{v:.4f}\n" for s, v in curve)
