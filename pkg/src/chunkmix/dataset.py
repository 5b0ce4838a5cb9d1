"""Procedural 16x16 shape images with ground-truth factor labels.

Four factors: shape (disk/square/triangle), foreground hue (4 colours),
horizontal position (left/center/right) and size (small/large).  Each
combination is replicated with a +-1 pixel vertical jitter that is *not* a
labelled factor.  Labels exist for evaluation only.

On disk a split is a ``CMDATA1`` binary file: magic, ``u32`` count, ``u32``
factor count, ``u32`` cardinalities, then per image 768 little-endian f32
pixels (CHW order) followed by one ``u32`` per factor.
"""
from __future__ import annotations

import itertools
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DATA_MAGIC = b"CMDATA1\n"
IMAGE_SIZE = 16
BACKGROUND = (0.5, 0.5, 0.5)
HUES = ((0.9, 0.1, 0.1), (0.1, 0.9, 0.1), (0.1, 0.1, 0.9), (0.9, 0.9, 0.1))
X_OFFSETS = (-4, 0, 4)
SIZES = (3, 5)
SHAPES = ("disk", "square", "triangle")


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class FactorSpec:
    names: tuple = ("shape", "hue", "x_position", "size")
    cardinalities: tuple = (len(SHAPES), len(HUES), len(X_OFFSETS), len(SIZES))

    @property
    def n_combinations(self) -> int:
        return int(np.prod(self.cardinalities))

    def combinations(self):
        return itertools.product(*(range(c) for c in self.cardinalities))


DEFAULT_SPEC = FactorSpec()


@dataclass
class Split:
    images: np.ndarray  # (N, 3, 16, 16) float32
    labels: np.ndarray  # (N, n_factors) int64

    def __len__(self):
        return len(self.images)


@dataclass
class DatasetManifest:
    counts: dict
    cardinalities: tuple
    seed: int
    copies_per_combo: int
    factor_names: tuple = DEFAULT_SPEC.names
    offsets: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [
            f"seed={self.seed}",
            f"copies_per_combo={self.copies_per_combo}",
            f"factors={','.join(self.factor_names)}",
            f"cardinalities={','.join(map(str, self.cardinalities))}",
        ]
        for split, count in self.counts.items():
            lines.append(f"{split}.count={count}")
            lines.append(f"{split}.file={split}.bin")
        for k, v in self.offsets.items():
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DatasetManifest":
        kv = {}
        for line in text.splitlines():
            if line.strip():
                k, _, v = line.partition("=")
                kv[k.strip()] = v.strip()
        counts = {k[:-6]: int(v) for k, v in kv.items() if k.endswith(".count")}
        offsets = {k: int(v) for k, v in kv.items() if k in ("header_bytes", "record_bytes")}
        return cls(counts=counts,
                   cardinalities=tuple(int(c) for c in kv["cardinalities"].split(",")),
                   seed=int(kv["seed"]),
                   copies_per_combo=int(kv["copies_per_combo"]),
                   factor_names=tuple(kv["factors"].split(",")),
                   offsets=offsets)


def _shape_mask(shape: int, size: int, cx: float, cy: float) -> np.ndarray:
    # pixel centres at i + 0.5
    c = np.arange(IMAGE_SIZE) + 0.5
    px, py = np.meshgrid(c - cx, c - cy)
    if SHAPES[shape] == "disk":
        return px ** 2 + py ** 2 < size ** 2
    if SHAPES[shape] == "square":
        return (np.abs(px) < size) & (np.abs(py) < size)
    # upward triangle inscribed in the square bounding box
    return (np.abs(py) < size) & (np.abs(px) < (py + size) / 2.0)


def render(labels, jitter: int = 0, spec: FactorSpec = DEFAULT_SPEC) -> np.ndarray:
    """Rasterize one image (3, 16, 16) float32 from its factor labels."""
    labels = tuple(int(v) for v in labels)
    if len(labels) != len(spec.cardinalities):
        raise DataFormatError(f"expected {len(spec.cardinalities)} labels, got {len(labels)}")
    for name, v, card in zip(spec.names, labels, spec.cardinalities):
        if not 0 <= v < card:
            raise DataFormatError(f"label {name}={v} out of range [0, {card})")
    shape, hue, xpos, size = labels
    cx = IMAGE_SIZE / 2 + X_OFFSETS[xpos]
    cy = IMAGE_SIZE / 2 + jitter
    inside = _shape_mask(shape, SIZES[size], cx, cy)
    img = np.empty((3, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)
    for ch in range(3):
        img[ch] = np.where(inside, HUES[hue][ch], BACKGROUND[ch])
    return img


def generate_arrays(seed: int = 0, copies_per_combo: int = 25, spec: FactorSpec = DEFAULT_SPEC):
    """Build train/test splits in memory; each combination lands in both splits."""
    if copies_per_combo < 1:
        raise ValueError("copies_per_combo must be >= 1")
    rng = np.random.default_rng(seed)
    n_test = max(1, int(round(0.2 * copies_per_combo))) if copies_per_combo > 1 else 0
    parts = {"train": ([], []), "test": ([], [])}
    for combo in spec.combinations():
        jitters = rng.integers(-1, 2, size=copies_per_combo)
        test_idx = set(rng.permutation(copies_per_combo)[:n_test].tolist())
        for k in range(copies_per_combo):
            imgs, labs = parts["test" if k in test_idx else "train"]
            imgs.append(render(combo, int(jitters[k]), spec))
            labs.append(combo)
    out = {}
    for name, (imgs, labs) in parts.items():
        shape = (0, 3, IMAGE_SIZE, IMAGE_SIZE)
        out[name] = Split(np.stack(imgs) if imgs else np.zeros(shape, np.float32),
                          np.asarray(labs, dtype=np.int64).reshape(-1, len(spec.cardinalities)))
    return out


def _header_bytes(n_factors: int) -> int:
    return len(DATA_MAGIC) + 8 + 4 * n_factors


def _record_bytes(n_factors: int) -> int:
    return 4 * 3 * IMAGE_SIZE * IMAGE_SIZE + 4 * n_factors


def write_split(path, split: Split, cardinalities) -> None:
    nf = len(cardinalities)
    pix = split.images.reshape(len(split), 3 * IMAGE_SIZE * IMAGE_SIZE).astype("<f4")
    rec = np.zeros(len(split), dtype=[("pix", "<f4", pix.shape[1]), ("lab", "<u4", nf)])
    rec["pix"] = pix
    rec["lab"] = split.labels
    header = DATA_MAGIC + struct.pack("<II", len(split), nf) + struct.pack(f"<{nf}I", *cardinalities)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(rec.tobytes())


def read_split(path) -> tuple[Split, tuple]:
    with open(path, "rb") as fh:
        blob = fh.read()
    found = blob[:len(DATA_MAGIC)]
    if found != DATA_MAGIC:
        raise DataFormatError(f"{path}: bad magic, expected {DATA_MAGIC!r}, found {found!r}")
    if len(blob) < len(DATA_MAGIC) + 8:
        raise DataFormatError(f"{path}: truncated header")
    count, nf = struct.unpack_from("<II", blob, len(DATA_MAGIC))
    hdr = _header_bytes(nf)
    if len(blob) < hdr:
        raise DataFormatError(f"{path}: truncated header")
    cards = struct.unpack_from(f"<{nf}I", blob, len(DATA_MAGIC) + 8)
    expected = hdr + count * _record_bytes(nf)
    if len(blob) != expected:
        raise DataFormatError(f"{path}: expected {expected} bytes for {count} records, found {len(blob)}")
    npix = 3 * IMAGE_SIZE * IMAGE_SIZE
    rec = np.frombuffer(blob, dtype=[("pix", "<f4", npix), ("lab", "<u4", nf)], offset=hdr, count=count)
    images = rec["pix"].astype(np.float32).reshape(count, 3, IMAGE_SIZE, IMAGE_SIZE)
    labels = rec["lab"].astype(np.int64)
    if count and (labels >= np.asarray(cards)).any():
        raise DataFormatError(f"{path}: label exceeds its factor cardinality")
    return Split(images, labels), tuple(cards)


def generate(out_dir, seed: int = 0, copies_per_combo: int = 25,
             spec: FactorSpec = DEFAULT_SPEC) -> DatasetManifest:
    """Write ``train.bin``, ``test.bin`` and ``manifest.txt`` into ``out_dir``."""
    out_dir = Path(out_dir)
    splits = generate_arrays(seed, copies_per_combo, spec)
    nf = len(spec.cardinalities)
    manifest = DatasetManifest(
        counts={k: len(v) for k, v in splits.items()},
        cardinalities=spec.cardinalities, seed=seed,
        copies_per_combo=copies_per_combo, factor_names=spec.names,
        offsets={"header_bytes": _header_bytes(nf), "record_bytes": _record_bytes(nf)},
    )
    try:
        os.makedirs(out_dir, exist_ok=True)
        for name, split in splits.items():
            write_split(out_dir / f"{name}.bin", split, spec.cardinalities)
        (out_dir / "manifest.txt").write_text(manifest.to_text(), encoding="utf-8")
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write dataset to {out_dir}: {exc.strerror}", str(out_dir)) from exc
    return manifest


def load(path, split: str = "train") -> tuple[np.ndarray, np.ndarray, DatasetManifest]:
    """Load one split from a directory written by :func:`generate`."""
    path = Path(path)
    mpath = path / "manifest.txt"
    if not mpath.exists():
        raise DataFormatError(f"{path}: missing manifest.txt")
    manifest = DatasetManifest.from_text(mpath.read_text(encoding="utf-8"))
    data, cards = read_split(path / f"{split}.bin")
    if cards != manifest.cardinalities:
        raise DataFormatError(f"{path}: cardinalities {cards} disagree with manifest {manifest.cardinalities}")
    if len(data) != manifest.counts.get(split):
        raise DataFormatError(f"{path}: {split} has {len(data)} images, manifest says {manifest.counts.get(split)}")
    return data.images, data.labels, manifest
