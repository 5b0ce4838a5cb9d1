"""Encoder, decoder, discriminator and mask classifier at 16x16 scale.

The feature vector produced by the encoder is split into ``n`` chunks of
``d`` coordinates each (:class:`ChunkedFeature`).  All four networks share a
DCGAN-like stack of stride-2 convolutions, each followed by batch
normalization and a leaky ReLU with slope 0.2.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, ShapeError, Tensor

IMAGE_SHAPE = (3, 16, 16)
LEAK = 0.2
INIT_STD = 0.02
DEFAULT_WIDTHS = (32, 64, 128)
CHECKPOINT_MAGIC = b"CHUNKMIX1\n"


class CheckpointError(ValueError):
    pass


@dataclass
class ChunkedFeature:
    """A batch of features laid out as ``n`` chunks of ``d`` coordinates.

    ``values`` has shape (batch, n*d); chunk ``i`` of every sample occupies
    columns ``[i*d, (i+1)*d)``.
    """

    values: Tensor
    n: int
    d: int

    def __post_init__(self):
        if not isinstance(self.values, Tensor):
            self.values = Tensor(self.values)
        if self.values.data.ndim != 2 or self.values.shape[1] != self.n * self.d:
            raise ShapeError(f"ChunkedFeature(n={self.n}, d={self.d})", self.values.shape)

    @property
    def batch(self) -> int:
        return self.values.shape[0]

    def chunk(self, i: int) -> np.ndarray:
        if not 0 <= i < self.n:
            raise IndexError(f"chunk {i} out of range for n={self.n}")
        return self.values.data[:, i * self.d:(i + 1) * self.d]

    def chunks(self) -> list[np.ndarray]:
        return [self.chunk(i) for i in range(self.n)]

    @classmethod
    def from_chunks(cls, chunks, d: int | None = None) -> "ChunkedFeature":
        chunks = [np.asarray(c) for c in chunks]
        d = chunks[0].shape[1] if d is None else d
        return cls(Tensor(np.concatenate(chunks, axis=1)), len(chunks), d)

    def numpy(self) -> np.ndarray:
        return self.values.data


def _check_images(x, channels: int, op: str) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.data.ndim != 4 or x.shape[1:] != (channels,) + IMAGE_SHAPE[1:]:
        raise ShapeError(op, x.shape, (None, channels) + IMAGE_SHAPE[1:])
    return x


class Net:
    """Named parameters plus batch-norm running statistics for one network."""

    def __init__(self, prefix: str):
        self.prefix = prefix
        self.params: dict[str, Tensor] = {}
        self.bn: dict[str, BatchNormState] = {}

    def add(self, name: str, data) -> Tensor:
        full = f"{self.prefix}.{name}"
        if full in self.params:
            raise KeyError(f"duplicate parameter {full}")
        t = Tensor(data, requires_grad=True)
        self.params[full] = t
        return t

    def add_bn(self, name: str, channels: int):
        self.add(f"{name}.scale", np.ones(channels))
        self.add(f"{name}.shift", np.zeros(channels))
        self.bn[f"{self.prefix}.{name}"] = BatchNormState(channels)

    def p(self, name: str) -> Tensor:
        return self.params[f"{self.prefix}.{name}"]

    def norm(self, h: Tensor, name: str, mode: str, update_stats: bool) -> Tensor:
        return ad.batchnorm(h, self.p(f"{name}.scale"), self.p(f"{name}.shift"), mode,
                            self.bn[f"{self.prefix}.{name}"], update_stats)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())


def _conv_stack(net: Net, rng, in_ch: int, widths, out_dim: int):
    cin = in_ch
    for i, cout in enumerate(widths):
        net.add(f"conv{i}.w", rng.normal(0.0, INIT_STD, size=(cout, cin, 4, 4)))
        net.add_bn(f"bn{i}", cout)
        cin = cout
    spatial = IMAGE_SHAPE[1] >> len(widths)
    net.add("fc.w", rng.normal(0.0, INIT_STD, size=(cin * spatial * spatial, out_dim)))
    net.add("fc.b", np.zeros(out_dim))


def _run_conv_stack(net: Net, x: Tensor, depth: int, mode: str, update_stats: bool) -> Tensor:
    h = x
    for i in range(depth):
        h = ad.conv2d(h, net.p(f"conv{i}.w"), stride=2, pad=1)
        h = ad.leaky_relu(net.norm(h, f"bn{i}", mode, update_stats), LEAK)
    h = h.reshape(h.shape[0], -1)
    return ad.bias_add(h @ net.p("fc.w"), net.p("fc.b"))


class Model:
    """The four networks: encoder, decoder, discriminator and mask classifier.

    ``mode`` is ``"train"`` (batch statistics) or ``"infer"`` (running
    statistics).  ``update_stats=False`` evaluates in train mode without
    touching running averages.
    """

    def __init__(self, n: int = 4, d: int = 8, widths=DEFAULT_WIDTHS):
        if n < 1 or d < 1:
            raise ValueError(f"need n >= 1 and d >= 1, got n={n}, d={d}")
        self.n, self.d = n, d
        self.widths = tuple(widths)
        self.encoder = Net("enc")
        self.decoder = Net("dec")
        self.discriminator = Net("dsc")
        self.classifier = Net("cls")

    @property
    def nets(self) -> tuple[Net, ...]:
        return (self.encoder, self.decoder, self.discriminator, self.classifier)

    @classmethod
    def init(cls, seed: int, n: int = 4, d: int = 8, widths=DEFAULT_WIDTHS) -> "Model":
        rng = np.random.default_rng(seed)
        m = cls(n, d, widths)
        w = m.widths
        _conv_stack(m.encoder, rng, 3, w, n * d)

        spatial = IMAGE_SHAPE[1] >> len(w)
        dec = m.decoder
        dec.add("fc.w", rng.normal(0.0, INIT_STD, size=(n * d, w[-1] * spatial * spatial)))
        dec.add("fc.b", np.zeros(w[-1] * spatial * spatial))
        dec.add_bn("bn_fc", w[-1])
        chans = list(reversed(w)) + [IMAGE_SHAPE[0]]
        for i in range(len(w)):
            dec.add(f"conv{i}.w", rng.normal(0.0, INIT_STD, size=(chans[i + 1], chans[i], 3, 3)))
            if i < len(w) - 1:
                dec.add_bn(f"bn{i}", chans[i + 1])
        dec.add("out.b", np.zeros(IMAGE_SHAPE[0]))

        _conv_stack(m.discriminator, rng, 3, w, 1)
        _conv_stack(m.classifier, rng, 9, w, n)
        return m

    # -- forward passes ---------------------------------------------------

    def encode(self, x, mode: str = "infer", update_stats: bool = True) -> ChunkedFeature:
        x = _check_images(x, 3, "encode")
        f = _run_conv_stack(self.encoder, x, len(self.widths), mode, update_stats)
        return ChunkedFeature(f, self.n, self.d)

    def decode(self, f, mode: str = "infer", update_stats: bool = True) -> Tensor:
        values = f.values if isinstance(f, ChunkedFeature) else (f if isinstance(f, Tensor) else Tensor(f))
        if values.data.ndim != 2 or values.shape[1] != self.n * self.d:
            raise ShapeError("decode", values.shape, (None, self.n * self.d))
        dec = self.decoder
        spatial = IMAGE_SHAPE[1] >> len(self.widths)
        h = ad.bias_add(values @ dec.p("fc.w"), dec.p("fc.b"))
        h = h.reshape(values.shape[0], self.widths[-1], spatial, spatial)
        h = ad.leaky_relu(dec.norm(h, "bn_fc", mode, update_stats), LEAK)
        last = len(self.widths) - 1
        for i in range(len(self.widths)):
            h = ad.conv2d(ad.upsample2x(h), dec.p(f"conv{i}.w"), stride=1, pad=1)
            if i < last:
                h = ad.leaky_relu(dec.norm(h, f"bn{i}", mode, update_stats), LEAK)
        return ad.sigmoid(ad.bias_add(h, dec.p("out.b")))

    def discriminate(self, x, mode: str = "infer", update_stats: bool = True) -> Tensor:
        x = _check_images(x, 3, "discriminate")
        logit = _run_conv_stack(self.discriminator, x, len(self.widths), mode, update_stats)
        return ad.sigmoid(logit.reshape(x.shape[0]))

    def classify(self, x1, x2, x3, mode: str = "infer", update_stats: bool = True) -> Tensor:
        xs = [_check_images(x, 3, "classify") for x in (x1, x2, x3)]
        if len({x.shape[0] for x in xs}) != 1:
            raise ShapeError("classify", *(x.shape for x in xs))
        h = ad.concat_channels(xs)
        return ad.sigmoid(_run_conv_stack(self.classifier, h, len(self.widths), mode, update_stats))

    # -- parameter bookkeeping ----------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for net in self.nets:
            out.update(net.params)
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def param_count(self) -> int:
        return sum(t.size for t in self.parameters())

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Parameters and running statistics as named float64 arrays."""
        out = {k: t.data.astype(np.float64) for k, t in self.named_parameters().items()}
        for net in self.nets:
            for k, st in net.bn.items():
                out[f"{k}.running_mean"] = st.running_mean
                out[f"{k}.running_var"] = st.running_var
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        named = self.named_parameters()
        expected = set(self.state_arrays())
        if set(arrays) != expected:
            missing = sorted(expected - set(arrays))
            extra = sorted(set(arrays) - expected)
            raise CheckpointError(f"parameter mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for k, v in arrays.items():
            if k in named:
                if named[k].shape != v.shape:
                    raise CheckpointError(f"{k}: expected shape {named[k].shape}, found {v.shape}")
                named[k].data = np.ascontiguousarray(v, dtype=named[k].data.dtype)
        for net in self.nets:
            for k, st in net.bn.items():
                st.running_mean = np.array(arrays[f"{k}.running_mean"], dtype=np.float64)
                st.running_var = np.array(arrays[f"{k}.running_var"], dtype=np.float64)


# ---------------------------------------------------------------------------
# checkpoint file

def save_checkpoint(path, model: Model, metadata: dict | None = None) -> None:
    """Write ``model`` in the CHUNKMIX1 binary layout.

    Named arrays follow the magic line; a zero-length name ends the list and
    is followed by a u32 byte count and a UTF-8 ``key=value`` metadata block.
    """
    meta = {"n": model.n, "d": model.d, "widths": ",".join(map(str, model.widths))}
    meta.update(metadata or {})
    buf = bytearray(CHECKPOINT_MAGIC)
    for name, arr in model.state_arrays().items():
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    text = "".join(f"{k}={v}\n" for k, v in meta.items()).encode("utf-8")
    buf += struct.pack("<I", 0) + struct.pack("<I", len(text)) + text
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: bad magic, expected {CHECKPOINT_MAGIC!r}, found {blob[:len(CHECKPOINT_MAGIC)]!r}")
    pos = len(CHECKPOINT_MAGIC)

    def take(nbytes):
        nonlocal pos
        if pos + nbytes > len(blob):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        chunk = blob[pos:pos + nbytes]
        pos += nbytes
        return chunk

    arrays = {}
    while True:
        (length,) = struct.unpack("<I", take(4))
        if length == 0:
            break
        name = take(length).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    (mlen,) = struct.unpack("<I", take(4))
    meta = {}
    for line in take(mlen).decode("utf-8").splitlines():
        k, _, v = line.partition("=")
        meta[k] = v
    return arrays, meta


def load_checkpoint(path) -> tuple[Model, dict[str, str]]:
    arrays, meta = read_checkpoint(path)
    try:
        n, d = int(meta["n"]), int(meta["d"])
        widths = tuple(int(w) for w in meta["widths"].split(","))
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: metadata lacks n/d/widths") from exc
    model = Model.init(0, n, d, widths)
    model.load_state_arrays(arrays)
    return model, meta
