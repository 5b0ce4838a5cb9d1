"""Alternating min-max training of the mixing autoencoder.

Each step takes one discriminator update on ``d_loss`` followed by one joint
update of encoder, decoder and classifier on the weighted objective.  Which
terms participate is controlled by ``TrainConfig.toggles``; the ablation
rows are named presets of those toggles.
"""
from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .evaluation import best_chunk_table, encode_images
from .mixing import forward_cycle, loss_cls, loss_gan, loss_mix, mix, sample_mask, total_objective
from .models import Model, save_checkpoint

TOGGLES = ("mix_cycle", "plain_recon", "gan", "cls")
LOG_COLUMNS = ("step", "L_M", "g_loss", "d_loss", "L_C", "cls_acc", "wall_ms")

# Table 2 rows: (toggles, use the single-chunk layout)
METHODS = {
    "Random": ((), False),
    "C+G": (("gan", "cls"), False),
    "AE": (("plain_recon",), True),
    "AE+C+G": (("plain_recon", "gan", "cls"), False),
    "MIX": (("mix_cycle",), False),
    "MIX+C": (("mix_cycle", "cls"), False),
    "MIX+G": (("mix_cycle", "gan"), False),
    "MIX+C+G": (("mix_cycle", "gan", "cls"), False),
    "Untrained": ((), False),
}
# rows emitted by default; "Untrained" (encoder at initialization) is an opt-in diagnostic
TABLE_ROWS = tuple(m for m in METHODS if m != "Untrained")


class TrainingAborted(RuntimeError):
    """A loss became NaN/Inf; carries the step index and the loss snapshot."""

    def __init__(self, step: int, losses: dict):
        self.step = step
        self.losses = losses
        snap = ", ".join(f"{k}={v}" for k, v in losses.items())
        super().__init__(f"non-finite loss at step {step}: {snap}")


@dataclass
class TrainConfig:
    lambda_m: float = 1.0
    lambda_g: float = 1.0
    lambda_c: float = 1.0
    toggles: tuple = ("mix_cycle", "gan", "cls")
    chunks: int = 4
    chunk_dim: int = 8
    epochs: int = 40
    batch: int = 32
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    precision: str = "f64"
    widths: tuple = (32, 64, 128)

    def __post_init__(self):
        self.toggles = tuple(self.toggles)
        self.widths = tuple(self.widths)
        self.validate()

    def validate(self):
        unknown = set(self.toggles) - set(TOGGLES)
        if unknown:
            raise ValueError(f"unknown toggles {sorted(unknown)}; expected a subset of {TOGGLES}")
        if not self.toggles:
            raise ValueError("at least one loss toggle must be enabled")
        if self.chunks * self.chunk_dim <= 0:
            raise ValueError("chunks * chunk_dim must be positive")
        if min(self.lambda_m, self.lambda_g, self.lambda_c) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.batch < 2:
            raise ValueError("batch must be >= 2 for batch normalization")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def as_metadata(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f"config.{f.name}"] = ",".join(map(str, v)) if isinstance(v, tuple) else v
        return out


PRESETS = {
    "paper_equal": TrainConfig(),
    "paper_celeba_weights": TrainConfig(lambda_m=30.0),
}


def method_config(method: str, base: TrainConfig) -> TrainConfig:
    """Config for a named ablation row; ``Random`` and ``Untrained`` are not trainable."""
    toggles, single_chunk = METHODS[method]
    if not toggles:
        raise ValueError(f"{method} has no training objective")
    cfg = base.replace(toggles=toggles)
    if single_chunk:
        cfg = cfg.replace(chunks=1, chunk_dim=base.chunks * base.chunk_dim)
    return cfg


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0


def adam_step(params, grads, state: AdamState, lr=2e-4, beta1=0.5, beta2=0.999, eps=1e-8) -> AdamState:
    """In-place bias-corrected Adam update of numpy arrays ``params``."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ad.ShapeError("adam_step", p.shape, g.shape)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


class Adam:
    def __init__(self, params, lr=2e-4, beta1=0.5, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState()

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step([p.data for p in self.params], grads, self.state,
                  self.lr, self.beta1, self.beta2, self.eps)


# ---------------------------------------------------------------------------
# logging

@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    seed: int = 0

    def append(self, row: dict):
        if self.rows and row["step"] <= self.rows[-1]["step"]:
            raise ValueError("log steps must increase")
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def to_tsv(self, timing: bool = False) -> str:
        """TSV text; ``wall_ms`` is written as 0 unless ``timing`` so files stay reproducible."""
        lines = ["\t".join(LOG_COLUMNS)]
        for r in self.rows:
            cells = [str(r["step"])]
            for k in LOG_COLUMNS[1:-1]:
                v = r.get(k)
                cells.append("-" if v is None else f"{v:.6g}")
            cells.append(str(r["wall_ms"] if timing else 0))
            lines.append("\t".join(cells))
        return "\n".join(lines) + "\n"

    def write(self, path, timing: bool = False):
        Path(path).write_text(self.to_tsv(timing), encoding="utf-8")


@dataclass
class TrainResult:
    model: Model
    log: TrainLog
    config: TrainConfig


# ---------------------------------------------------------------------------
# training loop

def _mask_accuracy(y: np.ndarray, bits: np.ndarray) -> float:
    return float(((y > 0.5) == (bits == 1)).mean())


def train_step(model: Model, config: TrainConfig, x1: np.ndarray, x2: np.ndarray, rng,
               opt_dsc: Adam | None, opt_min: Adam) -> dict:
    toggles = set(config.toggles)
    m = sample_mask(rng, config.chunks, len(x1))
    need_cycle = bool(toggles & {"mix_cycle", "gan", "cls"})
    out = {"L_M": None, "g_loss": None, "d_loss": None, "L_C": None, "cls_acc": None}
    losses = {}

    x1t = Tensor(x1)
    if need_cycle:
        if "mix_cycle" in toggles:
            cyc = forward_cycle(model, x1t, Tensor(x2), m, "train")
            f1, x3 = cyc.f1, cyc.x3
            losses["L_M"] = loss_mix(cyc.x4, x1t)
        else:
            f1 = model.encode(x1t, "train")
            f2 = model.encode(Tensor(x2), "train")
            x3 = model.decode(mix(f1, f2, m), "train")
    else:
        f1 = model.encode(x1t, "train")

    if "plain_recon" in toggles:
        losses["L_AE"] = loss_mix(model.decode(f1, "train"), x1t)

    if "gan" in toggles:
        s_real = model.discriminate(x1t, "train")
        s_fake = model.discriminate(x3.detach(), "train")
        d_loss, _ = loss_gan(s_real, s_fake)
        out["d_loss"] = d_loss.item()
        if not math.isfinite(out["d_loss"]):
            raise TrainingAborted(-1, {k: v for k, v in out.items() if v is not None})
        dsc_params = model.discriminator.parameters()
        ad.backward(d_loss, dsc_params)
        opt_dsc.step()
        s_fake_g = model.discriminate(x3, "train", update_stats=False)
        _, losses["g_loss"] = loss_gan(s_real.detach(), s_fake_g)

    if "cls" in toggles:
        y = model.classify(x1t, Tensor(x2), x3, "train")
        losses["L_C"] = loss_cls(y, m)
        out["cls_acc"] = _mask_accuracy(y.data, m.bits)

    total, _ = total_objective(losses, config.lambda_m, config.lambda_g, config.lambda_c, toggles)
    for k in ("L_M", "g_loss", "L_C"):
        if k in losses:
            out[k] = losses[k].item()
    if "L_AE" in losses:
        out["L_M"] = losses["L_AE"].item()
    bad = {k: v for k, v in out.items() if v is not None and not math.isfinite(v)}
    if bad or not math.isfinite(total.item()):
        raise TrainingAborted(-1, {k: v for k, v in out.items() if v is not None})
    ad.backward(total, opt_min.params)
    opt_min.step()
    return out


def train(config: TrainConfig, images: np.ndarray, out_dir=None, checkpoint_every_epoch: bool = True,
          progress=None, metadata: dict | None = None) -> TrainResult:
    """Train from scratch on an image array (labels are never seen here).

    When ``out_dir`` is given the checkpoint ``model.ckpt`` is rewritten after
    every epoch and at the end, and ``train_log.tsv`` holds the step log.
    ``metadata`` entries are stored in the checkpoint next to the config.
    """
    config.validate()
    images = np.asarray(images)
    if images.ndim != 4 or len(images) < 2:
        raise ValueError(f"need an (N, 3, 16, 16) image array with N >= 2, got {images.shape}")
    with ad.precision(config.precision):
        model = Model.init(config.seed, config.chunks, config.chunk_dim, config.widths)
        dtype = model.encoder.parameters()[0].data.dtype
        data = images.astype(dtype)
        rng = np.random.default_rng([config.seed, 1])
        kw = dict(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
        opt_dsc = Adam(model.discriminator.parameters(), **kw)
        opt_min = Adam(model.encoder.parameters() + model.decoder.parameters()
                       + model.classifier.parameters(), **kw)
        log = TrainLog(seed=config.seed)
        batch = min(config.batch, len(data))
        steps_per_epoch = len(data) // batch
        step = 0
        t0 = time.perf_counter()
        for epoch in range(config.epochs):
            perm1 = rng.permutation(len(data))
            perm2 = rng.permutation(len(data))
            for b in range(steps_per_epoch):
                sl = slice(b * batch, (b + 1) * batch)
                try:
                    row = train_step(model, config, data[perm1[sl]], data[perm2[sl]], rng, opt_dsc, opt_min)
                except TrainingAborted as exc:
                    raise TrainingAborted(step, exc.losses) from None
                step += 1
                row["step"] = step
                row["wall_ms"] = int(round(1000 * (time.perf_counter() - t0)))
                log.append(row)
            if out_dir is not None and checkpoint_every_epoch:
                _write_outputs(out_dir, model, config, log, metadata)
            if progress is not None:
                progress(epoch, log)
        if out_dir is not None:
            _write_outputs(out_dir, model, config, log, metadata)
    return TrainResult(model, log, config)


def _write_outputs(out_dir, model, config, log, metadata=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out_dir / "model.ckpt", model, {**config.as_metadata(), **(metadata or {})})
    log.write(out_dir / "train_log.tsv")


# ---------------------------------------------------------------------------
# ablation

def random_features(count: int, width: int, seed: int) -> np.ndarray:
    """Input-independent standard normal features: the chance-level retrieval baseline."""
    return np.random.default_rng([seed, 2]).standard_normal((count, width))


def _method_features(method, seed, base, train_images, test_images):
    if method == "Random":
        return random_features(len(test_images), base.chunks * base.chunk_dim, seed), base.chunks, base.chunk_dim
    if method == "Untrained":
        with ad.precision(base.precision):
            model = Model.init(seed, base.chunks, base.chunk_dim, base.widths)
    else:
        model = train(method_config(method, base).replace(seed=seed), train_images).model
    return encode_images(model, test_images), model.n, model.d


def ablation_suite(train_images, test_images, test_labels, seeds, base: TrainConfig | None = None,
                   methods=TABLE_ROWS, factor_names=None, progress=None) -> dict:
    """Train every requested Table-2 row for every seed and score retrieval mAP.

    ``Random`` scores seeded Gaussian features that ignore the input, i.e.
    the chance baseline; ``Untrained`` scores the encoder at initialization.

    Returns ``{"methods", "factors", "per_seed", "table"}`` where ``table``
    holds the per-method median over seeds of each factor's best-chunk mAP
    and of their average.
    """
    base = base or TrainConfig()
    if not seeds:
        raise ValueError("need at least one seed")
    n_factors = test_labels.shape[1]
    factor_names = list(factor_names or [f"factor{i}" for i in range(n_factors)])
    per_seed = {}
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ValueError(f"unknown methods {unknown}; expected names from {list(METHODS)}")
    for method in methods:
        rows = []
        for seed in seeds:
            feats, n, d = _method_features(method, seed, base, train_images, test_images)
            table = best_chunk_table(feats, test_labels, n, d)
            rows.append(np.append(table.best_map, table.average))
            if progress is not None:
                progress(method, seed, table)
        per_seed[method] = np.array(rows)
    table = {m: np.median(v, axis=0) for m, v in per_seed.items()}
    return {"methods": list(methods), "factors": factor_names, "per_seed": per_seed, "table": table}


def ablation_tsv(report: dict) -> str:
    header = ["method"] + list(report["factors"]) + ["average"]
    lines = ["\t".join(header)]
    for m in report["methods"]:
        lines.append("\t".join([m] + [f"{v:.4f}" for v in report["table"][m]]))
    return "\n".join(lines) + "\n"
