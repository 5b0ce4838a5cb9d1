"""Feature mixing/unmixing cycle and its loss terms.

One training sample runs::

    f1, f2 = Enc(x1), Enc(x2)
    f12    = mix(f1, f2, m)        # chunk i from f1 where m[i] == 1, else f2
    x3     = Dec(f12)
    f3     = Enc(x3)
    f31    = unmix(f3, f1, m)      # chunk i from f3 where m[i] == 1, else f1
    x4     = Dec(f31)

and is scored by a cycle reconstruction loss ``|x4 - x1|^2``, an adversarial
loss on ``x3`` and a per-chunk mask classification loss.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .models import ChunkedFeature

PROB_CLAMP = 1e-7
clamp_events = 0


@dataclass(frozen=True)
class Mask:
    """Per-sample chunk selectors, shape (batch, n) with entries in {0, 1}."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.atleast_2d(np.asarray(self.bits, dtype=np.int64))
        if not np.isin(bits, (0, 1)).all():
            raise ValueError("mask bits must be 0 or 1")
        object.__setattr__(self, "bits", bits)

    @property
    def n(self) -> int:
        return self.bits.shape[1]

    @property
    def batch(self) -> int:
        return self.bits.shape[0]

    def expand(self, d: int) -> np.ndarray:
        """Selector of shape (batch, n*d); each bit repeated ``d`` times."""
        return np.repeat(self.bits, d, axis=1)

    def complement(self) -> "Mask":
        return Mask(1 - self.bits)


def sample_mask(rng: np.random.Generator, n: int, batch: int = 1) -> Mask:
    """Fair i.i.d. bits, one row per image pair.  All-zero/all-one rows are kept."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return Mask(rng.integers(0, 2, size=(batch, n)))


def _select(a: ChunkedFeature, b: ChunkedFeature, m: Mask, op: str) -> ChunkedFeature:
    if (a.n, a.d) != (b.n, b.d) or a.n != m.n:
        raise ShapeError(op, (a.n, a.d), (b.n, b.d), (m.n,))
    sel = m.expand(a.d)
    if sel.shape[0] == 1 and a.batch != 1:
        sel = np.repeat(sel, a.batch, axis=0)
    if sel.shape != a.values.shape or a.values.shape != b.values.shape:
        raise ShapeError(op, a.values.shape, b.values.shape, sel.shape)
    return ChunkedFeature(ad.where(sel, a.values, b.values), a.n, a.d)


def mix(f1: ChunkedFeature, f2: ChunkedFeature, m: Mask) -> ChunkedFeature:
    return _select(f1, f2, m, "mix")


def unmix(f3: ChunkedFeature, f1: ChunkedFeature, m: Mask) -> ChunkedFeature:
    return _select(f3, f1, m, "unmix")


@dataclass
class CycleOutput:
    f1: ChunkedFeature
    f2: ChunkedFeature
    f12: ChunkedFeature
    x3: Tensor
    f3: ChunkedFeature
    f31: ChunkedFeature
    x4: Tensor


def forward_cycle(model, x1, x2, m: Mask, mode: str = "train") -> CycleOutput:
    """Run encode, mix, decode, re-encode, unmix, decode.

    ``model`` needs ``encode(x, mode, update_stats)`` and
    ``decode(f, mode, update_stats)``; any object with those methods works,
    which keeps stub networks easy to write.  The second encode/decode pass
    leaves batch-norm running statistics alone so they track real images.
    """
    x1 = x1 if isinstance(x1, Tensor) else Tensor(x1)
    x2 = x2 if isinstance(x2, Tensor) else Tensor(x2)
    if x1.shape != x2.shape:
        raise ShapeError("forward_cycle", x1.shape, x2.shape)
    f1 = model.encode(x1, mode)
    f2 = model.encode(x2, mode)
    f12 = mix(f1, f2, m)
    x3 = model.decode(f12, mode)
    f3 = model.encode(x3, mode, update_stats=False)
    f31 = unmix(f3, f1, m)
    x4 = model.decode(f31, mode, update_stats=False)
    return CycleOutput(f1, f2, f12, x3, f3, f31, x4)


# ---------------------------------------------------------------------------
# losses

def loss_mix(x4: Tensor, x1) -> Tensor:
    """Squared pixel distance summed per image, averaged over the batch."""
    x1 = x1 if isinstance(x1, Tensor) else Tensor(x1)
    if x4.shape != x1.shape:
        raise ShapeError("loss_mix", x4.shape, x1.shape)
    diff = x4 - x1
    return ad.tsum(diff * diff) * (1.0 / x4.shape[0])


def _clamped_log(p: Tensor) -> Tensor:
    global clamp_events
    hits = int(((p.data < PROB_CLAMP) | (p.data > 1.0 - PROB_CLAMP)).sum())
    clamp_events += hits
    return ad.log(ad.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP))


def _check_scores(s: Tensor, op: str):
    # NaN passes through so that a diverged run surfaces as a non-finite loss
    if np.any(s.data < 0.0) or np.any(s.data > 1.0):
        raise ValueError(f"{op}: scores must lie in [0, 1]")


def loss_gan(dsc_real: Tensor, dsc_fake: Tensor) -> tuple[Tensor, Tensor]:
    """Discriminator and (non-saturating) generator losses from sigmoid scores.

    ``d_loss = -mean(log s_real + log(1 - s_fake))``,
    ``g_loss = -mean(log s_fake)``.
    """
    _check_scores(dsc_real, "loss_gan")
    _check_scores(dsc_fake, "loss_gan")
    d_loss = -(ad.mean(_clamped_log(dsc_real)) + ad.mean(_clamped_log(1.0 - dsc_fake)))
    g_loss = -ad.mean(_clamped_log(dsc_fake))
    return d_loss, g_loss


def loss_cls(y: Tensor, m: Mask) -> Tensor:
    """Per-chunk binary cross-entropy, summed over chunks and averaged over the batch."""
    y = y if isinstance(y, Tensor) else Tensor(y)
    bits = m.bits.astype(y.data.dtype)
    if bits.shape[0] == 1 and y.shape[0] != 1:
        bits = np.repeat(bits, y.shape[0], axis=0)
    if bits.shape != y.shape:
        raise ShapeError("loss_cls", y.shape, m.bits.shape)
    _check_scores(y, "loss_cls")
    ll = _clamped_log(y) * bits + _clamped_log(1.0 - y) * (1.0 - bits)
    return ad.tsum(ll) * (-1.0 / y.shape[0])


def total_objective(losses: dict, lambda_m: float = 1.0, lambda_g: float = 1.0,
                    lambda_c: float = 1.0, toggles=("mix_cycle", "gan", "cls")):
    """Weighted min-player loss and the separate discriminator loss.

    ``losses`` may hold ``L_M``, ``g_loss``, ``d_loss``, ``L_C`` and
    ``L_AE``; terms whose toggle is off (or that are missing) are skipped.
    The plain reconstruction term ``L_AE`` shares the ``lambda_m`` weight.
    """
    if min(lambda_m, lambda_g, lambda_c) < 0:
        raise ValueError("loss weights must be non-negative")
    toggles = set(toggles)
    terms = []
    if "mix_cycle" in toggles and "L_M" in losses:
        terms.append(losses["L_M"] * lambda_m)
    if "plain_recon" in toggles and "L_AE" in losses:
        terms.append(losses["L_AE"] * lambda_m)
    if "gan" in toggles and "g_loss" in losses:
        terms.append(losses["g_loss"] * lambda_g)
    if "cls" in toggles and "L_C" in losses:
        terms.append(losses["L_C"] * lambda_c)
    total = Tensor(0.0)
    for t in terms:
        total = total + t
    d_loss = losses.get("d_loss") if "gan" in toggles else None
    return total, d_loss
