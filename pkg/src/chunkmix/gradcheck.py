"""Finite-difference checks for every differentiable op and one full training graph.

Each registered case builds a scalar function of one input from a seeded
generator.  Op outputs are contracted with fixed random weights so every
output coordinate contributes to the gradient.  Inputs to piecewise ops are
kept at least 1e-2 away from their kinks.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .mixing import Mask, forward_cycle, loss_cls, loss_gan, loss_mix, total_objective
from .models import Model

TOLERANCE = {"f64": 1e-4, "f32": 1e-2}
STEP = 1e-5
KINK_MARGIN = 1e-2

CASES: dict[str, Callable] = {}


def register(name: str):
    def deco(builder):
        CASES[name] = builder
        return builder
    return deco


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return ad.tsum(out * w)


def _away_from(x: np.ndarray, points=(0.0,), margin: float = KINK_MARGIN) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    for p in points:
        close = np.abs(x - p) < margin
        x[close] = p + np.where(x[close] >= p, 1.0, -1.0) * 2 * margin
    return x


def _elementwise_case(kind: str, side: int):
    def build(rng):
        a, b, w = rng.normal(size=(3, 2, 3))
        if side == 0:
            return lambda t: _weighted(ad.elementwise(kind, t, Tensor(b)), w), a
        return lambda t: _weighted(ad.elementwise(kind, Tensor(a), t), w), b
    return build


for _kind in ("add", "sub", "mul"):
    register(f"{_kind}[a]")(_elementwise_case(_kind, 0))
    register(f"{_kind}[b]")(_elementwise_case(_kind, 1))


@register("mul[scalar]")
def _mul_scalar(rng):
    x, w = rng.normal(size=(2, 4))
    return lambda t: _weighted(t * 1.7, w), x


@register("where")
def _where(rng):
    a, b, w = rng.normal(size=(3, 3, 4))
    mask = rng.random((3, 4)) < 0.5
    return lambda t: _weighted(ad.where(mask, t, Tensor(b)) * ad.where(mask, Tensor(a), t), w), a


@register("leaky_relu")
def _leaky_relu(rng):
    x, w = rng.normal(size=(2, 20))
    return lambda t: _weighted(ad.leaky_relu(t, 0.2), w), _away_from(x)


@register("sigmoid")
def _sigmoid(rng):
    x, w = rng.normal(size=(2, 10)) * 2
    return lambda t: _weighted(ad.sigmoid(t), w), x


@register("log")
def _log(rng):
    x = rng.uniform(0.2, 2.0, size=10)
    w = rng.normal(size=10)
    return lambda t: _weighted(ad.log(t), w), x


@register("clip")
def _clip(rng):
    x, w = rng.normal(size=(2, 20))
    return lambda t: _weighted(ad.clip(t, -0.5, 0.5), w), _away_from(x, (-0.5, 0.5))


@register("tsum")
def _tsum(rng):
    x = rng.normal(size=(3, 4))
    return lambda t: ad.tsum(t * t), x


@register("mean")
def _mean(rng):
    x = rng.normal(size=(3, 4))
    return lambda t: ad.mean(t * t), x


@register("reshape")
def _reshape(rng):
    x = rng.normal(size=(2, 6))
    w = rng.normal(size=(3, 4))
    return lambda t: _weighted(ad.reshape(t, (3, 4)) * ad.reshape(t, (3, 4)), w), x


@register("matmul[a]")
def _matmul_a(rng):
    a, b, w = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=(3, 2))
    return lambda t: _weighted(ad.matmul(t, Tensor(b)), w), a


@register("matmul[b]")
def _matmul_b(rng):
    a, b, w = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=(3, 2))
    return lambda t: _weighted(ad.matmul(Tensor(a), t), w), b


@register("bias_add[x]")
def _bias_x(rng):
    x, bias, w = rng.normal(size=(2, 3, 2, 2)), rng.normal(size=3), rng.normal(size=(2, 3, 2, 2))
    return lambda t: _weighted(ad.bias_add(t, Tensor(bias)), w), x


@register("bias_add[bias]")
def _bias_b(rng):
    x, bias, w = rng.normal(size=(2, 3, 2, 2)), rng.normal(size=3), rng.normal(size=(2, 3, 2, 2))
    return lambda t: _weighted(ad.bias_add(Tensor(x), t), w), bias


@register("concat_channels")
def _concat(rng):
    a, b = rng.normal(size=(2, 2, 3, 3)), rng.normal(size=(2, 1, 3, 3))
    w = rng.normal(size=(2, 3, 3, 3))
    return lambda t: _weighted(ad.concat_channels([t, Tensor(b)]) * 2.0, w), a


def _conv_case(stride: int, pad: int, side: int):
    def build(rng):
        x, k = rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3))
        w = rng.normal(size=ad.conv2d(Tensor(x), Tensor(k), stride, pad).shape)
        if side == 0:
            return lambda t: _weighted(ad.conv2d(t, Tensor(k), stride, pad), w), x
        return lambda t: _weighted(ad.conv2d(Tensor(x), t, stride, pad), w), k
    return build


for _s, _p in ((1, 0), (1, 1), (2, 1)):
    register(f"conv2d[x,s{_s}p{_p}]")(_conv_case(_s, _p, 0))
    register(f"conv2d[k,s{_s}p{_p}]")(_conv_case(_s, _p, 1))


@register("upsample2x")
def _upsample(rng):
    x, w = rng.normal(size=(1, 2, 3, 3)), rng.normal(size=(1, 2, 6, 6))
    return lambda t: _weighted(ad.upsample2x(t), w), x


def _bn_case(side: int):
    def build(rng):
        x, w = rng.normal(size=(4, 2, 3, 3)), rng.normal(size=(4, 2, 3, 3))
        scale, shift = rng.normal(size=2), rng.normal(size=2)
        args = [Tensor(x), Tensor(scale), Tensor(shift)]

        def f(t):
            a = list(args)
            a[side] = t
            return _weighted(ad.batchnorm(*a, mode="train"), w)
        return f, (x, scale, shift)[side]
    return build


for _i, _name in enumerate(("x", "scale", "shift")):
    register(f"batchnorm[{_name}]")(_bn_case(_i))


FULL_CYCLE_PARAMS = ("enc.fc.b", "dec.out.b", "dsc.fc.b", "cls.fc.b")


def _full_cycle_case(param: str):
    def build(rng):
        model = Model.init(int(rng.integers(2 ** 31)), n=2, d=2, widths=(2, 2, 2))
        x1, x2 = rng.random((2, 2, 3, 16, 16))
        m = Mask(np.array([[1, 0], [0, 1]]))
        net = next(n for n in model.nets if param in n.params)
        x0 = rng.normal(size=net.params[param].shape) * 0.5

        def f(t):
            saved = net.params[param]
            net.params[param] = t
            try:
                cyc = forward_cycle(model, x1, x2, m, mode="train")
                kw = {"update_stats": False}
                s_real = model.discriminate(Tensor(x1), "train", **kw)
                s_fake = model.discriminate(cyc.x3, "train", **kw)
                d_loss, g_loss = loss_gan(s_real, s_fake)
                y = model.classify(Tensor(x1), Tensor(x2), cyc.x3, "train", **kw)
                total, _ = total_objective({"L_M": loss_mix(cyc.x4, x1), "g_loss": g_loss,
                                            "L_C": loss_cls(y, m)})
                return total + d_loss
            finally:
                net.params[param] = saved
        return f, x0
    return build


for _param in FULL_CYCLE_PARAMS:
    register(f"full_cycle[{_param}]")(_full_cycle_case(_param))


def run_case(name: str, seed: int, precision: str = "f64") -> float:
    """Max relative error of one registered case for one seed.

    The backprop gradient is taken in ``precision``; the central-difference
    reference is always taken in 64-bit so that f32 mode measures the error
    of the f32 backward pass rather than the noise of f32 differencing.
    """
    def build():
        return CASES[name](np.random.default_rng([seed, sum(map(ord, name))]))

    with ad.precision(precision):
        f, x0 = build()
        analytic = ad.analytic_gradient(f, x0)
    with ad.precision("f64"):
        f, x0 = build()
        numeric = ad.numeric_gradient(f, x0, STEP)
    return ad.relative_error(analytic, numeric)


def run_suite(seeds=range(20), precision: str = "f64", names=None) -> dict[str, float]:
    """Worst error over ``seeds`` for every registered case (or the listed ``names``)."""
    if precision not in TOLERANCE:
        raise ValueError(f"unknown precision {precision!r}; expected one of {sorted(TOLERANCE)}")
    names = list(names or CASES)
    unknown = [n for n in names if n not in CASES]
    if unknown:
        raise KeyError(f"unknown gradcheck cases {unknown}")
    return {n: max(run_case(n, s, precision) for s in seeds) for n in names}
