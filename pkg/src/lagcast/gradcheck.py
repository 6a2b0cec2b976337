"""Central finite-difference checks of the autodiff engine.

Each case draws float64 inputs from a generator, reduces the op output to
a scalar with a fixed random weighting, and compares the analytic gradient
against central differences. The reported error for one instance is
``max_k |g_k - n_k| / max(|g|_inf, |n|_inf, floor)``, taken over every
checked entry of every input.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .advection import divergence_penalty, extrapolate
from .autodiff import DiffTensor, Parameter
from .nets import UNet, UNetConfig

EPS = 1e-6
TOLERANCE = 1e-4
FLOOR = 1e-8


def _away_from_kinks(rng, shape, margin=0.05):
    """Random values with |v| >= margin, keeping non-smooth ops differentiable."""
    v = rng.uniform(margin, 1.0, shape)
    return v * rng.choice([-1.0, 1.0], shape)


def _fractional(rng, shape, lo=0.1, hi=0.9):
    """Displacements whose fractional part stays off integer sample points."""
    return rng.integers(-1, 2, shape) + rng.uniform(lo, hi, shape)


@dataclass
class Case:
    """A named gradient check. ``build(rng)`` returns ``(fn, inputs)``."""

    name: str
    build: object
    max_entries: int = 64


def _unary(op, kinks=False):
    def build(rng):
        shape = (2, 2, 3, 4)
        x = _away_from_kinks(rng, shape) if kinks else rng.normal(size=shape)
        return (lambda t: op(t[0])), [x]
    return build


def _binary(op):
    def build(rng):
        shape = (2, 2, 3, 3)
        return (lambda t: op(t[0], t[1])), [rng.normal(size=shape), rng.normal(size=shape)]
    return build


def _conv(stride, padding, bias):
    def build(rng):
        x = rng.normal(size=(2, 2, 6, 6))
        w = rng.normal(size=(3, 2, 3, 3))
        ins = [x, w]
        if bias:
            ins.append(rng.normal(size=(1, 3, 1, 1)))

        def fn(t):
            return ad.conv2d(t[0], t[1], t[2] if bias else None, stride=stride, padding=padding)
        return fn, ins
    return build


def _max_pool(rng):
    # distinct values so the window maximum is unique
    x = rng.permutation(2 * 2 * 4 * 6).reshape(2, 2, 4, 6) * 0.1 + rng.uniform(0, 0.01, (2, 2, 4, 6))
    return (lambda t: ad.max_pool2d(t[0])), [x]


def _grid_sample(rng):
    inp = rng.normal(size=(2, 2, 5, 6))
    base = np.stack(np.meshgrid(np.arange(6), np.arange(5), indexing="xy"))[None].astype(float)
    coords = base + _fractional(rng, (2, 2, 5, 6))
    return (lambda t: ad.grid_sample_bilinear(t[0], t[1])), [inp, coords]


def _extrapolate(steps):
    def build(rng):
        field = rng.normal(size=(1, 1, 7, 7))
        motion = _fractional(rng, (1, 2, 7, 7))
        return (lambda t: extrapolate(t[0], t[1], steps)), [field, motion]
    return build


def _div_penalty(rng):
    return (lambda t: divergence_penalty(t[0])), [rng.normal(size=(2, 2, 6, 6))]


def _unet(rng):
    cfg = UNetConfig(2, 2, depth=1, base_channels=3, zero_head=False)
    net = UNet(cfg, "gc", seed=int(rng.integers(2 ** 31)), dtype=np.float64)
    names = list(net.params)
    x = rng.normal(size=(1, 2, 4, 4))
    ins = [x] + [net.params[k].values for k in names]

    def fn(t):
        net.params = {k: v for k, v in zip(names, t[1:])}
        return net(t[0])
    return fn, ins


CASES = [
    Case("add", _binary(ad.add)),
    Case("sub", _binary(ad.sub)),
    Case("mul", _binary(ad.mul)),
    Case("add_scalar", _unary(lambda a: ad.add_scalar(a, 0.7))),
    Case("mul_scalar", _unary(lambda a: ad.mul_scalar(a, -1.3))),
    Case("square", _unary(ad.square)),
    Case("relu", _unary(ad.relu, kinks=True)),
    Case("leaky_relu", _unary(ad.leaky_relu, kinks=True)),
    Case("sigmoid", _unary(ad.sigmoid)),
    Case("tanh", _unary(ad.tanh)),
    Case("abs", _unary(ad.abs_, kinks=True)),
    Case("clamp_min", _unary(ad.clamp_min, kinks=True)),
    Case("sum", _unary(ad.sum_)),
    Case("mean", _unary(ad.mean)),
    Case("concat", _binary(lambda a, b: ad.concat([a, b]))),
    Case("slice", _unary(lambda a: a[:, 1:2, 0:2, 1:4])),
    Case("pad_replicate", _unary(lambda a: ad.pad_replicate(a, 1))),
    Case("conv2d", _conv(1, 1, True)),
    Case("conv2d_stride2", _conv(2, 0, False)),
    Case("max_pool2d", _max_pool),
    Case("upsample_nearest", _unary(ad.upsample_nearest)),
    Case("grid_sample_bilinear", _grid_sample),
    Case("extrapolate_1", _extrapolate(1)),
    Case("extrapolate_2", _extrapolate(2)),
    Case("extrapolate_3", _extrapolate(3)),
    Case("divergence_penalty", _div_penalty),
    Case("unet_depth1", _unet, max_entries=24),
]


def _scalar(fn, arrays, weight):
    tensors = [DiffTensor(a) for a in arrays]
    out = fn(tensors)
    return float(np.sum(out.values * weight))


def check_instance(case, rng):
    """Relative error of one random instance of ``case``."""
    fn, arrays = case.build(rng)
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [Parameter(a.copy(), f"in{i}") for i, a in enumerate(arrays)]
    out = fn(leaves)
    weight = rng.normal(size=out.shape)
    ad.backward(ad.sum_(ad.mul(out, DiffTensor(weight))))

    worst = 0.0
    for i, leaf in enumerate(leaves):
        analytic = np.zeros_like(arrays[i]) if leaf.grad is None else leaf.grad
        flat = arrays[i].reshape(-1)
        picks = np.arange(flat.size)
        if flat.size > case.max_entries:
            picks = rng.choice(flat.size, case.max_entries, replace=False)
        numeric = np.empty(len(picks))
        for j, k in enumerate(picks):
            orig = flat[k]
            flat[k] = orig + EPS
            up = _scalar(fn, arrays, weight)
            flat[k] = orig - EPS
            down = _scalar(fn, arrays, weight)
            flat[k] = orig
            numeric[j] = (up - down) / (2 * EPS)
        a = analytic.reshape(-1)[picks]
        scale = max(np.abs(a).max(), np.abs(numeric).max(), FLOOR)
        worst = max(worst, float(np.abs(a - numeric).max() / scale))
    return worst


def run_gradcheck(instances=20, seed=0, names=None):
    """Check every case on ``instances`` random draws; returns {name: max rel err}."""
    rng = np.random.default_rng(seed)
    results = {}
    for case in CASES:
        if names is not None and case.name not in names:
            continue
        results[case.name] = max(check_instance(case, rng) for _ in range(instances))
    return results
