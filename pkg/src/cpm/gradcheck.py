"""Finite-difference suite over every differentiable primitive and both losses.

Points are drawn away from kinks and singularities (relu near zero, log and
divide near zero, normalisation near the norm guard) so central differences
are meaningful.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import contrastive as cc

TOLERANCE = 1e-4


def _away_from_zero(rng, shape, lo=0.2, hi=2.0):
    return rng.uniform(lo, hi, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _weighted(out: ad.Tensor, rng) -> ad.Tensor:
    # random projection to a scalar so every output coordinate matters
    w = rng.normal(size=out.shape)
    return ad.reduce_sum(ad.multiply(out, w))


def _case_binary(op):
    def make(rng):
        a = rng.normal(size=(3, 4))
        b = _away_from_zero(rng, (4,)) if op is ad.divide else rng.normal(size=(4,))
        proj = rng.normal(size=(3, 4))
        return (lambda x, y: ad.reduce_sum(ad.multiply(op(x, y), proj))), [a, b]
    return make


def _case_unary(op, sampler):
    def make(rng):
        x = sampler(rng)
        proj = rng.normal(size=x.shape)
        return (lambda t: ad.reduce_sum(ad.multiply(op(t), proj))), [x]
    return make


def _case_matmul(rng):
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 2))
    proj = rng.normal(size=(2, 3, 2))
    return (lambda x, y: ad.reduce_sum(ad.multiply(ad.matmul(x, y), proj))), [a, b]


def _case_reduce(op):
    def make(rng):
        axis = [None, 0, 1, -1][int(rng.integers(4))]
        x = rng.normal(size=(3, 4))
        keep = bool(rng.integers(2))
        probe = op(ad.Tensor(x), axis=axis, keepdims=keep)
        proj = rng.normal(size=probe.shape)
        return (lambda t: ad.reduce_sum(ad.multiply(op(t, axis=axis, keepdims=keep), proj))), [x]
    return make


def _case_softmax(op):
    def make(rng):
        tau = float(rng.uniform(0.2, 2.0))
        x = rng.normal(size=(3, 5))
        proj = rng.normal(size=x.shape)
        return (lambda t: ad.reduce_sum(ad.multiply(op(t, tau), proj))), [x]
    return make


def _case_batchnorm(train):
    def make(rng):
        x = rng.normal(size=(4, 3, 5))
        gamma = rng.uniform(0.5, 1.5, size=5)
        beta = rng.normal(size=5)
        rm, rv = rng.normal(size=5), rng.uniform(0.5, 2.0, size=5)
        proj = rng.normal(size=x.shape)

        def f(t, g, b):
            out = ad.batchnorm(t, g, b, rm.copy(), rv.copy(), train=train)
            return ad.reduce_sum(ad.multiply(out, proj))
        return f, [x, gamma, beta]
    return make


def _case_conv(rng):
    k = int(rng.choice([1, 3, 5]))
    x = rng.normal(size=(6, 2, 3))
    w = rng.normal(size=(k, 3, 2)) * 0.5
    b = rng.normal(size=2)
    proj = rng.normal(size=(6, 2, 2))
    return (lambda t, ww, bb: ad.reduce_sum(ad.multiply(ad.temporal_conv1d(t, ww, bb), proj))), [x, w, b]


def _case_shape(rng):
    x = rng.normal(size=(2, 3, 4))
    y = rng.normal(size=(2, 1, 4))
    idx = rng.integers(0, 4, size=5)
    proj = rng.normal(size=(4, 5, 2))

    def f(a, c):
        z = ad.concat([a, c], axis=1)               # (2, 4, 4)
        z = ad.transpose(z, (1, 2, 0))              # (4, 4, 2)
        z = ad.index_select(z, idx, axis=1)         # (4, 5, 2)
        z = ad.reshape(ad.reshape(z, (20, 2)), (4, 5, 2))
        return ad.reduce_sum(ad.multiply(z, proj))
    return f, [x, y]


def _case_cast(rng):
    x = rng.normal(size=(3, 3))
    proj = rng.normal(size=(3, 3))
    # a float64 round trip; a float32 hop would swamp the difference quotient
    return (lambda t: ad.reduce_sum(ad.multiply(ad.cast(t, np.float64), proj))), [x]


def _case_stop_gradient(rng):
    x = rng.normal(size=(3, 4))
    proj = rng.normal(size=(3, 4))
    return (lambda t: ad.reduce_sum(ad.multiply(ad.multiply(t, ad.stop_gradient(t)), proj))), [x]


def _case_center_normalize(rng):
    x = rng.normal(size=(5, 4))
    proj = rng.normal(size=(5, 4))
    return (lambda t: ad.reduce_sum(ad.multiply(cc.center_and_normalize(t), proj))), [x]


def _loss_case(stage):
    def make(rng):
        b, d, n = 4, 5, 12
        queue = rng.normal(size=(n, d))
        queue /= np.linalg.norm(queue, axis=1, keepdims=True)
        pred, tgt = rng.normal(size=(b, d)), rng.normal(size=(b, d))
        tau = float(rng.uniform(0.1, 0.5))
        tau_prime = float(rng.uniform(0.05, tau))
        k = int(rng.integers(1, 5))

        def f(p, t):
            s_bar = cc.center_and_normalize(p)
            t_bar = ad.stop_gradient(cc.center_and_normalize(t))
            weights, _, _ = cc.target_distributions(t_bar.data, queue, tau_prime, k, enhance=(stage == 2))
            return cc.distribution_loss(weights, cc.student_log_distribution(s_bar, queue, tau))
        return f, [pred, tgt]
    return make


def _pos(rng):
    return rng.uniform(0.3, 3.0, size=(3, 4))


def _kink_free(rng):
    return _away_from_zero(rng, (3, 4))


CASES: dict[str, Callable] = {
    "add": _case_binary(ad.add),
    "sub": _case_binary(ad.sub),
    "multiply": _case_binary(ad.multiply),
    "divide": _case_binary(ad.divide),
    "neg": _case_unary(ad.neg, lambda r: r.normal(size=(3, 4))),
    "matmul": _case_matmul,
    "relu": _case_unary(ad.relu, _kink_free),
    "exp": _case_unary(ad.exp, lambda r: r.normal(size=(3, 4))),
    "log": _case_unary(ad.log, _pos),
    "reduce_sum": _case_reduce(ad.reduce_sum),
    "reduce_mean": _case_reduce(ad.reduce_mean),
    "softmax_with_temperature": _case_softmax(ad.softmax_with_temperature),
    "log_softmax_with_temperature": _case_softmax(ad.log_softmax_with_temperature),
    "l2_normalize_rows": _case_unary(ad.l2_normalize_rows, lambda r: r.normal(size=(3, 4)) + 0.5),
    "mean_center_rows": _case_unary(ad.mean_center_rows, lambda r: r.normal(size=(4, 3))),
    "batchnorm_train": _case_batchnorm(True),
    "batchnorm_eval": _case_batchnorm(False),
    "temporal_conv1d": _case_conv,
    "shape_ops": _case_shape,
    "cast": _case_cast,
    "stop_gradient": _case_stop_gradient,
    "center_and_normalize": _case_center_normalize,
    "loss_stage1": _loss_case(1),
    "loss_stage2": _loss_case(2),
}


@dataclass
class GradcheckResult:
    name: str
    points: int
    max_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


def run_suite(points: int = 100, seed: int = 0, names=None, epsilon: float = 1e-6) -> list[GradcheckResult]:
    """Check each case at ``points`` random points; returns one result per case."""
    results = []
    for i, (name, make) in enumerate(CASES.items()):
        if names is not None and name not in names:
            continue
        rng = np.random.default_rng([seed, i])
        worst, t0 = 0.0, time.perf_counter()
        for _ in range(points):
            f, point = make(rng)
            worst = max(worst, ad.finite_difference_check(f, point, epsilon))
        results.append(GradcheckResult(name, points, worst, time.perf_counter() - t0))
    return results
