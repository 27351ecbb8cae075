"""Finite-difference verification suite used by ``scpl gradcheck`` and the tests.

Each check compares tape gradients with central differences on seeded random
inputs. Smooth ops must agree to ``SMOOTH_TOL``; losses and kinked
activations get ``KINKED_TOL``. Inputs to kinked ops are pushed away from the
kink so the difference quotient never straddles it.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, finite_diff_check
from .layers import Conv2d, Linear, init_params
from .losses import cross_entropy, supcon_loss, supcon_loss_alg1
from .network import NetworkTemplate, blocking_violations, build_from_template, component_step

SMOOTH_TOL = 1e-6
KINKED_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    cases: int
    max_error: float
    tolerance: float
    detail: str = ""

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        if self.detail:
            return f"{status} {self.name:<22} cases={self.cases:<4} {self.detail}"
        return (f"{status} {self.name:<22} cases={self.cases:<4} max_rel_err={self.max_error:.2e} "
                f"tol={self.tolerance:.0e}")


def _weighted(y: Tensor, w: np.ndarray) -> Tensor:
    """Scalarize ``y`` with a fixed random weighting so every output coordinate matters."""
    return ad.sum(ad.mul(y, w))


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _labels_with_positives(rng, b, classes):
    y = rng.integers(0, classes, size=b)
    y[1] = y[0]  # at least one positive pair
    return y


# every case: rng -> (f, x); the check differentiates f at x


def _case_add(rng):
    b, w = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    return lambda t: _weighted(ad.add(t, b), w), rng.normal(size=(3, 4))


def _case_mul(rng):
    b, w = rng.normal(size=(4,)), rng.normal(size=(3, 4))
    return lambda t: _weighted(ad.mul(t, b), w), rng.normal(size=(3, 4))


def _case_broadcast(rng):
    a, w = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    return lambda t: _weighted(ad.mul(a, t), w), rng.normal(size=(1, 4))


def _case_matmul(rng):
    b, w = rng.normal(size=(4, 5)), rng.normal(size=(3, 5))
    return lambda t: _weighted(ad.matmul(t, b), w), rng.normal(size=(3, 4))


def _case_exp_log(rng):
    w = rng.normal(size=(6,))
    return lambda t: _weighted(ad.log(ad.add(ad.exp(t), 1.0)), w), rng.normal(size=(6,))


def _case_tanh(rng):
    w = rng.normal(size=(2, 5))
    return lambda t: _weighted(ad.tanh(t), w), rng.normal(size=(2, 5))


def _case_l2_normalize(rng):
    w = rng.normal(size=(4, 3))
    return lambda t: _weighted(ad.l2_normalize(t), w), rng.normal(size=(4, 3))


def _case_log_sum_exp(rng):
    mask = rng.random((4, 5)) > 0.3
    mask[:, 0] = True
    w = rng.normal(size=(4,))
    return lambda t: _weighted(ad.log_sum_exp(t, axis=1, where=mask), w), 3.0 * rng.normal(size=(4, 5))


def _case_mean_reshape(rng):
    return lambda t: ad.mean(ad.mul(ad.reshape(t, (3, 4)), ad.reshape(t, (3, 4)))), rng.normal(size=(12,))


def _case_linear_weight(rng):
    lin = Linear(4, 3)
    init_params(lin, int(rng.integers(1 << 30)))
    x, w = rng.normal(size=(5, 4)), rng.normal(size=(5, 3))
    return lambda t: _weighted(ad.add(ad.matmul(x, ad.transpose(t)), lin.bias.value), w), lin.weight.value


def _case_conv_input(rng):
    conv = Conv2d(2, 3)
    init_params(conv, int(rng.integers(1 << 30)))
    w = rng.normal(size=(1, 3, 4, 4))
    return lambda t: _weighted(ad.conv2d(t, conv.weight.value, conv.bias.value), w), rng.normal(size=(1, 2, 4, 4))


def _case_conv_weight(rng):
    x, w = rng.normal(size=(2, 2, 4, 4)), rng.normal(size=(2, 2, 4, 4))
    b = rng.normal(size=(2,))
    return lambda t: _weighted(ad.conv2d(x, t, b), w), 0.3 * rng.normal(size=(2, 2, 3, 3))


def _case_relu(rng):
    w = rng.normal(size=(3, 4))
    return lambda t: _weighted(ad.relu(t), w), _away_from_zero(rng, (3, 4))


def _case_leaky_relu(rng):
    w = rng.normal(size=(3, 4))
    return lambda t: _weighted(ad.leaky_relu(t), w), _away_from_zero(rng, (3, 4))


def _supcon_case(loss_fn):
    def case(rng):
        b, d = int(rng.integers(4, 9)), int(rng.integers(2, 6))
        y = _labels_with_positives(rng, b, 3)
        tau = float(rng.choice([0.1, 0.5, 1.0]))
        return lambda t: loss_fn(t, y, tau), rng.normal(size=(b, d))
    return case


def _case_cross_entropy(rng):
    y = rng.integers(0, 4, size=5)
    return lambda t: cross_entropy(t, y), 2.0 * rng.normal(size=(5, 4))


CHECKS: dict[str, tuple[Callable, float]] = {
    "add": (_case_add, SMOOTH_TOL),
    "mul": (_case_mul, SMOOTH_TOL),
    "mul_broadcast": (_case_broadcast, SMOOTH_TOL),
    "matmul": (_case_matmul, SMOOTH_TOL),
    "exp_log": (_case_exp_log, SMOOTH_TOL),
    "tanh": (_case_tanh, SMOOTH_TOL),
    "l2_normalize": (_case_l2_normalize, SMOOTH_TOL),
    "log_sum_exp": (_case_log_sum_exp, SMOOTH_TOL),
    "mean_reshape": (_case_mean_reshape, SMOOTH_TOL),
    "linear_weight": (_case_linear_weight, SMOOTH_TOL),
    "conv2d_input": (_case_conv_input, SMOOTH_TOL),
    "conv2d_weight": (_case_conv_weight, SMOOTH_TOL),
    "relu": (_case_relu, KINKED_TOL),
    "leaky_relu": (_case_leaky_relu, KINKED_TOL),
    "supcon_eq": (_supcon_case(supcon_loss), KINKED_TOL),
    "supcon_alg1": (_supcon_case(supcon_loss_alg1), KINKED_TOL),
    "cross_entropy": (_case_cross_entropy, KINKED_TOL),
}


def run_check(name: str, seeds: int = 8, base_seed: int = 0) -> CheckResult:
    make, tol = CHECKS[name]
    worst = 0.0
    for s in range(seeds):
        rng = np.random.default_rng([base_seed, s, zlib.crc32(name.encode())])
        f, x = make(rng)
        worst = max(worst, finite_diff_check(f, x))
    return CheckResult(name, seeds, worst, tol)


def check_blocking(seed: int = 0) -> CheckResult:
    """Run one local step per component of an H=3 net; count foreign gradient buffers."""
    t = NetworkTemplate(kind="mlp", dims=(6, 8, 8, 8, 3), projection_head="linear", head_out=8)
    net = build_from_template(t, seed=seed)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(8, 6))
    y = _labels_with_positives(rng, 8, 3)
    foreign = 0
    for c in net.components:
        res = component_step(c, x, y)
        foreign += len(blocking_violations(c, res.tape))
        x = res.output
    return CheckResult("component_blocking", len(net.components), float(foreign), 0.5,
                       f"foreign_buffers={foreign}")


def run_suite(seeds: int = 8, base_seed: int = 0) -> list[CheckResult]:
    results = [run_check(name, seeds, base_seed) for name in CHECKS]
    results.append(check_blocking(base_seed))
    return results


def wrong_relu_vjp(g, needs, inputs, out):
    """Deliberately broken relu backward: passes the gradient through unmasked."""
    return (g,)
