"""Central finite-difference gradient checks for every exact-mode layer.

All checks run in float64 with h = 1e-5 and require relative error
<= 1e-5 against the analytic backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import (
    ActBackwardMode,
    BatchNorm,
    BNMode,
    Conv2d,
    GlobalAvgPool,
    HardSigmoid,
    HardSwish,
    Linear,
    ReLU6,
    SEBlock,
    softmax_cross_entropy,
)
from .tensor import Tape, wrap

H = 1e-5
TOL = 1e-5


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    instances: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= TOL


def _run_backward(layer, x: np.ndarray, r: np.ndarray, training=True):
    """Analytic (grad_x, param grads) of loss = sum(forward(x) * r)."""
    tape = Tape()
    layer.forward(wrap(x.copy()), tape, training)
    grads: dict = {}
    g = r.copy()
    for node in reversed(tape.nodes):
        g = node.backward(g, grads)
    return g, grads


def _loss(layer, x: np.ndarray, r: np.ndarray, training=True) -> float:
    out = layer.forward(wrap(x.copy()), None, training)
    return float((out.data * r).sum())


def _fd(fn, arr: np.ndarray) -> np.ndarray:
    g = np.zeros_like(arr)
    flat = arr.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + H
        fp = fn()
        flat[i] = orig - H
        fm = fn()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * H)
    return g


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = np.abs(analytic - numeric).max()
    scale = max(1.0, np.abs(numeric).max())
    return float(diff / scale)


def _check_layer(layer, x: np.ndarray, rng, training=True,
                 check_params=True) -> float:
    out = layer.forward(wrap(x.copy()), None, training)
    r = rng.standard_normal(out.shape)
    ga, gparams = _run_backward(layer, x, r, training)
    worst = _rel_err(ga, _fd(lambda: _loss(layer, x, r, training), x))
    if check_params:
        for name, p in layer.trainable_params().items():
            gn = _fd(lambda: _loss(layer, x, r, training), p)
            worst = max(worst, _rel_err(np.asarray(gparams[name], dtype=float), gn))
    return worst


def _away_from_kinks(a: np.ndarray, kinks, margin=1e-3) -> np.ndarray:
    for k in kinks:
        near = np.abs(a - k) < margin
        a = a + near * 2 * margin
    return a


def check_conv(seed: int, instances: int = 20, depthwise=False) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        cin = int(rng.integers(1, 4))
        k = int(rng.choice([1, 3]))
        stride = int(rng.choice([1, 2]))
        if depthwise:
            groups, cout = cin, cin
        else:
            groups, cout = 1, int(rng.integers(1, 4))
        w = rng.standard_normal((cout, cin // groups, k, k))
        layer = Conv2d("c", w, groups, stride, k // 2)
        x = rng.standard_normal((2, cin, 5, 5))
        worst = max(worst, _check_layer(layer, x, rng))
    name = "conv_depthwise" if depthwise else "conv"
    return CheckResult(name, worst, instances)


def check_bn(seed: int, mode: BNMode, instances: int = 20) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        c = int(rng.integers(1, 5))
        layer = BatchNorm("bn", c, mode)
        layer.gamma = rng.standard_normal(c) + 1.5
        layer.beta = rng.standard_normal(c)
        layer.mu = rng.standard_normal(c) * 0.2
        layer.var = rng.uniform(0.5, 2.0, c)
        x = rng.standard_normal((4, c, 3, 3))
        # running-stat updates never affect the current output, so the
        # in-place momentum updates during finite differencing are harmless
        training = mode == BNMode.Full
        worst = max(worst, _check_layer(layer, x, rng, training=training))
    return CheckResult(f"bn_{mode.value}", worst, instances)


def check_activation(seed: int, cls, kinks, instances: int = 20) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        layer = cls("act")
        x = _away_from_kinks(rng.uniform(-8, 8, (2, 3, 4, 4)), kinks)
        worst = max(worst, _check_layer(layer, x, rng, check_params=False))
    return CheckResult(cls.__name__.lower(), worst, instances)


def check_se(seed: int, instances: int = 20) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(instances):
        c, ratio = 4, 2
        layer = SEBlock("se", c, ratio, rng)
        layer.w1 = layer.w1.astype(np.float64)
        layer.b1 = rng.standard_normal(c // ratio) * 0.1
        layer.w2 = layer.w2.astype(np.float64)
        layer.b2 = rng.standard_normal(c) * 0.1
        x = rng.standard_normal((2, c, 3, 3))
        # keep the gate interior away from the relu/hard-sigmoid kinks
        z1 = x.mean((2, 3)) @ layer.w1.T + layer.b1
        if np.any(np.abs(z1) < 1e-3):
            continue
        worst = max(worst, _check_layer(layer, x, rng))
    return CheckResult("se", worst, instances)


def check_linear(seed: int, instances: int = 20) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        din, dout = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        layer = Linear("fc", rng.standard_normal((dout, din)),
                       rng.standard_normal(dout))
        x = rng.standard_normal((3, din))
        worst = max(worst, _check_layer(layer, x, rng))
    return CheckResult("linear", worst, instances)


def check_gap(seed: int, instances: int = 20) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        layer = GlobalAvgPool("gap")
        x = rng.standard_normal((2, 3, 4, 4))
        worst = max(worst, _check_layer(layer, x, rng, check_params=False))
    return CheckResult("gap", worst, instances)


def check_softmax_ce(seed: int, instances: int = 20) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        b, k = 4, int(rng.integers(2, 6))
        logits = rng.standard_normal((b, k))
        labels = rng.integers(0, k, b)

        def loss_fn():
            return float(softmax_cross_entropy(wrap(logits.copy()), labels).data[0])

        tape = Tape()
        out = softmax_cross_entropy(wrap(logits.copy()), labels, tape)
        grads: dict = {}
        ga = tape.nodes[-1].backward(np.ones(1), grads)
        worst = max(worst, _rel_err(ga, _fd(loss_fn, logits)))
    return CheckResult("softmax_ce", worst, instances)


def run_suite(seed: int = 0, instances: int = 20) -> list:
    results = [
        check_conv(seed, instances),
        check_conv(seed + 1, instances, depthwise=True),
        check_bn(seed + 2, BNMode.Full, instances),
        check_bn(seed + 3, BNMode.ShiftOnly, instances),
        check_bn(seed + 4, BNMode.Frozen, instances),
        check_activation(seed + 5, ReLU6, (0.0, 6.0), instances),
        check_activation(seed + 6, HardSwish, (-3.0, 3.0), instances),
        check_activation(seed + 7, HardSigmoid, (-3.0, 3.0), instances),
        check_se(seed + 8, instances),
        check_linear(seed + 9, instances),
        check_gap(seed + 10, instances),
        check_softmax_ce(seed + 11, instances),
    ]
    return results
