"""Registry of finite-difference gradient checks for every differentiable op."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .losses import LossWeights, composite_loss, depth_loss, gradient_edge_loss, ssim, ssim_loss
from .network import DepthModel, ModelConfig
from .tensor import Tensor, gradcheck

CaseBuilder = Callable[[np.random.Generator], Tuple[Callable[[Tensor], Tensor], Tensor]]


def _u(rng, *shape):
    return rng.uniform(-1.0, 1.0, shape)


def _weighted_sum(rng, shape):
    # a random linear readout makes every output element matter
    w = Tensor(_u(rng, *shape))
    return lambda out: (out * w).sum()


def _conv_input(rng):
    k, b = Tensor(_u(rng, 4, 3, 3, 3)), Tensor(_u(rng, 4))
    ro = _weighted_sum(rng, (2, 4, 4, 3))
    return lambda x: ro(T.conv2d(x, k, b, stride=2, padding=1)), Tensor(_u(rng, 2, 3, 7, 6))


def _conv_kernel(rng):
    x = Tensor(_u(rng, 2, 3, 6, 5))
    ro = _weighted_sum(rng, (2, 4, 6, 3))
    return lambda k: ro(T.conv2d(x, k, None, stride=(1, 2), padding=(1, 1))), Tensor(_u(rng, 4, 3, 3, 3))


def _conv_bias(rng):
    x, k = Tensor(_u(rng, 1, 2, 5, 5)), Tensor(_u(rng, 3, 2, 3, 3))
    ro = _weighted_sum(rng, (1, 3, 3, 3))
    return lambda b: ro(T.conv2d(x, k, b)), Tensor(_u(rng, 3))


def _asym(rng):
    rk, ck = Tensor(_u(rng, 3, 2, 1, 5)), Tensor(_u(rng, 2, 3, 5, 1))
    ro = _weighted_sum(rng, (1, 2, 6, 6))
    return lambda x: ro(T.asymmetric_conv_pair(x, 5, rk, ck)), Tensor(_u(rng, 1, 2, 6, 6))


def _unary(op, shape, out_shape=None):
    def build(rng):
        ro = _weighted_sum(rng, out_shape or shape)
        return lambda x: ro(op(x)), Tensor(_u(rng, *shape))

    return build


def _concat(rng):
    b = Tensor(_u(rng, 1, 3, 2, 2))
    ro = _weighted_sum(rng, (1, 5, 2, 2))
    return lambda a: ro(T.concat_channels(a, b)), Tensor(_u(rng, 1, 2, 2, 2))


def _split(rng):
    ro1, ro2 = _weighted_sum(rng, (1, 2, 3, 3)), _weighted_sum(rng, (1, 3, 3, 3))

    def f(x):
        a, b = T.split_channels(x, 2)
        return ro1(a) + ro2(b)

    return f, Tensor(_u(rng, 1, 5, 3, 3))


def _binary(op):
    def build(rng):
        other = Tensor(rng.uniform(0.5, 1.5, (1, 2, 3, 3)))
        ro = _weighted_sum(rng, (1, 2, 3, 3))
        return lambda x: ro(op(x, other)) + ro(op(other, x)), Tensor(rng.uniform(0.5, 1.5, (1, 2, 3, 3)))

    return build


def _maps(rng, n=2, h=8, w=8):
    # targets in (0.05, 0.95); continuous draws avoid exact ties in |.|
    return Tensor(rng.uniform(0.05, 0.95, (n, 1, h, w))), Tensor(rng.uniform(0.05, 0.95, (n, 1, h, w)))


def _loss_case(fn):
    def build(rng):
        y, y_hat = _maps(rng)
        return lambda p: fn(y, p), y_hat

    return build


def _composite(rng):
    y, y_hat = _maps(rng)
    w = LossWeights(0.7, 0.4, 0.9)
    return lambda p: composite_loss(y, p, w)[0], y_hat


OP_CASES: Dict[str, CaseBuilder] = {
    "conv2d.input": _conv_input,
    "conv2d.kernel": _conv_kernel,
    "conv2d.bias": _conv_bias,
    "asymmetric_conv_pair": _asym,
    "pool2d.max": _unary(lambda x: T.pool2d(x, "max", 3, 2), (1, 2, 7, 7), (1, 2, 3, 3)),
    "pool2d.avg": _unary(lambda x: T.pool2d(x, "avg", 2, 2), (1, 2, 6, 6), (1, 2, 3, 3)),
    "upsample2x.nearest": _unary(lambda x: T.upsample2x(x, "nearest"), (1, 2, 3, 4), (1, 2, 6, 8)),
    "upsample2x.bilinear": _unary(lambda x: T.upsample2x(x, "bilinear"), (1, 2, 3, 4), (1, 2, 6, 8)),
    "concat_channels": _concat,
    "split_channels": _split,
    "relu": _unary(T.relu, (1, 2, 4, 4)),
    "leaky_relu": _unary(lambda x: T.leaky_relu(x, 0.2), (1, 2, 4, 4)),
    "sigmoid": _unary(T.sigmoid, (1, 2, 4, 4)),
    "abs": _unary(T.tabs, (1, 2, 4, 4)),
    "forward_diff": _unary(lambda x: T.forward_diff(x, 3) + T.forward_diff(x, 2), (1, 2, 4, 5)),
    "sum": _unary(lambda x: T.tsum(x, axis=(1, 2, 3), keepdims=True), (2, 2, 3, 3), (2, 1, 1, 1)),
    "mean": _unary(lambda x: T.tmean(x, axis=(2, 3), keepdims=True), (2, 2, 3, 3), (2, 2, 1, 1)),
    "add": _binary(T.add),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "div": _binary(T.div),
    "depth_loss": _loss_case(depth_loss),
    "gradient_edge_loss": _loss_case(gradient_edge_loss),
    "ssim": _loss_case(ssim),
    "ssim_loss": _loss_case(ssim_loss),
    "composite_loss": _composite,
}


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_error: float
    checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def check_op(name: str, seed: int = 0, h: float = 1e-5, tol: float = 1e-4, sabotage: bool = False) -> CheckResult:
    rng = np.random.default_rng(seed)
    f, x = OP_CASES[name](rng)
    analytic = None
    if sabotage:
        x64 = Tensor(np.array(x.data, dtype=np.float64), requires_grad=True)
        T.backward(f(x64))
        analytic = x64.grad * 1.01 + 1e-3
    rep = gradcheck(f, x, h=h, tol=tol, analytic=analytic)
    return CheckResult(name, rep.max_rel_error, rep.checked, tol)


def gradcheck_model(
    config: Optional[ModelConfig] = None,
    seed: int = 0,
    per_tensor: int = 2,
    h: float = 1e-5,
    tol: float = 1e-4,
    atol: float = 1e-6,
) -> CheckResult:
    """End-to-end check: composite loss of the model output w.r.t. sampled parameter entries.

    Runs in 64-bit with small random biases so that no ReLU sits exactly on
    its kink (zero biases over zero padding would put many there).
    """
    config = config or ModelConfig.desk(16, 16, seed=seed)
    rng = np.random.default_rng(seed)
    model = DepthModel(config, dtype=np.float64)
    params = model.parameters()
    for name, p in params.items():
        if name.endswith("bias"):
            p.data = rng.uniform(-0.1, 0.1, p.data.shape)
    h_, w_ = config.input_hw
    x = Tensor(rng.uniform(0.0, 1.0, (1, config.in_channels, h_, w_)))
    y = Tensor(rng.uniform(0.05, 0.95, (1, 1, h_ // 2, w_ // 2)))
    weights = LossWeights(1.0, 1.0, 1.0)

    def loss() -> Tensor:
        return composite_loss(y, model(x), weights)[0]

    model.zero_grad()
    T.backward(loss())
    worst, count = 0.0, 0
    with T.no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            grad = p.grad.reshape(-1)
            for i in rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False):
                orig = flat[i]
                flat[i] = orig + h
                fp = loss().item()
                flat[i] = orig - h
                fm = loss().item()
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                err = abs(grad[i] - num) / max(abs(grad[i]), abs(num), atol)
                worst = max(worst, err)
                count += 1
    return CheckResult("model.composite_loss", float(worst), count, tol)


def run_suite(seed: int = 0, tol: float = 1e-4, sabotage: Optional[str] = None, include_model: bool = True) -> List[CheckResult]:
    results = [check_op(name, seed=seed, tol=tol, sabotage=(name == sabotage)) for name in OP_CASES]
    if include_model:
        results.append(gradcheck_model(seed=seed, tol=tol))
    return results
