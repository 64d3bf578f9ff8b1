"""Composite depth-regression loss: point-wise L1, gradient-edge and SSIM terms.

All functions take NCHW tensors (normally one channel) and return scalar
tensors that participate in the gradient tape. A single pixel count spans
the whole batch, so loss scale does not depend on batch size.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

from .tensor import ContractError, DimensionError, Tensor, forward_diff

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    w1: float = 1.0
    w2: float = 1.0
    w3: float = 1.0

    def __post_init__(self):
        for name in ("w1", "w2", "w3"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"loss weight {name}={v} outside [0, 1]")
        if self.w1 == self.w2 == self.w3 == 0.0:
            raise ConfigError("loss weights must not all be zero")

    def as_tuple(self) -> Tuple[float, float, float]:
        return (self.w1, self.w2, self.w3)


@dataclass(frozen=True)
class LossBreakdown:
    depth: float
    grad: float
    ssim: float
    total: float


def _check_pair(y: Tensor, y_hat: Tensor) -> None:
    if y.shape != y_hat.shape:
        raise DimensionError(f"prediction shape {y_hat.shape} does not match target shape {y.shape}")


def depth_loss(y: Tensor, y_hat: Tensor) -> Tensor:
    _check_pair(y, y_hat)
    return (y - y_hat).abs().mean()


def gradient_edge_loss(y: Tensor, y_hat: Tensor) -> Tensor:
    _check_pair(y, y_hat)
    if y.shape[2] < 2 or y.shape[3] < 2:
        raise DimensionError(f"gradient loss needs maps of at least 2x2, got {y.shape}")
    diff = y - y_hat
    # differencing is linear: g(y) - g(y_hat) == g(y - y_hat)
    gx = forward_diff(diff, axis=3).abs()
    gy = forward_diff(diff, axis=2).abs()
    return (gx + gy).mean()


def ssim(y: Tensor, y_hat: Tensor, c1: float = SSIM_C1, c2: float = SSIM_C2) -> Tensor:
    """Whole-image SSIM per sample (population statistics), averaged over the batch."""
    _check_pair(y, y_hat)
    if c1 <= 0 or c2 <= 0:
        raise ContractError(f"SSIM stabilisers must be positive, got c1={c1}, c2={c2}")
    axes = tuple(range(1, y.ndim))
    mu_y = y.mean(axis=axes, keepdims=True)
    mu_p = y_hat.mean(axis=axes, keepdims=True)
    dy = y - mu_y
    dp = y_hat - mu_p
    var_y = dy.square().mean(axis=axes, keepdims=True)
    var_p = dp.square().mean(axis=axes, keepdims=True)
    cov = (dy * dp).mean(axis=axes, keepdims=True)
    num = (2.0 * mu_y * mu_p + c1) * (2.0 * cov + c2)
    den = (mu_y.square() + mu_p.square() + c1) * (var_y + var_p + c2)
    return (num / den).mean()


def ssim_loss(y: Tensor, y_hat: Tensor, c1: float = SSIM_C1, c2: float = SSIM_C2) -> Tensor:
    return (1.0 - ssim(y, y_hat, c1, c2)) * 0.5


def composite_loss(y: Tensor, y_hat: Tensor, weights: LossWeights) -> Tuple[Tensor, LossBreakdown]:
    """Weighted sum of the three terms.

    Returns the differentiable total alongside a float breakdown for logging.
    """
    if not isinstance(weights, LossWeights):
        weights = LossWeights(*weights)
    l_depth = depth_loss(y, y_hat)
    l_grad = gradient_edge_loss(y, y_hat)
    l_ssim = ssim_loss(y, y_hat)
    total = weights.w1 * l_depth + weights.w2 * l_grad + weights.w3 * l_ssim
    breakdown = LossBreakdown(
        depth=l_depth.item(),
        grad=l_grad.item(),
        ssim=l_ssim.item(),
        total=total.item(),
    )
    return total, breakdown
