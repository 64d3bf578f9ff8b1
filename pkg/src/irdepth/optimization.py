"""Adam with AMSGrad, the training loop, evaluation and greedy loss-weight tuning."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .datapipe import SamplePair, hflip
from .losses import LossBreakdown, LossWeights, composite_loss
from .metrics import MetricsReport, report
from .network import DepthModel
from .tensor import NumericError, Tensor, backward, no_grad, pool2d

logger = logging.getLogger(__name__)

DEPTH_FLOOR = 1e-3


class TrainingDiverged(NumericError):
    def __init__(self, iteration: int, breakdown: LossBreakdown):
        super().__init__(f"non-finite loss at iteration {iteration}: {breakdown}")
        self.iteration = iteration
        self.breakdown = breakdown


class TunerError(ValueError):
    pass


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    v_max: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState) -> None:
    """One AMSGrad update, in place on ``params`` and ``state``.

    The step divides the bias-corrected first moment by the square root of
    the running maximum of the raw second moment, bias-corrected with the
    current step count.
    """
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
            state.v_max[name] = np.zeros_like(p)
        m, v, vmax = state.m[name], state.v[name], state.v_max[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        np.maximum(vmax, v, out=vmax)
        denom = np.sqrt(vmax / bc2) + state.eps
        p -= (state.lr * (m / bc1) / denom).astype(p.dtype)


class Adam:
    def __init__(self, params: Dict[str, Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        arrays = {k: p.data for k, p in self.params.items()}
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        adam_step(arrays, grads, self.state)


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 400
    lr: float = 1e-4
    batch_size: int = 8
    seed: int = 0
    weights: LossWeights = LossWeights()
    val_split: float = 0.2
    augment: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr < 0 or not math.isfinite(self.lr):
            raise ValueError(f"learning rate must be finite and non-negative, got {self.lr}")
        if not 0.0 <= self.val_split < 1.0:
            raise ValueError(f"val_split must lie in [0, 1), got {self.val_split}")

    @staticmethod
    def iterations_for_epochs(epochs: int, n_samples: int, batch_size: int) -> int:
        return epochs * math.ceil(n_samples / batch_size)


def stack_batch(pairs: Sequence[SamplePair], dtype=np.float32) -> Tuple[Tensor, Tensor]:
    rgb = np.stack([p.rgb for p in pairs]).astype(dtype)
    depth = np.stack([p.depth for p in pairs]).astype(dtype)
    return Tensor(rgb), Tensor(depth)


def half_resolution(depth: Tensor) -> Tensor:
    return pool2d(depth, "avg", 2, 2)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start : start + batch_size]


def train(data: Sequence[SamplePair], model: DepthModel, config: TrainConfig) -> List[LossBreakdown]:
    """Run ``config.iterations`` Adam steps on ``model`` in place; returns the loss history."""
    if not data:
        raise ValueError("training set is empty")
    if data[0].hw != tuple(model.config.input_hw):
        raise ValueError(f"samples are {data[0].hw}, model expects {model.config.input_hw}")
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    opt = Adam(params, lr=config.lr, betas=(config.beta1, config.beta2), eps=config.eps)
    history: List[LossBreakdown] = []
    batches = _batches(len(data), config.batch_size, rng)
    for it in range(config.iterations):
        idx = next(batches)
        pairs = [data[i] for i in idx]
        if config.augment:
            flips = rng.random(len(pairs)) < 0.5
            pairs = [hflip(p) if f else p for p, f in zip(pairs, flips)]
        x, y = stack_batch(pairs, model.dtype)
        y_half = half_resolution(y)
        y_hat = model(x)
        total, breakdown = composite_loss(y_half, y_hat, config.weights)
        if not math.isfinite(breakdown.total):
            raise TrainingDiverged(it + 1, breakdown)
        opt.zero_grad()
        backward(total)
        opt.step()
        history.append(breakdown)
        if (it + 1) % 50 == 0:
            logger.info("iter %d total %.5f", it + 1, breakdown.total)
    return history


def write_history(history: Sequence[LossBreakdown], path) -> None:
    with open(path, "w") as fh:
        fh.write("iteration\tdepth\tgrad\tssim\ttotal\n")
        for i, b in enumerate(history, start=1):
            fh.write(f"{i}\t{b.depth!r}\t{b.grad!r}\t{b.ssim!r}\t{b.total!r}\n")


def read_history(path) -> List[LossBreakdown]:
    rows = []
    with open(path) as fh:
        next(fh)
        for line in fh:
            _, d, g, s, t = line.split("\t")
            rows.append(LossBreakdown(float(d), float(g), float(s), float(t)))
    return rows


# --------------------------------------------------------------------------
# evaluation


def metric_depth(depth: np.ndarray, depth_range: Optional[Tuple[float, float]]) -> np.ndarray:
    """Depth values fed to the metrics: metres when a range is known, else normalised + floor."""
    if depth_range is not None:
        lo, hi = depth_range
        return depth * (hi - lo) + lo
    return depth + DEPTH_FLOOR


def evaluate(
    model, dataset: Sequence[SamplePair], weights: LossWeights = LossWeights(), batch_size: int = 16
) -> Tuple[MetricsReport, LossBreakdown]:
    """Metrics and mean loss of full-resolution predictions. ``model`` only needs ``predict``."""
    if not dataset:
        raise ValueError("evaluation set is empty")
    ys, preds = [], []
    sums = np.zeros(4)
    dtype = getattr(model, "dtype", np.float32)
    for start in range(0, len(dataset), batch_size):
        chunk = dataset[start : start + batch_size]
        x, y = stack_batch(chunk, dtype)
        with no_grad():
            y_hat = model.predict(x)
            # report losses in 64-bit regardless of model precision
            _, b = composite_loss(Tensor(y.data.astype(np.float64)), Tensor(y_hat.data.astype(np.float64)), weights)
        sums += len(chunk) * np.array([b.depth, b.grad, b.ssim, b.total])
        for i, p in enumerate(chunk):
            ys.append(metric_depth(p.depth.astype(np.float64), p.depth_range))
            preds.append(metric_depth(y_hat.data[i].astype(np.float64), p.depth_range))
    mean = sums / len(dataset)
    return report(ys, preds), LossBreakdown(*map(float, mean))


def split_dataset(data: Sequence[SamplePair], val_split: float):
    n_val = int(round(len(data) * val_split))
    n_train = len(data) - n_val
    return list(data[:n_train]), list(data[n_train:])


# --------------------------------------------------------------------------
# loss-weight tuning


@dataclass(frozen=True)
class TuneStep:
    weights: Tuple[float, float, float]
    score: float
    accepted: bool


@dataclass(frozen=True)
class TuneResult:
    weights: Tuple[float, float, float]
    score: float
    initial_score: float
    trace: Tuple[TuneStep, ...]
    passes: int

    def to_text(self) -> str:
        lines = ["call\tw1\tw2\tw3\tscore\taccepted"]
        for i, s in enumerate(self.trace, start=1):
            w1, w2, w3 = s.weights
            lines.append(f"{i}\t{w1!r}\t{w2!r}\t{w3!r}\t{s.score!r}\t{int(s.accepted)}")
        w1, w2, w3 = self.weights
        lines.append(f"# final\t{w1!r}\t{w2!r}\t{w3!r}\t{self.score!r}\t{self.passes}")
        return "\n".join(lines) + "\n"


def tune_weights(
    evaluator: Callable[[Tuple[float, float, float]], float],
    step: float = 0.1,
    floor: float = 0.1,
) -> TuneResult:
    """Greedy per-weight decrement search starting from (1, 1, 1); lower scores win.

    Each weight is lowered by ``step`` while the score strictly improves; the
    first non-improving move is reverted. Passes over (w1, w2, w3) repeat
    until one pass changes nothing. Weights are tracked as integer step
    counts so that they never accumulate rounding drift.
    """
    if not 0.0 < step < 1.0:
        raise TunerError(f"step must lie in (0, 1), got {step}")
    if not 0.0 < floor <= 1.0:
        raise TunerError(f"floor must lie in (0, 1], got {floor}")
    max_steps = int(math.floor((1.0 - floor) / step + 1e-9))
    counts = [0, 0, 0]
    trace: List[TuneStep] = []

    def weights_of(c) -> Tuple[float, float, float]:
        return tuple(round(1.0 - k * step, 12) for k in c)  # type: ignore[return-value]

    def score_of(c) -> float:
        w = weights_of(c)
        s = float(evaluator(w))
        if not math.isfinite(s):
            raise TunerError(f"evaluator returned non-finite score {s} at weights {w}")
        return s

    best = score_of(counts)
    initial = best
    trace.append(TuneStep(weights_of(counts), best, True))
    passes = 0
    changed = True
    while changed:
        changed = False
        passes += 1
        for i in range(3):
            while counts[i] < max_steps:
                cand = list(counts)
                cand[i] += 1
                s = score_of(cand)
                accepted = s < best
                trace.append(TuneStep(weights_of(cand), s, accepted))
                if not accepted:
                    break
                counts, best, changed = cand, s, True
    return TuneResult(weights_of(counts), best, initial, tuple(trace), passes)


class FinetuneEvaluator:
    """Validation RMSE after briefly fine-tuning a copy of ``model`` with the given weights."""

    def __init__(self, model: DepthModel, train_set, val_set, config: TrainConfig):
        self.model = model
        self.train_set = train_set
        self.val_set = val_set
        self.config = config
        self.calls = 0
        self._cache: Dict[Tuple[float, float, float], float] = {}

    def __call__(self, weights: Tuple[float, float, float]) -> float:
        self.calls += 1
        key = tuple(weights)
        if key not in self._cache:
            clone = self.model.copy()
            train(self.train_set, clone, replace(self.config, weights=LossWeights(*key)))
            metrics, _ = evaluate(clone, self.val_set, LossWeights(*key))
            self._cache[key] = metrics.rmse
        return self._cache[key]
