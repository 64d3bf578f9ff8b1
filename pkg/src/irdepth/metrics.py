"""Depth evaluation metrics on plain arrays.

Metrics pool pixels: a set of images is scored as if it were one long
vector, so every pixel carries equal weight.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from .tensor import DimensionError

THRESHOLDS = (1.25, 1.25**2, 1.25**3)


class MetricDomainError(ValueError):
    pass


@dataclass(frozen=True)
class MetricsReport:
    are: float
    rmse: float
    log10: float
    delta1: float
    delta2: float
    delta3: float
    r2: float
    n_pixels: int

    def to_text(self) -> str:
        return "".join(f"{k}={v!r}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        return cls(**{f.name: (int if f.name == "n_pixels" else float)(kv[f.name]) for f in fields(cls)})

    def csv_header(self) -> str:
        return ",".join(f.name for f in fields(self))

    def csv_row(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="").writerow([repr(v) for v in asdict(self).values()])
        return buf.getvalue()


def _flat_pair(y, y_hat):
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise DimensionError(f"prediction shape {y_hat.shape} does not match target shape {y.shape}")
    if y.size == 0:
        raise DimensionError("metrics need at least one pixel")
    return y.reshape(-1), y_hat.reshape(-1)


def _require_positive(arr: np.ndarray, what: str) -> None:
    bad = np.flatnonzero(~(arr > 0))
    if bad.size:
        i = int(bad[0])
        raise MetricDomainError(f"{what} must be positive; pixel {i} has value {arr[i]!r}")


def rmse(y, y_hat) -> float:
    y, y_hat = _flat_pair(y, y_hat)
    return float(np.sqrt(np.mean((y - y_hat) ** 2)))


def log10_error(y, y_hat) -> float:
    y, y_hat = _flat_pair(y, y_hat)
    _require_positive(y, "ground truth")
    _require_positive(y_hat, "prediction")
    return float(np.mean(np.abs(np.log10(y) - np.log10(y_hat))))


def abs_rel_error(y, y_hat) -> float:
    y, y_hat = _flat_pair(y, y_hat)
    _require_positive(y, "ground truth")
    return float(np.mean(np.abs(y - y_hat) / y))


def delta_accuracy(y, y_hat):
    y, y_hat = _flat_pair(y, y_hat)
    _require_positive(y, "ground truth")
    _require_positive(y_hat, "prediction")
    ratio = np.maximum(y / y_hat, y_hat / y)
    return tuple(float(np.mean(ratio < th)) for th in THRESHOLDS)


def r_squared(y, y_hat) -> float:
    y, y_hat = _flat_pair(y, y_hat)
    if y.size < 2:
        raise MetricDomainError("R^2 needs at least two pixels")
    ss_tot = np.sum((y - y.mean()) ** 2)
    if ss_tot == 0:
        raise MetricDomainError("R^2 is undefined for constant ground truth")
    return float(1.0 - np.sum((y - y_hat) ** 2) / ss_tot)


def report(y_set: Sequence, y_hat_set: Sequence) -> MetricsReport:
    if len(y_set) == 0:
        raise ValueError("cannot report metrics on an empty set")
    if len(y_set) != len(y_hat_set):
        raise ValueError(f"{len(y_set)} targets but {len(y_hat_set)} predictions")
    pairs = [_flat_pair(a, b) for a, b in zip(y_set, y_hat_set)]
    y = np.concatenate([p[0] for p in pairs])
    y_hat = np.concatenate([p[1] for p in pairs])
    d1, d2, d3 = delta_accuracy(y, y_hat)
    try:
        r2 = r_squared(y, y_hat)
    except MetricDomainError:
        # constant ground truth over the whole set
        r2 = float("nan")
    return MetricsReport(
        are=abs_rel_error(y, y_hat),
        rmse=rmse(y, y_hat),
        log10=log10_error(y, y_hat),
        delta1=d1,
        delta2=d2,
        delta3=d3,
        r2=r2,
        n_pixels=int(y.size),
    )
