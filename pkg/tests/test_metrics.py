import math

import numpy as np
import pytest

from irdepth.metrics import (
    MetricDomainError,
    MetricsReport,
    abs_rel_error,
    delta_accuracy,
    log10_error,
    r_squared,
    report,
    rmse,
)
from irdepth.tensor import DimensionError


def brute_force(ys, ps):
    """Per-pixel loops over a pooled set, in plain Python floats."""
    y = [float(v) for a in ys for v in np.ravel(a)]
    p = [float(v) for a in ps for v in np.ravel(a)]
    n = len(y)
    are = sum(abs(a - b) / a for a, b in zip(y, p)) / n
    rm = math.sqrt(sum((a - b) ** 2 for a, b in zip(y, p)) / n)
    lg = sum(abs(math.log10(a) - math.log10(b)) for a, b in zip(y, p)) / n
    deltas = []
    for th in (1.25, 1.25**2, 1.25**3):
        deltas.append(sum(1 for a, b in zip(y, p) if max(a / b, b / a) < th) / n)
    mean = sum(y) / n
    r2 = 1 - sum((a - b) ** 2 for a, b in zip(y, p)) / sum((a - mean) ** 2 for a in y)
    return dict(are=are, rmse=rm, log10=lg, delta1=deltas[0], delta2=deltas[1], delta3=deltas[2], r2=r2, n_pixels=n)


def test_rmse_examples():
    assert rmse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert rmse([0.0, 0.0], [3.0, 4.0]) == pytest.approx(math.sqrt(12.5), abs=1e-15)


def test_rmse_at_least_mae():
    rng = np.random.default_rng(0)
    y, p = rng.uniform(0.1, 1, (2, 50))
    assert rmse(y, p) >= np.mean(np.abs(y - p))


def test_log10_examples():
    assert log10_error([10.0], [1.0]) == 1.0
    assert log10_error([0.3, 2.0], [0.3, 2.0]) == 0.0


def test_log10_domain_error_names_pixel():
    with pytest.raises(MetricDomainError, match="pixel 1"):
        log10_error([1.0, 0.0], [1.0, 1.0])


def test_are_examples():
    assert abs_rel_error([2.0], [1.0]) == 0.5
    rng = np.random.default_rng(1)
    y, p = rng.uniform(0.1, 1, (2, 30))
    assert abs_rel_error(y, y) == 0.0
    assert abs_rel_error(3.5 * y, 3.5 * p) == pytest.approx(abs_rel_error(y, p), rel=1e-12)
    with pytest.raises(MetricDomainError):
        abs_rel_error([0.0, 1.0], [1.0, 1.0])


def test_delta_examples():
    assert delta_accuracy([1.0, 2.0], [1.0, 2.0]) == (1.0, 1.0, 1.0)
    assert delta_accuracy([1.0, 1.0], [1.2, 2.0]) == (0.5, 0.5, 0.5)
    rng = np.random.default_rng(2)
    y, p = rng.uniform(0.1, 1, (2, 40))
    assert delta_accuracy(y, p) == delta_accuracy(p, y)


def test_delta_threshold_is_strict():
    assert delta_accuracy([1.0], [1.25]) == (0.0, 1.0, 1.0)


def test_delta_domain_error():
    with pytest.raises(MetricDomainError):
        delta_accuracy([1.0], [-1.0])


def test_r_squared_examples():
    rng = np.random.default_rng(3)
    y = rng.uniform(0, 1, 20)
    assert r_squared(y, y) == 1.0
    assert r_squared(y, np.full_like(y, y.mean())) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(MetricDomainError):
        r_squared([0.5, 0.5], [0.1, 0.9])


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        rmse([1.0, 2.0], [1.0])


def test_report_matches_brute_force_oracle():
    rng = np.random.default_rng(4)
    ys = [rng.uniform(0.05, 1.0, (8, 8)) for _ in range(100)]
    ps = [rng.uniform(0.05, 1.0, (8, 8)) for _ in range(100)]
    rep = report(ys, ps)
    oracle = brute_force(ys, ps)
    for key, val in oracle.items():
        assert abs(getattr(rep, key) - val) <= 1e-12, key


def test_report_pools_pixels():
    rng = np.random.default_rng(5)
    y1, y2, p1, p2 = rng.uniform(0.1, 1, (4, 4, 4))
    assert report([y1, y2], [p1, p2]) == report([np.concatenate([y1, y2])], [np.concatenate([p1, p2])])


def test_report_perfect_pair():
    y = np.random.default_rng(6).uniform(0.1, 1, (4, 4))
    rep = report([y], [y])
    assert (rep.are, rep.rmse, rep.log10) == (0.0, 0.0, 0.0)
    assert (rep.delta1, rep.delta2, rep.delta3, rep.r2) == (1.0, 1.0, 1.0, 1.0)


def test_report_flip_invariant():
    rng = np.random.default_rng(7)
    y, p = rng.uniform(0.1, 1, (2, 6, 6))
    a, b = report([y], [p]), report([y[:, ::-1]], [p[:, ::-1]])
    for key in ("are", "rmse", "log10", "delta1", "delta2", "delta3", "r2"):
        assert getattr(a, key) == pytest.approx(getattr(b, key), abs=1e-14)


def test_report_empty():
    with pytest.raises(ValueError):
        report([], [])


def test_report_constant_truth_gives_nan_r2():
    rep = report([np.full((2, 2), 0.5)], [np.full((2, 2), 0.4)])
    assert math.isnan(rep.r2)


def test_report_serialisation_round_trip():
    rng = np.random.default_rng(8)
    rep = report([rng.uniform(0.1, 1, (3, 3))], [rng.uniform(0.1, 1, (3, 3))])
    assert MetricsReport.from_text(rep.to_text()) == rep
    assert rep.csv_header().split(",")[0] == "are"
    assert len(rep.csv_row().split(",")) == 8
