import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hcg.errors import ShapeMismatch, TooFewSamples
from hcg.metrics import mean_metrics, metrics


def average_ranks(v):
    order = sorted(range(len(v)), key=lambda i: v[i])
    ranks = [0.0] * len(v)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and v[order[j + 1]] == v[order[i]]:
            j += 1
        for t in range(i, j + 1):
            ranks[order[t]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def pearson(a, b):
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    return cov / math.sqrt(sum((x - ma) ** 2 for x in a) * sum((y - mb) ** 2 for y in b))


def kendall_b(a, b):
    conc = disc = ties_a = ties_b = 0
    for i, j in itertools.combinations(range(len(a)), 2):
        da, db = a[i] - a[j], b[i] - b[j]
        if da == 0 and db == 0:
            continue
        if da == 0:
            ties_a += 1
        elif db == 0:
            ties_b += 1
        elif da * db > 0:
            conc += 1
        else:
            disc += 1
    return (conc - disc) / math.sqrt((conc + disc + ties_a) * (conc + disc + ties_b))


def brute(p, y):
    p, y = list(p), list(y)
    n = len(p)
    return {
        "pearson": pearson(p, y),
        "spearman": pearson(average_ranks(p), average_ranks(y)),
        "kendall": kendall_b(p, y),
        "mae": sum(abs(a - b) for a, b in zip(p, y)) / n,
        "rmse": math.sqrt(sum((a - b) ** 2 for a, b in zip(p, y)) / n),
    }


def assert_matches(report, ref, tol=1e-12):
    for name, v in ref.items():
        assert abs(getattr(report, name) - v) <= tol, (name, getattr(report, name), v)


def test_perfect():
    y = np.array([0.1, 0.5, 0.3, 0.9])
    m = metrics(y, y)
    assert (m.pearson, m.spearman, m.kendall, m.mae, m.rmse) == pytest.approx((1, 1, 1, 0, 0))


def test_reversed_ranks():
    y = np.arange(10.0)
    assert metrics(-y, y).spearman == pytest.approx(-1)


def test_random_against_brute_force(rng):
    for _ in range(20):
        p, y = rng.normal(size=20), rng.normal(size=20)
        assert_matches(metrics(p, y), brute(p, y))


def test_ties_against_brute_force(rng):
    for _ in range(20):
        p, y = rng.integers(0, 4, 20).astype(float), rng.integers(0, 5, 20).astype(float)
        assert_matches(metrics(p, y), brute(p, y))


def test_kendall_tie_free_formula(rng):
    p, y = rng.permutation(15).astype(float), rng.permutation(15).astype(float)
    pairs = list(itertools.combinations(range(15), 2))
    s = sum(np.sign(p[i] - p[j]) * np.sign(y[i] - y[j]) for i, j in pairs)
    assert metrics(p, y).kendall == pytest.approx(s / len(pairs), abs=1e-12)


def test_constant_prediction_is_degenerate():
    m = metrics(np.ones(5), np.arange(5.0))
    assert m.degenerate and m.pearson == m.spearman == m.kendall == 0.0
    assert m.mae == pytest.approx(1.4)


def test_errors():
    with pytest.raises(TooFewSamples):
        metrics([1.0], [2.0])
    with pytest.raises(ShapeMismatch):
        metrics([1.0, 2.0], [1.0, 2.0, 3.0])
    with pytest.raises(TooFewSamples):
        mean_metrics([])


def test_mean_over_graphs():
    a = metrics([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    b = metrics([3.0, 2.0, 1.0], [1.0, 2.0, 3.0])
    m = mean_metrics([a, b])
    assert m.spearman == pytest.approx(0.0) and m.n_graphs == 2 and m.n == 6
    assert m.to_dict()["schema_version"] == 1


@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=2, max_size=30))
def test_bounds(pairs):
    p, y = zip(*pairs)
    m = metrics(p, y)
    for v in (m.pearson, m.spearman, m.kendall):
        assert -1 - 1e-12 <= v <= 1 + 1e-12
    assert 0 <= m.mae <= m.rmse + 1e-9
