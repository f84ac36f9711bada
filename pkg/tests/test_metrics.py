import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from flowbank.errors import InsufficientScaling
from flowbank.metrics import (correlation_dimension, crps, crps_ensemble, kl_divergence, smape,
                              vpt, vpt_from_smape)

finite = st.floats(-1e6, 1e6, allow_nan=False)


def test_smape_examples():
    y = np.array([[1.0, -2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(smape(y, y), [0.0, 0.0])
    assert smape([[1.0]], [[3.0]]).tolist() == [100.0]
    assert smape([[1.0]], [[-1.0]]).tolist() == [200.0]
    # 0/0 coordinates count as zero
    assert smape([[0.0, 1.0]], [[0.0, 3.0]]).tolist() == [50.0]


def test_smape_shape_mismatch():
    with pytest.raises(ValueError):
        smape(np.zeros((3, 2)), np.zeros((3, 3)))


@given(arrays(float, (5, 3), elements=finite), arrays(float, (5, 3), elements=finite))
def test_smape_bounds_and_symmetry(y, yhat):
    a = smape(y, yhat)
    assert np.all((a >= 0) & (a <= 200 + 1e-12))
    np.testing.assert_array_equal(a, smape(yhat, y))


def test_vpt_examples():
    assert vpt_from_smape([5, 10, 25, 5], 20, 100) == pytest.approx(0.02)
    assert vpt_from_smape([1, 2, 3], 20, 100) == pytest.approx(0.03)
    assert vpt_from_smape([30, 1, 1], 20, 100) == 0.0
    y = np.ones((50, 2))
    assert vpt(y, y, 20, 10) == 5.0
    with pytest.raises(ValueError):
        vpt(y, y, 0.0)


@given(arrays(float, 30, elements=st.floats(0, 200)), st.floats(0.1, 200), st.floats(0.1, 200))
def test_vpt_monotone_in_epsilon(per_step, e1, e2):
    lo, hi = sorted((e1, e2))
    assert vpt_from_smape(per_step, lo) <= vpt_from_smape(per_step, hi)


def test_crps_examples():
    assert crps([0.0, 2.0], 1.0) == pytest.approx(0.5)
    assert crps([1.0], 0.0) == 1.0
    assert crps([3.0, 3.0, 3.0], 3.0) == 0.0


def _crps_pairs(x, y):
    x = np.asarray(x, dtype=float)
    return np.abs(x - y).mean() - np.abs(x[:, None] - x[None, :]).mean() / 2


@given(arrays(float, st.integers(1, 30), elements=st.floats(-100, 100)), st.floats(-100, 100),
       st.floats(-100, 100))
def test_crps_oracle_and_translation(x, y, c):
    assert crps(x, y) == pytest.approx(_crps_pairs(x, y), abs=1e-9)
    assert crps(x + c, y + c) == pytest.approx(crps(x, y), abs=1e-8)
    assert crps(x, y) >= -1e-9


def test_crps_ensemble_matches_scalar(rng):
    S = rng.normal(size=(7, 4, 3))
    y = rng.normal(size=(4, 3))
    per = crps_ensemble(S, y)
    ref = [np.mean([crps(S[:, h, k], y[h, k]) for k in range(3)]) for h in range(4)]
    np.testing.assert_allclose(per, ref, atol=1e-12)


def test_correlation_dimension_line(rng):
    s = rng.uniform(size=2000)
    pts = np.outer(s, [1.0, 2.0, -0.5]) + [3.0, 0.0, 1.0]
    assert correlation_dimension(pts) == pytest.approx(1.0, abs=0.1)


def test_correlation_dimension_square(rng):
    uv = rng.uniform(size=(2000, 2))
    # orthonormal pair spanning a tilted plane in R^3
    e1 = np.array([1.0, 1.0, 0.0]) / np.sqrt(2)
    e2 = np.array([1.0, -1.0, 2.0]) / np.sqrt(6)
    pts = uv[:, :1] * e1 + uv[:, 1:] * e2
    assert correlation_dimension(pts) == pytest.approx(2.0, abs=0.15)


def test_correlation_dimension_errors():
    with pytest.raises(InsufficientScaling):
        correlation_dimension(np.ones((200, 3)))
    with pytest.raises(ValueError):
        correlation_dimension(np.zeros((10, 3)))
    pts = np.random.default_rng(0).uniform(size=(300, 2))
    with pytest.raises(InsufficientScaling):
        correlation_dimension(pts, r_grid=[1e-9, 1e-8, 10.0])


def _kl_oracle(P, Q, bins):
    out = []
    for k in range(P.shape[1]):
        lo = min(P[:, k].min(), Q[:, k].min())
        hi = max(P[:, k].max(), Q[:, k].max())
        w = (hi - lo) / bins
        p = np.ones(bins)
        q = np.ones(bins)
        for v in P[:, k]:
            p[min(int((v - lo) / w), bins - 1)] += 1
        for v in Q[:, k]:
            q[min(int((v - lo) / w), bins - 1)] += 1
        p /= p.sum()
        q /= q.sum()
        out.append(sum(pi * np.log(pi / qi) for pi, qi in zip(p, q)))
    return np.mean(out)


def test_kl_examples(rng):
    P = rng.normal(size=(1000, 2))
    assert kl_divergence(P, P.copy()) == 0.0
    Q = rng.normal(loc=50.0, size=(1000, 2))
    val = kl_divergence(P, Q, bins_per_dim=30)
    assert np.isfinite(val) and val > 3.0
    assert val == pytest.approx(_kl_oracle(P, Q, 30), rel=1e-9)


def test_kl_nonnegative_random_pairs(rng):
    for _ in range(100):
        n, m = rng.integers(1, 200, size=2)
        d = int(rng.integers(1, 4))
        P = rng.normal(size=(n, d)) * rng.uniform(0.1, 3)
        Q = rng.normal(size=(m, d)) * rng.uniform(0.1, 3) + rng.normal()
        assert kl_divergence(P, Q) >= 0.0


def test_kl_errors():
    with pytest.raises(ValueError):
        kl_divergence(np.zeros((0, 2)), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        kl_divergence(np.zeros((3, 2)), np.zeros((3, 3)))
