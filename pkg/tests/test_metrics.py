import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ttcast import eof, metrics
from ttcast.errors import ShapeError

finite = st.floats(-50, 50, allow_nan=False, width=64)


def test_mse_examples(rng):
    a = rng.normal(size=(3, 4, 5))
    assert metrics.mse(a, a) == 0.0
    assert metrics.mse(a + 2, a) == 4.0
    b = rng.normal(size=a.shape)
    total = 0.0
    for x, y in zip(a.ravel(), b.ravel()):
        total += (x - y) ** 2
    assert abs(metrics.mse(a, b) - total / a.size) < 1e-7
    np.testing.assert_allclose(metrics.mse_per_frame(a, b),
                               [np.mean((a[i] - b[i]) ** 2) for i in range(3)])
    with pytest.raises(ShapeError):
        metrics.mse(a, b[:2])


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (4, 6), elements=finite), arrays(np.float64, (4, 6), elements=finite),
       finite)
def test_mse_translation(a, b, c):
    assert metrics.mse(a + c, b + c) == pytest.approx(metrics.mse(a, b), rel=1e-9, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (12, 13), elements=finite))
def test_ssim_self_is_one(a):
    assert metrics.ssim(a, a, metrics.dynamic_range_of(a)) == 1.0


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (12, 12), elements=finite), arrays(np.float64, (12, 12), elements=finite))
def test_ssim_symmetric_and_bounded(a, b):
    L = metrics.dynamic_range_of(a)
    s = metrics.ssim(a, b, L)
    assert abs(s - metrics.ssim(b, a, L)) <= 1e-10
    assert -1.0 - 1e-12 <= s <= 1.0 + 1e-12


def test_ssim_constant_frames_closed_form():
    m1, m2, L = 0.3, 0.7, 2.0
    c1 = (0.01 * L) ** 2
    expect = (2 * m1 * m2 + c1) / (m1 ** 2 + m2 ** 2 + c1)
    got = metrics.ssim(np.full((16, 16), m1), np.full((16, 16), m2), L)
    assert abs(got - expect) <= 1e-10


def test_ssim_negated_frame_is_negative(rng):
    # locally zero-mean truth, so only the covariance term carries sign
    a = np.indices((20, 20)).sum(axis=0) % 2 * 2.0 - 1.0
    a *= 1 + 0.1 * rng.random((20, 20))
    assert metrics.ssim(a, -a, metrics.dynamic_range_of(a)) < 0


def test_ssim_window_shrinks_for_small_frames(rng):
    assert metrics.window_size_for((4, 16)) == 3
    assert metrics.window_size_for((30, 50)) == 11
    a = rng.normal(size=(4, 16))
    assert metrics.ssim(a, a, 1.0) == 1.0


def test_gaussian_window_normalized():
    g = metrics.gaussian_window()
    assert len(g) == 11 and abs(g.sum() - 1) < 1e-15
    assert np.allclose(g, g[::-1]) and g.argmax() == 5


@pytest.mark.parametrize("horizon", [10, 20, 30])
def test_evaluate_csv_per_horizon(rng, tmp_path, horizon):
    x = rng.normal(size=(60, 2, 5, 6, 2))
    pcs = eof.compress(x, 4)
    truth = pcs.data[:horizon]
    path = tmp_path / "m.csv"
    rep = metrics.evaluate(truth, truth, basis=pcs.basis, csv_path=path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["frame", "space", "mse", "ssim"]
    assert len(rows) == 1 + 2 * horizon
    assert all(float(r[3]) == 1.0 and float(r[2]) == 0.0 for r in rows[1:])
    assert rep.primary is rep.spaces["physical"]
    assert rep.spaces["pc"].window_shrunk


def test_evaluate_horizon_mismatch(rng):
    with pytest.raises(ShapeError):
        metrics.evaluate(rng.normal(size=(10, 1, 3, 2)), rng.normal(size=(9, 1, 3, 2)))


def test_persistence_baseline_report(rng):
    seq = rng.normal(size=(20, 1, 4, 2))
    pred = metrics.persistence(seq[:10], 10)
    assert np.all(pred == seq[9])
    rep = metrics.evaluate(pred, seq[10:])
    assert rep.horizon == 10 and np.all(rep.primary.mse > 0)
