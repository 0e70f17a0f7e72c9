"""
Tests for trajectory metrics
"""

import numpy as np
import pytest

from src.errors import DimensionError, NumericalError
from src.metrics import frechet_distance, rmse, time_lag


def _coupling_exists(d, eps):
    """Is there a monotone coupling of the two point sequences using only pairs with d ≤ eps"""
    n, m = d.shape
    if d[0, 0] > eps:
        return False
    reached = {(0, 0)}
    frontier = [(0, 0)]
    while frontier:
        i, j = frontier.pop()
        for ni, nj in ((i + 1, j), (i, j + 1), (i + 1, j + 1)):
            if ni < n and nj < m and (ni, nj) not in reached and d[ni, nj] <= eps:
                reached.add((ni, nj))
                frontier.append((ni, nj))
    return (n - 1, m - 1) in reached


def _brute_force_frechet(a, b):
    d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
    for eps in np.unique(d):
        if _coupling_exists(d, eps):
            return float(eps)
    raise AssertionError("no coupling found")


class TestRmse:
    """Root mean squared tip error"""

    def test_identical(self):
        traj = np.random.default_rng(40).normal(size=(20, 2))
        assert rmse(traj, traj) == 0.0

    def test_constant_offset(self):
        traj = np.random.default_rng(41).normal(size=(20, 2))
        assert rmse(traj + np.array([0.3, 0.4]), traj) == pytest.approx(0.5)

    def test_single_step(self):
        assert rmse([[3.0, 4.0]], [[0.0, 0.0]]) == 5.0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            rmse(np.zeros((3, 2)), np.zeros((4, 2)))

    def test_empty(self):
        with pytest.raises(DimensionError):
            rmse(np.zeros((0, 2)), np.zeros((0, 2)))


class TestTimeLag:
    """Cross-correlation delay"""

    def setup_method(self):
        self.dt = 0.01
        self.n = 400
        self.t = self.dt * np.arange(self.n)

    def _signal(self, t):
        span = self.n * self.dt
        return np.stack([
            np.sin(2 * np.pi * t / (0.8 * span)) + 0.5 * np.cos(2 * np.pi * t / (0.37 * span)),
            np.cos(2 * np.pi * t / (0.9 * span)) + 0.2 * t,
        ], axis=1)

    def test_reference_against_itself(self):
        ref = self._signal(self.t)
        assert time_lag(ref, ref, self.dt) == 0.0

    @pytest.mark.parametrize("k", [1, 7, 40, -12])
    def test_constructed_shift(self, k):
        ref = self._signal(self.t)
        actual = self._signal(self.t - k * self.dt)
        assert time_lag(actual, ref, self.dt) == pytest.approx(k * self.dt)

    def test_anti_phase_sinusoid(self):
        period = 100
        ref = np.sin(2 * np.pi * np.arange(self.n) / period)
        lag = time_lag(-ref, ref, self.dt)
        assert abs(lag) == pytest.approx(period / 2 * self.dt)

    def test_constant_series(self):
        with pytest.raises(NumericalError):
            time_lag(np.ones((50, 2)), self._signal(self.t[:50]), self.dt)

    def test_too_short(self):
        with pytest.raises(DimensionError):
            time_lag(np.arange(10.0), np.arange(10.0), self.dt)


class TestFrechet:
    """Discrete Fréchet distance"""

    def test_identical(self):
        traj = np.random.default_rng(42).normal(size=(15, 2))
        assert frechet_distance(traj, traj) == 0.0

    def test_single_points(self):
        assert frechet_distance([[0.0, 0.0]], [[3.0, 4.0]]) == 5.0

    def test_hand_example(self):
        assert frechet_distance([[0, 0], [1, 0]], [[0, 1], [1, 1]]) == 1.0

    def test_symmetric(self):
        rng = np.random.default_rng(43)
        a, b = rng.normal(size=(9, 2)), rng.normal(size=(6, 2))
        assert frechet_distance(a, b) == frechet_distance(b, a)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(44)
        for _ in range(200):
            a = rng.integers(0, 3, size=(int(rng.integers(1, 8)), 2)).astype(float)
            b = rng.integers(0, 3, size=(int(rng.integers(1, 8)), 2)).astype(float)
            assert frechet_distance(a, b) == _brute_force_frechet(a, b)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            frechet_distance(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_empty(self):
        with pytest.raises(DimensionError):
            frechet_distance(np.zeros((0, 2)), np.zeros((2, 2)))
