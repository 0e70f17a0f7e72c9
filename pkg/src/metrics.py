"""
Trajectory metrics: RMSE, time lag and discrete Fréchet distance
"""

import logging

import numpy as np
import scipy.spatial.distance

from .errors import DimensionError, NumericalError

logger = logging.getLogger(__name__)

MIN_LAG_SAMPLES = 16
LAG_FRACTION = 0.25


def _as_points(traj) -> np.ndarray:
    arr = np.asarray(traj, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    return arr


def rmse(actual, reference) -> float:
    """sqrt of the mean squared Euclidean error per step"""
    a = _as_points(actual)
    r = _as_points(reference)
    if a.shape != r.shape:
        raise DimensionError(f"trajectory shapes differ: {a.shape} vs {r.shape}")
    if a.shape[0] == 0:
        raise DimensionError("cannot compute RMSE of empty trajectories")
    return float(np.sqrt(np.mean(np.sum((a - r) ** 2, axis=1))))


def time_lag(actual, reference, dt: float) -> float:
    """
    Delay of `actual` behind `reference` in seconds

    The lag maximizes the mean (over coordinates) correlation coefficient of
    the overlapping parts over integer shifts within ±25% of the length; ties
    go to the smaller |shift|.

    Raises:
        DimensionError: unequal lengths or fewer than 16 samples
        NumericalError: a coordinate series is constant
    """
    a = _as_points(actual)
    r = _as_points(reference)
    if a.shape != r.shape:
        raise DimensionError(f"trajectory shapes differ: {a.shape} vs {r.shape}")
    n = a.shape[0]
    if n < MIN_LAG_SAMPLES:
        raise DimensionError(f"time lag needs ≥ {MIN_LAG_SAMPLES} samples, got {n}")
    a = a - a.mean(axis=0)
    r = r - r.mean(axis=0)
    scale = np.linalg.norm(a, axis=0) * np.linalg.norm(r, axis=0)
    if np.any(scale == 0):
        raise NumericalError("time lag is undefined for a constant series")

    max_shift = int(LAG_FRACTION * n)
    best_shift = 0
    best_score = -np.inf
    # search |shift| in increasing order so ties keep the smaller one
    for magnitude in range(max_shift + 1):
        for shift in ((0,) if magnitude == 0 else (magnitude, -magnitude)):
            if shift >= 0:
                a_o, r_o = a[shift:], r[: n - shift]
            else:
                a_o, r_o = a[: n + shift], r[-shift:]
            a_o = a_o - a_o.mean(axis=0)
            r_o = r_o - r_o.mean(axis=0)
            norms = np.linalg.norm(a_o, axis=0) * np.linalg.norm(r_o, axis=0)
            if np.any(norms == 0):
                continue
            score = float(np.mean(np.sum(a_o * r_o, axis=0) / norms))
            if score > best_score + 1e-12:
                best_score = score
                best_shift = shift
    return best_shift * dt


def frechet_distance(traj_a, traj_b) -> float:
    """Discrete Fréchet distance by dynamic programming over couplings"""
    a = _as_points(traj_a)
    b = _as_points(traj_b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise DimensionError("Fréchet distance needs non-empty trajectories")
    if a.shape[1] != b.shape[1]:
        raise DimensionError("trajectories live in spaces of different dimension")
    d = scipy.spatial.distance.cdist(a, b)
    n, m = d.shape
    ca = np.empty((n, m))
    ca[0, 0] = d[0, 0]
    for i in range(1, n):
        ca[i, 0] = max(ca[i - 1, 0], d[i, 0])
    for j in range(1, m):
        ca[0, j] = max(ca[0, j - 1], d[0, j])
    for i in range(1, n):
        for j in range(1, m):
            ca[i, j] = max(min(ca[i - 1, j], ca[i - 1, j - 1], ca[i, j - 1]), d[i, j])
    return float(ca[-1, -1])
