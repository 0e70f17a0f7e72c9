"""
Environments
============

- A planar, gravity-free two-link arm with rod links, rotor armature and
  viscous joint damping, integrated with RK4
- Linear-Gaussian Markov chains x' = A x + w for convergence experiments
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, Optional, Tuple

import numpy as np
import scipy.linalg

from .edmd import SnapshotDataset
from .errors import ConfigError, DimensionError, NonFiniteError, UnreachableTargetError

logger = logging.getLogger(__name__)

FIGURE8_PERIOD = 5.0
REACH_TOL = 1e-12


@dataclass(frozen=True)
class ArmParams:
    """Physical parameters of the two-link arm (SI units)"""

    l1: float = 0.1
    l2: float = 0.1
    m1: float = 0.05
    m2: float = 0.05
    damping: float = 0.01
    armature: float = 0.01
    u_max: float = 0.5
    dt: float = 0.01

    def validate(self) -> "ArmParams":
        for name in ("l1", "l2", "m1", "m2", "u_max", "dt"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"arm parameter {name} must be > 0, got {getattr(self, name)}")
        if self.damping < 0 or self.armature < 0:
            raise ConfigError("arm damping and armature must be ≥ 0")
        return self

    @property
    def u_min_vec(self) -> np.ndarray:
        return np.full(2, -self.u_max)

    @property
    def u_max_vec(self) -> np.ndarray:
        return np.full(2, self.u_max)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "l1": self.l1, "l2": self.l2, "m1": self.m1, "m2": self.m2,
            "damping": self.damping, "armature": self.armature,
            "u_max": self.u_max, "dt": self.dt,
        }


@dataclass
class ArmState:
    """Joint angles q (rad) and velocities q̇ (rad/s)"""

    q: np.ndarray
    qdot: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).reshape(2)
        self.qdot = np.asarray(self.qdot, dtype=float).reshape(2)

    @classmethod
    def zeros(cls) -> "ArmState":
        return cls(np.zeros(2), np.zeros(2))

    @classmethod
    def from_vector(cls, x) -> "ArmState":
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.shape[0] != 4:
            raise DimensionError(f"arm state vector needs 4 entries, got {x.shape[0]}")
        return cls(x[:2], x[2:])

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.q, self.qdot])

    def copy(self) -> "ArmState":
        return ArmState(self.q.copy(), self.qdot.copy())


def mass_matrix(q: np.ndarray, p: ArmParams) -> np.ndarray:
    """M(q) for uniform rods plus armature on both joints"""
    lc2 = 0.5 * p.l2
    I1 = p.m1 * p.l1 ** 2 / 12.0
    I2 = p.m2 * p.l2 ** 2 / 12.0
    c2 = np.cos(q[1])
    m22 = I2 + p.m2 * lc2 ** 2
    m12 = m22 + p.m2 * p.l1 * lc2 * c2
    m11 = I1 + p.m1 * (0.5 * p.l1) ** 2 + p.m2 * p.l1 ** 2 + m22 + 2.0 * p.m2 * p.l1 * lc2 * c2
    return np.array([[m11 + p.armature, m12], [m12, m22 + p.armature]])


def coriolis(q: np.ndarray, qdot: np.ndarray, p: ArmParams) -> np.ndarray:
    """C(q, q̇) q̇"""
    h = p.m2 * p.l1 * 0.5 * p.l2 * np.sin(q[1])
    return np.array([
        -h * (2.0 * qdot[0] * qdot[1] + qdot[1] ** 2),
        h * qdot[0] ** 2,
    ])


def arm_acceleration(q: np.ndarray, qdot: np.ndarray, u: np.ndarray, p: ArmParams) -> np.ndarray:
    """q̈ = M(q)⁻¹ (u - C(q,q̇)q̇ - D q̇)"""
    rhs = u - coriolis(q, qdot, p) - p.damping * qdot
    return np.linalg.solve(mass_matrix(q, p), rhs)


def arm_dynamics(x: np.ndarray, u: np.ndarray, p: ArmParams) -> np.ndarray:
    """ẋ for the stacked state x = [q; q̇]"""
    return np.concatenate([x[2:], arm_acceleration(x[:2], x[2:], u, p)])


def arm_step(s: ArmState, u, p: ArmParams) -> ArmState:
    """
    One RK4 step of length p.dt; the caller clamps u

    Raises:
        NonFiniteError: the integration produced NaN/inf
    """
    u = np.asarray(u, dtype=float).reshape(2)
    x = s.to_vector()
    h = p.dt
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            k1 = arm_dynamics(x, u, p)
            k2 = arm_dynamics(x + 0.5 * h * k1, u, p)
            k3 = arm_dynamics(x + 0.5 * h * k2, u, p)
            k4 = arm_dynamics(x + h * k3, u, p)
            x_next = x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    except np.linalg.LinAlgError:
        x_next = np.full(4, np.nan)
    if not np.all(np.isfinite(x_next)):
        raise NonFiniteError(f"arm step diverged from x={x.tolist()}, u={u.tolist()}", stage="arm_step")
    return ArmState.from_vector(x_next)


def arm_energy(s: ArmState, p: ArmParams) -> float:
    """Kinetic energy ½ q̇ᵀ M(q) q̇"""
    return float(0.5 * s.qdot @ mass_matrix(s.q, p) @ s.qdot)


def arm_fk(q, p: ArmParams) -> np.ndarray:
    """Tip position of the arm at joint angles q"""
    q = np.asarray(q, dtype=float)
    return np.array([
        p.l1 * np.cos(q[0]) + p.l2 * np.cos(q[0] + q[1]),
        p.l1 * np.sin(q[0]) + p.l2 * np.sin(q[0] + q[1]),
    ])


def arm_ik(tip, p: ArmParams, elbow: str = "down") -> np.ndarray:
    """
    Closed-form two-link inverse kinematics

    elbow="down" picks q₂ ≥ 0, elbow="up" picks q₂ ≤ 0.

    Raises:
        UnreachableTargetError: tip outside the annulus |l1-l2| ≤ r ≤ l1+l2
    """
    if elbow not in ("up", "down"):
        raise ConfigError(f"elbow must be 'up' or 'down', got '{elbow}'")
    x, y = (float(v) for v in np.asarray(tip, dtype=float).reshape(2))
    r = np.hypot(x, y)
    if r > p.l1 + p.l2 + REACH_TOL or r < abs(p.l1 - p.l2) - REACH_TOL:
        raise UnreachableTargetError(f"tip ({x:.4f}, {y:.4f}) at radius {r:.4f} is out of reach")
    c2 = (x * x + y * y - p.l1 ** 2 - p.l2 ** 2) / (2.0 * p.l1 * p.l2)
    q2 = np.arccos(np.clip(c2, -1.0, 1.0))
    if elbow == "up":
        q2 = -q2
    q1 = np.arctan2(y, x) - np.arctan2(p.l2 * np.sin(q2), p.l1 + p.l2 * np.cos(q2))
    return np.array([q1, q2])


def arm_reward(s: ArmState, u, q_d, qdot_d) -> float:
    """r = -100‖q_d - q‖ - 10‖q̇_d - q̇‖ - u₁² - u₂²"""
    u = np.asarray(u, dtype=float)
    return float(
        -100.0 * np.linalg.norm(np.asarray(q_d, dtype=float) - s.q)
        - 10.0 * np.linalg.norm(np.asarray(qdot_d, dtype=float) - s.qdot)
        - u @ u
    )


def figure8_reference(t: float, T: float = FIGURE8_PERIOD) -> np.ndarray:
    """Figure-8 tip target: p_x = 0.05 sin(4πt/T) + 0.1, p_y = 0.1 cos(2πt/T)"""
    return np.array([
        0.05 * np.sin(4.0 * np.pi * t / T) + 0.1,
        0.1 * np.cos(2.0 * np.pi * t / T),
    ])


@dataclass
class JointReference:
    """Sampled joint-space reference: t (n,), tip (n,2), q (n,2), qdot (n,2)"""

    t: np.ndarray
    tip: np.ndarray
    q: np.ndarray
    qdot: np.ndarray

    def __len__(self) -> int:
        return self.t.shape[0]

    def __getitem__(self, k: int) -> Tuple[np.ndarray, np.ndarray]:
        return self.q[k], self.qdot[k]

    def __iter__(self) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        for k in range(len(self)):
            yield self[k]

    def state(self, k: int) -> np.ndarray:
        """Reference state [q_d; q̇_d] at index k, held at the last sample"""
        k = min(max(k, 0), len(self) - 1)
        return np.concatenate([self.q[k], self.qdot[k]])


def reference_joint_traj(
    T: float, dt: float, p: ArmParams, elbow: str = "down", period: Optional[float] = None
) -> JointReference:
    """
    Joint reference tracking the figure-8 tip path

    IK at t = k·dt for k < T/dt; q̇_d from central differences, one-sided at
    the ends.
    """
    if not T > 0 or not dt > 0:
        raise ConfigError(f"need T > 0 and dt > 0, got T={T}, dt={dt}")
    n = max(2, int(round(T / dt)))
    t = dt * np.arange(n)
    period = T if period is None else period
    tip = np.stack([figure8_reference(tk, period) for tk in t])
    q = np.stack([arm_ik(pt, p, elbow) for pt in tip])
    qdot = np.gradient(q, dt, axis=0, edge_order=1)
    return JointReference(t=t, tip=tip, q=q, qdot=qdot)


def sample_initial_state(rng: np.random.Generator) -> ArmState:
    """q ~ U[-0.1, 0.1], q̇ ~ U[-0.005, 0.005]"""
    return ArmState(rng.uniform(-0.1, 0.1, 2), rng.uniform(-0.005, 0.005, 2))


def sample_goal(rng: np.random.Generator) -> np.ndarray:
    """q₁ ~ U[-π/2, π/2], q₂ ~ U[-π+0.15, π-0.15]"""
    return np.array([
        rng.uniform(-np.pi / 2, np.pi / 2),
        rng.uniform(-np.pi + 0.15, np.pi - 0.15),
    ])


def pd_action(s: ArmState, q_d, qdot_d, kp: float, kd: float, u_max: float) -> np.ndarray:
    """Clamped PD torque toward a joint reference"""
    u = kp * (np.asarray(q_d, dtype=float) - s.q) + kd * (np.asarray(qdot_d, dtype=float) - s.qdot)
    return np.clip(u, -u_max, u_max)


class ArmEnv:
    """
    Stateful arm for one worker: clamps actions and counts saturation

    Usage:
        env = ArmEnv(ArmParams())
        env.reset()
        state, reward, saturated = env.step(u, q_d, qdot_d)
    """

    def __init__(self, params: ArmParams, state: Optional[ArmState] = None):
        self.params = params.validate()
        self.state = state.copy() if state is not None else ArmState.zeros()
        self.steps = 0
        self.saturated_steps = 0

    def reset(self, state: Optional[ArmState] = None) -> ArmState:
        self.state = state.copy() if state is not None else ArmState.zeros()
        self.steps = 0
        self.saturated_steps = 0
        return self.state

    def clamp(self, u) -> Tuple[np.ndarray, bool]:
        u = np.asarray(u, dtype=float).reshape(2)
        clipped = np.clip(u, -self.params.u_max, self.params.u_max)
        return clipped, bool(np.any(clipped != u))

    def step(self, u, q_d=None, qdot_d=None) -> Tuple[ArmState, float, bool]:
        """Advance one dt; reward is 0 when no reference is given"""
        u, saturated = self.clamp(u)
        self.state = arm_step(self.state, u, self.params)
        self.steps += 1
        self.saturated_steps += int(saturated)
        reward = 0.0
        if q_d is not None:
            reward = arm_reward(self.state, u, q_d, np.zeros(2) if qdot_d is None else qdot_d)
        return self.state, reward, saturated

    @property
    def observation(self) -> np.ndarray:
        return self.state.to_vector()

    @property
    def tip(self) -> np.ndarray:
        return arm_fk(self.state.q, self.params)

    @property
    def saturation_rate(self) -> float:
        return self.saturated_steps / self.steps if self.steps else 0.0


def _spectral_radius(A: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(A)))) if A.size else 0.0


@dataclass
class ChainSpec:
    """
    Linear-Gaussian chain x_{k+1} = A x_k + w_k, w_k ~ N(0, noise_cov)

    With x0 unset the chain starts from its stationary distribution. A zero
    noise covariance is accepted and gives a deterministic chain.
    """

    A: np.ndarray
    noise_cov: np.ndarray
    seed: int = 0
    x0: Optional[np.ndarray] = None
    n: int = field(init=False)

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.noise_cov = np.atleast_2d(np.asarray(self.noise_cov, dtype=float))
        self.n = self.A.shape[0]
        if self.x0 is not None:
            self.x0 = np.asarray(self.x0, dtype=float).reshape(-1)
        self.validate()

    def validate(self) -> None:
        n = self.n
        if self.A.shape != (n, n) or self.noise_cov.shape != (n, n):
            raise DimensionError(f"A and noise_cov must be {n}×{n}")
        if self.x0 is not None and self.x0.shape[0] != n:
            raise DimensionError(f"x0 must have {n} entries")
        radius = _spectral_radius(self.A)
        if radius >= 1.0 - 1e-6:
            raise ConfigError(f"chain matrix must be stable, spectral radius is {radius:.6f}")
        if not np.allclose(self.noise_cov, self.noise_cov.T):
            raise ConfigError("noise_cov must be symmetric")
        eig = np.linalg.eigvalsh(self.noise_cov)
        if eig.min() < -1e-12:
            raise ConfigError("noise_cov must be positive semi-definite")
        if 0 < np.abs(eig).max() and eig.min() <= 0:
            logger.warning("⚠️ Chain noise covariance is singular; ergodicity is not guaranteed")

    def noise_factor(self) -> np.ndarray:
        """L with L Lᵀ = noise_cov"""
        w, V = np.linalg.eigh(self.noise_cov)
        return V * np.sqrt(np.clip(w, 0.0, None))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "A": self.A.tolist(),
            "noise_cov": self.noise_cov.tolist(),
            "seed": self.seed,
            "x0": None if self.x0 is None else self.x0.tolist(),
        }


def stationary_covariance(A: np.ndarray, noise_cov: np.ndarray) -> np.ndarray:
    """Σ solving Σ = A Σ Aᵀ + noise_cov"""
    sigma = scipy.linalg.solve_discrete_lyapunov(np.asarray(A, dtype=float), np.asarray(noise_cov, dtype=float))
    return 0.5 * (sigma + sigma.T)


def chain_sample(spec: ChainSpec, N: int, seed: Optional[int] = None) -> SnapshotDataset:
    """
    N consecutive transitions of the chain, deterministic per seed

    The control channel is empty and dt is one chain step.
    """
    if N < 1:
        raise ConfigError(f"need N ≥ 1 chain samples, got {N}")
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    n = spec.n
    if spec.x0 is not None:
        x = spec.x0.copy()
    else:
        sigma = stationary_covariance(spec.A, spec.noise_cov)
        w, V = np.linalg.eigh(sigma)
        x = (V * np.sqrt(np.clip(w, 0.0, None))) @ rng.standard_normal(n)
    noise = rng.standard_normal((N, n)) @ spec.noise_factor().T
    X = np.empty((N + 1, n))
    X[0] = x
    for k in range(N):
        X[k + 1] = spec.A @ X[k] + noise[k]
    return SnapshotDataset(dt=1.0, x=X[:-1], u=np.zeros((N, 0)), x_next=X[1:])
