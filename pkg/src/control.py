"""
Controllers on the lifted model
===============================

Nominal LQR and Sequential Action Control (MPC-SAC) on the continuous-time
Koopman model ż = A z + B u, where A = (K_z - I)/dt and B = K_g/dt.

MPC-SAC, per call:
1. update the nominal LQR policy μ(z) = u_ref - G (z - z_ref)
2. roll out the nominal closed loop over the horizon (RK4)
3. integrate the adjoint ρ backward from ρ(T) = ∂m/∂z (RK4)
4. u* = -R̄⁻¹ Bᵀ ρ(0) + μ(z), optionally backtracked until holding it for
   one step beats holding μ(z), then clamped to the actuator box

The objective is the quadratic tracking family
    l = ‖z - z_ref‖²_Q + ‖u - u_ref‖²_R,   m = ‖z(T) - z_ref‖²_Q_T
with diagonal weights laid out from LqrConfig.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg

from .edmd import KoopmanModel
from .errors import ConfigError, DimensionError, DivergenceError, RiccatiConvergenceError

logger = logging.getLogger(__name__)

LQR_SOLVERS = ("infinite", "finite")


@dataclass
class LqrConfig:
    """
    LQR weights, laid out per block of the lifted state

    The first n_pos raw entries get weight_pos, the remaining raw entries
    weight_vel, every other lifted entry weight_obs. R = weight_u·I and
    Q_T = weight_terminal·I.
    """

    weight_pos: float = 200.0
    weight_vel: float = 30.0
    weight_obs: float = 1.0
    weight_u: float = 0.001
    weight_terminal: float = 0.0
    horizon: float = 0.16
    dt: float = 0.01
    solver: str = "infinite"
    n_pos: Optional[int] = None
    tol: float = 1e-10
    max_iter: int = 10000

    def validate(self) -> "LqrConfig":
        weights = (self.weight_pos, self.weight_vel, self.weight_obs, self.weight_terminal)
        if any(w < 0 for w in weights):
            raise ConfigError("LQR state weights must be non-negative")
        if not self.weight_u > 0:
            raise ConfigError(f"LQR weight_u must be > 0, got {self.weight_u}")
        if not self.dt > 0 or self.horizon < self.dt - 1e-12:
            raise ConfigError(f"need horizon ≥ dt > 0, got horizon={self.horizon}, dt={self.dt}")
        if self.solver not in LQR_SOLVERS:
            raise ConfigError(f"unknown LQR solver '{self.solver}' (expected {LQR_SOLVERS})")
        return self

    @property
    def steps(self) -> int:
        return max(1, int(round(self.horizon / self.dt)))

    def weights(self, n_x: int, n_z: int, n_u: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Diagonals (Q, R, Q_T) for an n_z-dimensional lift of an n_x state"""
        n_x = min(n_x, n_z)
        n_pos = n_x // 2 if self.n_pos is None else min(int(self.n_pos), n_x)
        Q = np.full(n_z, float(self.weight_obs))
        Q[:n_pos] = self.weight_pos
        Q[n_pos:n_x] = self.weight_vel
        R = np.full(n_u, float(self.weight_u))
        Q_T = np.full(n_z, float(self.weight_terminal))
        return Q, R, Q_T


@dataclass
class SacConfig:
    """
    Sequential action control settings: horizon T, step δt and weight R̄

    With backtrack > 0 the closed-form step is halved up to that many times
    until holding it for one step lowers J₁ below holding μ(z).
    """

    horizon: float = 0.16
    dt: float = 0.01
    rbar: Sequence[float] = (1e3, 1e3)
    nominal: LqrConfig = field(default_factory=LqrConfig)
    maf_window: float = 0.0
    backtrack: int = 0

    def validate(self) -> "SacConfig":
        if not self.dt > 0:
            raise ConfigError(f"SAC dt must be > 0, got {self.dt}")
        ratio = self.horizon / self.dt
        if round(ratio) < 1 or abs(ratio - round(ratio)) > 1e-6:
            raise ConfigError(
                f"SAC horizon/dt must be an integer ≥ 1, got {self.horizon}/{self.dt}"
            )
        if len(self.rbar) == 0 or any(not r > 0 for r in self.rbar):
            raise ConfigError("SAC rbar entries must all be > 0")
        if self.maf_window < 0:
            raise ConfigError("maf_window must be ≥ 0")
        if self.backtrack < 0:
            raise ConfigError(f"backtrack must be ≥ 0, got {self.backtrack}")
        self.nominal.validate()
        return self

    @property
    def steps(self) -> int:
        return int(round(self.horizon / self.dt))


@dataclass(frozen=True)
class ContinuousKoopman:
    """ż = A z + B u"""

    A: np.ndarray
    B: np.ndarray
    n_x: Optional[int] = None

    @property
    def n_z(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    def f(self, z: np.ndarray, u: np.ndarray) -> np.ndarray:
        return self.A @ z + self.B @ u


def to_continuous(m: KoopmanModel) -> ContinuousKoopman:
    """First-order conversion A = (K_z - I)/dt, B = K_g/dt (approximate)"""
    A = (m.K_z - np.eye(m.n_z)) / m.dt
    B = m.K_g / m.dt
    n_x = m.basis_state.n_x if m.basis_state is not None else None
    logger.debug("⚠️ Continuous model is a first-order approximation of the discrete one")
    return ContinuousKoopman(A=A, B=B, n_x=n_x)


@dataclass
class AffinePolicy:
    """μ(z) = u_ref - G (z - z_ref); ∂μ/∂z = -G"""

    G: np.ndarray
    z_ref: np.ndarray
    u_ref: np.ndarray
    riccati_residual: float = 0.0
    iterations: int = 0

    def __call__(self, z: np.ndarray) -> np.ndarray:
        return self.u_ref - self.G @ (np.asarray(z, dtype=float) - self.z_ref)

    @property
    def jacobian(self) -> np.ndarray:
        return -self.G


@dataclass
class Objective:
    """Quadratic tracking objective with diagonal weights"""

    Q: np.ndarray
    R: np.ndarray
    Q_T: np.ndarray
    z_ref: np.ndarray
    u_ref: np.ndarray

    @classmethod
    def from_lqr(
        cls, cfg: LqrConfig, n_x: Optional[int], z_ref: np.ndarray, u_ref: np.ndarray
    ) -> "Objective":
        z_ref = np.asarray(z_ref, dtype=float)
        u_ref = np.asarray(u_ref, dtype=float).reshape(-1)
        n_z = z_ref.shape[-1]
        Q, R, Q_T = cfg.weights(n_z if n_x is None else n_x, n_z, u_ref.shape[0])
        return cls(Q=Q, R=R, Q_T=Q_T, z_ref=z_ref, u_ref=u_ref)

    def ref(self, i: float) -> np.ndarray:
        """Reference at (possibly half-integer) horizon index i"""
        if self.z_ref.ndim == 1:
            return self.z_ref
        last = self.z_ref.shape[0] - 1
        lo = min(int(np.floor(i)), last)
        hi = min(int(np.ceil(i)), last)
        if lo == hi:
            return self.z_ref[lo]
        w = i - np.floor(i)
        return (1.0 - w) * self.z_ref[lo] + w * self.z_ref[hi]

    def running_cost(self, z: np.ndarray, u: np.ndarray, i: float) -> float:
        e = z - self.ref(i)
        v = u - self.u_ref
        return float(e @ (self.Q * e) + v @ (self.R * v))

    def grad_z(self, z: np.ndarray, i: float) -> np.ndarray:
        return 2.0 * self.Q * (z - self.ref(i))

    def grad_u(self, u: np.ndarray) -> np.ndarray:
        return 2.0 * self.R * (u - self.u_ref)

    def terminal_cost(self, z: np.ndarray, i: float) -> float:
        e = z - self.ref(i)
        return float(e @ (self.Q_T * e))

    def terminal_grad(self, z: np.ndarray, i: float) -> np.ndarray:
        return 2.0 * self.Q_T * (z - self.ref(i))


def riccati_iteration(
    Ad: np.ndarray,
    Bd: np.ndarray,
    Q: np.ndarray,
    R: np.ndarray,
    Q_T: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 10000,
    fixed_steps: Optional[int] = None,
) -> Tuple[np.ndarray, np.ndarray, float, int]:
    """
    Discrete Riccati recursion from the terminal weight

        S = R + BᵀPB,  G = S⁻¹BᵀPA,  P ← Q + AᵀPA - AᵀPB G

    With fixed_steps the recursion runs exactly that many steps (finite
    horizon, G is the first-step gain); otherwise it runs to the fixed point,
    with residual max|ΔP| / max(1, max|P|).

    Returns:
        (P, G, residual, iterations)

    Raises:
        RiccatiConvergenceError: no fixed point within max_iter, or blow-up
    """
    P = np.asarray(Q_T, dtype=float).copy()
    G = np.zeros((Bd.shape[1], Ad.shape[0]))
    residual = float("inf")
    limit = max_iter if fixed_steps is None else fixed_steps
    iterations = 0
    with np.errstate(over="ignore", invalid="ignore"):
        for iterations in range(1, limit + 1):
            PB = P @ Bd
            S = R + Bd.T @ PB
            G = scipy.linalg.solve(S, PB.T @ Ad, assume_a="sym")
            P_next = Q + Ad.T @ P @ Ad - (Ad.T @ PB) @ G
            P_next = 0.5 * (P_next + P_next.T)
            if not np.all(np.isfinite(P_next)):
                raise RiccatiConvergenceError(float("inf"), iterations)
            residual = float(np.max(np.abs(P_next - P))) / max(1.0, float(np.max(np.abs(P_next))))
            P = P_next
            if fixed_steps is None and residual <= tol:
                break
        else:
            if fixed_steps is None:
                raise RiccatiConvergenceError(residual, limit)
    if fixed_steps is None:
        # gain consistent with the converged P
        PB = P @ Bd
        G = scipy.linalg.solve(R + Bd.T @ PB, PB.T @ Ad, assume_a="sym")
    return P, G, residual, iterations


def lqr_nominal(
    cont: ContinuousKoopman,
    cfg: LqrConfig,
    z_ref: np.ndarray,
    u_ref: np.ndarray,
) -> AffinePolicy:
    """
    Nominal LQR policy for the model discretized at cfg.dt

    Raises:
        RiccatiConvergenceError: infinite-horizon iteration did not converge
    """
    z_ref = np.asarray(z_ref, dtype=float).reshape(-1)
    u_ref = np.asarray(u_ref, dtype=float).reshape(-1)
    if z_ref.shape[0] != cont.n_z or u_ref.shape[0] != cont.n_u:
        raise DimensionError(
            f"references have lengths ({z_ref.shape[0]}, {u_ref.shape[0]}), "
            f"model needs ({cont.n_z}, {cont.n_u})"
        )
    n = cont.n_z
    Ad = np.eye(n) + cont.A * cfg.dt
    Bd = cont.B * cfg.dt
    Qd, Rd, QTd = cfg.weights(n if cont.n_x is None else cont.n_x, n, cont.n_u)
    fixed = cfg.steps if cfg.solver == "finite" else None
    _, G, residual, iterations = riccati_iteration(
        Ad, Bd, np.diag(Qd), np.diag(Rd), np.diag(QTd),
        tol=cfg.tol, max_iter=cfg.max_iter, fixed_steps=fixed,
    )
    return AffinePolicy(G=G, z_ref=z_ref, u_ref=u_ref, riccati_residual=residual, iterations=iterations)


@dataclass
class NominalTrajectory:
    """Closed-loop rollout: z (H+1, n_z), u (H, n_u), ż at every node"""

    z: np.ndarray
    u: np.ndarray
    zdot: np.ndarray
    dt: float

    @property
    def steps(self) -> int:
        return self.u.shape[0]

    def midpoint(self, k: int) -> np.ndarray:
        """Cubic Hermite state estimate halfway through step k"""
        return 0.5 * (self.z[k] + self.z[k + 1]) + self.dt / 8.0 * (self.zdot[k] - self.zdot[k + 1])


def _closed_loop(cont: ContinuousKoopman, policy: AffinePolicy):
    def f(z: np.ndarray) -> np.ndarray:
        return cont.A @ z + cont.B @ policy(z)
    return f


def simulate_nominal(
    cont: ContinuousKoopman, policy: AffinePolicy, z0: np.ndarray, H: int, dt: float
) -> NominalTrajectory:
    """
    RK4 rollout of ż = A z + B μ(z) for H steps

    Raises:
        DivergenceError: the state left the finite range (reports the step)
    """
    if H < 1:
        raise DimensionError(f"horizon must be ≥ 1 step, got {H}")
    z0 = np.asarray(z0, dtype=float).reshape(-1)
    f = _closed_loop(cont, policy)
    Z = np.empty((H + 1, cont.n_z))
    U = np.empty((H, cont.n_u))
    Zdot = np.empty((H + 1, cont.n_z))
    Z[0] = z0
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(H):
            z = Z[k]
            k1 = f(z)
            k2 = f(z + 0.5 * dt * k1)
            k3 = f(z + 0.5 * dt * k2)
            k4 = f(z + dt * k3)
            Zdot[k] = k1
            U[k] = policy(z)
            Z[k + 1] = z + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if not np.all(np.isfinite(Z[k + 1])):
                raise DivergenceError("nominal rollout diverged", stage="rollout", step=k + 1)
        Zdot[H] = f(Z[H])
    return NominalTrajectory(z=Z, u=U, zdot=Zdot, dt=dt)


def sac_adjoint(
    traj: NominalTrajectory,
    cont: ContinuousKoopman,
    policy: AffinePolicy,
    objective: Objective,
) -> np.ndarray:
    """
    Backward RK4 integration of the costate

        ρ̇ = -(∂l/∂z + (∂μ/∂z)ᵀ ∂l/∂u) - (A + B ∂μ/∂z)ᵀ ρ,   ρ(T) = ∂m/∂z

    Returns:
        ρ at every node, shape (H+1, n_z)

    Raises:
        DivergenceError: the costate left the finite range
    """
    H = traj.steps
    dt = traj.dt
    J = policy.jacobian
    Acl_T = (cont.A + cont.B @ J).T

    def rhs(rho: np.ndarray, z: np.ndarray, i: float) -> np.ndarray:
        source = objective.grad_z(z, i) + J.T @ objective.grad_u(policy(z))
        return -source - Acl_T @ rho

    rho = np.empty((H + 1, cont.n_z))
    rho[H] = objective.terminal_grad(traj.z[H], H)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(H - 1, -1, -1):
            r = rho[k + 1]
            z_mid = traj.midpoint(k)
            k1 = rhs(r, traj.z[k + 1], k + 1)
            k2 = rhs(r - 0.5 * dt * k1, z_mid, k + 0.5)
            k3 = rhs(r - 0.5 * dt * k2, z_mid, k + 0.5)
            k4 = rhs(r - dt * k3, traj.z[k], k)
            rho[k] = r - dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if not np.all(np.isfinite(rho[k])):
                raise DivergenceError("adjoint became non-finite", stage="adjoint", step=k)
    return rho


def mode_insertion_gradient(rho: np.ndarray, f1: np.ndarray, f2: np.ndarray) -> float:
    """ρᵀ(f₂ - f₁): sensitivity of the objective to briefly switching f₁ → f₂"""
    rho = np.asarray(rho, dtype=float).reshape(-1)
    f1 = np.asarray(f1, dtype=float).reshape(-1)
    f2 = np.asarray(f2, dtype=float).reshape(-1)
    if not (rho.shape == f1.shape == f2.shape):
        raise DimensionError("ρ, f1 and f2 must have equal length")
    return float(rho @ (f2 - f1))


def rollout_cost(
    cont: ContinuousKoopman,
    policy: AffinePolicy,
    objective: Objective,
    z0: np.ndarray,
    H: int,
    dt: float,
    u_insert: Optional[np.ndarray] = None,
    insert_steps: int = 1,
) -> float:
    """
    Objective J₁ of a closed-loop rollout, integrated with RK4 on [z; J]

    With u_insert, that constant action replaces μ during the first
    insert_steps steps. A controller that holds its action for one step is
    judged against u_insert = μ(z0), the nominal action it would otherwise
    hold, not against the continuous-feedback rollout.
    """
    z = np.asarray(z0, dtype=float).reshape(-1).copy()
    cost = 0.0

    def deriv(z: np.ndarray, i: float, forced: bool) -> Tuple[np.ndarray, float]:
        u = u_insert if forced else policy(z)
        return cont.A @ z + cont.B @ u, objective.running_cost(z, u, i)

    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(H):
            forced = u_insert is not None and k < insert_steps
            d1, c1 = deriv(z, k, forced)
            d2, c2 = deriv(z + 0.5 * dt * d1, k + 0.5, forced)
            d3, c3 = deriv(z + 0.5 * dt * d2, k + 0.5, forced)
            d4, c4 = deriv(z + dt * d3, k + 1, forced)
            z = z + dt / 6.0 * (d1 + 2.0 * d2 + 2.0 * d3 + d4)
            cost += dt / 6.0 * (c1 + 2.0 * c2 + 2.0 * c3 + c4)
            if not np.all(np.isfinite(z)):
                raise DivergenceError("cost rollout diverged", stage="rollout", step=k + 1)
    return cost + objective.terminal_cost(z, H)


@dataclass
class SacSolution:
    """Everything one MPC-SAC call computed"""

    u: np.ndarray
    u_unclamped: np.ndarray
    u_nominal: np.ndarray
    rho: np.ndarray
    trajectory: NominalTrajectory
    policy: AffinePolicy
    insertion_gradient: float
    saturated: bool
    step_scale: float = 1.0
    cost_nominal: Optional[float] = None
    cost_inserted: Optional[float] = None

    @property
    def rho0(self) -> np.ndarray:
        return self.rho[0]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "u": self.u.tolist(),
            "u_unclamped": self.u_unclamped.tolist(),
            "u_nominal": self.u_nominal.tolist(),
            "insertion_gradient": self.insertion_gradient,
            "saturated": self.saturated,
            "step_scale": self.step_scale,
            "cost_nominal": self.cost_nominal,
            "cost_inserted": self.cost_inserted,
        }


def clamp_action(
    u: np.ndarray, u_min: Optional[np.ndarray], u_max: Optional[np.ndarray]
) -> Tuple[np.ndarray, bool]:
    """Clip to the actuator box; the flag tells whether any entry moved"""
    if u_min is None and u_max is None:
        return u, False
    clipped = np.clip(u, u_min, u_max)
    return clipped, bool(np.any(clipped != u))


def _reference_horizon(z_ref: np.ndarray, H: int) -> np.ndarray:
    z_ref = np.asarray(z_ref, dtype=float)
    if z_ref.ndim == 1:
        return z_ref
    if z_ref.shape[0] >= H + 1:
        return z_ref[: H + 1]
    pad = np.repeat(z_ref[-1:], H + 1 - z_ref.shape[0], axis=0)
    return np.vstack([z_ref, pad])


def sac_solve(
    m: KoopmanModel,
    z: np.ndarray,
    z_ref: np.ndarray,
    u_ref: np.ndarray,
    cfg: SacConfig,
    u_min: Optional[np.ndarray] = None,
    u_max: Optional[np.ndarray] = None,
) -> SacSolution:
    """
    One MPC-SAC step on a model snapshot

    Args:
        z: Current lifted state
        z_ref: Lifted reference, a vector or an (≥1, n_z) horizon schedule
        u_ref: Reference control
        u_min, u_max: Actuator bounds for the final clamp

    The line search, when enabled, compares unclamped actions.
    """
    z = np.asarray(z, dtype=float).reshape(-1)
    u_ref = np.asarray(u_ref, dtype=float).reshape(-1)
    H = cfg.steps
    rbar = np.asarray(cfg.rbar, dtype=float).reshape(-1)
    if rbar.shape[0] != m.n_g:
        raise DimensionError(f"rbar has {rbar.shape[0]} entries, model has {m.n_g} controls")
    if not np.all(np.isfinite(z)):
        raise DivergenceError("non-finite lifted state", stage="sac")

    cont = to_continuous(m)
    schedule = _reference_horizon(z_ref, H)
    first_ref = schedule if schedule.ndim == 1 else schedule[0]

    policy = lqr_nominal(cont, cfg.nominal, first_ref, u_ref)
    objective = Objective.from_lqr(cfg.nominal, cont.n_x, schedule, u_ref)
    trajectory = simulate_nominal(cont, policy, z, H, cfg.dt)
    rho = sac_adjoint(trajectory, cont, policy, objective)

    u_nominal = policy(z)
    step = -(cont.B.T @ rho[0]) / rbar
    scale = 1.0
    cost_nominal: Optional[float] = None
    cost_inserted: Optional[float] = None
    if cfg.backtrack > 0 and np.any(step != 0.0):
        cost_nominal = rollout_cost(cont, policy, objective, z, H, cfg.dt, u_insert=u_nominal)
        for _ in range(cfg.backtrack + 1):
            try:
                cost_inserted = rollout_cost(cont, policy, objective, z, H, cfg.dt, u_insert=u_nominal + scale * step)
            except DivergenceError:
                cost_inserted = np.inf
            if cost_inserted < cost_nominal:
                break
            scale *= 0.5
        else:
            logger.debug(f"⚠️ No descending SAC step after {cfg.backtrack} halvings, holding μ(z)")
            scale, cost_inserted = 0.0, cost_nominal

    u_star = scale * step + u_nominal
    u, saturated = clamp_action(u_star, u_min, u_max)
    gradient = mode_insertion_gradient(rho[0], cont.f(z, u_nominal), cont.f(z, u_star))
    return SacSolution(
        u=u,
        u_unclamped=u_star,
        u_nominal=u_nominal,
        rho=rho,
        trajectory=trajectory,
        policy=policy,
        insertion_gradient=gradient,
        saturated=saturated,
        step_scale=scale,
        cost_nominal=cost_nominal,
        cost_inserted=cost_inserted,
    )


def sac_action(
    m: KoopmanModel,
    z: np.ndarray,
    z_ref: np.ndarray,
    u_ref: np.ndarray,
    cfg: SacConfig,
    u_min: Optional[np.ndarray] = None,
    u_max: Optional[np.ndarray] = None,
) -> np.ndarray:
    """u* = -R̄⁻¹ K_uᵀ ρ(0) + μ(z), clamped to the actuator box"""
    return sac_solve(m, z, z_ref, u_ref, cfg, u_min, u_max).u


def lqr_action(
    m: KoopmanModel,
    z: np.ndarray,
    z_ref: np.ndarray,
    u_ref: np.ndarray,
    cfg: LqrConfig,
    u_min: Optional[np.ndarray] = None,
    u_max: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, bool]:
    """Pure nominal LQR action μ(z), clamped; returns (u, saturated)"""
    z_ref = np.asarray(z_ref, dtype=float)
    first_ref = z_ref if z_ref.ndim == 1 else z_ref[0]
    policy = lqr_nominal(to_continuous(m), cfg, first_ref, u_ref)
    return clamp_action(policy(z), u_min, u_max)


class MovingAverageFilter:
    """Moving average over the last `window` actions; window ≤ 1 passes through"""

    def __init__(self, window: int):
        self.window = max(1, int(window))
        self._history: List[np.ndarray] = []

    def __call__(self, u: np.ndarray) -> np.ndarray:
        if self.window == 1:
            return u
        self._history.append(np.asarray(u, dtype=float))
        if len(self._history) > self.window:
            self._history.pop(0)
        return np.mean(self._history, axis=0)
