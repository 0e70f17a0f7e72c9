"""
EDMD - batch Koopman fitting
============================

Snapshot datasets, snapshot matrix assembly and the batch least-squares fit

    K = (Ȳ Yᵀ)(Y Yᵀ + ridge·I)⁻¹,   P = (Y Yᵀ + ridge·I)⁻¹

with well-posedness diagnostics. P is kept un-normalized so a recursive
update continues exactly where the batch fit stopped.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Iterator, Optional, Tuple

import numpy as np
import pandas as pd
import scipy.linalg

from .errors import DimensionError, NonFiniteError, NumericalError, RankDeficiencyError
from .observables import Basis, BasisSpec

logger = logging.getLogger(__name__)

RANK_RTOL = 1e-10
SYMMETRY_TOL = 1e-8


def _as_controls(u, n: int) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.size == 0:
        return np.zeros((n, 0))
    return u.reshape(n, -1)


@dataclass
class SnapshotDataset:
    """
    Ordered (x_k, u_k, x_{k+1}) triples at a uniform time step

    Attributes:
        dt: Time step in seconds
        x: States, shape (N, n_x)
        u: Controls, shape (N, n_u); n_u may be 0 for autonomous systems
        x_next: Successor states, shape (N, n_x)
        traj: Optional trajectory id per record, shape (N,)
    """

    dt: float
    x: np.ndarray
    u: np.ndarray
    x_next: np.ndarray
    traj: Optional[np.ndarray] = None

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.x_next = np.atleast_2d(np.asarray(self.x_next, dtype=float))
        self.u = _as_controls(self.u, self.x.shape[0])
        if self.traj is not None:
            self.traj = np.asarray(self.traj, dtype=int).reshape(-1)
        self.validate()

    @property
    def n_x(self) -> int:
        return self.x.shape[1]

    @property
    def n_u(self) -> int:
        return self.u.shape[1]

    def __len__(self) -> int:
        return self.x.shape[0]

    def validate(self) -> None:
        """Check dimensions, time step and trajectory continuity"""
        if not self.dt > 0:
            raise DimensionError(f"dt must be > 0, got {self.dt}")
        n = self.x.shape[0]
        if self.x_next.shape != self.x.shape:
            raise DimensionError(
                f"x and x_next shapes differ: {self.x.shape} vs {self.x_next.shape}"
            )
        if self.u.shape[0] != n:
            raise DimensionError(f"{self.u.shape[0]} controls for {n} states")
        if self.traj is None:
            return
        if self.traj.shape[0] != n:
            raise DimensionError(f"{self.traj.shape[0]} trajectory ids for {n} records")
        same = self.traj[1:] == self.traj[:-1]
        if np.any(same):
            gap = np.abs(self.x_next[:-1][same] - self.x[1:][same])
            if gap.size and np.max(gap) > 0:
                raise DimensionError(
                    "consecutive records of one trajectory do not chain (x_next[k] != x[k+1])"
                )

    def records(self) -> Iterator[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
        """Iterate over (x_k, u_k, x_{k+1}) triples in order"""
        for k in range(len(self)):
            yield self.x[k], self.u[k], self.x_next[k]

    def head(self, n: int) -> "SnapshotDataset":
        """First n records"""
        traj = None if self.traj is None else self.traj[:n]
        return replace(self, x=self.x[:n], u=self.u[:n], x_next=self.x_next[:n], traj=traj)

    def concat(self, other: "SnapshotDataset") -> "SnapshotDataset":
        """Append another dataset recorded at the same dt"""
        if not np.isclose(self.dt, other.dt) or self.n_x != other.n_x or self.n_u != other.n_u:
            raise DimensionError("datasets differ in dt or dimensions")
        traj = None
        if self.traj is not None or other.traj is not None:
            mine = self.traj if self.traj is not None else np.zeros(len(self), dtype=int)
            theirs = other.traj if other.traj is not None else np.zeros(len(other), dtype=int)
            offset = (mine.max() + 1) if mine.size else 0
            traj = np.concatenate([mine, theirs + offset])
        return SnapshotDataset(
            dt=self.dt,
            x=np.vstack([self.x, other.x]),
            u=np.vstack([self.u, other.u]),
            x_next=np.vstack([self.x_next, other.x_next]),
            traj=traj,
        )

    @classmethod
    def from_trajectory(
        cls, states: np.ndarray, controls: np.ndarray, dt: float, traj_id: int = 0
    ) -> "SnapshotDataset":
        """
        Build snapshots from one trajectory

        Args:
            states: (T+1, n_x) visited states
            controls: (T, n_u) controls applied at the first T states
        """
        states = np.atleast_2d(np.asarray(states, dtype=float))
        controls = _as_controls(controls, states.shape[0] - 1)
        return cls(
            dt=dt,
            x=states[:-1],
            u=controls,
            x_next=states[1:],
            traj=np.full(states.shape[0] - 1, traj_id, dtype=int),
        )


def resample_uniform(frame: pd.DataFrame, dt: float) -> pd.DataFrame:
    """
    Linearly interpolate every non-time column onto a uniform grid of step dt

    The grid starts at the first timestamp and never extrapolates past the last.
    """
    t = frame["t"].to_numpy(dtype=float)
    if t.size < 2:
        return frame.reset_index(drop=True)
    if np.any(np.diff(t) <= 0):
        raise DimensionError("timestamps must be strictly increasing")
    count = int(np.floor((t[-1] - t[0]) / dt + 1e-9)) + 1
    grid = t[0] + dt * np.arange(count)
    out = {"t": grid}
    for col in frame.columns:
        if col == "t":
            continue
        values = frame[col].to_numpy(dtype=float)
        known = np.isfinite(values)
        if known.sum() >= 2:
            out[col] = np.interp(grid, t[known], values[known])
        else:
            out[col] = np.full(count, np.nan)
    return pd.DataFrame(out)


@dataclass
class KoopmanModel:
    """
    Lifted linear model β = K α with α = [φ(x); ψ(u)], β = [φ(x'); ψ(u)]

    Attributes:
        K: (n_z+n_g) × (n_z+n_g) Koopman matrix
        P: inverse of the (un-normalized) data covariance YYᵀ (+ ridge)
        n_z, n_g: lifted state and control dimensions
        basis_state, basis_control: specs of φ and ψ
        dt: Sampling time of the data in seconds
        sample_count: Number of snapshots absorbed so far
    """

    K: np.ndarray
    P: np.ndarray
    n_z: int
    n_g: int
    basis_state: Optional[BasisSpec] = None
    basis_control: Optional[BasisSpec] = None
    dt: float = 1.0
    sample_count: int = 0
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        dim = self.n_z + self.n_g
        if self.K.shape != (dim, dim) or self.P.shape != (dim, dim):
            raise DimensionError(
                f"K and P must be {dim}×{dim}, got {self.K.shape} and {self.P.shape}"
            )

    @property
    def dim(self) -> int:
        return self.n_z + self.n_g

    @property
    def K_z(self) -> np.ndarray:
        return self.K[: self.n_z, : self.n_z]

    @property
    def K_g(self) -> np.ndarray:
        return self.K[: self.n_z, self.n_z :]

    # the control literature calls it K_u
    K_u = K_g

    def symmetry_residual(self) -> float:
        scale = max(1.0, float(np.max(np.abs(self.P))))
        return float(np.max(np.abs(self.P - self.P.T))) / scale if self.P.size else 0.0

    def predict(self, z: np.ndarray, g: np.ndarray) -> np.ndarray:
        """One-step lifted prediction K_z z + K_g g"""
        return self.K_z @ np.asarray(z, dtype=float) + self.K_g @ np.asarray(g, dtype=float)

    def copy(self, read_only: bool = False) -> "KoopmanModel":
        K = self.K.copy()
        P = self.P.copy()
        if read_only:
            K.setflags(write=False)
            P.setflags(write=False)
        return replace(self, K=K, P=P, meta=dict(self.meta))


@dataclass(frozen=True)
class Wellposedness:
    """Rank diagnostics of the data covariance"""

    rank: int
    dim: int
    condition_number: float
    full_rank: bool

    def to_dict(self) -> Dict[str, Any]:
        return {
            "rank": self.rank,
            "dim": self.dim,
            "condition_number": self.condition_number,
            "full_rank": self.full_rank,
        }


def _spectrum_report(singular_values: np.ndarray, dim: int) -> Wellposedness:
    s = np.asarray(singular_values, dtype=float)
    if s.size == 0 or not np.all(np.isfinite(s)) or s.max() <= 0:
        return Wellposedness(rank=0, dim=dim, condition_number=float("inf"), full_rank=dim == 0)
    tol = s.max() * RANK_RTOL
    rank = int(np.sum(s > tol))
    cond = float(s.max() / s.min()) if s.min() > 0 else float("inf")
    return Wellposedness(rank=rank, dim=dim, condition_number=cond, full_rank=rank == dim)


def wellposedness_report(Y: np.ndarray) -> Wellposedness:
    """Numerical rank and condition number of YYᵀ; never raises"""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    dim = Y.shape[0]
    try:
        s = scipy.linalg.svdvals(Y @ Y.T)
    except (ValueError, np.linalg.LinAlgError):
        return Wellposedness(rank=0, dim=dim, condition_number=float("inf"), full_rank=False)
    return _spectrum_report(s, dim)


def precision_report(P: np.ndarray) -> Wellposedness:
    """Same diagnostics computed from P = (YYᵀ)⁻¹ without the data matrix"""
    P = np.asarray(P, dtype=float)
    dim = P.shape[0]
    try:
        eig = np.abs(scipy.linalg.eigvalsh(0.5 * (P + P.T)))
    except (ValueError, np.linalg.LinAlgError):
        return Wellposedness(rank=0, dim=dim, condition_number=float("inf"), full_rank=False)
    with np.errstate(divide="ignore"):
        inverse = np.where(eig > 0, 1.0 / np.where(eig > 0, eig, 1.0), 0.0)
    return _spectrum_report(inverse, dim)


def assemble_snapshots(
    ds: SnapshotDataset, basis_x: Basis, basis_u: Basis
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Stack lifted snapshots column-wise

    Returns:
        (Y, Ȳ), each (n_z+n_g) × N, columns α_k = [φ(x_k); ψ(u_k)] and
        β_k = [φ(x_{k+1}); ψ(u_k)]
    """
    if len(ds) == 0:
        raise DimensionError("cannot assemble snapshots from an empty dataset")
    if basis_x.n_x != ds.n_x or basis_u.n_x != ds.n_u:
        raise DimensionError(
            f"bases expect (n_x={basis_x.n_x}, n_u={basis_u.n_x}), "
            f"dataset has (n_x={ds.n_x}, n_u={ds.n_u})"
        )
    g = basis_u.lift_batch(ds.u)
    Y = np.concatenate([basis_x.lift_batch(ds.x), g], axis=1).T
    Ybar = np.concatenate([basis_x.lift_batch(ds.x_next), g], axis=1).T
    return np.ascontiguousarray(Y), np.ascontiguousarray(Ybar)


def fit_edmd(
    Y: np.ndarray,
    Ybar: np.ndarray,
    ridge: float = 0.0,
    n_z: Optional[int] = None,
    basis_state: Optional[BasisSpec] = None,
    basis_control: Optional[BasisSpec] = None,
    dt: float = 1.0,
) -> KoopmanModel:
    """
    Batch least-squares Koopman fit

    Args:
        Y, Ybar: Snapshot matrices of equal shape (n_z+n_g) × N
        ridge: Tikhonov term added to YYᵀ; 0 reproduces plain EDMD
        n_z: Lifted state dimension (defaults to all rows, n_g = 0)

    Raises:
        DimensionError: shape mismatch or N = 0
        RankDeficiencyError: YYᵀ singular with ridge = 0
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    Ybar = np.atleast_2d(np.asarray(Ybar, dtype=float))
    if Y.shape != Ybar.shape:
        raise DimensionError(f"Y and Ȳ shapes differ: {Y.shape} vs {Ybar.shape}")
    dim, N = Y.shape
    if N < 1:
        raise DimensionError("EDMD needs at least one snapshot")
    if ridge < 0:
        raise DimensionError(f"ridge must be ≥ 0, got {ridge}")
    if not (np.all(np.isfinite(Y)) and np.all(np.isfinite(Ybar))):
        raise NonFiniteError("non-finite snapshot data", stage="edmd")
    n_z = dim if n_z is None else int(n_z)

    G = Y @ Y.T
    if ridge == 0.0:
        report = wellposedness_report(Y)
        if not report.full_rank:
            raise RankDeficiencyError(report.rank, report.dim, report.condition_number)
    else:
        G = G + ridge * np.eye(dim)

    try:
        factor = scipy.linalg.cho_factor(G, lower=False, check_finite=False)
        P = scipy.linalg.cho_solve(factor, np.eye(dim), check_finite=False)
    except np.linalg.LinAlgError as e:
        report = wellposedness_report(Y)
        raise RankDeficiencyError(report.rank, report.dim, report.condition_number) from e
    P = 0.5 * (P + P.T)
    K = (Ybar @ Y.T) @ P
    if not np.all(np.isfinite(K)):
        raise NumericalError("EDMD produced a non-finite Koopman matrix")

    logger.debug(f"EDMD fit: dim={dim}, N={N}, ridge={ridge}")
    return KoopmanModel(
        K=K,
        P=P,
        n_z=n_z,
        n_g=dim - n_z,
        basis_state=basis_state,
        basis_control=basis_control,
        dt=dt,
        sample_count=N,
    )


def fit_dataset(
    ds: SnapshotDataset, basis_x: Basis, basis_u: Basis, ridge: float = 0.0
) -> KoopmanModel:
    """Assemble snapshots from a dataset and fit them in one call"""
    Y, Ybar = assemble_snapshots(ds, basis_x, basis_u)
    model = fit_edmd(
        Y,
        Ybar,
        ridge=ridge,
        n_z=basis_x.n_z,
        basis_state=basis_x.spec,
        basis_control=basis_u.spec,
        dt=ds.dt,
    )
    report = wellposedness_report(Y)
    model.meta["wellposedness"] = report.to_dict()
    logger.info(
        f"✅ EDMD fit on {len(ds)} snapshots: rank {report.rank}/{report.dim}, "
        f"cond {report.condition_number:.3e}"
    )
    return model
