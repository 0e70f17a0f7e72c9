"""
Recursive least-squares Koopman updates
=======================================

One new snapshot (x, u, x') updates K and P in O(n²) with the
Sherman-Morrison formula:

    γ  = 1 / (1 + αᵀPα)
    K' = K + γ (β - Kα)(Pα)ᵀ
    P' = P - γ (Pα)(Pα)ᵀ

Starting from an EDMD fit, the recursion reproduces batch retraining on the
grown dataset exactly (up to round-off).
"""

import logging
import threading
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .edmd import SYMMETRY_TOL, KoopmanModel
from .errors import CovarianceError, DimensionError, NonFiniteError
from .observables import Basis, make_basis

logger = logging.getLogger(__name__)


@dataclass
class RlsState:
    """Mutable recursive estimator: the live model plus an update counter"""

    model: KoopmanModel
    update_count: int = 0
    _basis_x: Optional[Basis] = None
    _basis_u: Optional[Basis] = None

    @classmethod
    def from_model(cls, model: KoopmanModel) -> "RlsState":
        """Start a recursion from a (copied) batch fit"""
        state = cls(model=model.copy())
        if state.model.symmetry_residual() > SYMMETRY_TOL:
            raise CovarianceError("initial P is not symmetric")
        return state

    @property
    def basis_x(self) -> Basis:
        if self._basis_x is None:
            if self.model.basis_state is None:
                raise DimensionError("model carries no state basis spec; use rls_update_lifted")
            self._basis_x = make_basis(self.model.basis_state)
        return self._basis_x

    @property
    def basis_u(self) -> Basis:
        if self._basis_u is None:
            if self.model.basis_control is None:
                raise DimensionError("model carries no control basis spec; use rls_update_lifted")
            self._basis_u = make_basis(self.model.basis_control)
        return self._basis_u


def gain_gamma(P: np.ndarray, alpha: np.ndarray) -> float:
    """
    Sherman-Morrison gain γ = 1 / (1 + αᵀPα)

    Raises:
        DimensionError: P and α disagree
        CovarianceError: 1 + αᵀPα ≤ 0, i.e. P is no longer positive definite
    """
    P = np.asarray(P, dtype=float)
    alpha = np.asarray(alpha, dtype=float).reshape(-1)
    if P.shape != (alpha.shape[0], alpha.shape[0]):
        raise DimensionError(f"P is {P.shape} but α has length {alpha.shape[0]}")
    denom = 1.0 + float(alpha @ (P @ alpha))
    if not denom > 0:
        raise CovarianceError(f"1 + αᵀPα = {denom:.3e} ≤ 0; P lost positive definiteness")
    return 1.0 / denom


def rls_update_lifted(s: RlsState, alpha: np.ndarray, beta: np.ndarray) -> RlsState:
    """Absorb one lifted snapshot pair (α, β) in place"""
    model = s.model
    alpha = np.asarray(alpha, dtype=float).reshape(-1)
    beta = np.asarray(beta, dtype=float).reshape(-1)
    if alpha.shape[0] != model.dim or beta.shape[0] != model.dim:
        raise DimensionError(
            f"expected lifted vectors of length {model.dim}, got {alpha.shape[0]} and {beta.shape[0]}"
        )
    if not (np.all(np.isfinite(alpha)) and np.all(np.isfinite(beta))):
        raise NonFiniteError("non-finite snapshot", stage="rls", step=s.update_count)

    P = model.P
    K = model.K
    Pa = P @ alpha
    gamma = gain_gamma(P, alpha)
    error = beta - K @ alpha

    K += gamma * np.outer(error, Pa)
    P -= gamma * np.outer(Pa, Pa)
    P[...] = 0.5 * (P + P.T)

    model.sample_count += 1
    s.update_count += 1
    return s


def rls_update(
    s: RlsState, x: Sequence[float], u: Sequence[float], x_next: Sequence[float]
) -> RlsState:
    """
    Absorb one raw snapshot (x, u, x') in place and return the state

    Lifts α = [φ(x); ψ(u)] and β = [φ(x'); ψ(u)] with the model's bases.
    A zero regressor leaves K and P untouched.
    """
    g = s.basis_u.lift(u)
    alpha = np.concatenate([s.basis_x.lift(x), g])
    beta = np.concatenate([s.basis_x.lift(x_next), g])
    return rls_update_lifted(s, alpha, beta)


class ModelPublisher:
    """
    Single-writer snapshot handoff between the updater and controllers

    Readers get read-only copies and never observe a half-applied update.
    """

    def __init__(self, model: KoopmanModel, update_count: int = 0):
        self._lock = threading.Lock()
        self._snapshot = model.copy(read_only=True)
        self._version = update_count

    def publish(self, model: KoopmanModel, update_count: int) -> None:
        snapshot = model.copy(read_only=True)
        with self._lock:
            self._snapshot = snapshot
            self._version = update_count

    def latest(self):
        """Return (model snapshot, number of updates it contains)"""
        with self._lock:
            return self._snapshot, self._version
