"""
Observables
===========

Observable bases that lift raw states (and controls) into the feature space
every other module works in.

Supported kinds:
- identity        φ(x) = x
- polynomial      x, then all monomials of total degree 2..d in graded
                  lexicographic order (x₁², x₁x₂, ..., x₁³, ...), optionally
                  cut to the first max_features entries (degree 3 on a
                  4-dim state with max_features=28 gives the compact
                  third-degree arm basis)
- arm17           [q; q̇; 1; six quadratic terms; six trigonometric terms]
                  for the planar two-link arm (n_x = 4)
- gaussian_rbf    x, then exp(-ε‖x - cᵢ‖²) for each center cᵢ

The first n_x entries of every lifted vector are the raw state, so states are
recovered by truncation.
"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DimensionError, NonFiniteError

logger = logging.getLogger(__name__)

BASIS_KINDS = ("identity", "polynomial", "arm17", "gaussian_rbf")
ARM17_DIM = 17


@dataclass(frozen=True)
class BasisSpec:
    """Serializable description of an observable basis"""

    kind: str
    n_x: int
    degree: Optional[int] = None
    centers: Optional[Tuple[Tuple[float, ...], ...]] = None
    epsilon: Optional[float] = None
    max_features: Optional[int] = None

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {"kind": self.kind, "n_x": self.n_x}
        if self.degree is not None:
            data["degree"] = self.degree
        if self.centers is not None:
            data["centers"] = [list(c) for c in self.centers]
        if self.epsilon is not None:
            data["epsilon"] = self.epsilon
        if self.max_features is not None:
            data["max_features"] = self.max_features
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "BasisSpec":
        centers = data.get("centers")
        return cls(
            kind=str(data["kind"]),
            n_x=int(data["n_x"]),
            degree=None if data.get("degree") is None else int(data["degree"]),
            centers=None if centers is None else tuple(
                tuple(float(v) for v in c) for c in centers
            ),
            epsilon=None if data.get("epsilon") is None else float(data["epsilon"]),
            max_features=None if data.get("max_features") is None else int(data["max_features"]),
        )


@dataclass(frozen=True)
class Basis:
    """A constructed basis. Immutable and safe to share between threads."""

    spec: BasisSpec
    n_z: int
    _exponents: Tuple[Tuple[int, ...], ...] = field(default=(), repr=False)
    _centers: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    @property
    def kind(self) -> str:
        return self.spec.kind

    @property
    def n_x(self) -> int:
        return self.spec.n_x

    def lift(self, x: Sequence[float]) -> np.ndarray:
        """Lift a single state vector"""
        return lift(self, x)

    def lift_batch(self, X: np.ndarray) -> np.ndarray:
        """Lift rows of X (N × n_x) into an N × n_z array"""
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_x:
            raise DimensionError(
                f"expected an (N, {self.n_x}) array, got shape {X.shape}"
            )
        if not np.all(np.isfinite(X)):
            raise NonFiniteError("non-finite entries in states to lift", stage="lift")
        return _lift_rows(self, X)


def _graded_lex_exponents(n_x: int, degree: int) -> Tuple[Tuple[int, ...], ...]:
    """Index tuples of the monomials of total degree 2..degree"""
    terms: List[Tuple[int, ...]] = []
    for d in range(2, degree + 1):
        terms.extend(itertools.combinations_with_replacement(range(n_x), d))
    return tuple(terms)


def polynomial_dim(n_x: int, degree: int, max_features: Optional[int] = None) -> int:
    """Number of lifted entries of a polynomial basis"""
    full = n_x + len(_graded_lex_exponents(n_x, degree))
    return full if max_features is None else min(full, max_features)


def grid_centers(
    lower: Sequence[float], upper: Sequence[float], points: Sequence[int]
) -> Tuple[Tuple[float, ...], ...]:
    """
    Deterministic uniform grid of RBF centers

    Args:
        lower: Per-dimension lower bound
        upper: Per-dimension upper bound
        points: Per-dimension number of grid points (≥ 1)

    Returns:
        Tuple of centers, last dimension varying fastest
    """
    if not (len(lower) == len(upper) == len(points)):
        raise ConfigError("grid bounds and point counts must have equal length")
    axes = []
    for lo, hi, n in zip(lower, upper, points):
        if int(n) < 1:
            raise ConfigError("grid point counts must be ≥ 1")
        axes.append(np.linspace(float(lo), float(hi), int(n)) if int(n) > 1 else np.array([0.5 * (lo + hi)]))
    return tuple(tuple(float(v) for v in c) for c in itertools.product(*axes))


def make_basis(spec: BasisSpec) -> Basis:
    """
    Construct a basis from its spec

    Raises:
        ConfigError: unknown kind, degree < 1, max_features out of range,
            non-positive epsilon, empty centers
        DimensionError: RBF centers of the wrong dimension, arm17 with n_x != 4
    """
    if spec.kind not in BASIS_KINDS:
        raise ConfigError(f"unknown basis kind '{spec.kind}' (expected one of {BASIS_KINDS})")
    if spec.n_x < 0:
        raise ConfigError("n_x must be non-negative")

    if spec.kind == "identity":
        return Basis(spec=spec, n_z=spec.n_x)

    if spec.kind == "polynomial":
        if spec.degree is None or spec.degree < 1:
            raise ConfigError(f"polynomial degree must be ≥ 1, got {spec.degree}")
        exponents = _graded_lex_exponents(spec.n_x, spec.degree)
        if spec.max_features is not None:
            full = spec.n_x + len(exponents)
            if not spec.n_x <= spec.max_features <= full:
                raise ConfigError(
                    f"polynomial max_features must lie in [{spec.n_x}, {full}], got {spec.max_features}"
                )
            exponents = exponents[: spec.max_features - spec.n_x]
        return Basis(spec=spec, n_z=spec.n_x + len(exponents), _exponents=exponents)

    if spec.kind == "arm17":
        if spec.n_x != 4:
            raise DimensionError(f"arm17 basis needs n_x = 4, got {spec.n_x}")
        return Basis(spec=spec, n_z=ARM17_DIM)

    # gaussian_rbf
    if not spec.centers:
        raise ConfigError("gaussian_rbf basis needs a non-empty list of centers")
    if spec.epsilon is None or not spec.epsilon > 0:
        raise ConfigError(f"gaussian_rbf epsilon must be > 0, got {spec.epsilon}")
    centers = np.asarray(spec.centers, dtype=float)
    if centers.ndim != 2 or centers.shape[1] != spec.n_x:
        raise DimensionError(
            f"RBF centers must all have dimension {spec.n_x}, got shape {centers.shape}"
        )
    centers.setflags(write=False)
    return Basis(spec=spec, n_z=spec.n_x + centers.shape[0], _centers=centers)


def _lift_rows(basis: Basis, X: np.ndarray) -> np.ndarray:
    kind = basis.kind
    if kind == "identity":
        return X.copy()
    if kind == "polynomial":
        feats = [X]
        if basis._exponents:
            feats.append(
                np.stack([np.prod(X[:, list(idx)], axis=1) for idx in basis._exponents], axis=1)
            )
        return np.concatenate(feats, axis=1)
    if kind == "arm17":
        return _arm17_rows(X)
    diff = X[:, None, :] - basis._centers[None, :, :]
    rbf = np.exp(-basis.spec.epsilon * np.sum(diff * diff, axis=2))
    return np.concatenate([X, rbf], axis=1)


def _arm17_rows(X: np.ndarray) -> np.ndarray:
    q1, q2, dq1, dq2 = X[:, 0], X[:, 1], X[:, 2], X[:, 3]
    ones = np.ones_like(q1)
    return np.stack(
        [
            q1, q2, dq1, dq2,
            ones,
            q1 * q1, q1 * q2, q2 * q2, dq1 * dq1, dq1 * dq2, dq2 * dq2,
            np.sin(q1), np.sin(q2), np.sin(q1 + q2),
            np.cos(q1), np.cos(q2), np.cos(q1 + q2),
        ],
        axis=1,
    )


def lift(basis: Basis, x: Sequence[float]) -> np.ndarray:
    """
    Lift one raw vector into the observable space

    Raises:
        DimensionError: x does not have n_x entries
        NonFiniteError: x contains NaN or infinity
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != basis.n_x:
        raise DimensionError(f"expected a vector of length {basis.n_x}, got {x.shape[0]}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("non-finite entries in state to lift", stage="lift")
    return _lift_rows(basis, x[None, :])[0]


def lift_arm17(x: Sequence[float]) -> np.ndarray:
    """17-dimensional arm observation [q; q̇; 1; poly(x); tri(x)]"""
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != 4:
        raise DimensionError(f"arm17 lift needs a 4-vector [q1, q2, dq1, dq2], got {x.shape[0]}")
    return _arm17_rows(x[None, :])[0]
