"""
koopable - Recursive Koopman learning: lifted linear models, updated online, for control
"""

__version__ = "1.0.0"
__author__ = "ImmutableMike"
__description__ = (
    "EDMD fitting, constant-time recursive updates and MPC on Koopman models"
)

from .edmd import KoopmanModel, SnapshotDataset, fit_edmd
from .errors import KoopmanError
from .observables import Basis, BasisSpec, make_basis
from .rls import RlsState, rls_update

__all__ = [
    "Basis",
    "BasisSpec",
    "KoopmanError",
    "KoopmanModel",
    "RlsState",
    "SnapshotDataset",
    "fit_edmd",
    "make_basis",
    "rls_update",
]
