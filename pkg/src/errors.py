"""
Exception hierarchy for koopable

Library code raises these; the CLI maps them onto exit codes
(numerical failures → 1, usage/config failures → 2).
"""

from typing import Optional


class KoopmanError(Exception):
    """Base class for every error raised by koopable"""


class ConfigError(KoopmanError, ValueError):
    """Invalid configuration file, override or command-line input"""


class DimensionError(KoopmanError, ValueError):
    """Array shapes or dimensions disagree"""


class UnreachableTargetError(KoopmanError, ValueError):
    """Inverse kinematics target lies outside the arm's workspace"""


class NumericalError(KoopmanError, ArithmeticError):
    """A numerical procedure failed or produced unusable values"""


class NonFiniteError(NumericalError):
    """NaN or infinity where finite values are required"""

    def __init__(self, message: str, stage: Optional[str] = None, step: Optional[int] = None):
        self.stage = stage
        self.step = step
        where = []
        if stage is not None:
            where.append(f"stage={stage}")
        if step is not None:
            where.append(f"step={step}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(f"{message}{suffix}")


class DivergenceError(NonFiniteError):
    """Closed-loop rollout, adjoint or episode left the finite range"""


class RankDeficiencyError(NumericalError):
    """YYᵀ is singular and no ridge was requested"""

    def __init__(self, rank: int, dim: int, condition_number: float):
        self.rank = rank
        self.dim = dim
        self.condition_number = condition_number
        super().__init__(
            f"data covariance is rank deficient: rank {rank}/{dim}, "
            f"condition number {condition_number:.3e} (set a ridge > 0)"
        )


class CovarianceError(NumericalError):
    """The recursive inverse covariance lost positive definiteness"""


class RiccatiConvergenceError(NumericalError):
    """Riccati iteration did not reach its fixed point"""

    def __init__(self, residual: float, iterations: int):
        self.residual = residual
        self.iterations = iterations
        super().__init__(
            f"Riccati iteration did not converge after {iterations} iterations "
            f"(residual {residual:.3e})"
        )
