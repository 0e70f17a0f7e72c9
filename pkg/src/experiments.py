"""
Convergence and timing experiments
==================================

- convergence_experiment: ‖K_N - K*‖_F along one growing chain sample
- convergence_study: the same over several seeds, with checkpoint medians
- timing_experiment: mean RLS update time and EDMD retrain time per (n, N)
"""

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.linalg

from .edmd import KoopmanModel, fit_edmd
from .env import ChainSpec, chain_sample, stationary_covariance
from .errors import ConfigError
from .observables import BasisSpec, make_basis
from .rls import RlsState, rls_update_lifted

logger = logging.getLogger(__name__)

ORACLE_CHUNK = 100_000
ORACLE_SEED_OFFSET = 7919
TIMING_BLOCKS = 5


def _moments(Y: np.ndarray, Ybar: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return Y @ Y.T, Ybar @ Y.T


def _lifted_pairs(basis, x: np.ndarray, x_next: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return basis.lift_batch(x).T, basis.lift_batch(x_next).T


def _solve_k(G: np.ndarray, C: np.ndarray) -> np.ndarray:
    """K = C G⁻¹ for symmetric positive definite G"""
    return scipy.linalg.solve(G, C.T, assume_a="pos").T


def chain_koopman_oracle(
    spec: ChainSpec, basis_spec: BasisSpec, samples: int = 10_000_000
) -> np.ndarray:
    """
    K* = E[φ(x')φ(x)ᵀ] E[φ(x)φ(x)ᵀ]⁻¹ under the stationary distribution

    Identity lifts use the closed-form stationary moments (Lyapunov solution);
    other lifts a long Monte Carlo run accumulated in chunks.
    """
    if basis_spec.kind == "identity":
        sigma = stationary_covariance(spec.A, spec.noise_cov)
        if np.linalg.cond(sigma) > 1e12:
            # degenerate noise: the regression is exact wherever data exists
            return spec.A.copy()
        return _solve_k(sigma, spec.A @ sigma)

    basis = make_basis(basis_spec)
    rng_seed = spec.seed + ORACLE_SEED_OFFSET
    G = np.zeros((basis.n_z, basis.n_z))
    C = np.zeros_like(G)
    oracle_spec = ChainSpec(A=spec.A, noise_cov=spec.noise_cov, seed=rng_seed)
    x0 = None
    done = 0
    chunk_index = 0
    while done < samples:
        n = min(ORACLE_CHUNK, samples - done)
        chunk_spec = oracle_spec if x0 is None else ChainSpec(
            A=spec.A, noise_cov=spec.noise_cov, seed=rng_seed + chunk_index, x0=x0
        )
        ds = chain_sample(chunk_spec, n)
        Y, Ybar = _lifted_pairs(basis, ds.x, ds.x_next)
        g, c = _moments(Y, Ybar)
        G += g
        C += c
        x0 = ds.x_next[-1]
        done += n
        chunk_index += 1
    return _solve_k(G, C)


def convergence_experiment(
    spec: ChainSpec,
    basis_spec: BasisSpec,
    checkpoints: Sequence[int],
    oracle_samples: int = 10_000_000,
    seed: Optional[int] = None,
    k_star: Optional[np.ndarray] = None,
) -> List[Tuple[int, float]]:
    """
    Error curve ‖K_N - K*‖_F of EDMD on the first N chain samples

    A rank-deficient checkpoint is logged and solved with a small ridge.
    """
    checkpoints = sorted(int(n) for n in checkpoints)
    if not checkpoints or checkpoints[0] < 1:
        raise ConfigError("checkpoints must be positive sample counts")
    if basis_spec.n_x != spec.n:
        raise ConfigError(f"basis expects n_x={basis_spec.n_x}, chain has n={spec.n}")
    if k_star is None:
        k_star = chain_koopman_oracle(spec, basis_spec, oracle_samples)
    basis = make_basis(basis_spec)
    ds = chain_sample(spec, checkpoints[-1], seed=seed)

    G = np.zeros((basis.n_z, basis.n_z))
    C = np.zeros_like(G)
    curve: List[Tuple[int, float]] = []
    start = 0
    for N in checkpoints:
        Y, Ybar = _lifted_pairs(basis, ds.x[start:N], ds.x_next[start:N])
        g, c = _moments(Y, Ybar)
        G += g
        C += c
        start = N
        eig = scipy.linalg.eigvalsh(G)
        if eig.min() <= eig.max() * 1e-12:
            ridge = 1e-8 * max(float(np.trace(G)) / basis.n_z, 1e-300)
            logger.warning(f"⚠️ Rank-deficient data at N={N}; continuing with ridge {ridge:.2e}")
            K = _solve_k(G + ridge * np.eye(basis.n_z), C)
        else:
            K = _solve_k(G, C)
        error = float(np.linalg.norm(K - k_star, "fro"))
        curve.append((N, error))
        logger.debug(f"🔍 N={N}: ‖K_N - K*‖_F = {error:.3e}")
    return curve


@dataclass
class ConvergenceStudy:
    """Error curves per seed and their median at each checkpoint"""

    checkpoints: List[int]
    curves: Dict[int, List[float]]
    k_star: np.ndarray

    @property
    def medians(self) -> List[float]:
        table = np.array([self.curves[s] for s in sorted(self.curves)])
        return [float(v) for v in np.median(table, axis=0)]

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"N": self.checkpoints})
        for s in sorted(self.curves):
            frame[f"seed_{s}"] = self.curves[s]
        frame["median"] = self.medians
        return frame

    def to_dict(self) -> Dict[str, Any]:
        return {
            "checkpoints": self.checkpoints,
            "curves": {str(s): c for s, c in sorted(self.curves.items())},
            "medians": self.medians,
            "k_star": self.k_star.tolist(),
        }


def convergence_study(
    spec: ChainSpec,
    basis_spec: BasisSpec,
    checkpoints: Sequence[int],
    seeds: Sequence[int],
    oracle_samples: int = 10_000_000,
) -> ConvergenceStudy:
    """Run convergence_experiment for every seed against one shared K*"""
    if not seeds:
        raise ConfigError("convergence study needs at least one seed")
    k_star = chain_koopman_oracle(spec, basis_spec, oracle_samples)
    curves = {}
    for s in seeds:
        curve = convergence_experiment(spec, basis_spec, checkpoints, seed=s, k_star=k_star)
        curves[int(s)] = [err for _, err in curve]
    study = ConvergenceStudy(checkpoints=sorted(int(n) for n in checkpoints), curves=curves, k_star=k_star)
    logger.info(
        "📉 Convergence medians: "
        + ", ".join(f"N={n}: {m:.3e}" for n, m in zip(study.checkpoints, study.medians))
    )
    return study


@dataclass
class TimingTable:
    """Per-(n, N) timings and the ratios derived from them"""

    frame: pd.DataFrame
    meta: Dict[str, Any] = field(default_factory=dict)

    def rls_ratio(self, dim: int) -> float:
        """RLS time at the largest N over the smallest N, for one dimension"""
        rows = self.frame[self.frame["dim"] == dim].sort_values("N")
        return float(rows["rls_seconds"].iloc[-1] / rows["rls_seconds"].iloc[0])

    def edmd_ratio(self, dim: int) -> float:
        rows = self.frame[self.frame["dim"] == dim].sort_values("N")
        return float(rows["edmd_seconds"].iloc[-1] / rows["edmd_seconds"].iloc[0])

    def dim_ratio(self, N: int) -> float:
        """RLS time at the largest dimension over the smallest, for one N"""
        rows = self.frame[self.frame["N"] == N].sort_values("dim")
        return float(rows["rls_seconds"].iloc[-1] / rows["rls_seconds"].iloc[0])

    def to_dict(self) -> Dict[str, Any]:
        dims = sorted(self.frame["dim"].unique())
        sizes = sorted(self.frame["N"].unique())
        return {
            "rows": json.loads(self.frame.to_json(orient="records")),
            "rls_ratio": {str(int(d)): self.rls_ratio(d) for d in dims},
            "edmd_ratio": {str(int(d)): self.edmd_ratio(d) for d in dims},
            "dim_ratio": {str(int(n)): self.dim_ratio(n) for n in sizes},
            **self.meta,
        }


def _model_after(
    dim: int, N: int, rng: np.random.Generator, trials: int = 3
) -> Tuple[KoopmanModel, float]:
    """EDMD fit on N random snapshots of dimension dim, and its best-of-trials time"""
    Y = rng.standard_normal((dim, N))
    Ybar = rng.standard_normal((dim, N))
    best = float("inf")
    for _ in range(trials):
        started = time.perf_counter()
        model = fit_edmd(Y, Ybar)
        best = min(best, time.perf_counter() - started)
    return model, best


def timing_experiment(
    dims: Sequence[int],
    dataset_sizes: Sequence[int],
    repeats: int = 200,
    seed: int = 0,
) -> TimingTable:
    """
    Mean wall time of one RLS update after N prior samples, plus EDMD retrain time

    Every (n, N) cell starts from an EDMD fit on N random snapshots, then
    times `repeats` recursive updates in blocks and keeps the fastest block
    mean.
    """
    if repeats < 1:
        raise ConfigError("repeats must be ≥ 1")
    rng = np.random.default_rng(seed)
    rows = []
    for dim in dims:
        for N in sorted(dataset_sizes):
            if N < dim:
                raise ConfigError(f"dataset size {N} is below dimension {dim}; YYᵀ would be singular")
            model, edmd_seconds = _model_after(int(dim), int(N), rng)
            state = RlsState.from_model(model)
            alphas = rng.standard_normal((repeats, dim))
            betas = rng.standard_normal((repeats, dim))
            rls_update_lifted(state, alphas[0], betas[0])
            block_means = []
            for block in np.array_split(np.arange(repeats), min(TIMING_BLOCKS, repeats)):
                started = time.perf_counter()
                for i in block:
                    rls_update_lifted(state, alphas[i], betas[i])
                block_means.append((time.perf_counter() - started) / len(block))
            rls_seconds = min(block_means)
            rows.append({
                "dim": int(dim),
                "N": int(N),
                "rls_seconds": rls_seconds,
                "edmd_seconds": edmd_seconds,
            })
            logger.info(f"⏱️ n={dim}, N={N}: RLS {rls_seconds * 1e6:.1f} µs/update, EDMD {edmd_seconds * 1e3:.2f} ms")
    return TimingTable(frame=pd.DataFrame(rows), meta={"repeats": repeats, "seed": seed})
