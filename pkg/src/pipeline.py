"""
RKL / KL closed-loop pipeline
=============================

One episode:
1. collect (or load) an initial dataset and fit EDMD on it
2. every step: lift the arm state, ask MPC for an action on the current model
   snapshot, step the arm
3. RKL only: absorb the new snapshot with one RLS update

The model is refit from the initial dataset at the start of every episode.
"""

import json
import logging
import os
import queue
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from . import __version__
from .control import LqrConfig, MovingAverageFilter, SacConfig, lqr_action, sac_solve
from .edmd import KoopmanModel, SnapshotDataset, fit_dataset, precision_report
from .env import (
    ArmEnv,
    ArmParams,
    ArmState,
    JointReference,
    arm_fk,
    pd_action,
    reference_joint_traj,
    sample_initial_state,
)
from .errors import ConfigError, DivergenceError, KoopmanError, NonFiniteError
from .metrics import frechet_distance, rmse, time_lag
from .observables import Basis, BasisSpec, make_basis
from .rls import ModelPublisher, RlsState, rls_update

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
CONTROLLERS = ("sac", "lqr")
UPDATE_MODES = ("rkl", "kl")
INITIAL_KINDS = ("random", "demo", "file")
CONCURRENCY_MODES = ("lockstep", "threaded")
TRAJECTORY_COLUMNS = [
    "t", "tip_x", "tip_y", "ref_x", "ref_y",
    "q0", "q1", "qd0", "qd1", "u0", "u1", "reward",
]


@dataclass(frozen=True)
class InitialDataset:
    """Where the initial EDMD data comes from"""

    kind: str = "random"
    steps: int = 500
    path: Optional[str] = None

    def validate(self) -> "InitialDataset":
        if self.kind not in INITIAL_KINDS:
            raise ConfigError(f"unknown initial dataset '{self.kind}' (expected {INITIAL_KINDS})")
        if self.kind == "file":
            if not self.path:
                raise ConfigError("initial dataset 'file' needs a path")
        elif self.steps < 1:
            raise ConfigError(f"initial dataset needs ≥ 1 steps, got {self.steps}")
        return self

    def label(self) -> str:
        return f"file({self.path})" if self.kind == "file" else f"{self.kind}({self.steps})"


@dataclass
class RunConfig:
    """Everything one closed-loop experiment needs"""

    arm: ArmParams = field(default_factory=ArmParams)
    basis_state: BasisSpec = field(default_factory=lambda: BasisSpec(kind="arm17", n_x=4))
    basis_control: BasisSpec = field(default_factory=lambda: BasisSpec(kind="identity", n_x=2))
    controller: str = "sac"
    update_mode: str = "rkl"
    initial_dataset: InitialDataset = field(default_factory=InitialDataset)
    episode_length: int = 500
    seeds: Sequence[int] = tuple(range(10))
    ridge: float = 1e-6
    lqr: LqrConfig = field(default_factory=lambda: LqrConfig(solver="finite"))
    sac: SacConfig = field(default_factory=lambda: SacConfig(nominal=LqrConfig(solver="finite"), backtrack=8))
    concurrency: str = "lockstep"
    diagnostic_interval: int = 50
    reference_period: float = 5.0
    elbow: str = "down"
    kp: float = 1.0
    kd: float = 0.1
    reset_every: int = 50
    echo: Dict[str, Any] = field(default_factory=dict)

    def validate(self) -> "RunConfig":
        if self.controller not in CONTROLLERS:
            raise ConfigError(f"unknown controller '{self.controller}' (expected {CONTROLLERS})")
        if self.update_mode not in UPDATE_MODES:
            raise ConfigError(f"unknown update_mode '{self.update_mode}' (expected {UPDATE_MODES})")
        if self.concurrency not in CONCURRENCY_MODES:
            raise ConfigError(f"unknown concurrency '{self.concurrency}' (expected {CONCURRENCY_MODES})")
        if self.episode_length < 1:
            raise ConfigError(f"episode_length must be ≥ 1, got {self.episode_length}")
        if len(self.seeds) == 0:
            raise ConfigError("seeds must not be empty")
        if self.ridge < 0:
            raise ConfigError(f"ridge must be ≥ 0, got {self.ridge}")
        if self.reset_every < 1 or self.diagnostic_interval < 1:
            raise ConfigError("reset_every and diagnostic_interval must be ≥ 1")
        if self.basis_state.n_x != 4 or self.basis_control.n_x != 2:
            raise ConfigError("arm runs need a 4-dim state basis and a 2-dim control basis")
        self.arm.validate()
        self.initial_dataset.validate()
        self.lqr.validate()
        self.sac.validate()
        return self


def seed_streams(seed: int) -> Tuple[np.random.Generator, np.random.Generator]:
    """Independent generators for (initial dataset, episode start) from one seed"""
    data_seq, episode_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(data_seq), np.random.default_rng(episode_seq)


def collect_initial(env: ArmEnv, cfg: RunConfig, seed: int = 0) -> SnapshotDataset:
    """
    Initial dataset for the model fit

    - random: uniform actions over the action box; the arm restarts from a
      sampled initial state every reset_every steps
    - demo: PD controller tracking the figure-8 joint reference
    - file: dataset CSV loaded and resampled to the arm's dt
    """
    spec = cfg.initial_dataset.validate()
    p = env.params
    if spec.kind == "file":
        from .storage import read_dataset

        ds = read_dataset(Path(spec.path), dt=p.dt)
        logger.info(f"📂 Loaded {len(ds)} snapshots from {spec.path}")
        return ds

    rng, _ = seed_streams(seed)
    if spec.kind == "random":
        parts: List[SnapshotDataset] = []
        remaining = spec.steps
        traj_id = 0
        while remaining > 0:
            length = min(cfg.reset_every, remaining)
            env.reset(sample_initial_state(rng))
            states = [env.observation]
            controls = []
            for _ in range(length):
                u = rng.uniform(-p.u_max, p.u_max, 2)
                env.step(u)
                states.append(env.observation)
                controls.append(u)
            parts.append(SnapshotDataset.from_trajectory(np.array(states), np.array(controls), p.dt, traj_id))
            remaining -= length
            traj_id += 1
        ds = parts[0]
        for part in parts[1:]:
            ds = ds.concat(part)
    else:
        reference = reference_joint_traj(spec.steps * p.dt, p.dt, p, cfg.elbow, cfg.reference_period)
        env.reset(ArmState(reference.q[0], reference.qdot[0]))
        states = [env.observation]
        controls = []
        for k in range(spec.steps):
            q_d, qdot_d = reference[min(k + 1, len(reference) - 1)]
            u = pd_action(env.state, q_d, qdot_d, cfg.kp, cfg.kd, p.u_max)
            env.step(u)
            states.append(env.observation)
            controls.append(u)
        ds = SnapshotDataset.from_trajectory(np.array(states), np.array(controls), p.dt, 0)

    logger.info(f"📦 Collected {spec.label()} initial dataset: {len(ds)} snapshots")
    return ds


@dataclass
class EvalReport:
    """Closed-loop result of one episode"""

    seed: int
    controller: str
    update_mode: str
    initial_dataset: str
    rmse: float
    time_lag: float
    frechet: float
    saturation_rate: float
    mean_reward: float
    update_count: int
    sample_count: int
    trajectory: pd.DataFrame
    diagnostics: List[Dict[str, Any]] = field(default_factory=list)
    model_versions: List[int] = field(default_factory=list)
    wallclock: Dict[str, float] = field(default_factory=dict)

    @property
    def steps(self) -> int:
        return len(self.trajectory)

    def metrics(self) -> Dict[str, float]:
        return {
            "rmse": self.rmse,
            "time_lag": self.time_lag,
            "frechet": self.frechet,
            "saturation_rate": self.saturation_rate,
            "mean_reward": self.mean_reward,
        }

    def to_dict(self, include_wallclock: bool = True) -> Dict[str, Any]:
        data: Dict[str, Any] = {
            "seed": self.seed,
            "controller": self.controller,
            "update_mode": self.update_mode,
            "initial_dataset": self.initial_dataset,
            "steps": self.steps,
            "update_count": self.update_count,
            "sample_count": self.sample_count,
            "metrics": self.metrics(),
            "diagnostics": self.diagnostics,
        }
        if include_wallclock:
            data["wallclock"] = self.wallclock
        return data


@dataclass
class ExperimentReport:
    """Per-seed EvalReports plus their mean/std aggregate"""

    reports: List[EvalReport]
    config: Dict[str, Any] = field(default_factory=dict)

    @property
    def seeds(self) -> List[int]:
        return [r.seed for r in self.reports]

    def aggregate(self) -> Dict[str, Dict[str, float]]:
        names = list(self.reports[0].metrics()) if self.reports else []
        out = {}
        for name in names:
            values = np.array([r.metrics()[name] for r in self.reports])
            out[name] = {"mean": float(values.mean()), "std": float(values.std())}
        return out

    def to_dict(self, include_wallclock: bool = True) -> Dict[str, Any]:
        return {
            "format_version": FORMAT_VERSION,
            "versions": versions(),
            "config": self.config,
            "seeds": self.seeds,
            "aggregate": self.aggregate(),
            "episodes": [r.to_dict(include_wallclock) for r in self.reports],
        }

    def to_json(self, include_wallclock: bool = True) -> str:
        return json.dumps(self.to_dict(include_wallclock), indent=2, sort_keys=True)


def versions() -> Dict[str, str]:
    import scipy

    return {
        "koopable": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
    }


def _lifted_schedule(basis: Basis, reference: JointReference, k: int, H: int) -> np.ndarray:
    """Lifted reference rows for steps k+1 .. k+1+H, held at the last sample"""
    return basis.lift_batch(np.stack([reference.state(k + 1 + i) for i in range(H + 1)]))


class _Controller:
    """MPC action on a model snapshot, with the optional action filter"""

    def __init__(self, cfg: RunConfig, basis_x: Basis, reference: JointReference):
        self.cfg = cfg
        self.basis_x = basis_x
        self.reference = reference
        self.u_ref = np.zeros(2)
        self.u_min = cfg.arm.u_min_vec
        self.u_max = cfg.arm.u_max_vec
        self.horizon = cfg.sac.steps if cfg.controller == "sac" else cfg.lqr.steps
        self.filter = MovingAverageFilter(int(round(cfg.sac.maf_window / cfg.arm.dt)))

    def __call__(self, model: KoopmanModel, x: np.ndarray, k: int) -> np.ndarray:
        z = self.basis_x.lift(x)
        schedule = _lifted_schedule(self.basis_x, self.reference, k, self.horizon)
        if self.cfg.controller == "sac":
            u = sac_solve(model, z, schedule, self.u_ref, self.cfg.sac, self.u_min, self.u_max).u
        else:
            u, _ = lqr_action(model, z, schedule[0], self.u_ref, self.cfg.lqr, self.u_min, self.u_max)
        return self.filter(u)


class _Updater(threading.Thread):
    """Background RLS writer for the threaded mode"""

    def __init__(self, state: RlsState, publisher: ModelPublisher):
        super().__init__(daemon=True)
        self.state = state
        self.publisher = publisher
        self.inbox: "queue.Queue[Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]]]" = queue.Queue()
        self.error: Optional[BaseException] = None

    def run(self) -> None:
        while True:
            item = self.inbox.get()
            if item is None:
                return
            if self.error is not None:
                continue
            try:
                rls_update(self.state, *item)
                self.publisher.publish(self.state.model, self.state.update_count)
            except KoopmanError as e:
                self.error = e


def run_episode(cfg: RunConfig, seed: int) -> EvalReport:
    """
    One closed-loop figure-8 tracking episode

    Raises:
        RankDeficiencyError: the initial dataset is not well-posed (and ridge = 0)
        DivergenceError: the closed loop left the finite range, with its step
    """
    cfg.validate()
    clock: Dict[str, float] = {}
    started = time.perf_counter()
    p = cfg.arm
    _, rng = seed_streams(seed)
    env = ArmEnv(p)

    basis_x = make_basis(cfg.basis_state)
    basis_u = make_basis(cfg.basis_control)
    data = collect_initial(env, cfg, seed)
    model = fit_dataset(data, basis_x, basis_u, ridge=cfg.ridge)
    state = RlsState(model=model, _basis_x=basis_x, _basis_u=basis_u)
    clock["initial_fit"] = time.perf_counter() - started

    reference = reference_joint_traj(cfg.episode_length * p.dt, p.dt, p, cfg.elbow, cfg.reference_period)
    controller = _Controller(cfg, basis_x, reference)
    offset = sample_initial_state(rng)
    env.reset(ArmState(reference.q[0] + offset.q, reference.qdot[0] + offset.qdot))

    threaded = cfg.update_mode == "rkl" and cfg.concurrency == "threaded"
    publisher = ModelPublisher(state.model, 0) if threaded else None
    updater = _Updater(state, publisher) if threaded else None
    if updater is not None:
        updater.start()

    logger.info(
        f"🚀 Running episode seed={seed}: {cfg.update_mode.upper()}-{cfg.controller.upper()}, "
        f"{cfg.initial_dataset.label()}, {cfg.episode_length} steps"
    )
    rows = np.empty((cfg.episode_length, len(TRAJECTORY_COLUMNS)))
    versions_used: List[int] = []
    diagnostics: List[Dict[str, Any]] = []
    loop_started = time.perf_counter()
    try:
        for k in range(cfg.episode_length):
            x = env.observation
            if publisher is not None:
                snapshot, version = publisher.latest()
            else:
                snapshot, version = state.model, state.update_count
            versions_used.append(version)
            try:
                u = controller(snapshot, x, k)
                _, reward, _ = env.step(u, *reference[min(k + 1, len(reference) - 1)])
            except NonFiniteError as e:
                logger.error(f"❌ Episode seed={seed} diverged at step {k}: {e}")
                raise DivergenceError(str(e), stage=e.stage, step=k) from e
            u_applied, _ = env.clamp(u)
            x_next = env.observation

            if cfg.update_mode == "rkl":
                if updater is not None:
                    updater.inbox.put((x, u_applied, x_next))
                else:
                    rls_update(state, x, u_applied, x_next)

            if (k + 1) % cfg.diagnostic_interval == 0 and updater is None:
                report = precision_report(state.model.P)
                diagnostics.append({"step": k + 1, **report.to_dict()})
                logger.debug(f"🔍 step {k + 1}: rank {report.rank}/{report.dim}, cond {report.condition_number:.3e}")

            tip = arm_fk(env.state.q, p)
            ref_tip = reference.tip[min(k + 1, len(reference) - 1)]
            rows[k] = [
                (k + 1) * p.dt, tip[0], tip[1], ref_tip[0], ref_tip[1],
                *env.state.q, *env.state.qdot, *u_applied, reward,
            ]
    finally:
        if updater is not None:
            updater.inbox.put(None)
            updater.join()
    if updater is not None and updater.error is not None:
        raise updater.error
    clock["episode"] = time.perf_counter() - loop_started

    trajectory = pd.DataFrame(rows, columns=TRAJECTORY_COLUMNS)
    actual = trajectory[["tip_x", "tip_y"]].to_numpy()
    target = trajectory[["ref_x", "ref_y"]].to_numpy()
    lag = time_lag(actual, target, p.dt) if len(trajectory) >= 16 else 0.0
    report = EvalReport(
        seed=seed,
        controller=cfg.controller,
        update_mode=cfg.update_mode,
        initial_dataset=cfg.initial_dataset.label(),
        rmse=rmse(actual, target),
        time_lag=lag,
        frechet=frechet_distance(actual, target),
        saturation_rate=env.saturation_rate,
        mean_reward=float(trajectory["reward"].mean()),
        update_count=state.update_count,
        sample_count=state.model.sample_count,
        trajectory=trajectory,
        diagnostics=diagnostics,
        model_versions=versions_used,
        wallclock=clock,
    )
    logger.info(
        f"✅ Episode seed={seed}: RMSE {report.rmse:.4f} m, lag {report.time_lag:.2f} s, "
        f"Fréchet {report.frechet:.4f} m, saturation {report.saturation_rate:.1%}"
    )
    return report


def thread_cap() -> int:
    """Episode-level parallelism cap from RKL_THREADS (default 1)"""
    try:
        return max(1, int(os.getenv("RKL_THREADS", "1")))
    except ValueError:
        raise ConfigError(f"RKL_THREADS must be an integer, got '{os.getenv('RKL_THREADS')}'")


def run_experiment(cfg: RunConfig, threads: Optional[int] = None) -> ExperimentReport:
    """Run every seed (in parallel up to RKL_THREADS) and collect the reports in seed order"""
    cfg.validate()
    workers = min(threads if threads is not None else thread_cap(), len(cfg.seeds))
    if workers <= 1:
        reports = [run_episode(cfg, seed) for seed in cfg.seeds]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(lambda s: run_episode(cfg, s), cfg.seeds))
    experiment = ExperimentReport(reports=reports, config=cfg.echo)
    summary = experiment.aggregate()
    logger.info(
        f"📊 {len(reports)} seeds: RMSE {summary['rmse']['mean']:.4f} ± {summary['rmse']['std']:.4f} m"
    )
    return experiment
