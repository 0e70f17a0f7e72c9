"""
Configuration management for koopable

Run configs are sectioned YAML files deep-merged over DEFAULT_CONFIG; every
section is a flat key/value mapping. `--set key=value` overrides apply last.
"""

import copy
import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional, Tuple

import yaml

from .control import LqrConfig, SacConfig
from .env import ArmParams, ChainSpec
from .errors import ConfigError
from .observables import BasisSpec, grid_centers
from .pipeline import InitialDataset, RunConfig, thread_cap

logger = logging.getLogger(__name__)

BASE_DIR = Path(__file__).parent.parent
CONFIG_DIR = BASE_DIR / "configs"

# Default configuration
DEFAULT_CONFIG: Dict[str, Dict[str, Any]] = {
    "env": {
        "l1": 0.1,
        "l2": 0.1,
        "m1": 0.05,
        "m2": 0.05,
        "damping": 0.01,
        "armature": 0.01,
        "u_max": 0.5,
        "dt": 0.01,
        "reference_period": 5.0,
        "elbow": "down",
        "kp": 1.0,
        "kd": 0.1,
        "reset_every": 50,
    },
    "basis": {
        "state": "arm17",
        "degree": 3,
        "max_features": None,
        "rbf_lower": [-1.0, -1.0, -2.0, -2.0],
        "rbf_upper": [1.0, 1.0, 2.0, 2.0],
        "rbf_points": [3, 3, 3, 3],
        "epsilon": 1.0,
        "control": "identity",
    },
    "lqr": {
        "weight_pos": 200.0,
        "weight_vel": 30.0,
        "weight_obs": 1.0,
        "weight_u": 0.001,
        "weight_terminal": 0.0,
        "horizon": 0.16,
        "dt": 0.01,
        "solver": "finite",
        "n_pos": None,
        "tol": 1e-10,
        "max_iter": 10000,
    },
    "sac": {
        "horizon": 0.16,
        "dt": 0.01,
        "rbar": [1.0e3, 1.0e3],
        "maf_window": 0.0,
        "backtrack": 8,
    },
    "run": {
        "controller": "sac",
        "update_mode": "rkl",
        "initial_dataset": "random",
        "initial_steps": 500,
        "initial_path": None,
        "episode_length": 500,
        "seeds": list(range(10)),
        "ridge": 1e-6,
        "concurrency": "lockstep",
        "diagnostic_interval": 50,
    },
    "chain": {
        "A": [[0.6, 0.2], [-0.1, 0.5]],
        "noise_cov": [[1.0, 0.0], [0.0, 1.0]],
        "seed": 0,
    },
    "convergence": {
        "basis": "identity",
        "degree": 2,
        "checkpoints": [1000, 10000, 100000],
        "seeds": list(range(10)),
        "oracle_samples": 10000000,
    },
    "bench": {
        "dims": [10, 20, 30],
        "dataset_sizes": [1000, 100000],
        "repeats": 500,
        "seed": 0,
    },
}


def _deep_merge(base: Dict[str, Any], update: Dict[str, Any], where: str = "") -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in update.items():
        if key not in merged:
            raise ConfigError(f"unknown config key '{where}{key}'")
        if isinstance(merged[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config section '{where}{key}' must be a mapping")
            merged[key] = _deep_merge(merged[key], value, f"{where}{key}.")
        else:
            merged[key] = value
    return merged


@contextmanager
def _section_errors(section: str) -> Iterator[None]:
    """Re-raise bad values in a section as ConfigError"""
    try:
        yield
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as e:
        raise ConfigError(f"invalid [{section}] settings: {e}") from e


def parse_override(text: str) -> Tuple[str, Any]:
    """Split `key=value`; the value is parsed as YAML"""
    key, sep, raw = text.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigError(f"malformed override '{text}' (expected key=value)")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse value of override '{text}': {e}") from e
    return key, value


class Config:
    """Configuration manager for koopable runs"""

    def __init__(self, config_path: Optional[Path] = None, overrides: Iterable[str] = ()):
        self.config_path = Path(config_path) if config_path is not None else None
        self._config = self._load_config()
        for item in overrides:
            self.apply_override(item)

    def _load_config(self) -> Dict[str, Any]:
        """Load configuration from file or use defaults"""
        if self.config_path is None:
            return copy.deepcopy(DEFAULT_CONFIG)
        if not self.config_path.exists():
            raise ConfigError(f"config file not found: {self.config_path}")
        try:
            with open(self.config_path, "r", encoding="utf-8") as f:
                file_config = yaml.safe_load(f) or {}
        except (yaml.YAMLError, OSError) as e:
            raise ConfigError(f"cannot read config {self.config_path}: {e}") from e
        if not isinstance(file_config, dict):
            raise ConfigError(f"config {self.config_path} must be a mapping of sections")
        logger.debug(f"📄 Loaded config {self.config_path}")
        return _deep_merge(DEFAULT_CONFIG, file_config)

    def _resolve(self, key: str) -> Tuple[str, str]:
        if "." in key:
            section, _, name = key.partition(".")
            if section not in self._config or name not in self._config[section]:
                raise ConfigError(f"unknown config key '{key}'")
            return section, name
        owners = [s for s, values in self._config.items() if key in values]
        if not owners:
            raise ConfigError(f"unknown config key '{key}'")
        if len(owners) > 1 and "run" in owners:
            return "run", key
        if len(owners) > 1:
            raise ConfigError(f"config key '{key}' is ambiguous, use one of {[f'{s}.{key}' for s in owners]}")
        return owners[0], key

    def get(self, key: str, default: Any = None) -> Any:
        """Get a value by `section.key` or unique bare key"""
        try:
            section, name = self._resolve(key)
        except ConfigError:
            return default
        return self._config[section][name]

    def set(self, key: str, value: Any) -> None:
        """Set a value by `section.key` or unique bare key"""
        section, name = self._resolve(key)
        current = self._config[section][name]
        if isinstance(current, list) and isinstance(value, str):
            value = [yaml.safe_load(v) for v in value.split(",") if v.strip()]
        elif isinstance(current, list) and not isinstance(value, list):
            value = [value]
        self._config[section][name] = value

    def apply_override(self, text: str) -> None:
        key, value = parse_override(text)
        self.set(key, value)
        logger.debug(f"🔧 Override {key} = {value!r}")

    def save(self, path: Optional[Path] = None) -> Path:
        """Save the resolved configuration as YAML"""
        target = Path(path) if path is not None else self.config_path
        if target is None:
            raise ConfigError("no path to save the configuration to")
        target.parent.mkdir(parents=True, exist_ok=True)
        with open(target, "w", encoding="utf-8") as f:
            yaml.safe_dump(self._config, f, sort_keys=False)
        return target

    def as_dict(self) -> Dict[str, Any]:
        return copy.deepcopy(self._config)

    def section(self, name: str) -> Dict[str, Any]:
        if name not in self._config:
            raise ConfigError(f"unknown config section '{name}'")
        return dict(self._config[name])

    @property
    def threads(self) -> int:
        """Episode-level parallelism cap from RKL_THREADS"""
        return thread_cap()

    @property
    def seeds(self) -> List[int]:
        with _section_errors("run"):
            return [int(s) for s in self._config["run"]["seeds"]]

    def arm_params(self) -> ArmParams:
        env = self._config["env"]
        fields = ("l1", "l2", "m1", "m2", "damping", "armature", "u_max", "dt")
        with _section_errors("env"):
            return ArmParams(**{k: float(env[k]) for k in fields}).validate()

    def _basis_spec(self, kind: str, n_x: int, degree: Any = None) -> BasisSpec:
        b = self._config["basis"]
        with _section_errors("basis"):
            if kind == "polynomial":
                if degree is not None:
                    return BasisSpec(kind=kind, n_x=n_x, degree=int(degree))
                cap = b["max_features"]
                return BasisSpec(
                    kind=kind, n_x=n_x, degree=int(b["degree"]), max_features=None if cap is None else int(cap)
                )
            if kind == "gaussian_rbf":
                lower, upper, points = b["rbf_lower"], b["rbf_upper"], b["rbf_points"]
                if not (len(lower) == len(upper) == len(points) == n_x):
                    raise ConfigError(f"rbf_lower/rbf_upper/rbf_points need {n_x} entries each")
                centers = grid_centers(lower, upper, points)
                return BasisSpec(kind=kind, n_x=n_x, centers=centers, epsilon=float(b["epsilon"]))
            return BasisSpec(kind=kind, n_x=n_x)

    def basis_specs(self, n_x: int = 4, n_u: int = 2) -> Tuple[BasisSpec, BasisSpec]:
        """(state basis, control basis) for the given raw dimensions"""
        b = self._config["basis"]
        return self._basis_spec(str(b["state"]), n_x), self._basis_spec(str(b["control"]), n_u)

    def lqr_config(self) -> LqrConfig:
        q = self._config["lqr"]
        with _section_errors("lqr"):
            return LqrConfig(
                weight_pos=float(q["weight_pos"]),
                weight_vel=float(q["weight_vel"]),
                weight_obs=float(q["weight_obs"]),
                weight_u=float(q["weight_u"]),
                weight_terminal=float(q["weight_terminal"]),
                horizon=float(q["horizon"]),
                dt=float(q["dt"]),
                solver=str(q["solver"]),
                n_pos=None if q["n_pos"] is None else int(q["n_pos"]),
                tol=float(q["tol"]),
                max_iter=int(q["max_iter"]),
            ).validate()

    def sac_config(self) -> SacConfig:
        s = self._config["sac"]
        nominal = self.lqr_config()
        with _section_errors("sac"):
            return SacConfig(
                horizon=float(s["horizon"]),
                dt=float(s["dt"]),
                rbar=tuple(float(r) for r in s["rbar"]),
                nominal=nominal,
                maf_window=float(s["maf_window"]),
                backtrack=int(s["backtrack"]),
            ).validate()

    def run_config(self) -> RunConfig:
        env = self._config["env"]
        run = self._config["run"]
        arm = self.arm_params()
        basis_state, basis_control = self.basis_specs()
        lqr = self.lqr_config()
        sac = self.sac_config()
        with _section_errors("run"):
            cfg = RunConfig(
                arm=arm,
                basis_state=basis_state,
                basis_control=basis_control,
                controller=str(run["controller"]),
                update_mode=str(run["update_mode"]),
                initial_dataset=InitialDataset(
                    kind=str(run["initial_dataset"]),
                    steps=int(run["initial_steps"]),
                    path=None if run["initial_path"] is None else str(run["initial_path"]),
                ),
                episode_length=int(run["episode_length"]),
                seeds=tuple(self.seeds),
                ridge=float(run["ridge"]),
                lqr=lqr,
                sac=sac,
                concurrency=str(run["concurrency"]),
                diagnostic_interval=int(run["diagnostic_interval"]),
                reference_period=float(env["reference_period"]),
                elbow=str(env["elbow"]),
                kp=float(env["kp"]),
                kd=float(env["kd"]),
                reset_every=int(env["reset_every"]),
                echo=self.as_dict(),
            )
            return cfg.validate()

    def chain_spec(self) -> ChainSpec:
        c = self._config["chain"]
        with _section_errors("chain"):
            return ChainSpec(A=c["A"], noise_cov=c["noise_cov"], seed=int(c["seed"]))

    def convergence_basis(self, n_x: int) -> BasisSpec:
        c = self._config["convergence"]
        return self._basis_spec(str(c["basis"]), n_x, degree=c["degree"])

    def convergence_settings(self) -> Dict[str, Any]:
        c = self._config["convergence"]
        with _section_errors("convergence"):
            return {
                "checkpoints": [int(n) for n in c["checkpoints"]],
                "seeds": [int(s) for s in c["seeds"]],
                "oracle_samples": int(c["oracle_samples"]),
            }

    def bench_settings(self) -> Dict[str, Any]:
        b = self._config["bench"]
        with _section_errors("bench"):
            return {
                "dims": [int(d) for d in b["dims"]],
                "dataset_sizes": [int(n) for n in b["dataset_sizes"]],
                "repeats": int(b["repeats"]),
                "seed": int(b["seed"]),
            }


def load_config(path: Optional[Path] = None, overrides: Iterable[str] = ()) -> Config:
    """Config from a file (or the defaults) with overrides applied"""
    return Config(path, overrides)
