"""
Artifact storage: dataset CSVs, model checkpoints, reports

Checkpoint layout (.kpt):
    line 1   KOOPABLE-CKPT
    line 2   one-line JSON header
    rest     K then P, row-major little-endian float64
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np
import pandas as pd

from .edmd import KoopmanModel, SnapshotDataset, resample_uniform
from .errors import ConfigError, DimensionError
from .observables import BasisSpec

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"KOOPABLE-CKPT"
FORMAT_VERSION = 1
_LE_F64 = np.dtype("<f8")


def _numbered(columns, prefix: str):
    cols = [c for c in columns if c.startswith(prefix) and c[len(prefix):].isdigit()]
    return sorted(cols, key=lambda c: int(c[len(prefix):]))


def _segments(ds: SnapshotDataset):
    """(start, stop) record ranges of the chained trajectories in ds"""
    n = len(ds)
    if n == 0:
        return []
    breaks = np.zeros(n - 1, dtype=bool)
    if ds.traj is not None:
        breaks |= ds.traj[1:] != ds.traj[:-1]
    breaks |= np.any(ds.x_next[:-1] != ds.x[1:], axis=1)
    starts = [0] + [int(i) + 1 for i in np.flatnonzero(breaks)]
    stops = starts[1:] + [n]
    return list(zip(starts, stops))


def dataset_frame(ds: SnapshotDataset) -> pd.DataFrame:
    """One row per visited state; the last row of each trajectory has no control"""
    frames = []
    for traj_id, (start, stop) in enumerate(_segments(ds)):
        states = np.vstack([ds.x[start:stop], ds.x_next[stop - 1]])
        controls = np.vstack([ds.u[start:stop], np.full((1, ds.n_u), np.nan)])
        frame = pd.DataFrame(states, columns=[f"x{i}" for i in range(ds.n_x)])
        frame.insert(0, "t", ds.dt * np.arange(states.shape[0]))
        for j in range(ds.n_u):
            frame[f"u{j}"] = controls[:, j]
        frame["traj"] = traj_id
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)


def write_dataset(ds: SnapshotDataset, path: Path, config: Optional[Dict[str, Any]] = None) -> Path:
    """Write a dataset CSV; comment lines carry the format version and config"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(f"# koopable dataset format_version={FORMAT_VERSION} dt={ds.dt!r}\n")
        if config is not None:
            f.write(f"# config {json.dumps(config, sort_keys=True)}\n")
        dataset_frame(ds).to_csv(f, index=False, float_format="%.17g")
    logger.info(f"💾 Wrote {len(ds)} snapshots to {path}")
    return path


def read_dataset(path: Path, dt: Optional[float] = None) -> SnapshotDataset:
    """
    Read a dataset CSV, resampling irregular timestamps to a uniform dt

    Args:
        dt: Target step; inferred from the median timestamp spacing when None

    Raises:
        ConfigError: missing file or missing columns
        DimensionError: a control is missing inside a trajectory
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"dataset file not found: {path}")
    frame = pd.read_csv(path, comment="#", float_precision="round_trip")
    if "t" not in frame.columns:
        raise ConfigError(f"{path} has no 't' column")
    x_cols = _numbered(frame.columns, "x")
    u_cols = _numbered(frame.columns, "u")
    if not x_cols:
        raise ConfigError(f"{path} has no state columns x0..")
    groups = [g for _, g in frame.groupby("traj", sort=False)] if "traj" in frame.columns else [frame]

    if dt is None:
        diffs = np.concatenate([np.diff(g["t"].to_numpy(dtype=float)) for g in groups])
        if diffs.size == 0:
            raise DimensionError(f"{path} holds no snapshot pair")
        dt = float(np.median(diffs))

    parts = []
    for traj_id, group in enumerate(groups):
        group = group[["t", *x_cols, *u_cols]].reset_index(drop=True)
        t = group["t"].to_numpy(dtype=float)
        if t.size >= 2 and not np.allclose(np.diff(t), dt, rtol=0.0, atol=1e-9 * max(1.0, abs(dt))):
            group = resample_uniform(group, dt)
        if len(group) < 2:
            continue
        states = group[x_cols].to_numpy(dtype=float)
        controls = group[u_cols].to_numpy(dtype=float)[:-1]
        if np.any(np.isnan(controls)):
            raise DimensionError(f"{path}: missing control inside trajectory {traj_id}")
        parts.append(SnapshotDataset.from_trajectory(states, controls, dt, traj_id))
    if not parts:
        raise DimensionError(f"{path} holds no snapshot pair")
    ds = parts[0]
    for part in parts[1:]:
        ds = ds.concat(part)
    return ds


def checkpoint_header(model: KoopmanModel, update_count: int = 0, config: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    return {
        "format_version": FORMAT_VERSION,
        "n_z": model.n_z,
        "n_g": model.n_g,
        "dt": model.dt,
        "sample_count": model.sample_count,
        "update_count": update_count,
        "basis_state": None if model.basis_state is None else model.basis_state.to_dict(),
        "basis_control": None if model.basis_control is None else model.basis_control.to_dict(),
        "config": config or {},
    }


def encode_checkpoint(model: KoopmanModel, update_count: int = 0, config: Optional[Dict[str, Any]] = None) -> bytes:
    header = json.dumps(checkpoint_header(model, update_count, config), sort_keys=True)
    return b"".join([
        CHECKPOINT_MAGIC, b"\n",
        header.encode("utf-8"), b"\n",
        np.ascontiguousarray(model.K, dtype=_LE_F64).tobytes(),
        np.ascontiguousarray(model.P, dtype=_LE_F64).tobytes(),
    ])


def decode_checkpoint(blob: bytes) -> Tuple[KoopmanModel, Dict[str, Any]]:
    """
    Parse checkpoint bytes

    Returns:
        (model, header)
    """
    magic, sep, rest = blob.partition(b"\n")
    if magic != CHECKPOINT_MAGIC or not sep:
        raise ConfigError("not a koopable checkpoint")
    line, sep, payload = rest.partition(b"\n")
    if not sep:
        raise ConfigError("truncated checkpoint header")
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ConfigError(f"corrupt checkpoint header: {e}") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint format_version {header.get('format_version')}")
    dim = int(header["n_z"]) + int(header["n_g"])
    expected = 2 * dim * dim * _LE_F64.itemsize
    if len(payload) != expected:
        raise DimensionError(f"checkpoint payload has {len(payload)} bytes, expected {expected}")
    values = np.frombuffer(payload, dtype=_LE_F64).astype(float)
    K = values[: dim * dim].reshape(dim, dim).copy()
    P = values[dim * dim :].reshape(dim, dim).copy()
    bs = header.get("basis_state")
    bc = header.get("basis_control")
    model = KoopmanModel(
        K=K,
        P=P,
        n_z=int(header["n_z"]),
        n_g=int(header["n_g"]),
        basis_state=None if bs is None else BasisSpec.from_dict(bs),
        basis_control=None if bc is None else BasisSpec.from_dict(bc),
        dt=float(header["dt"]),
        sample_count=int(header["sample_count"]),
    )
    return model, header


def save_checkpoint(
    model: KoopmanModel, path: Path, update_count: int = 0, config: Optional[Dict[str, Any]] = None
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(model, update_count, config))
    logger.info(f"💾 Saved checkpoint {path} (dim {model.dim}, {model.sample_count} samples)")
    return path


def load_checkpoint(path: Path) -> Tuple[KoopmanModel, Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())


def write_json(data: Dict[str, Any], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True), encoding="utf-8")
    return path


def write_trajectory(frame: pd.DataFrame, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.17g")
    return path


def read_tip_trajectory(path: Path, columns: Optional[Tuple[str, str]] = None) -> np.ndarray:
    """
    Tip positions from a trajectory CSV

    Uses the given columns, else tip_x/tip_y, else x/y, else the first two.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"trajectory file not found: {path}")
    frame = pd.read_csv(path, comment="#", float_precision="round_trip")
    if columns is None:
        for candidate in (("tip_x", "tip_y"), ("x", "y")):
            if set(candidate) <= set(frame.columns):
                columns = candidate
                break
    if columns is None:
        if frame.shape[1] < 2:
            raise ConfigError(f"{path} needs at least two columns")
        return frame.iloc[:, :2].to_numpy(dtype=float)
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise ConfigError(f"{path} lacks columns {missing}")
    return frame[list(columns)].to_numpy(dtype=float)
