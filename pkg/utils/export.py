"""Reading and writing run artifacts: trajectory and diagnostics CSVs, JSON reports."""
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from utils.dynamics import Trajectory
from utils.measures import ParticleConfig

logger = logging.getLogger(__name__)

FLOAT_FORMAT = '%.17g'
ERROR_FILE = 'error.json'


def _json_default(value: Any):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if hasattr(value, 'to_dict'):
        return value.to_dict()
    raise TypeError(f"Cannot serialise {type(value).__name__}")


def write_json(data: Dict[str, Any], path) -> Path:
    """Sorted-key JSON, so identical inputs give identical bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        json.dump(data, f, indent=2, sort_keys=True, default=_json_default)
        f.write('\n')
    logger.debug(f"Wrote {path}")
    return path


def trajectory_frame(traj: Trajectory) -> pd.DataFrame:
    """Long format: one row per (recorded time, particle)."""
    positions = traj.positions()
    n_times, n, d = positions.shape
    frame = pd.DataFrame({
        't': np.repeat(np.asarray(traj.times), n),
        'particle_id': np.tile(np.arange(n), n_times),
    })
    for c in range(d):
        frame[f"x_{c}"] = positions[:, :, c].ravel()
    return frame


def write_trajectory(traj: Trajectory, path, meta: Optional[Dict[str, Any]] = None) -> Tuple[Path, Path]:
    """
    Write the trajectory CSV and its metadata sidecar (path with .json suffix).

    Args:
        traj: recorded trajectory
        path: CSV destination
        meta: extra entries merged over traj.meta in the sidecar

    Returns:
        (csv path, sidecar path)
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    trajectory_frame(traj).to_csv(path, index=False, float_format=FLOAT_FORMAT)
    sidecar = write_json({**traj.meta, **(meta or {}), 'n_particles': traj.n, 'dim': traj.dim,
                          'n_records': len(traj.times)}, path.with_suffix('.json'))
    logger.info(f"Saved trajectory with {len(traj.times)} states to {path}")
    return path, sidecar


def read_trajectory(path) -> Trajectory:
    """Parse a trajectory CSV back; positions and times round-trip exactly."""
    frame = pd.read_csv(path, float_precision='round_trip')
    coords = sorted((c for c in frame.columns if c.startswith('x_')), key=lambda c: int(c[2:]))
    if not coords or 't' not in frame.columns or 'particle_id' not in frame.columns:
        raise ValueError(f"{path} is not a trajectory CSV")
    traj = Trajectory()
    sidecar = Path(path).with_suffix('.json')
    if sidecar.exists():
        with open(sidecar, 'r') as f:
            traj.meta = json.load(f)
    for step, (t, group) in enumerate(frame.groupby('t', sort=True)):
        group = group.sort_values('particle_id')
        traj.append(float(t), step, ParticleConfig(group[coords].to_numpy(dtype=float)))
    return traj


def diagnostics_frame(records: Sequence) -> pd.DataFrame:
    """Records to a frame, dropping optional columns that were never computed."""
    rows = [r.to_row() for r in records if r is not None]
    frame = pd.DataFrame(rows)
    if frame.empty:
        return frame
    return frame.dropna(axis=1, how='all')


def write_diagnostics(records: Sequence, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    diagnostics_frame(records).to_csv(path, index=False, float_format=FLOAT_FORMAT)
    logger.info(f"Saved diagnostics to {path}")
    return path


def write_tracers(frame: pd.DataFrame, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def write_curl_map(nodes: np.ndarray, values: np.ndarray, path) -> Path:
    """Columns x_0, x_1, curl."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame({'x_0': nodes[:, 0], 'x_1': nodes[:, 1], 'curl': np.asarray(values)})
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def write_error(out_dir, error: Dict[str, Any]) -> Path:
    """error.json describing an aborted run."""
    path = write_json(error, Path(out_dir) / ERROR_FILE)
    logger.error(f"Run aborted; details in {path}")
    return path


def write_checks(results: List[Dict[str, Any]], path, header: Optional[Dict[str, Any]] = None) -> Path:
    """Verification report: header entries plus the list of check results."""
    return write_json({**(header or {}), 'checks': results}, path)
