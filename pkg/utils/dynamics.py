"""
Time integration of the finite-particle drift ODEs.

Every step evaluates all particle velocities on the same frozen snapshot of
the configuration; particles are never updated sequentially.
"""
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.integrate import trapezoid
from scipy.spatial.distance import pdist
from sklearn.neighbors import BallTree

from utils.errors import (CollisionGuardError, DimensionMismatchError, DriftLabError,
                          IntegrationAbort, KernelDomainError, NonFiniteError,
                          SingularDenominatorError)
from utils.fields import (FieldKind, FieldSpec, conservative_field, log_density_ratio,
                          particle_velocities)
from utils.kernels import KernelFamily
from utils.measures import Empirical, ParticleConfig, as_measure, mean_shift
from utils.numerics import fd_jacobian, operator_norm_power, stencil_reach

logger = logging.getLogger(__name__)

Velocities = Callable[[ParticleConfig], np.ndarray]
RecordHook = Callable[[ParticleConfig, float], Any]

# Default collision guard in units of h
COLLISION_GUARD_SCALE = 1e-8


class Scheme(str, Enum):
    FROZEN_EULER = 'frozen_euler'
    RK4 = 'rk4'


@dataclass(frozen=True)
class IntegratorParams:
    eta: float
    t_end: float
    scheme: Scheme = Scheme.FROZEN_EULER
    record_every: int = 1
    collision_guard: Optional[float] = None
    track_lipschitz: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'scheme', Scheme(self.scheme))
        if not self.eta > 0:
            raise ValueError(f"Step size must be positive, got {self.eta}")
        if not self.t_end >= self.eta * (1.0 - 1e-12):
            raise ValueError(f"t_end={self.t_end} must be at least one step eta={self.eta}")
        if int(self.record_every) != self.record_every or self.record_every < 1:
            raise ValueError("record_every must be a positive integer")
        if self.collision_guard is not None and not self.collision_guard > 0:
            raise ValueError("Collision guard must be positive")

    @property
    def n_steps(self) -> int:
        """Number of steps; t_k = k * eta except the last, which is shortened to land on t_end."""
        return max(1, int(np.ceil(self.t_end / self.eta - 1e-9)))

    def step_time(self, k: int) -> float:
        """Time after step k, clamped to t_end."""
        return min(k * self.eta, self.t_end)

    def to_dict(self) -> dict:
        return {'eta': self.eta, 't_end': self.t_end, 'scheme': self.scheme.value,
                'record_every': self.record_every, 'collision_guard': self.collision_guard,
                'track_lipschitz': self.track_lipschitz, 'n_steps': self.n_steps}


@dataclass
class Trajectory:
    """Recorded states of one run. Filled by a single writer through append()."""
    times: List[float] = field(default_factory=list)
    steps: List[int] = field(default_factory=list)
    states: List[ParticleConfig] = field(default_factory=list)
    records: List[Any] = field(default_factory=list)
    meta: Dict[str, Any] = field(default_factory=dict)
    lipschitz: List[Tuple[float, float]] = field(default_factory=list)

    def append(self, t: float, step: int, config: ParticleConfig, record: Any = None):
        if self.times and not t > self.times[-1]:
            raise ValueError(f"Times must increase strictly: {t} after {self.times[-1]}")
        if self.states and config.positions.shape != self.states[0].positions.shape:
            raise DimensionMismatchError("N and d must stay constant along a trajectory")
        self.times.append(float(t))
        self.steps.append(int(step))
        self.states.append(config)
        self.records.append(record)

    @property
    def n(self) -> int:
        return self.states[0].n

    @property
    def dim(self) -> int:
        return self.states[0].dim

    def positions(self) -> np.ndarray:
        """All recorded states stacked as (T, N, d)."""
        return np.stack([s.positions for s in self.states])


@dataclass(frozen=True)
class LipschitzEstimate:
    value: float
    skipped_probes: Tuple[int, ...] = ()


@dataclass(frozen=True)
class DistortionReport:
    max_ratio: float
    bound: float
    violating_pairs: Tuple[Tuple[int, int, float, float], ...]
    excluded_pairs: Tuple[Tuple[int, int], ...]

    def to_dict(self) -> dict:
        return {'max_ratio': self.max_ratio, 'bound': self.bound,
                'violating_pairs': [list(p) for p in self.violating_pairs],
                'excluded_pairs': [list(p) for p in self.excluded_pairs]}


def check_collision_guard(config: ParticleConfig, guard: float):
    """Raise CollisionGuardError naming the closest pair if it is nearer than guard."""
    if config.n < 2:
        return
    distances = pdist(config.positions)
    k = int(np.argmin(distances))
    if distances[k] < guard:
        rows, cols = np.triu_indices(config.n, 1)
        pair = (int(rows[k]), int(cols[k]))
        raise CollisionGuardError(
            f"Particles {pair[0]} and {pair[1]} are {distances[k]:.3e} apart (guard {guard:.3e})",
            pair=pair)


def _velocities(spec: FieldSpec, guard: Optional[float]) -> Velocities:
    def evaluate(config: ParticleConfig) -> np.ndarray:
        if guard is not None:
            check_collision_guard(config, guard)
        v = particle_velocities(spec, config)
        if not np.all(np.isfinite(v)):
            raise NonFiniteError("Non-finite particle velocity")
        return v
    return evaluate


def _guard(spec: FieldSpec, guard: Optional[float]) -> Optional[float]:
    if spec.kernel.family != KernelFamily.LAPLACE:
        return None
    return guard if guard is not None else COLLISION_GUARD_SCALE * spec.kernel.bandwidth


def step_frozen_euler(config: ParticleConfig, field_spec: FieldSpec, eta: float,
                      collision_guard: Optional[float] = None) -> ParticleConfig:
    """x_i <- x_i + eta * v_x(x_i), all velocities from the snapshot x."""
    v = _velocities(field_spec, _guard(field_spec, collision_guard))(config)
    return ParticleConfig(config.positions + eta * v)


def _rk4(config: ParticleConfig, velocities: Velocities, eta: float) -> ParticleConfig:
    x = config.positions
    k1 = velocities(config)
    k2 = velocities(ParticleConfig(x + 0.5 * eta * k1))
    k3 = velocities(ParticleConfig(x + 0.5 * eta * k2))
    k4 = velocities(ParticleConfig(x + eta * k3))
    return ParticleConfig(x + eta / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4))


def step_rk4(config: ParticleConfig, field_spec: FieldSpec, eta: float,
             collision_guard: Optional[float] = None) -> ParticleConfig:
    """One classical four-stage step of the interacting system."""
    return _rk4(config, _velocities(field_spec, _guard(field_spec, collision_guard)), eta)


def _frozen_field(spec: FieldSpec, config: ParticleConfig):
    """The full-configuration field z -> b_x(z) (or u_x(z)) used for Lipschitz probes."""
    if spec.kind == FieldKind.CONSERVATIVE:
        return lambda z: conservative_field(spec, config, z)
    model = as_measure(config)
    return lambda z: mean_shift(spec.target, spec.kernel, z) - mean_shift(model, spec.kernel, z)


def _field_atoms(spec: FieldSpec, config: ParticleConfig) -> np.ndarray:
    """Points where a Laplace-kernel field has kinks: the particles and any empirical target atoms."""
    if isinstance(spec.target, Empirical):
        return np.vstack([config.positions, spec.target.points])
    return config.positions


def clear_of_atoms(probes: np.ndarray, atoms: np.ndarray, reach: float) -> Tuple[np.ndarray, Tuple[int, ...]]:
    """
    Move probes off the kinks of a Laplace-kernel field.

    A probe closer than reach to its nearest atom is pushed out to 2 * reach
    along the ray from that atom (the first axis when it sits on the atom).
    Probes that still land within reach of some atom are returned as skipped.
    """
    probes = probes.copy()
    tree = BallTree(atoms)
    dist, idx = tree.query(probes, k=1)
    near = np.flatnonzero(dist[:, 0] < reach)
    for i in near:
        offset = probes[i] - atoms[idx[i, 0]]
        norm = np.linalg.norm(offset)
        direction = offset / norm if norm > 0 else np.eye(probes.shape[1])[0]
        probes[i] = atoms[idx[i, 0]] + 2.0 * reach * direction
    if near.size:
        logger.debug(f"{near.size} Lipschitz probes moved {2.0 * reach:.3g} off the nearest atom")
    dist, _ = tree.query(probes, k=1)
    return probes, tuple(int(i) for i in np.flatnonzero(dist[:, 0] < reach))


def estimate_lipschitz(config: ParticleConfig, field_spec: FieldSpec, probe_points,
                       fd_step=None) -> LipschitzEstimate:
    """
    Lower estimate of the Lipschitz constant of the frozen field.

    Max over probes of the operator norm of the finite-difference Jacobian.
    Laplace-kernel fields are not differentiable at the atoms, so their probes
    are first kept a stencil reach away from every atom. Probes where the field
    cannot be evaluated are skipped and reported.
    """
    probes = np.atleast_2d(np.asarray(probe_points, dtype=float))
    field_fn = _frozen_field(field_spec, config)
    skipped: Tuple[int, ...] = ()
    if field_spec.kernel.family == KernelFamily.LAPLACE and probes.shape[0]:
        probes, skipped = clear_of_atoms(probes, _field_atoms(field_spec, config),
                                         stencil_reach(probes, fd_step))
    kept = [i for i in range(probes.shape[0]) if i not in skipped]
    try:
        norms = operator_norm_power(fd_jacobian(field_fn, probes[kept], fd_step)) if kept else np.zeros(0)
        return LipschitzEstimate(value=float(norms.max()) if norms.size else 0.0, skipped_probes=skipped)
    except (SingularDenominatorError, KernelDomainError, NonFiniteError):
        pass

    values, failed = [], []
    for idx in kept:
        try:
            values.append(float(operator_norm_power(fd_jacobian(field_fn, probes[idx], fd_step))[0]))
        except (SingularDenominatorError, KernelDomainError, NonFiniteError) as e:
            logger.warning(f"Lipschitz probe {idx} skipped: {str(e)}")
            failed.append(idx)
    return LipschitzEstimate(value=max(values) if values else 0.0,
                             skipped_probes=tuple(sorted(skipped + tuple(failed))))


def _abort(e: DriftLabError, step: int, t: float) -> IntegrationAbort:
    logger.error(f"Integration aborted at t={t:.6g}: {str(e)}")
    return IntegrationAbort(f"Step {step} failed at t={t:.6g}: {str(e)}", time=t,
                            particle=getattr(e, 'particle', None), cause=e)


def _run(config0: ParticleConfig, spec: FieldSpec, params: IntegratorParams,
         record_hook: Optional[RecordHook], meta: Optional[dict]) -> Trajectory:
    guard = _guard(spec, params.collision_guard)
    velocities = _velocities(spec, guard)
    eta = params.eta
    traj = Trajectory(meta={'field': spec.to_dict(), 'integrator': params.to_dict(),
                            'collision_guard_effective': guard, **(meta or {})})

    def track(config: ParticleConfig, t: float):
        if params.track_lipschitz:
            estimate = estimate_lipschitz(config, spec, config.positions)
            traj.lipschitz.append((t, estimate.value))

    config = config0
    try:
        traj.append(0.0, 0, config, record_hook(config, 0.0) if record_hook else None)
        track(config, 0.0)
    except DriftLabError as e:
        raise _abort(e, 0, 0.0) from e

    logger.info(f"Integrating {spec.kind.value} field: N={config0.n}, d={config0.dim}, "
                f"{params.n_steps} {params.scheme.value} steps of {eta}")
    for k in range(1, params.n_steps + 1):
        t_prev = params.step_time(k - 1)
        t = params.step_time(k)
        dt = eta if t == k * eta else t - t_prev
        try:
            if params.scheme == Scheme.RK4:
                config = _rk4(config, velocities, dt)
            else:
                config = ParticleConfig(config.positions + dt * velocities(config))
            track(config, t)
            if k % params.record_every == 0 or k == params.n_steps:
                traj.append(t, k, config, record_hook(config, t) if record_hook else None)
        except DriftLabError as e:
            raise _abort(e, k, t_prev) from e
    logger.info(f"Integration finished at t={traj.times[-1]:.6g} with {len(traj.times)} recorded states")
    return traj


def integrate(config0: ParticleConfig, field_spec: FieldSpec, params: IntegratorParams,
              record_hook: Optional[RecordHook] = None, meta: Optional[dict] = None) -> Trajectory:
    """
    Run the particle system from config0 up to params.t_end.

    Args:
        config0: initial configuration
        field_spec: which drift drives the particles
        params: step size, horizon, scheme and recording cadence
        record_hook: optional callable (config, t) -> DiagnosticsRecord
        meta: extra metadata stored on the trajectory (seed, config hash)

    Returns:
        Trajectory with states every record_every steps plus the final state
    """
    return _run(config0, field_spec, params, record_hook, meta)


def integrate_rk4(config0: ParticleConfig, field_spec: FieldSpec, params: IntegratorParams,
                  record_hook: Optional[RecordHook] = None, meta: Optional[dict] = None) -> Trajectory:
    """Reference solution with the classical RK4 scheme."""
    return _run(config0, field_spec, replace(params, scheme=Scheme.RK4), record_hook, meta)


def accumulate_gamma(traj: Trajectory) -> float:
    """Trapezoid integral of the per-step Lipschitz estimates."""
    if len(traj.lipschitz) < 2:
        return 0.0
    times, values = zip(*traj.lipschitz)
    return float(trapezoid(values, x=times))


def distortion_report(traj: Trajectory, gamma_hat: float, tol: float = 0.05) -> DistortionReport:
    """Worst pairwise distance growth against the exp(gamma_hat) distortion bound."""
    rows, cols = np.triu_indices(traj.n, 1)
    d0 = pdist(traj.states[0].positions)
    valid = d0 > 0.0
    excluded = tuple((int(i), int(j)) for i, j in zip(rows[~valid], cols[~valid]))
    if excluded:
        logger.warning(f"{len(excluded)} coincident initial pairs excluded from the distortion check")

    bound = float(np.exp(gamma_hat))
    max_ratio = 0.0
    violations = []
    for t, state in zip(traj.times, traj.states):
        ratios = pdist(state.positions)[valid] / d0[valid]
        if ratios.size == 0:
            continue
        max_ratio = max(max_ratio, float(ratios.max()))
        for k in np.flatnonzero(ratios > bound * (1.0 + tol)):
            i, j = rows[valid][k], cols[valid][k]
            violations.append((int(i), int(j), float(t), float(ratios[k])))
    if violations:
        logger.warning(f"{len(violations)} pair distortions exceed exp(Gamma)={bound:.4f}")
    return DistortionReport(max_ratio=max_ratio, bound=bound, violating_pairs=tuple(violations),
                            excluded_pairs=excluded)


def endpoint(traj: Trajectory) -> np.ndarray:
    return traj.states[-1].positions.copy()


def tracer_paths(traj: Trajectory, indices: Sequence[int]) -> pd.DataFrame:
    """One row per recorded time: step, t and the coordinates of each tracer."""
    positions = traj.positions()
    frame = pd.DataFrame({'step': traj.steps, 't': traj.times})
    for idx in indices:
        for c in range(traj.dim):
            frame[f"tracer_{idx}_x_{c}"] = positions[:, idx, c]
    return frame


def potential_trace(config: ParticleConfig, spec: FieldSpec, start, eta: float,
                    n_steps: int) -> np.ndarray:
    """Potential log rho - log q_x along a single tracer moved by the frozen conservative field."""
    z = np.asarray(start, dtype=float).copy()
    values = [float(log_density_ratio(spec, config, z))]
    for _ in range(n_steps):
        z = z + eta * conservative_field(spec, config, z)
        values.append(float(log_density_ratio(spec, config, z)))
    return np.asarray(values)
