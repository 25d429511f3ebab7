"""
Drift velocity fields and their differential diagnostics.

Field functions take a FieldSpec, the frozen particle configuration and one
evaluation point (d,) or a batch (m, d).
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Tuple

import numpy as np

from utils.errors import (DimensionMismatchError, KernelDomainError, SingularDenominatorError,
                          UnsupportedCombinationError, UnsupportedDimensionError,
                          UnsupportedFamilyError, DegenerateConfigError)
from utils.kernels import KernelFamily, KernelSpec, eval_kernel, laplacian_at_zero
from utils.measures import (DENSITY_FLOOR, Empirical, Measure, ParticleConfig, as_measure,
                            kde_density, kde_score, log_kde_density, loo_measure, mean_shift,
                            scale_factor, sharp_score)
from utils.numerics import GridSpec, fd_divergence, fd_jacobian

logger = logging.getLogger(__name__)

VectorField = Callable[[np.ndarray], np.ndarray]


class FieldKind(str, Enum):
    CONSERVATIVE = 'conservative'
    DISPLACEMENT = 'displacement'
    LAPLACE_LOO = 'laplace_loo'


class ModelSource(str, Enum):
    FULL_CONFIG = 'full_config'
    LEAVE_ONE_OUT = 'leave_one_out'


@dataclass(frozen=True, eq=False)
class FieldSpec:
    """
    Which drift to run, against which target, with which kernel.

    model_source defaults to LEAVE_ONE_OUT for LAPLACE_LOO and FULL_CONFIG
    otherwise.
    """
    kind: FieldKind
    target: Measure
    kernel: KernelSpec
    model_source: Optional[ModelSource] = None

    def __post_init__(self):
        kind = FieldKind(self.kind)
        source = self.model_source
        if source is None:
            source = ModelSource.LEAVE_ONE_OUT if kind == FieldKind.LAPLACE_LOO else ModelSource.FULL_CONFIG
        source = ModelSource(source)
        object.__setattr__(self, 'kind', kind)
        object.__setattr__(self, 'model_source', source)

        family = self.kernel.family
        if self.target.dim != self.kernel.dim:
            raise DimensionMismatchError(
                f"Target has d={self.target.dim} but kernel has d={self.kernel.dim}")
        if kind == FieldKind.LAPLACE_LOO:
            if family != KernelFamily.LAPLACE:
                raise UnsupportedFamilyError("Leave-one-out Laplace field needs the Laplace kernel")
            if source != ModelSource.LEAVE_ONE_OUT:
                raise UnsupportedCombinationError("Leave-one-out Laplace field needs a leave-one-out model")
        if kind == FieldKind.CONSERVATIVE:
            if family == KernelFamily.LAPLACE:
                raise UnsupportedFamilyError("Conservative field needs a differentiable kernel")
            if source != ModelSource.FULL_CONFIG:
                raise UnsupportedCombinationError("Conservative field uses the full-configuration KDE")

    @property
    def is_leave_one_out(self) -> bool:
        return self.model_source == ModelSource.LEAVE_ONE_OUT

    def to_dict(self) -> dict:
        return {'kind': self.kind.value, 'model_source': self.model_source.value,
                'kernel': self.kernel.to_dict(), 'target_type': type(self.target).__name__}


def _require_laplace(spec: FieldSpec, operation: str):
    if spec.kernel.family != KernelFamily.LAPLACE:
        raise UnsupportedFamilyError(f"{operation} needs the Laplace kernel")


def _model_measure(spec: FieldSpec, config: ParticleConfig, i: Optional[int]) -> Empirical:
    if spec.is_leave_one_out:
        if i is None:
            raise ValueError("Leave-one-out fields need the particle index")
        return loo_measure(config, i)
    return as_measure(config)


def conservative_field(spec: FieldSpec, config: ParticleConfig, z):
    """b_x(z) = s_rho(z) - s_x(z)."""
    return kde_score(spec.target, spec.kernel, z) - kde_score(as_measure(config), spec.kernel, z)


def log_density_ratio(spec: FieldSpec, config: ParticleConfig, z):
    """Potential log rho - log q_x whose gradient is the conservative field."""
    return log_kde_density(spec.target, spec.kernel, z) - log_kde_density(as_measure(config), spec.kernel, z)


def displacement_field(spec: FieldSpec, config: ParticleConfig, z, i: Optional[int] = None):
    """u(z) = M_target(z) - M_model(z); the model drops particle i for leave-one-out specs."""
    model = _model_measure(spec, config, i)
    return mean_shift(spec.target, spec.kernel, z) - mean_shift(model, spec.kernel, z)


def _check_not_atom(points: np.ndarray, z) -> None:
    z = np.atleast_2d(np.asarray(z, dtype=float))
    hits = np.all(z[:, None, :] == points[None, :, :], axis=-1)
    if np.any(hits):
        raise KernelDomainError("Laplace field evaluated exactly at an atom")


def laplace_loo_field(spec: FieldSpec, config: ParticleConfig, i: int, z):
    """u_{x,-i}(z) = M_nu(z) - M_{mu_{x,-i}}(z)."""
    _require_laplace(spec, "laplace_loo_field")
    model = loo_measure(config, i)
    _check_not_atom(model.points, z)
    return mean_shift(spec.target, spec.kernel, z) - mean_shift(model, spec.kernel, z)


def full_laplace_field(spec: FieldSpec, config: ParticleConfig, z):
    """u_x(z) = M_nu(z) - M_x(z) with every particle in the model measure."""
    _require_laplace(spec, "full_laplace_field")
    return mean_shift(spec.target, spec.kernel, z) - mean_shift(as_measure(config), spec.kernel, z)


def sharp_mismatch_field(spec: FieldSpec, config: ParticleConfig, z):
    """b^#_x(z) = sigma_nu(z) - sigma_x(z)."""
    _require_laplace(spec, "sharp_mismatch_field")
    return sharp_score(spec.target, spec.kernel, z) - sharp_score(as_measure(config), spec.kernel, z)


def scale_residual_field(spec: FieldSpec, config: ParticleConfig, z):
    """e_x(z) = (a_nu(z) - a_x(z)) sigma_nu(z)."""
    _require_laplace(spec, "scale_residual_field")
    a_nu = np.asarray(scale_factor(spec.target, spec.kernel, z))
    a_x = np.asarray(scale_factor(as_measure(config), spec.kernel, z))
    sigma = np.asarray(sharp_score(spec.target, spec.kernel, z))
    return (a_nu - a_x)[..., None] * sigma


def velocity_field(spec: FieldSpec, config: ParticleConfig, i: Optional[int] = None) -> VectorField:
    """The drift of spec as a batch callable z -> v(z) on the frozen configuration."""
    if spec.kind == FieldKind.CONSERVATIVE:
        return lambda z: conservative_field(spec, config, z)
    if spec.kind == FieldKind.LAPLACE_LOO:
        return lambda z: laplace_loo_field(spec, config, i, z)
    return lambda z: displacement_field(spec, config, z, i)


def _loo_model_shift(spec: FieldSpec, config: ParticleConfig) -> np.ndarray:
    """M_{mu_{x,-i}}(x_i) for every i from the pair matrix with its diagonal masked."""
    x = config.positions
    n = config.n
    if n < 2:
        raise DegenerateConfigError("Leave-one-out velocities need at least two particles")
    diffs = x[None, :, :] - x[:, None, :]
    kvals = np.asarray(eval_kernel(spec.kernel, diffs)).reshape(n, n)
    np.fill_diagonal(kvals, 0.0)
    density = kvals.sum(axis=1) / (n - 1)
    bad = np.flatnonzero(~(density >= DENSITY_FLOOR))
    if bad.size:
        raise SingularDenominatorError(
            f"Leave-one-out KDE denominator {density[bad[0]]:.3e} below {DENSITY_FLOOR:.0e} "
            f"at particle {bad[0]}", particle=int(bad[0]))
    return np.einsum('ij,ijd->id', kvals, diffs) / kvals.sum(axis=1)[:, None]


def particle_velocities(spec: FieldSpec, config: ParticleConfig) -> np.ndarray:
    """
    Drift of every particle from one frozen snapshot.

    Args:
        spec: field specification
        config: the current configuration

    Returns:
        (N, d) array, row i the velocity of particle i
    """
    x = config.positions
    if spec.kind == FieldKind.CONSERVATIVE:
        return conservative_field(spec, config, x)
    if not spec.is_leave_one_out:
        return displacement_field(spec, config, x)

    if spec.kind == FieldKind.LAPLACE_LOO:
        coincident = np.all(x[:, None, :] == x[None, :, :], axis=-1)
        np.fill_diagonal(coincident, False)
        if np.any(coincident):
            i, j = np.argwhere(coincident)[0]
            raise KernelDomainError(f"Particles {i} and {j} coincide; Laplace field undefined")
    return mean_shift(spec.target, spec.kernel, x) - _loo_model_shift(spec, config)


def stein_divergence(field: VectorField, score_ref: VectorField, z, fd_step=None):
    """A f(z) = div f(z) + s_ref(z) . f(z), divergence by central differences."""
    div = fd_divergence(field, z, fd_step)
    drift = np.sum(np.asarray(score_ref(z)) * np.asarray(field(z)), axis=-1)
    return div + (float(drift) if np.ndim(drift) == 0 else drift)


def self_interaction_correction(config: ParticleConfig, k: KernelSpec, i: int) -> float:
    """Delta K_h(0) / (N q_x(x_i)), the term a particle's own KDE bump adds to its divergence."""
    q = kde_density(as_measure(config), k, config.positions[i])
    if q < DENSITY_FLOOR:
        raise SingularDenominatorError(f"q_x(x_{i}) underflowed", particle=i)
    return laplacian_at_zero(k) / (config.n * q)


def particle_divergence_pair(config: ParticleConfig, target: Measure, k: KernelSpec, i: int,
                             fd_step=None) -> Tuple[float, float]:
    """
    Both sides of the per-particle divergence identity.

    lhs differentiates x_i -> b_x(x_i) moving the evaluation point together with
    the i-th KDE centre; rhs is the frozen spatial divergence at x_i plus the
    self-interaction correction.
    """
    spec = FieldSpec(FieldKind.CONSERVATIVE, target, k)

    def moving(points: np.ndarray) -> np.ndarray:
        out = np.empty_like(points)
        for row, w in enumerate(points):
            positions = config.positions.copy()
            positions[i] = w
            out[row] = conservative_field(spec, ParticleConfig(positions), w)
        return out

    x_i = config.positions[i]
    lhs = fd_divergence(moving, x_i, fd_step)
    frozen = fd_divergence(lambda z: conservative_field(spec, config, z), x_i, fd_step)
    rhs = frozen + self_interaction_correction(config, k, i)
    logger.debug(f"Divergence pair at particle {i}: lhs={lhs:.8f}, rhs={rhs:.8f}")
    return lhs, rhs


def curl2d(field: VectorField, z, fd_step=None):
    """d1 f2 - d2 f1 by central differences; planar fields only."""
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != 2:
        raise UnsupportedDimensionError(f"Curl is defined for d=2, got d={z.shape[-1]}")
    jac = fd_jacobian(field, z, fd_step)
    curl = jac[..., 1, 0] - jac[..., 0, 1]
    return float(curl) if np.ndim(curl) == 0 else curl


def curl_map(field: VectorField, grid: GridSpec, fd_step=None) -> Tuple[np.ndarray, np.ndarray]:
    """Curl at every node of a planar grid; returns (nodes, values)."""
    if grid.dim != 2:
        raise UnsupportedDimensionError(f"Curl maps need a planar grid, got d={grid.dim}")
    nodes = grid.nodes()
    return nodes, curl2d(field, nodes, fd_step)
