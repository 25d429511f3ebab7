"""
Probability measures and their kernel-smoothed quantities.

Two measure types are supported: weighted empirical point clouds and isotropic
Gaussian mixtures.  Every evaluation function accepts a single point of shape
(d,) or a batch of shape (m, d) and returns a float / (d,) vector for a single
point and an (m,) / (m, d) array for a batch.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import pandas as pd
from scipy.special import logsumexp

from utils.errors import (DegenerateConfigError, DimensionMismatchError, KernelDomainError,
                          SingularDenominatorError, UnsupportedCombinationError,
                          UnsupportedFamilyError)
from utils.kernels import (KernelFamily, KernelSpec, eval_kernel, grad_kernel,
                           sharp_kernel_eval, sharp_kernel_grad)

logger = logging.getLogger(__name__)

# Densities below this are treated as zero
DENSITY_FLOOR = 1e-300
WEIGHT_TOLERANCE = 1e-12


def _frozen_array(values, ndim: int, name: str) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if ndim == 2 and arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != ndim:
        raise ValueError(f"{name} must be a {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


def _check_weights(weights: np.ndarray, size: int):
    if weights.shape != (size,):
        raise ValueError(f"Expected {size} weights, got shape {weights.shape}")
    if np.any(weights <= 0.0) or not np.all(np.isfinite(weights)):
        raise ValueError("Weights must be positive and finite")
    if abs(weights.sum() - 1.0) > WEIGHT_TOLERANCE:
        raise ValueError(f"Weights must sum to 1, got {weights.sum():.15f}")


@dataclass(frozen=True, eq=False)
class Empirical:
    """Weighted point cloud sum_j w_j delta_{y_j}."""
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        points = _frozen_array(self.points, 2, "points")
        weights = _frozen_array(self.weights, 1, "weights")
        if points.shape[0] == 0:
            raise ValueError("Empirical measure needs at least one atom")
        if not np.all(np.isfinite(points)):
            raise ValueError("Atom coordinates must be finite")
        _check_weights(weights, points.shape[0])
        object.__setattr__(self, 'points', points)
        object.__setattr__(self, 'weights', weights)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def size(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    """Isotropic mixture sum_j w_j N(m_j, v_j I)."""
    means: np.ndarray
    variances: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        means = _frozen_array(self.means, 2, "means")
        variances = _frozen_array(self.variances, 1, "variances")
        weights = _frozen_array(self.weights, 1, "weights")
        if variances.shape != (means.shape[0],) or np.any(variances <= 0.0):
            raise ValueError("Need one positive variance per component")
        _check_weights(weights, means.shape[0])
        object.__setattr__(self, 'means', means)
        object.__setattr__(self, 'variances', variances)
        object.__setattr__(self, 'weights', weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def size(self) -> int:
        return self.means.shape[0]


Measure = Union[Empirical, GaussianMixture]


@dataclass(frozen=True, eq=False)
class ParticleConfig:
    """Ordered particle positions; row i is particle i."""
    positions: np.ndarray

    def __post_init__(self):
        positions = _frozen_array(self.positions, 2, "positions")
        if positions.shape[0] == 0:
            raise ValueError("A configuration needs at least one particle")
        if not np.all(np.isfinite(positions)):
            raise ValueError("Particle coordinates must be finite")
        object.__setattr__(self, 'positions', positions)

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]


def empirical(points, weights: Optional[np.ndarray] = None) -> Empirical:
    """Empirical measure on the given points, uniform unless weights are given."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if weights is None:
        weights = np.full(points.shape[0], 1.0 / points.shape[0])
    return Empirical(points, np.asarray(weights, dtype=float))


def as_measure(config: ParticleConfig) -> Empirical:
    """The uniform empirical measure mu_x = (1/N) sum_j delta_{x_j}."""
    return empirical(config.positions)


def loo_measure(config: ParticleConfig, i: int) -> Empirical:
    """Uniform measure on every particle except i."""
    if config.n < 2:
        raise DegenerateConfigError("Leave-one-out measure needs at least two particles")
    if not 0 <= i < config.n:
        raise IndexError(f"Particle index {i} out of range for N={config.n}")
    keep = np.delete(config.positions, i, axis=0)
    return empirical(keep)


def _as_batch(alpha: Measure, k: Optional[KernelSpec], z):
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    if z.shape[1] != alpha.dim or (k is not None and k.dim != alpha.dim):
        raise DimensionMismatchError(
            f"Dimension mismatch: measure d={alpha.dim}, point shape {z.shape}"
            + (f", kernel d={k.dim}" if k is not None else ""))
    return z, single


def _unbatch(values: np.ndarray, single: bool):
    if single:
        return float(values[0]) if values.ndim == 1 else values[0]
    return values


def _require_gaussian_for_mixture(alpha: Measure, k: KernelSpec):
    if isinstance(alpha, GaussianMixture) and k.family != KernelFamily.GAUSSIAN:
        raise UnsupportedCombinationError(
            f"Gaussian mixture measures need the Gaussian kernel, got {k.family.value}")


def _require_laplace_empirical(alpha: Measure, k: KernelSpec, operation: str):
    if k.family != KernelFamily.LAPLACE:
        raise UnsupportedFamilyError(f"{operation} is only defined for the Laplace kernel")
    if not isinstance(alpha, Empirical):
        raise UnsupportedCombinationError(f"{operation} needs an empirical measure")


def _check_denominator(density: np.ndarray, what: str = "KDE denominator"):
    bad = np.flatnonzero(~(density >= DENSITY_FLOOR))
    if bad.size:
        raise SingularDenominatorError(
            f"{what} {density[bad[0]]:.3e} below {DENSITY_FLOOR:.0e} at evaluation point {bad[0]}",
            particle=int(bad[0]))


def _mixture_log_components(mix: GaussianMixture, z: np.ndarray, extra_var: float) -> np.ndarray:
    """log(w_j N(z; m_j, (v_j + extra_var) I)) for each point and component, shape (m, J)."""
    var = mix.variances + extra_var
    sq = ((z[:, None, :] - mix.means[None, :, :]) ** 2).sum(axis=-1)
    d = mix.dim
    return np.log(mix.weights)[None, :] - 0.5 * d * np.log(2.0 * np.pi * var)[None, :] - 0.5 * sq / var[None, :]


def _mixture_score(mix: GaussianMixture, z: np.ndarray, extra_var: float) -> np.ndarray:
    log_comp = _mixture_log_components(mix, z, extra_var)
    log_dens = logsumexp(log_comp, axis=1)
    bad = np.flatnonzero(~(log_dens >= np.log(DENSITY_FLOOR)))
    if bad.size:
        raise SingularDenominatorError(
            f"Mixture density below {DENSITY_FLOOR:.0e} at evaluation point {bad[0]}",
            particle=int(bad[0]))
    resp = np.exp(log_comp - log_dens[:, None])
    var = mix.variances + extra_var
    return np.einsum('mj,mjd->md', resp / var[None, :], mix.means[None, :, :] - z[:, None, :])


def _kernel_table(alpha: Empirical, k: KernelSpec, z: np.ndarray):
    """Differences y_j - z and kernel values K_h(z - y_j), shapes (m, n, d) and (m, n)."""
    diffs = alpha.points[None, :, :] - z[:, None, :]
    return diffs, np.asarray(eval_kernel(k, -diffs)).reshape(diffs.shape[:2])


def kde_density(alpha: Measure, k: KernelSpec, z):
    """rho_{alpha,h}(z) = integral of K_h(z - y) alpha(dy)."""
    z, single = _as_batch(alpha, k, z)
    _require_gaussian_for_mixture(alpha, k)
    if isinstance(alpha, GaussianMixture):
        values = np.exp(logsumexp(_mixture_log_components(alpha, z, k.bandwidth ** 2), axis=1))
    else:
        _, kvals = _kernel_table(alpha, k, z)
        values = kvals @ alpha.weights
    return _unbatch(values, single)


def log_kde_density(alpha: Measure, k: KernelSpec, z):
    """log rho_{alpha,h}(z); log-sum-exp for mixtures and Gaussian kernels."""
    z, single = _as_batch(alpha, k, z)
    _require_gaussian_for_mixture(alpha, k)
    if isinstance(alpha, GaussianMixture):
        values = logsumexp(_mixture_log_components(alpha, z, k.bandwidth ** 2), axis=1)
    elif k.family == KernelFamily.GAUSSIAN:
        sq = ((alpha.points[None, :, :] - z[:, None, :]) ** 2).sum(axis=-1)
        log_k = np.log(k.normalizer) - k.dim * np.log(k.bandwidth) - 0.5 * sq / k.bandwidth ** 2
        values = logsumexp(log_k + np.log(alpha.weights)[None, :], axis=1)
    else:
        _, kvals = _kernel_table(alpha, k, z)
        with np.errstate(divide='ignore'):
            values = np.log(kvals @ alpha.weights)
    return _unbatch(values, single)


def mixture_log_density(mix: GaussianMixture, z):
    """Log density of the (unsmoothed) Gaussian mixture."""
    z, single = _as_batch(mix, None, z)
    return _unbatch(logsumexp(_mixture_log_components(mix, z, 0.0), axis=1), single)


def _shift_numerator(alpha: Empirical, k: KernelSpec, z: np.ndarray):
    diffs, kvals = _kernel_table(alpha, k, z)
    weighted = kvals * alpha.weights[None, :]
    density = weighted.sum(axis=1)
    _check_denominator(density)
    return diffs, weighted, density


def mean_shift(alpha: Measure, k: KernelSpec, z):
    """M_{alpha,h}(z): kernel-weighted mean of y - z."""
    z, single = _as_batch(alpha, k, z)
    _require_gaussian_for_mixture(alpha, k)
    if isinstance(alpha, GaussianMixture):
        values = k.bandwidth ** 2 * _mixture_score(alpha, z, k.bandwidth ** 2)
    else:
        diffs, weighted, density = _shift_numerator(alpha, k, z)
        values = np.einsum('mn,mnd->md', weighted, diffs) / density[:, None]
    return _unbatch(values, single)


def kde_score(alpha: Measure, k: KernelSpec, z):
    """s_{alpha,h}(z) = grad log rho_{alpha,h}(z)."""
    z, single = _as_batch(alpha, k, z)
    _require_gaussian_for_mixture(alpha, k)
    if isinstance(alpha, GaussianMixture):
        values = _mixture_score(alpha, z, k.bandwidth ** 2)
    elif k.family == KernelFamily.GAUSSIAN:
        # grad K_h(z - y) = (y - z) K_h(z - y) / h^2
        diffs, weighted, density = _shift_numerator(alpha, k, z)
        values = np.einsum('mn,mnd->md', weighted, diffs) / density[:, None] / k.bandwidth ** 2
    else:
        diffs, weighted, density = _shift_numerator(alpha, k, z)
        if k.family == KernelFamily.LAPLACE and np.any(np.all(diffs == 0.0, axis=-1)):
            raise KernelDomainError("Laplace score undefined at an atom of the measure")
        grads = grad_kernel(k, -diffs)
        values = np.einsum('n,mnd->md', alpha.weights, grads) / density[:, None]
    return _unbatch(values, single)


def mean_radius(alpha: Measure, k: KernelSpec, z):
    """Laplace-weighted local mean radius rbar_{alpha,h}(z)."""
    _require_laplace_empirical(alpha, k, "mean_radius")
    z, single = _as_batch(alpha, k, z)
    diffs, weighted, density = _shift_numerator(alpha, k, z)
    radii = np.linalg.norm(diffs, axis=-1)
    return _unbatch((weighted * radii).sum(axis=1) / density, single)


def sharp_density(alpha: Measure, k: KernelSpec, z):
    """R_{alpha,h}(z) = integral of L_h(z - y) alpha(dy)."""
    _require_laplace_empirical(alpha, k, "sharp_density")
    z, single = _as_batch(alpha, k, z)
    diffs = alpha.points[None, :, :] - z[:, None, :]
    lvals = np.asarray(sharp_kernel_eval(k, -diffs)).reshape(diffs.shape[:2])
    return _unbatch(lvals @ alpha.weights, single)


def sharp_score(alpha: Measure, k: KernelSpec, z):
    """sigma_{alpha,h}(z) = grad log R_{alpha,h}(z)."""
    _require_laplace_empirical(alpha, k, "sharp_score")
    z, single = _as_batch(alpha, k, z)
    diffs = alpha.points[None, :, :] - z[:, None, :]
    lvals = np.asarray(sharp_kernel_eval(k, -diffs)).reshape(diffs.shape[:2])
    density = lvals @ alpha.weights
    _check_denominator(density, "sharp density")
    grads = sharp_kernel_grad(k, -diffs)
    values = np.einsum('n,mnd->md', alpha.weights, grads) / density[:, None]
    return _unbatch(values, single)


def scale_factor(alpha: Measure, k: KernelSpec, z):
    """a_{alpha,h}(z) = R_{alpha,h}(z) / Q_{alpha,h}(z)."""
    _require_laplace_empirical(alpha, k, "scale_factor")
    z, single = _as_batch(alpha, k, z)
    sharp = np.atleast_1d(sharp_density(alpha, k, z))
    density = np.atleast_1d(kde_density(alpha, k, z))
    _check_denominator(density)
    return _unbatch(sharp / density, single)


def _draw_atoms(alpha: Measure, n: int, rng: np.random.Generator) -> np.ndarray:
    if isinstance(alpha, Empirical):
        idx = rng.choice(alpha.size, size=n, p=alpha.weights)
        return alpha.points[idx].copy()
    comp = rng.choice(alpha.size, size=n, p=alpha.weights)
    noise = rng.standard_normal((n, alpha.dim))
    return alpha.means[comp] + np.sqrt(alpha.variances[comp])[:, None] * noise


def _kernel_noise(k: KernelSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    h, d = k.bandwidth, k.dim
    if k.family == KernelFamily.GAUSSIAN:
        return h * rng.standard_normal((n, d))

    direction = rng.standard_normal((n, d))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    if k.family == KernelFamily.LAPLACE:
        # Radial density proportional to r^(d-1) exp(-r/h)
        radius = rng.gamma(shape=d, scale=h, size=n)
        return radius[:, None] * direction

    # Bump profile: propose r with density d r^(d-1) on [0, 1], accept with (1 - r^2)^3
    radius = np.empty(n)
    filled = 0
    while filled < n:
        batch = max(2 * (n - filled), 16)
        proposal = rng.uniform(size=batch) ** (1.0 / d)
        accept = proposal[rng.uniform(size=batch) < (1.0 - proposal ** 2) ** 3]
        take = accept[:n - filled]
        radius[filled:filled + take.size] = take
        filled += take.size
    return h * radius[:, None] * direction


def sample_measure(alpha: Measure, n: int, seed: int) -> np.ndarray:
    """n independent draws from alpha, shape (n, d)."""
    if n < 1:
        raise ValueError("Sample size must be at least 1")
    return _draw_atoms(alpha, n, np.random.default_rng(seed))


def sample_from_kde(alpha: Measure, k: KernelSpec, count: int, seed: int) -> np.ndarray:
    """Exact draws from rho_{alpha,h}: pick an atom by weight, then add kernel noise."""
    if count < 1:
        raise ValueError("Sample size must be at least 1")
    if k.dim != alpha.dim:
        raise DimensionMismatchError(f"Kernel d={k.dim} but measure d={alpha.dim}")
    rng = np.random.default_rng(seed)
    centers = _draw_atoms(alpha, count, rng)
    return centers + _kernel_noise(k, count, rng)


def sample_from_sharp_kde(alpha: Measure, k: KernelSpec, count: int, seed) -> np.ndarray:
    """
    Exact draws from R_{alpha,h} / Z_#,h for the Laplace kernel.

    The radial law of L_h is a d : 1 mixture of Gamma(d+1, h) and Gamma(d, h).
    """
    _require_laplace_empirical(alpha, k, "sample_from_sharp_kde")
    if count < 1:
        raise ValueError("Sample size must be at least 1")
    rng = np.random.default_rng(seed)
    centers = _draw_atoms(alpha, count, rng)
    d = k.dim
    shape = np.where(rng.uniform(size=count) < d / (d + 1.0), d + 1.0, float(d))
    radius = rng.gamma(shape=shape, scale=k.bandwidth)
    direction = rng.standard_normal((count, d))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    return centers + radius[:, None] * direction


def load_empirical_csv(path: str) -> Empirical:
    """
    Load an empirical measure from CSV.

    One point per row; every column except an optional 'weight' column is a
    coordinate.  Weights are renormalised to sum to one.
    """
    frame = pd.read_csv(path, float_precision='round_trip')
    if frame.empty:
        raise ValueError(f"No points in {path}")
    weights = None
    if 'weight' in frame.columns:
        weights = frame.pop('weight').to_numpy(dtype=float)
        weights = weights / weights.sum()
    logger.info(f"Loaded {len(frame)} points of dimension {frame.shape[1]} from {path}")
    return empirical(frame.to_numpy(dtype=float), weights)


def save_empirical_csv(alpha: Empirical, path: str):
    """Write an empirical measure as x_0..x_{d-1}, weight columns."""
    frame = pd.DataFrame(alpha.points, columns=[f"x_{c}" for c in range(alpha.dim)])
    frame['weight'] = alpha.weights
    frame.to_csv(path, index=False, float_format='%.17g')
    logger.debug(f"Saved {alpha.size} points to {path}")
