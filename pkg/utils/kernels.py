"""
Radial smoothing kernels with bandwidth scaling.

Three families are supported: Gaussian, Laplace (exp(-|u|)) and a compactly
supported bump proportional to (1 - |u|^2)^3.  A KernelSpec carries the base
kernel constants; the bandwidth-h kernel is K_h(u) = h^-d K(u/h).

All evaluation functions accept one vector of shape (d,) or a batch of shape
(..., d).
"""
import logging
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy.integrate import quad
from scipy.special import gamma, gammaincc

from utils.errors import DimensionMismatchError, KernelDomainError, UnsupportedFamilyError

logger = logging.getLogger(__name__)

# Radial cut-off (in units of h) for the adaptive quadrature; the rest is analytic
RADIAL_CUTOFF = 40.0


class KernelFamily(str, Enum):
    GAUSSIAN = 'gaussian'
    LAPLACE = 'laplace'
    SMOOTH_COMPACT = 'smooth_compact'


@dataclass(frozen=True)
class KernelSpec:
    """
    Kernel family, dimension and bandwidth with derived base constants.

    normalizer is K(0) of the base kernel: (2 pi)^(-d/2) for the Gaussian,
    c_d for the Laplace kernel and the bump constant otherwise.  lap_at_zero is
    the base Laplacian at the origin (NaN for Laplace, where it does not exist).
    """
    family: KernelFamily
    dim: int
    bandwidth: float
    normalizer: float
    lap_at_zero: float
    m1_base: float
    m2_base: float

    @property
    def h(self) -> float:
        return self.bandwidth

    def to_dict(self) -> dict:
        return {'family': self.family.value, 'dim': self.dim, 'bandwidth': self.bandwidth,
                'normalizer': self.normalizer, 'lap_at_zero': self.lap_at_zero,
                'm1_base': self.m1_base, 'm2_base': self.m2_base}


def _profile(family: KernelFamily, r: np.ndarray) -> np.ndarray:
    """Unnormalised radial profile of the base kernel."""
    if family == KernelFamily.GAUSSIAN:
        return np.exp(-0.5 * r ** 2)
    if family == KernelFamily.LAPLACE:
        return np.exp(-r)
    return np.where(r < 1.0, np.clip(1.0 - r ** 2, 0.0, None) ** 3, 0.0)


def _sphere_area(dim: int) -> float:
    return float(2.0 * np.pi ** (dim / 2.0) / gamma(dim / 2.0))


@lru_cache(maxsize=None)
def _radial_integral(family: KernelFamily, dim: int, power: int) -> float:
    """Integral over r >= 0 of r^(d-1+power) times the unnormalised profile."""
    exponent = dim - 1 + power
    if family == KernelFamily.SMOOTH_COMPACT:
        value, _ = quad(lambda r: r ** exponent * (1.0 - r * r) ** 3, 0.0, 1.0,
                        epsabs=0.0, epsrel=1e-13, limit=200)
        return value

    value, _ = quad(lambda r: r ** exponent * float(_profile(family, np.asarray(r))), 0.0,
                    RADIAL_CUTOFF, epsabs=0.0, epsrel=1e-13, limit=400)
    # Analytic tail beyond the cut-off
    if family == KernelFamily.LAPLACE:
        shape = exponent + 1.0
        tail = gamma(shape) * gammaincc(shape, RADIAL_CUTOFF)
    else:
        shape = (exponent + 1.0) / 2.0
        tail = 2.0 ** (shape - 1.0) * gamma(shape) * gammaincc(shape, 0.5 * RADIAL_CUTOFF ** 2)
    return float(value + tail)


@lru_cache(maxsize=None)
def _base_normalizer(family: KernelFamily, dim: int) -> float:
    if family == KernelFamily.GAUSSIAN:
        return float((2.0 * np.pi) ** (-dim / 2.0))
    return 1.0 / (_sphere_area(dim) * _radial_integral(family, dim, 0))


@lru_cache(maxsize=None)
def _base_moment(family: KernelFamily, dim: int, order: int) -> float:
    if family == KernelFamily.GAUSSIAN and order == 2:
        return float(dim)
    if family == KernelFamily.GAUSSIAN and order == 1:
        return float(np.sqrt(2.0) * gamma((dim + 1) / 2.0) / gamma(dim / 2.0))
    return _sphere_area(dim) * _base_normalizer(family, dim) * _radial_integral(family, dim, order)


def make_kernel(family, dim: int, bandwidth: float) -> KernelSpec:
    """Build a KernelSpec, computing the base constants once per (family, dim)."""
    family = KernelFamily(family)
    if int(dim) != dim or dim < 1:
        raise ValueError(f"Kernel dimension must be a positive integer, got {dim}")
    if not np.isfinite(bandwidth) or bandwidth <= 0:
        raise ValueError(f"Bandwidth must be positive, got {bandwidth}")
    dim = int(dim)

    normalizer = _base_normalizer(family, dim)
    if family == KernelFamily.GAUSSIAN:
        lap_at_zero = -dim * normalizer
    elif family == KernelFamily.SMOOTH_COMPACT:
        # c (1 - r^2)^3 = c (1 - 3 r^2 + ...) near the origin
        lap_at_zero = -6.0 * dim * normalizer
    else:
        lap_at_zero = float('nan')

    spec = KernelSpec(family=family, dim=dim, bandwidth=float(bandwidth), normalizer=normalizer,
                      lap_at_zero=lap_at_zero, m1_base=_base_moment(family, dim, 1),
                      m2_base=_base_moment(family, dim, 2))
    logger.debug(f"Built kernel {spec}")
    return spec


def _check_dim(k: KernelSpec, u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.ndim == 0 or u.shape[-1] != k.dim:
        raise DimensionMismatchError(f"Expected vectors of dimension {k.dim}, got shape {u.shape}")
    return u


def _require_laplace(k: KernelSpec, operation: str):
    if k.family != KernelFamily.LAPLACE:
        raise UnsupportedFamilyError(f"{operation} is only defined for the Laplace kernel")


def _scalar_or_array(values: np.ndarray):
    return float(values) if np.ndim(values) == 0 else values


def eval_kernel(k: KernelSpec, u):
    """K_h(u)."""
    u = _check_dim(k, u)
    h = k.bandwidth
    r = np.linalg.norm(u, axis=-1) / h
    return _scalar_or_array(k.normalizer * h ** (-k.dim) * _profile(k.family, r))


def grad_kernel(k: KernelSpec, u) -> np.ndarray:
    """Analytic gradient of K_h at u."""
    u = _check_dim(k, u)
    h = k.bandwidth
    values = np.asarray(eval_kernel(k, u))

    if k.family == KernelFamily.GAUSSIAN:
        return -(u / h ** 2) * values[..., None]

    r = np.linalg.norm(u, axis=-1)
    if k.family == KernelFamily.LAPLACE:
        if np.any(r == 0.0):
            raise KernelDomainError("Laplace kernel not differentiable at origin")
        return -(values / (h * r))[..., None] * u

    s = r / h
    inside = np.where(s < 1.0, (1.0 - s ** 2) ** 2, 0.0)
    return -6.0 * k.normalizer * h ** (-k.dim - 2) * inside[..., None] * u


def kernel_at_zero(k: KernelSpec) -> float:
    """K_h(0) = h^-d K(0)."""
    return k.normalizer * k.bandwidth ** (-k.dim)


def laplacian_at_zero(k: KernelSpec) -> float:
    """Delta K_h(0) = h^(-d-2) Delta K(0)."""
    if k.family == KernelFamily.LAPLACE:
        raise UnsupportedFamilyError("Laplace kernel has no Laplacian at the origin")
    return k.bandwidth ** (-k.dim - 2) * k.lap_at_zero


def kernel_moment(k: KernelSpec, order: int) -> float:
    """m_p(K_h) = h^p m_p(K)."""
    if int(order) != order or order < 1:
        raise ValueError(f"Moment order must be a positive integer, got {order}")
    order = int(order)
    if order == 1:
        base = k.m1_base
    elif order == 2:
        base = k.m2_base
    else:
        base = _base_moment(k.family, k.dim, order)
    return k.bandwidth ** order * base


def support_radius(k: KernelSpec) -> Optional[float]:
    """Radius of the kernel support, h for the compact bump; None when the support is everything."""
    if k.family == KernelFamily.SMOOTH_COMPACT:
        return k.bandwidth
    return None


def kernel_lower_bound(k: KernelSpec, r_k: float) -> float:
    """Largest kappa with K(u) >= kappa on |u| <= r_k (base kernel scale)."""
    if r_k <= 0:
        raise ValueError("r_K must be positive")
    return float(k.normalizer * _profile(k.family, np.asarray(float(r_k))))


def sharp_kernel_eval(k: KernelSpec, u):
    """Companion kernel L_h(u) = h(|u| + h) K_h(u)."""
    _require_laplace(k, "sharp_kernel_eval")
    u = _check_dim(k, u)
    h = k.bandwidth
    r = np.linalg.norm(u, axis=-1)
    return _scalar_or_array(h * (r + h) * np.asarray(eval_kernel(k, u)))


def sharp_kernel_grad(k: KernelSpec, u) -> np.ndarray:
    """Gradient of L_h, equal to -u K_h(u); zero at the origin."""
    _require_laplace(k, "sharp_kernel_grad")
    u = _check_dim(k, u)
    return -u * np.asarray(eval_kernel(k, u))[..., None]


def sharp_normalizer(k: KernelSpec) -> float:
    """Z_#,h = integral of L_h = h (m_1(K_h) + h)."""
    _require_laplace(k, "sharp_normalizer")
    h = k.bandwidth
    return h * (kernel_moment(k, 1) + h)


def sharp_second_moment(k: KernelSpec) -> float:
    """Second moment of the normalised companion kernel L_h / Z_#,h."""
    _require_laplace(k, "sharp_second_moment")
    h = k.bandwidth
    return h * (kernel_moment(k, 3) + h * kernel_moment(k, 2)) / sharp_normalizer(k)
