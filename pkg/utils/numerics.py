"""
Shared numerical oracles: grid and Monte Carlo integration, finite
differences, Hessian sup estimates and exact small-N optimal transport.

Every field or scalar function handed to these helpers is evaluated on a
batch of points of shape (m, d) and must return shape (m,) (scalar fields)
or (m, d) (vector fields).
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import simpson, trapezoid
from scipy.optimize import linear_sum_assignment, minimize_scalar
from scipy.spatial.distance import cdist

from utils.errors import AssignmentError, NonFiniteError, UnsupportedDimensionError

logger = logging.getLogger(__name__)

ScalarField = Callable[[np.ndarray], np.ndarray]
VectorField = Callable[[np.ndarray], np.ndarray]

# Relative step scales (times 1 + |z|)
FIRST_ORDER_STEP = 1e-4
HESSIAN_STEP = 1e-3
MAX_ASSIGNMENT_SIZE = 256


class QuadratureRule(str, Enum):
    TRAPEZOID = 'trapezoid'
    SIMPSON = 'simpson'


@dataclass(frozen=True)
class GridSpec:
    """Tensor grid on the box [lo, hi] with the same node count per axis."""
    lo: Tuple[float, ...]
    hi: Tuple[float, ...]
    points_per_dim: int
    rule: QuadratureRule = QuadratureRule.SIMPSON

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lo))
        hi = tuple(float(v) for v in np.atleast_1d(self.hi))
        object.__setattr__(self, 'lo', lo)
        object.__setattr__(self, 'hi', hi)
        object.__setattr__(self, 'rule', QuadratureRule(self.rule))
        if len(lo) != len(hi) or len(lo) == 0:
            raise ValueError("Grid bounds must be non-empty and of equal length")
        if any(a >= b for a, b in zip(lo, hi)):
            raise ValueError(f"Grid needs lo < hi componentwise, got {lo} and {hi}")
        if self.points_per_dim < 16:
            raise ValueError("Grid needs at least 16 points per dimension")
        if self.rule == QuadratureRule.SIMPSON and self.points_per_dim % 2 == 0:
            raise ValueError("Simpson rule needs an odd number of points per dimension")

    @property
    def dim(self) -> int:
        return len(self.lo)

    def axes(self) -> List[np.ndarray]:
        return [np.linspace(a, b, self.points_per_dim) for a, b in zip(self.lo, self.hi)]

    def nodes(self) -> np.ndarray:
        """All grid nodes as an (n^d, d) array in 'ij' order."""
        mesh = np.meshgrid(*self.axes(), indexing='ij')
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def refined(self) -> 'GridSpec':
        """Nested refinement: every old node stays a node."""
        return GridSpec(self.lo, self.hi, 2 * self.points_per_dim - 1, self.rule)

    def to_dict(self) -> dict:
        return {'lo': list(self.lo), 'hi': list(self.hi),
                'points_per_dim': self.points_per_dim, 'rule': self.rule.value}


@dataclass(frozen=True)
class QuadratureResult:
    value: float
    error: float
    mode: str = 'grid'
    coarse: bool = False


def quadrature_window(point_sets: Sequence[np.ndarray], h: float, pad: float = 6.0,
                      points_per_dim: int = 257,
                      rule: QuadratureRule = QuadratureRule.SIMPSON) -> GridSpec:
    """Bounding box of all point sets padded by pad*h on every side."""
    stacked = np.vstack([np.atleast_2d(np.asarray(p, dtype=float)) for p in point_sets])
    lo = stacked.min(axis=0) - pad * h
    hi = stacked.max(axis=0) + pad * h
    return GridSpec(tuple(lo), tuple(hi), points_per_dim, rule)


def _as_batch(z) -> Tuple[np.ndarray, bool]:
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    return np.atleast_2d(z), single


def _check_finite(values: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"Non-finite values in {what}")
    return values


def _integrate_tensor(values: np.ndarray, axes: List[np.ndarray], rule: QuadratureRule) -> float:
    out = values
    # Integrate the trailing axis first so earlier axis indices stay valid
    for axis_index in reversed(range(len(axes))):
        if rule == QuadratureRule.SIMPSON:
            out = simpson(out, x=axes[axis_index], axis=axis_index)
        else:
            out = trapezoid(out, x=axes[axis_index], axis=axis_index)
    return float(out)


def grid_integrate(f: ScalarField, grid: GridSpec) -> QuadratureResult:
    """
    Composite-rule integral of f over the grid box.

    Args:
        f: scalar field evaluated on (m, d) batches
        grid: the tensor grid

    Returns:
        QuadratureResult with value and refinement_error = |value - half-resolution value|
    """
    if grid.dim > 2:
        raise UnsupportedDimensionError(f"Grid quadrature supports d <= 2, got d={grid.dim}")
    axes = grid.axes()
    samples = np.asarray(f(grid.nodes()), dtype=float).reshape((grid.points_per_dim,) * grid.dim)
    _check_finite(samples, "grid integrand")

    value = _integrate_tensor(samples, axes, grid.rule)
    coarse_slice = tuple(slice(None, None, 2) for _ in range(grid.dim))
    coarse_value = _integrate_tensor(samples[coarse_slice], [a[::2] for a in axes], grid.rule)
    error = abs(value - coarse_value)
    logger.debug(f"Grid integral {value:.6e} (refinement error {error:.2e})")
    return QuadratureResult(value=value, error=error, mode='grid',
                            coarse=error > 0.1 * abs(value) and error > 1e-12)


def mc_integrate(f: ScalarField, sampler: Callable[[int, np.random.Generator], np.ndarray],
                 weight: ScalarField, n: int, seed: int) -> QuadratureResult:
    """Importance-sampling estimate of the integral of f with sampler density `weight`."""
    rng = np.random.default_rng(seed)
    samples = np.atleast_2d(np.asarray(sampler(n, rng), dtype=float))
    w = np.asarray(weight(samples), dtype=float)
    if np.any(w <= 0.0):
        raise NonFiniteError("Sampler density vanishes at a drawn sample")
    ratio = _check_finite(np.asarray(f(samples), dtype=float) / w, "Monte Carlo integrand")
    stderr = float(ratio.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return QuadratureResult(value=float(ratio.mean()), error=stderr, mode='mc')


def _resolve_step(points: np.ndarray, step, scale: float) -> np.ndarray:
    if step is None:
        return scale * (1.0 + np.linalg.norm(points, axis=1))
    return np.broadcast_to(np.asarray(step, dtype=float), (points.shape[0],)).copy()


def _shift(points: np.ndarray, k: int, amount: np.ndarray) -> np.ndarray:
    shifted = points.copy()
    shifted[:, k] += amount
    return shifted


def fd_gradient(f: ScalarField, z, step=None) -> np.ndarray:
    """Central-difference gradient of a scalar field."""
    points, single = _as_batch(z)
    s = _resolve_step(points, step, FIRST_ORDER_STEP)
    grad = np.empty_like(points)
    for k in range(points.shape[1]):
        plus = np.asarray(f(_shift(points, k, s)), dtype=float)
        minus = np.asarray(f(_shift(points, k, -s)), dtype=float)
        grad[:, k] = (plus - minus) / (2.0 * s)
    _check_finite(grad, "finite-difference gradient")
    return grad[0] if single else grad


def fd_jacobian(f: VectorField, z, step=None) -> np.ndarray:
    """Central-difference Jacobian J[m, i, k] = d f_i / d z_k."""
    points, single = _as_batch(z)
    s = _resolve_step(points, step, FIRST_ORDER_STEP)
    m, d = points.shape
    jac = np.empty((m, d, d))
    for k in range(d):
        plus = np.asarray(f(_shift(points, k, s)), dtype=float).reshape(m, d)
        minus = np.asarray(f(_shift(points, k, -s)), dtype=float).reshape(m, d)
        jac[:, :, k] = (plus - minus) / (2.0 * s)[:, None]
    _check_finite(jac, "finite-difference Jacobian")
    return jac[0] if single else jac


def fd_divergence(f: VectorField, z, step=None):
    """Central-difference divergence of a vector field."""
    points, single = _as_batch(z)
    s = _resolve_step(points, step, FIRST_ORDER_STEP)
    m, d = points.shape
    div = np.zeros(m)
    for k in range(d):
        plus = np.asarray(f(_shift(points, k, s)), dtype=float).reshape(m, d)[:, k]
        minus = np.asarray(f(_shift(points, k, -s)), dtype=float).reshape(m, d)[:, k]
        div += (plus - minus) / (2.0 * s)
    _check_finite(div, "finite-difference divergence")
    return float(div[0]) if single else div


def fd_hessian(f: ScalarField, z, step=None) -> np.ndarray:
    """Central-difference Hessian of a scalar field, symmetrised."""
    points, single = _as_batch(z)
    s = _resolve_step(points, step, HESSIAN_STEP)
    m, d = points.shape
    center = np.asarray(f(points), dtype=float)
    hess = np.empty((m, d, d))
    for i in range(d):
        plus = np.asarray(f(_shift(points, i, s)), dtype=float)
        minus = np.asarray(f(_shift(points, i, -s)), dtype=float)
        hess[:, i, i] = (plus - 2.0 * center + minus) / s ** 2
        for j in range(i + 1, d):
            pp = np.asarray(f(_shift(_shift(points, i, s), j, s)), dtype=float)
            pm = np.asarray(f(_shift(_shift(points, i, s), j, -s)), dtype=float)
            mp = np.asarray(f(_shift(_shift(points, i, -s), j, s)), dtype=float)
            mm = np.asarray(f(_shift(_shift(points, i, -s), j, -s)), dtype=float)
            hess[:, i, j] = (pp - pm - mp + mm) / (4.0 * s ** 2)
            hess[:, j, i] = hess[:, i, j]
    hess = 0.5 * (hess + np.swapaxes(hess, 1, 2))
    _check_finite(hess, "finite-difference Hessian")
    return hess[0] if single else hess


def stencil_reach(z, step=None, hessian: bool = False) -> float:
    """Furthest a central-difference stencil around any of the points z reaches."""
    points, _ = _as_batch(z)
    s = _resolve_step(points, step, HESSIAN_STEP if hessian else FIRST_ORDER_STEP)
    # Mixed Hessian terms step along two axes at once
    return float(s.max() * (np.sqrt(2.0) if hessian and points.shape[1] > 1 else 1.0))


def operator_norm_power(jac: np.ndarray, iters: int = 50) -> np.ndarray:
    """Largest singular value of each matrix in a (m, d, d) stack by power iteration."""
    jac = np.asarray(jac, dtype=float)
    if jac.ndim == 2:
        jac = jac[None]
    gram = np.einsum('mji,mjk->mik', jac, jac)
    d = gram.shape[-1]
    # Fixed, non-symmetric start so no common eigenvector is missed
    v = np.tile(1.0 / (np.arange(d) + 1.618033988749895), (gram.shape[0], 1))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    for _ in range(iters):
        w = np.einsum('mik,mk->mi', gram, v)
        norms = np.linalg.norm(w, axis=1, keepdims=True)
        v = np.where(norms > 0.0, w / np.where(norms > 0.0, norms, 1.0), v)
    rayleigh = np.einsum('mi,mik,mk->m', v, gram, v)
    return np.sqrt(np.maximum(rayleigh, 0.0))


def hessian_sup_estimate(f: ScalarField, grid: GridSpec, step=None,
                         mask: Optional[np.ndarray] = None) -> float:
    """Max over grid nodes (those selected by mask, if given) of the finite-difference Hessian norm."""
    if grid.dim > 2:
        raise UnsupportedDimensionError(f"Hessian sup estimate supports d <= 2, got d={grid.dim}")
    nodes = grid.nodes() if mask is None else grid.nodes()[mask]
    if nodes.shape[0] == 0:
        raise ValueError("No grid nodes left for the Hessian sup estimate")
    hess = fd_hessian(f, nodes, step)
    norms = np.abs(np.linalg.eigvalsh(hess)).max(axis=1)
    return float(norms.max())


def exact_w2_empirical(a, b) -> float:
    """W2 between two uniform empirical measures of equal size via exact assignment."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape != b.shape:
        raise AssignmentError(f"Point sets differ in shape: {a.shape} vs {b.shape}")
    if a.shape[0] > MAX_ASSIGNMENT_SIZE:
        raise AssignmentError(f"Exact assignment limited to {MAX_ASSIGNMENT_SIZE} points")
    cost = cdist(a, b, metric='sqeuclidean')
    try:
        rows, cols = linear_sum_assignment(cost)
    except ValueError as e:
        raise AssignmentError(f"Assignment solver failed: {str(e)}") from e
    return float(np.sqrt(cost[rows, cols].mean()))


def numeric_minimize_scalar(f: Callable[[float], float], lo: float, hi: float) -> float:
    """Bounded scalar minimiser over [lo, hi], searched in log-space."""
    result = minimize_scalar(lambda t: f(float(np.exp(t))), bounds=(np.log(lo), np.log(hi)),
                             method='bounded', options={'xatol': 1e-12, 'maxiter': 2000})
    return float(np.exp(result.x))
