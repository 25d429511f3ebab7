"""
Scalar diagnostics of a particle configuration: velocity and Stein
functionals, reciprocal-KDE and occupancy checks, rate right-hand sides,
coercivity constants and the one-step transport check.
"""
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import trapezoid
from sklearn.neighbors import BallTree

from utils.dynamics import Trajectory
from utils.errors import (InvariantViolation, OrderingError, RegimeError, SingularDenominatorError,
                          UnsupportedCombinationError, UnsupportedDimensionError, UnsupportedFamilyError)
from utils.fields import (FieldKind, FieldSpec, conservative_field, curl2d, full_laplace_field,
                          laplace_loo_field, particle_velocities, scale_residual_field,
                          sharp_mismatch_field, stein_divergence, velocity_field)
from utils.kernels import (KernelFamily, KernelSpec, kernel_at_zero, kernel_lower_bound,
                           sharp_normalizer, sharp_second_moment, support_radius)
from utils.measures import (DENSITY_FLOOR, Empirical, GaussianMixture, Measure, ParticleConfig,
                            as_measure, kde_density, kde_score, log_kde_density, mean_shift,
                            mixture_log_density, sample_from_kde, sample_from_sharp_kde,
                            scale_factor, sharp_density, sharp_score)
from utils.numerics import (GridSpec, QuadratureResult, QuadratureRule, grid_integrate,
                            hessian_sup_estimate, mc_integrate, quadrature_window,
                            exact_w2_empirical, stencil_reach)

logger = logging.getLogger(__name__)

DEFAULT_MC_BUDGET = 20000
# Relative distance kept from the rim of a compact kernel support
SUPPORT_MARGIN = 1e-6
SELF_BOUND_RTOL = 1e-12
# Window pad, in units of h, for the Hessian sup behind B_A and B_V
HESSIAN_WINDOW_PAD = 3.0
# A conservative field is curl-free up to this; the Laplace displacement field is not
CURL_FLAT_TOL = 1e-4
CURL_CONTRAST = 10.0


@dataclass
class DiagnosticsRecord:
    t: float
    v_n: float
    s_n: float
    r_n: float
    min_q: float
    occupancy_min: int
    i_n: Optional[float] = None
    i_n_error: Optional[float] = None
    curl_max_abs: Optional[float] = None
    v_n_lap: Optional[float] = None
    s_n_lap: Optional[float] = None
    j_lap: Optional[float] = None
    vcal_lap: Optional[float] = None
    delta_sq: Optional[float] = None

    def to_row(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DiagnosticsOptions:
    """Which optional diagnostics compute_record evaluates, and how finely."""
    i_n: bool = False
    curl: bool = False
    laplace_population: bool = False
    r_k: float = 1.0
    grid_points: int = 257
    curl_points: int = 41
    mc_budget: Optional[int] = None
    fd_step: Optional[float] = None
    seed: int = 0


@dataclass(frozen=True)
class RateInputs:
    """Constants entering the rate right-hand sides."""
    kappa0: float = 0.0
    a1: float = 0.0
    Lambda: float = 1.0
    B_A: float = 0.0
    B_V: float = 0.0
    m2_base: float = 1.0
    N: int = 1
    T: float = 1.0
    h: float = 1.0
    d: int = 1
    beta: float = 0.0
    A_const: float = 1.0
    C_const: float = 1.0
    gamma_h: float = 0.0
    beta_h: float = 0.0
    Delta_sq: float = 0.0
    eps_S: float = 0.0
    eps_V: float = 0.0


@dataclass(frozen=True)
class ConservativeRate:
    entropy_term: float
    self_term: float
    quad_term: float
    total: float


@dataclass(frozen=True)
class LaplaceRate:
    entropy_term: float
    delta_term: float
    epsS_term: float
    epsV_term: float
    total: float


@dataclass(frozen=True)
class BandwidthChoice:
    h_star: float
    variance_term: float
    bias_term: float
    rate_value: float
    squared_exponent: float
    root_exponent: float
    eta_star: float


@dataclass(frozen=True)
class OccupancyReport:
    holds: bool
    min_q: float
    bound: float
    r_n: float
    r_n_bound: float
    false_certificate: bool = False


@dataclass(frozen=True)
class TrajectoryOccupancy:
    premise_holds: bool
    max_r_n: float
    bound: float
    holds_all: bool


@dataclass(frozen=True)
class W2Report:
    coupling_bound: float
    exact_w2: float
    holds: bool


@dataclass(frozen=True)
class SteinIdentity:
    lhs: float
    lhs_error: float
    rhs: float
    rhs_error: float


@dataclass(frozen=True)
class QuadratureConstants:
    B_A: float
    B_V: float
    window: dict


@dataclass(frozen=True)
class LaplacePopulation:
    j_lap: float
    vcal_lap: float
    delta_sq: float
    j_projection: float
    lambda_h: float
    L_h: float
    window: dict
    errors: Dict[str, float] = field(default_factory=dict)


def _target_points(target: Measure) -> List[np.ndarray]:
    if isinstance(target, Empirical):
        return [target.points]
    spread = np.sqrt(target.variances)[:, None]
    return [target.means - 6.0 * spread, target.means + 6.0 * spread]


def default_window(config: ParticleConfig, target: Measure, k: KernelSpec, points_per_dim: int = 257,
                   pad: float = 6.0, rule: QuadratureRule = QuadratureRule.SIMPSON) -> GridSpec:
    """Bounding box of particles and target mass, padded by pad * h."""
    return quadrature_window([config.positions] + _target_points(target), k.bandwidth, pad,
                             points_per_dim, rule)


def support_mask(measures: Sequence[Measure], k: KernelSpec, nodes, reach: float = 0.0) -> np.ndarray:
    """
    Nodes lying at least reach inside the KDE support of every empirical measure.

    Only compactly supported kernels have a support to leave; for the others
    every node is kept.
    """
    nodes = np.atleast_2d(np.asarray(nodes, dtype=float))
    mask = np.ones(nodes.shape[0], dtype=bool)
    radius = support_radius(k)
    if radius is None:
        return mask
    # Keep clear of the rim, where (1 - r^2)^3 underflows the density floor
    limit = radius * (1.0 - SUPPORT_MARGIN) - reach
    for alpha in measures:
        if isinstance(alpha, Empirical):
            dist, _ = BallTree(alpha.points).query(nodes, k=1)
            mask &= dist[:, 0] < limit
    return mask


def _on_support(f: Callable[[np.ndarray], np.ndarray], measures: Sequence[Measure], k: KernelSpec,
                reach: float = 0.0) -> Callable[[np.ndarray], np.ndarray]:
    """Scalar integrand f on supported nodes and 0 elsewhere."""
    def restricted(z):
        z = np.atleast_2d(np.asarray(z, dtype=float))
        out = np.zeros(z.shape[0])
        inside = support_mask(measures, k, z, reach)
        if inside.any():
            out[inside] = f(z[inside])
        return out
    return restricted


def supported_curl_map(config: ParticleConfig, spec: FieldSpec, grid: GridSpec,
                       fd_step=None) -> Tuple[np.ndarray, np.ndarray]:
    """Curl map of the full-configuration field; NaN at nodes where the field is undefined."""
    if grid.dim != 2:
        raise UnsupportedDimensionError(f"Curl maps need a planar grid, got d={grid.dim}")
    nodes = grid.nodes()
    curls = np.full(nodes.shape[0], np.nan)
    inside = support_mask([as_measure(config), spec.target], spec.kernel, nodes, stencil_reach(nodes, fd_step))
    if inside.any():
        curls[inside] = curl2d(population_field(spec, config), nodes[inside], fd_step)
    return nodes, curls


def max_abs_curl(curls: np.ndarray) -> Optional[float]:
    finite = np.abs(curls[np.isfinite(curls)])
    return float(finite.max()) if finite.size else None


def curl_contrast(conservative_max: Optional[float], laplace_max: Optional[float]) -> dict:
    """
    Compare the curl of the conservative field with that of the Laplace displacement field.

    Passes when the conservative curl stays below CURL_FLAT_TOL and the Laplace
    curl is at least CURL_CONTRAST times larger.
    """
    if conservative_max is None or laplace_max is None:
        return {'curl_contrast': None, 'curl_contrast_ok': False}
    ratio = laplace_max / conservative_max if conservative_max > 0 else None
    ok = conservative_max <= CURL_FLAT_TOL and laplace_max >= CURL_CONTRAST * conservative_max
    return {'curl_contrast': ratio, 'curl_contrast_ok': bool(ok)}


def reference_score(spec: FieldSpec) -> Callable[[np.ndarray], np.ndarray]:
    """s_rho for smooth kernels, sigma_nu for the Laplace kernel."""
    if spec.kernel.family == KernelFamily.LAPLACE:
        return lambda z: sharp_score(spec.target, spec.kernel, z)
    return lambda z: kde_score(spec.target, spec.kernel, z)


def population_field(spec: FieldSpec, config: ParticleConfig) -> Callable[[np.ndarray], np.ndarray]:
    """The full-configuration field b_x (conservative) or u_x (displacement)."""
    if spec.kind == FieldKind.CONSERVATIVE:
        return lambda z: conservative_field(spec, config, z)
    model = as_measure(config)
    return lambda z: mean_shift(spec.target, spec.kernel, z) - mean_shift(model, spec.kernel, z)


def v_n(config: ParticleConfig, field_spec: FieldSpec) -> float:
    """Mean squared particle speed (1/N) sum |v_x(x_i)|^2."""
    v = particle_velocities(field_spec, config)
    return float(np.mean(np.sum(v ** 2, axis=1)))


def s_n(config: ParticleConfig, field_spec: FieldSpec, fd_step=None) -> float:
    """Particle average of the Stein divergence of the drift."""
    score_ref = reference_score(field_spec)
    if not field_spec.is_leave_one_out:
        values = stein_divergence(velocity_field(field_spec, config), score_ref, config.positions, fd_step)
        return float(np.mean(values))
    values = [stein_divergence(velocity_field(field_spec, config, i), score_ref, config.positions[i], fd_step)
              for i in range(config.n)]
    return float(np.mean(values))


def i_n(config: ParticleConfig, field_spec: FieldSpec, grid: Optional[GridSpec] = None,
        mc_budget: Optional[int] = None, seed: int = 0) -> QuadratureResult:
    """
    Smoothed Fisher discrepancy: integral of |b_x|^2 q_x.

    Args:
        config: particle configuration
        field_spec: field specification (full-configuration field is integrated)
        grid: quadrature grid (d <= 2); a default window is used when both grid and mc_budget are None
        mc_budget: number of Monte Carlo samples drawn from q_x
        seed: Monte Carlo seed

    Returns:
        QuadratureResult with value and error estimate
    """
    k = field_spec.kernel
    model = as_measure(config)
    b = population_field(field_spec, config)
    if grid is None and mc_budget is None:
        if config.dim <= 2:
            grid = default_window(config, field_spec.target, k)
        else:
            mc_budget = DEFAULT_MC_BUDGET

    if grid is not None:
        # q_x vanishes off a compact kernel's support, and so does the integrand
        integrand = _on_support(lambda z: np.sum(b(z) ** 2, axis=1) * kde_density(model, k, z), [model], k)
        result = grid_integrate(integrand, grid)
    else:
        # Sampling from q_x makes the importance weight exact
        result = mc_integrate(lambda z: np.sum(b(z) ** 2, axis=1) * kde_density(model, k, z),
                              lambda n, rng: sample_from_kde(model, k, n, rng),
                              lambda z: kde_density(model, k, z), mc_budget, seed)
    if result.coarse:
        logger.warning(f"I_N quadrature coarse: value {result.value:.4e}, error {result.error:.2e}")
    return result


def r_n(config: ParticleConfig, k: KernelSpec) -> Tuple[float, float]:
    """
    Reciprocal KDE (1/N) sum 1/q_x(x_i) and min_i q_x(x_i).

    Every value is checked against the self-bound N h^d / K(0); a breach
    raises InvariantViolation.
    """
    q = np.asarray(kde_density(as_measure(config), k, config.positions))
    bad = np.flatnonzero(~(q >= DENSITY_FLOOR))
    if bad.size:
        raise SingularDenominatorError(f"q_x underflowed at particle {bad[0]}", particle=int(bad[0]))
    reciprocal = float(np.mean(1.0 / q))
    check_self_bound(reciprocal, config.n, k)
    return reciprocal, float(q.min())


def reciprocal_self_bound(n: int, k: KernelSpec) -> float:
    """N h^d / K(0), the bound R_N never exceeds."""
    return n / kernel_at_zero(k)


def check_self_bound(reciprocal: float, n: int, k: KernelSpec) -> float:
    """Raise InvariantViolation unless R_N <= N h^d / K(0); returns the bound."""
    bound = reciprocal_self_bound(n, k)
    if not reciprocal <= bound * (1.0 + SELF_BOUND_RTOL):
        raise InvariantViolation(f"Reciprocal KDE {reciprocal:.6e} exceeds self-bound {bound:.6e}")
    return bound


def occupancy_counts(config: ParticleConfig, h: float, r_k: float) -> np.ndarray:
    """Neighbours within r_K h of each particle, the particle itself included."""
    if not r_k > 0:
        raise ValueError("r_K must be positive")
    tree = BallTree(config.positions)
    return tree.query_radius(config.positions, r=r_k * h, count_only=True).astype(int)


def occupancy_implication_check(config: ParticleConfig, k: KernelSpec, r_k: float, kappa_k: float,
                                alpha: float, leave_one_out: bool = False) -> OccupancyReport:
    """
    Local occupancy certificate for the KDE denominators.

    If every particle has at least alpha N h^d neighbours within r_K h, then
    min_i q_x(x_i) >= kappa_K alpha.  With leave_one_out the count excludes the
    particle itself, the threshold is alpha (N - 1) h^d and the denominator is
    the leave-one-out KDE.
    """
    if kappa_k <= 0 or kappa_k > kernel_lower_bound(k, r_k) * (1.0 + 1e-12):
        raise ValueError(f"kappa_K={kappa_k} is not a valid kernel lower bound at r_K={r_k}")
    h, n = k.bandwidth, config.n
    counts = occupancy_counts(config, h, r_k)
    model = as_measure(config)
    q = np.asarray(kde_density(model, k, config.positions))
    if leave_one_out:
        counts = counts - 1
        threshold = alpha * (n - 1) * h ** k.dim
        q = (n * q - kernel_at_zero(k)) / (n - 1)
    else:
        threshold = alpha * n * h ** k.dim

    holds = bool(np.all(counts >= threshold))
    bound = kappa_k * alpha
    min_q = float(q.min())
    with np.errstate(divide='ignore'):
        r_value = float(np.mean(1.0 / q))
    false_certificate = holds and min_q < bound * (1.0 - 1e-12)
    if false_certificate:
        logger.error(f"Occupancy certificate failed: min q {min_q:.6e} < {bound:.6e}")
    return OccupancyReport(holds=holds, min_q=min_q, bound=bound, r_n=r_value,
                           r_n_bound=1.0 / bound, false_certificate=false_certificate)


def chernoff_occupancy_bound(p0: float, N: int, h: float, d: int, gamma_t: float = 0.0) -> float:
    """min(1, N exp(-p0 N h^d e^(-d Gamma) / 16))."""
    if N < 2:
        raise ValueError("Chernoff occupancy bound needs N >= 2")
    if not 0 < p0 <= 1:
        raise ValueError("p0 must lie in (0, 1]")
    return float(min(1.0, N * np.exp(-p0 * N * h ** d * np.exp(-d * gamma_t) / 16.0)))


def expected_reciprocal_bound(kappa_k: float, p0: float, N: int, h: float, d: int, K0: float,
                              gamma_t: float = 0.0) -> float:
    """Bound on E[sup_t R_N] for i.i.d. initial particles, usable as Lambda_T."""
    growth = np.exp(d * gamma_t)
    tail = (N * h ** d / K0) * N * np.exp(-p0 * N * h ** d / growth / 16.0)
    return float(4.0 * growth / (kappa_k * p0) + tail)


def trajectory_occupancy_check(traj: Trajectory, k: KernelSpec, r_k: float, kappa_k: float,
                               alpha: float, gamma_t: float) -> TrajectoryOccupancy:
    """Shrunken-radius initial occupancy and, when it holds, R_N along the run."""
    h, n, d = k.bandwidth, traj.n, k.dim
    shrink = np.exp(-gamma_t)
    counts = occupancy_counts(traj.states[0], h * shrink, r_k)
    premise = bool(np.all(counts >= alpha * n * h ** d * shrink ** d))
    bound = float(np.exp(d * gamma_t) / (kappa_k * alpha))
    max_r = max(r_n(state, k)[0] for state in traj.states)
    holds_all = (not premise) or max_r <= bound * (1.0 + 1e-12)
    if premise and not holds_all:
        logger.warning(f"Trajectory reciprocal KDE {max_r:.4e} exceeds {bound:.4e}")
    return TrajectoryOccupancy(premise_holds=premise, max_r_n=float(max_r), bound=bound,
                               holds_all=bool(holds_all))


def coercivity_constants(lambda_h: float, L_h: float) -> Tuple[float, float]:
    """gamma = lambda / (4 L^2), beta = lambda / (2 L^2) + 1 / (2 lambda)."""
    if not (0 < lambda_h <= L_h):
        raise OrderingError(f"Need 0 < lambda <= L, got lambda={lambda_h}, L={L_h}")
    return lambda_h / (4.0 * L_h ** 2), lambda_h / (2.0 * L_h ** 2) + 1.0 / (2.0 * lambda_h)


def shell_alignment_bounds(h: float, r_minus: float, r_plus: float, G: float,
                           delta_r: float) -> Tuple[float, float, float]:
    """(lambda, L, Delta^2 bound) from shell radii, score bound G and radius mismatch."""
    return h * (r_minus + h), h * (r_plus + h), h ** 2 * G ** 2 * delta_r ** 2


def rate_rhs_conservative(inputs: RateInputs) -> ConservativeRate:
    """Entropy, self-interaction and quadrature terms of the conservative rate."""
    entropy = inputs.kappa0 / inputs.T
    self_term = inputs.a1 * inputs.Lambda / (inputs.N * inputs.h ** (inputs.d + 2))
    quad = 0.5 * (inputs.B_A + inputs.B_V) * inputs.m2_base * inputs.h ** 2
    return ConservativeRate(entropy, self_term, quad, entropy + self_term + quad)


def root_rate_conservative(inputs: RateInputs) -> float:
    """Root form: sqrt(entropy) + sqrt(self) + h sqrt((B_A + B_V) m_2 / 2)."""
    rate = rate_rhs_conservative(inputs)
    return float(np.sqrt(rate.entropy_term) + np.sqrt(rate.self_term)
                 + inputs.h * np.sqrt(0.5 * (inputs.B_A + inputs.B_V) * inputs.m2_base))


def rate_rhs_laplace(inputs: RateInputs) -> LaplaceRate:
    """Four-term right-hand side of the Laplace drift rate."""
    if not inputs.gamma_h > 0:
        raise RegimeError("Coercivity constant gamma_h must be positive")
    g = inputs.gamma_h
    entropy = inputs.kappa0 / (g * inputs.N)
    delta = inputs.beta_h / g * inputs.Delta_sq
    eps_s = inputs.eps_S / g
    return LaplaceRate(entropy, delta, eps_s, inputs.eps_V, entropy + delta + eps_s + inputs.eps_V)


def optimal_bandwidth(A: float, C: float, beta: float, d: int, N: int) -> BandwidthChoice:
    """Minimiser of A / (N h^(d+2)) + C h^(2-beta) and the optimised rate."""
    if beta >= 2:
        raise RegimeError("Quadrature term h^(2-beta) does not vanish for beta >= 2")
    if A <= 0 or C <= 0 or N < 1:
        raise ValueError("A, C and N must be positive")
    base = (d + 2) * A / ((2.0 - beta) * C * N)
    exponent = d + 4.0 - beta
    h = base ** (1.0 / exponent)
    squared = (2.0 - beta) / exponent
    return BandwidthChoice(h_star=h, variance_term=A / (N * h ** (d + 2)), bias_term=C * h ** (2.0 - beta),
                           rate_value=exponent / (d + 2) * C * base ** squared,
                           squared_exponent=squared, root_exponent=0.5 * squared, eta_star=h ** 2)


def laplace_occupancy_bandwidth(N: int, d: int) -> float:
    """h_N = (log N / N)^(1/d)."""
    if N < 2:
        raise ValueError("Need N >= 2")
    return float((np.log(N) / N) ** (1.0 / d))


def laplace_quadrature_errors(B_phi: float, B_psi: float, k: KernelSpec, ell_s: float,
                              ell_v: float) -> Tuple[float, float]:
    """eps_S and eps_V from the sharp second moment and the leave-one-out errors."""
    m2_sharp = sharp_second_moment(k)
    return 0.5 * B_phi * m2_sharp + ell_s, 0.5 * B_psi * m2_sharp + ell_v


def one_step_w2_check(config: ParticleConfig, field_spec: FieldSpec, eta: float) -> W2Report:
    """Exact W2 of one frozen Euler step against the identity-coupling bound eta sqrt(V_N)."""
    v = particle_velocities(field_spec, config)
    bound = eta * float(np.sqrt(np.mean(np.sum(v ** 2, axis=1))))
    exact = exact_w2_empirical(config.positions, config.positions + eta * v)
    return W2Report(coupling_bound=bound, exact_w2=exact, holds=exact <= bound + 1e-12)


def loo_errors(config: ParticleConfig, target: Measure, k: KernelSpec, fd_step=None) -> Tuple[float, float]:
    """Average leave-one-out gaps of the sharp Stein drift and of the squared speed."""
    if k.family != KernelFamily.LAPLACE:
        raise UnsupportedFamilyError("Leave-one-out errors are defined for the Laplace kernel")
    spec = FieldSpec(FieldKind.LAPLACE_LOO, target, k)
    score_ref = reference_score(spec)
    full = lambda z: full_laplace_field(spec, config, z)
    ell_s, ell_v = [], []
    for i in range(config.n):
        x_i = config.positions[i]
        loo = lambda z, i=i: laplace_loo_field(spec, config, i, z)
        ell_s.append(abs(stein_divergence(loo, score_ref, x_i, fd_step)
                         - stein_divergence(full, score_ref, x_i, fd_step)))
        ell_v.append(abs(float(np.sum(loo(x_i) ** 2)) - float(np.sum(full(x_i) ** 2))))
    return float(np.mean(ell_s)), float(np.mean(ell_v))


def laplace_population_pair(config: ParticleConfig, target: Measure, k: KernelSpec,
                            grid: Optional[GridSpec] = None, mc_budget: Optional[int] = None,
                            seed: int = 0, fd_step=None) -> LaplacePopulation:
    """
    Sharp-smoothed Stein drift J, drift energy V and residual energy Delta^2.

    All three integrate against rho^#_x = R_{x,h} / Z_#,h with the
    full-configuration field u_x.  j_projection is the integral of b^# . u_x,
    which equals J by the sharp-smoothed Stein identity.  (lambda, L) are the
    min / max of a_{x,h} over the window.
    """
    if k.family != KernelFamily.LAPLACE:
        raise UnsupportedFamilyError("Laplace population functionals need the Laplace kernel")
    if not isinstance(target, Empirical):
        raise UnsupportedCombinationError("Laplace population functionals need an empirical target")
    spec = FieldSpec(FieldKind.LAPLACE_LOO, target, k)
    model = as_measure(config)
    z_sharp = sharp_normalizer(k)
    u = lambda z: full_laplace_field(spec, config, z)
    score_ref = reference_score(spec)

    integrands = {
        'j_lap': lambda z: stein_divergence(u, score_ref, z, fd_step),
        'vcal_lap': lambda z: np.sum(u(z) ** 2, axis=1),
        'delta_sq': lambda z: np.sum(scale_residual_field(spec, config, z) ** 2, axis=1),
        'j_projection': lambda z: np.sum(sharp_mismatch_field(spec, config, z) * u(z), axis=1),
    }
    if grid is None and mc_budget is None:
        grid = default_window(config, target, k)

    values, errors = {}, {}
    if grid is not None:
        density = lambda z: sharp_density(model, k, z) / z_sharp
        for name, f in integrands.items():
            result = grid_integrate(lambda z, f=f: f(z) * density(z), grid)
            values[name], errors[name] = result.value, result.error
        nodes = grid.nodes()
        window = grid.to_dict()
    else:
        nodes = sample_from_sharp_kde(model, k, mc_budget, seed)
        for name, f in integrands.items():
            samples = np.asarray(f(nodes), dtype=float)
            values[name] = float(samples.mean())
            errors[name] = float(samples.std(ddof=1) / np.sqrt(mc_budget))
        window = {'mode': 'mc', 'samples': mc_budget, 'seed': seed}

    a = np.asarray(scale_factor(model, k, nodes))
    logger.debug(f"Laplace population: {values}")
    return LaplacePopulation(j_lap=values['j_lap'], vcal_lap=values['vcal_lap'],
                             delta_sq=values['delta_sq'], j_projection=values['j_projection'],
                             lambda_h=float(a.min()), L_h=float(a.max()), window=window, errors=errors)


def kde_stein_identity(config: ParticleConfig, spec: FieldSpec, grid: Optional[GridSpec] = None,
                       fd_step=None) -> SteinIdentity:
    """Both sides of: integral of (A_rho b_x) q_x equals I_N."""
    if spec.kind != FieldKind.CONSERVATIVE:
        raise ValueError("The KDE-averaged Stein identity concerns the conservative field")
    k = spec.kernel
    model = as_measure(config)
    if grid is None:
        grid = default_window(config, spec.target, k)
    b = population_field(spec, config)
    score_ref = reference_score(spec)
    integrand = _on_support(lambda z: stein_divergence(b, score_ref, z, fd_step) * kde_density(model, k, z),
                            [model], k, stencil_reach(grid.nodes(), fd_step))
    lhs = grid_integrate(integrand, grid)
    rhs = i_n(config, spec, grid)
    return SteinIdentity(lhs=lhs.value, lhs_error=lhs.error, rhs=rhs.value, rhs_error=rhs.error)


def quadrature_constants(config: ParticleConfig, spec: FieldSpec, grid: Optional[GridSpec] = None,
                         step=None, fd_step=None) -> QuadratureConstants:
    """Grid estimates B_A, B_V of the Hessian sup of A_rho b_x and |b_x|^2."""
    if grid is None:
        grid = default_window(config, spec.target, spec.kernel, points_per_dim=129 if config.dim == 1 else 41,
                              pad=HESSIAN_WINDOW_PAD, rule=QuadratureRule.TRAPEZOID)
    b = population_field(spec, config)
    score_ref = reference_score(spec)
    nodes = grid.nodes()
    # The Stein operator nests a first-order stencil inside the Hessian one
    reach = stencil_reach(nodes, step, hessian=True) + stencil_reach(nodes, fd_step)
    mask = support_mask([as_measure(config), spec.target], spec.kernel, nodes, reach)
    b_a = hessian_sup_estimate(lambda z: stein_divergence(b, score_ref, z, fd_step), grid, step, mask)
    b_v = hessian_sup_estimate(lambda z: np.sum(b(z) ** 2, axis=1), grid, step, mask)
    return QuadratureConstants(B_A=b_a, B_V=b_v, window=grid.to_dict())


def initial_kl(mu0: GaussianMixture, target: Measure, k: KernelSpec,
               grid: Optional[GridSpec] = None) -> QuadratureResult:
    """KL(mu0 || rho_{nu,h}) by grid quadrature, the default entropy input kappa0."""
    if k.family != KernelFamily.GAUSSIAN:
        raise UnsupportedFamilyError("Initial KL is computed for the Gaussian kernel")
    if grid is None:
        spread = float(np.sqrt(mu0.variances.max()))
        grid = quadrature_window([mu0.means] + _target_points(target), max(spread, k.bandwidth), 8.0, 513)

    def integrand(z):
        log_mu = np.asarray(mixture_log_density(mu0, z))
        return np.exp(log_mu) * (log_mu - np.asarray(log_kde_density(target, k, z)))
    return grid_integrate(integrand, grid)


def compute_record(config: ParticleConfig, spec: FieldSpec, t: float,
                   options: DiagnosticsOptions = DiagnosticsOptions()) -> DiagnosticsRecord:
    """Evaluate the per-time diagnostics of one configuration."""
    k = spec.kernel
    speed = v_n(config, spec)
    stein = s_n(config, spec, options.fd_step)
    reciprocal, min_q = r_n(config, k)
    record = DiagnosticsRecord(t=t, v_n=speed, s_n=stein, r_n=reciprocal, min_q=min_q,
                               occupancy_min=int(occupancy_counts(config, k.bandwidth, options.r_k).min()))

    if options.i_n:
        if config.dim <= 2 and options.mc_budget is None:
            result = i_n(config, spec, default_window(config, spec.target, k, options.grid_points))
        else:
            result = i_n(config, spec, mc_budget=options.mc_budget or DEFAULT_MC_BUDGET, seed=options.seed)
        record.i_n, record.i_n_error = result.value, result.error

    if options.curl:
        grid = default_window(config, spec.target, k, options.curl_points, pad=1.0,
                              rule=QuadratureRule.TRAPEZOID)
        _, curls = supported_curl_map(config, spec, grid, options.fd_step)
        record.curl_max_abs = max_abs_curl(curls)

    if spec.kind == FieldKind.LAPLACE_LOO:
        record.v_n_lap, record.s_n_lap = speed, stein
    if options.laplace_population and k.family == KernelFamily.LAPLACE:
        grid = default_window(config, spec.target, k, options.grid_points) if config.dim <= 2 else None
        population = laplace_population_pair(config, spec.target, k, grid,
                                             None if grid is not None else (options.mc_budget or DEFAULT_MC_BUDGET),
                                             options.seed, options.fd_step)
        record.j_lap, record.vcal_lap, record.delta_sq = population.j_lap, population.vcal_lap, population.delta_sq
    logger.debug(f"Diagnostics at t={t:.4g}: V_N={speed:.4e}, S_N={stein:.4e}, R_N={reciprocal:.4e}")
    return record


def time_average(traj: Trajectory, attribute: str) -> float:
    """Trapezoid time average of one record attribute over the recorded times."""
    pairs = [(t, getattr(r, attribute)) for t, r in zip(traj.times, traj.records)
             if r is not None and getattr(r, attribute) is not None]
    if not pairs:
        raise ValueError(f"No recorded values of {attribute}")
    times, values = map(np.asarray, zip(*pairs))
    if len(times) == 1 or times[-1] == times[0]:
        return float(values[0])
    return float(trapezoid(values, x=times) / (times[-1] - times[0]))
