"""
Numerical verification suites.

Each check draws its own random setups from a seed stream, computes one
scalar and compares it with a tolerance.  A suite returns CheckResult
objects; the command line turns any failure into exit status 3.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List

import numpy as np

from utils.diagnostics import (CURL_CONTRAST, CURL_FLAT_TOL, HESSIAN_WINDOW_PAD, DiagnosticsRecord,
                               chernoff_occupancy_bound, coercivity_constants, curl_contrast, default_window,
                               expected_reciprocal_bound, i_n, kde_stein_identity,
                               laplace_population_pair, occupancy_counts,
                               occupancy_implication_check, one_step_w2_check, optimal_bandwidth,
                               quadrature_constants, r_n, reciprocal_self_bound, s_n, time_average,
                               max_abs_curl, supported_curl_map, trajectory_occupancy_check, v_n)
from utils.dynamics import (IntegratorParams, accumulate_gamma, endpoint, integrate, integrate_rk4,
                            potential_trace)
from utils.errors import DriftLabError
from utils.fields import (FieldKind, FieldSpec, ModelSource, conservative_field, displacement_field,
                          full_laplace_field, particle_divergence_pair, scale_residual_field,
                          self_interaction_correction, sharp_mismatch_field)
from utils.kernels import (KernelFamily, kernel_lower_bound, kernel_moment,
                           make_kernel, sharp_kernel_eval, sharp_kernel_grad)
from utils.measures import (GaussianMixture, ParticleConfig, empirical, mean_radius, mean_shift,
                            sample_measure, scale_factor, sharp_density, sharp_score)
from utils.numerics import QuadratureRule, fd_gradient, numeric_minimize_scalar

logger = logging.getLogger(__name__)

SUITE_NAMES = ('identities', 'bounds', 'occupancy', 'euler', 'trend')
# Laplace fields have kinks at atoms; a tiny step keeps grid nodes clear of them
KINK_FD_STEP = 1e-7
OCCUPANCY_RADIUS = 0.5


@dataclass(frozen=True)
class CheckResult:
    name: str
    anchor: str
    value: float
    tolerance: float
    passed: bool
    details: Dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {'name': self.name, 'paper_anchor': self.anchor, 'value': float(self.value),
                'tolerance': float(self.tolerance), 'pass': bool(self.passed), 'details': self.details}


def _result(name: str, anchor: str, value: float, tolerance: float, details: dict = None) -> CheckResult:
    """Pass when value <= tolerance."""
    value = float(value)
    return CheckResult(name, anchor, value, float(tolerance), bool(value <= tolerance), details or {})


def _random_cloud(rng: np.random.Generator, n: int, d: int, scale: float = 1.0) -> np.ndarray:
    return scale * rng.standard_normal((n, d))


def _two_gaussians(d: int, separation: float = 1.5, variance: float = 0.25) -> GaussianMixture:
    means = np.zeros((2, d))
    means[:, 0] = [-separation, separation]
    return GaussianMixture(means, np.array([variance, variance]), np.array([0.5, 0.5]))


# identities ---------------------------------------------------------------

def check_gaussian_proportionality(rng: np.random.Generator) -> CheckResult:
    worst = 0.0
    for _ in range(200):
        d, n, m = int(rng.integers(1, 3)), int(rng.integers(1, 11)), int(rng.integers(2, 11))
        h = rng.uniform(0.3, 2.0)
        k = make_kernel(KernelFamily.GAUSSIAN, d, h)
        config = ParticleConfig(_random_cloud(rng, n, d))
        target = empirical(_random_cloud(rng, m, d))
        z = _random_cloud(rng, 5, d, 1.5)
        b = conservative_field(FieldSpec(FieldKind.CONSERVATIVE, target, k), config, z)
        u = displacement_field(FieldSpec(FieldKind.DISPLACEMENT, target, k), config, z)
        err = np.linalg.norm(b - u / h ** 2, axis=1) / (1.0 + np.linalg.norm(b, axis=1))
        worst = max(worst, float(err.max()))
    return _result('gaussian_proportionality', 'Gaussian kernel: score difference equals mean-shift difference / h^2',
                   worst, 1e-12)


def check_sharp_gradient(rng: np.random.Generator) -> CheckResult:
    worst = 0.0
    for _ in range(500):
        d = int(rng.integers(1, 4))
        h = rng.uniform(0.5, 2.0)
        k = make_kernel(KernelFamily.LAPLACE, d, h)
        direction = rng.standard_normal(d)
        u = direction / np.linalg.norm(direction) * h * 10.0 ** rng.uniform(-2.0, 1.0)
        radius = float(np.linalg.norm(u))
        numeric = fd_gradient(lambda z: sharp_kernel_eval(k, z), u, step=1e-5 * radius)
        exact = sharp_kernel_grad(k, u)
        worst = max(worst, float(np.linalg.norm(numeric - exact) / np.linalg.norm(exact)))
    origin = float(np.abs(sharp_kernel_grad(make_kernel(KernelFamily.LAPLACE, 2, 1.0), np.zeros(2))).max())
    return _result('sharp_kernel_gradient', 'Companion kernel gradient equals -u K_h(u)',
                   max(worst, origin), 1e-6, {'gradient_at_origin': origin})


def _laplace_setup(rng: np.random.Generator, d: int = None):
    d = d or int(rng.integers(1, 3))
    h = rng.uniform(0.4, 1.5)
    k = make_kernel(KernelFamily.LAPLACE, d, h)
    config = ParticleConfig(_random_cloud(rng, int(rng.integers(2, 12)), d))
    target = empirical(_random_cloud(rng, int(rng.integers(2, 12)), d, 1.3))
    return k, config, target


def check_sharp_score_and_scale(rng: np.random.Generator) -> CheckResult:
    worst_score, worst_scale, worst_shift = 0.0, 0.0, 0.0
    for _ in range(200):
        k, config, target = _laplace_setup(rng)
        z = _random_cloud(rng, 4, k.dim, 1.5)
        numeric = fd_gradient(lambda w: np.log(sharp_density(target, k, w)), z, step=1e-6)
        exact = sharp_score(target, k, z)
        worst_score = max(worst_score, float(np.max(np.linalg.norm(numeric - exact, axis=1)
                                                    / (1.0 + np.linalg.norm(exact, axis=1)))))
        a = scale_factor(target, k, z)
        expected = k.bandwidth * (mean_radius(target, k, z) + k.bandwidth)
        worst_scale = max(worst_scale, float(np.max(np.abs(a - expected) / expected)))
        shift = mean_shift(target, k, z)
        worst_shift = max(worst_shift, float(np.max(np.linalg.norm(shift - a[:, None] * exact, axis=1)
                                                    / (1.0 + np.linalg.norm(shift, axis=1)))))
    value = max(worst_score / 1e-6, worst_scale / 1e-12, worst_shift / 1e-12)
    return _result('sharp_score_and_scale', 'Sharp score is grad log R; scale factor a = h(rbar + h); M = a sigma',
                   value, 1.0, {'score_error': worst_score, 'scale_error': worst_scale, 'shift_error': worst_shift})


def check_laplace_decomposition(rng: np.random.Generator) -> CheckResult:
    worst = 0.0
    for _ in range(200):
        k, config, target = _laplace_setup(rng)
        spec = FieldSpec(FieldKind.LAPLACE_LOO, target, k)
        z = _random_cloud(rng, 4, k.dim, 1.5)
        u = full_laplace_field(spec, config, z)
        a_x = scale_factor(empirical(config.positions), k, z)
        rebuilt = a_x[:, None] * sharp_mismatch_field(spec, config, z) + scale_residual_field(spec, config, z)
        worst = max(worst, float(np.max(np.linalg.norm(u - rebuilt, axis=1) / (1.0 + np.linalg.norm(u, axis=1)))))
    return _result('laplace_decomposition', 'Laplace drift splits into a_x b_sharp plus scale residual',
                   worst, 1e-12)


def check_divergence_pair(rng: np.random.Generator) -> CheckResult:
    worst = 0.0
    for n in (1, 5, 20):
        for d in (1, 2):
            k = make_kernel(KernelFamily.GAUSSIAN, d, rng.uniform(0.6, 1.5))
            config = ParticleConfig(_random_cloud(rng, n, d))
            target = empirical(_random_cloud(rng, 10, d))
            for i in rng.choice(n, size=min(n, 3), replace=False):
                lhs, rhs = particle_divergence_pair(config, target, k, int(i))
                worst = max(worst, abs(lhs - rhs))
    single = self_interaction_correction(ParticleConfig(np.array([[0.3]])),
                                         make_kernel(KernelFamily.GAUSSIAN, 1, 1.0), 0)
    # N = 1, d = 1, h = 1: the self term is exactly -1
    value = max(worst / 1e-4, abs(single + 1.0) / 1e-6)
    return _result('particle_divergence_pair', 'Moving-particle divergence equals frozen divergence plus self term',
                   value, 1.0, {'max_gap': worst, 'single_particle_correction': single})


def _stein_tolerance(value: float, *errors: float) -> float:
    return max(1e-3 * abs(value), 2.0 * sum(errors) + 1e-6 * (1.0 + abs(value)))


def check_kde_stein_identity(rng: np.random.Generator) -> CheckResult:
    worst = 0.0
    details = []
    for _ in range(3):
        k = make_kernel(KernelFamily.GAUSSIAN, 1, rng.uniform(0.4, 1.0))
        config = ParticleConfig(_random_cloud(rng, 8, 1))
        target = empirical(_random_cloud(rng, 10, 1, 1.5))
        spec = FieldSpec(FieldKind.CONSERVATIVE, target, k)
        grid = default_window(config, target, k, 1025)
        identity = kde_stein_identity(config, spec, grid)
        gap = abs(identity.lhs - identity.rhs)
        worst = max(worst, gap / _stein_tolerance(identity.rhs, identity.lhs_error, identity.rhs_error))
        details.append({'lhs': identity.lhs, 'rhs': identity.rhs, 'window': grid.to_dict()})
    return _result('kde_stein_identity', 'KDE-averaged Stein drift equals the smoothed Fisher discrepancy',
                   worst, 1.0, {'cases': details})


def check_sharp_stein_identity(rng: np.random.Generator) -> CheckResult:
    worst = 0.0
    details = []
    for _ in range(3):
        k, config, target = _laplace_setup(rng, d=1)
        grid = default_window(config, target, k, 2049)
        pop = laplace_population_pair(config, target, k, grid, fd_step=KINK_FD_STEP)
        gap = abs(pop.j_lap - pop.j_projection)
        worst = max(worst, gap / _stein_tolerance(pop.j_projection, pop.errors['j_lap'],
                                                  pop.errors['j_projection']))
        details.append({'j_lap': pop.j_lap, 'j_projection': pop.j_projection, 'window': pop.window})
    return _result('sharp_stein_identity', 'Sharp-smoothed Stein drift equals its projection form',
                   worst, 1.0, {'cases': details})


def check_curl_contrast(rng: np.random.Generator) -> CheckResult:
    h = 0.55
    line = np.linspace(-1.5, 1.5, 40)
    target = empirical(np.column_stack([line, np.zeros(40)]) + 0.05 * rng.standard_normal((40, 2)))
    column = np.linspace(-1.5, 1.5, 20)
    config = ParticleConfig(np.column_stack([np.zeros(20), column]) + 0.05 * rng.standard_normal((20, 2)))
    gaussian = make_kernel(KernelFamily.GAUSSIAN, 2, h)
    grid = default_window(config, target, gaussian, 21, pad=1.0, rule=QuadratureRule.TRAPEZOID)
    specs = {
        'conservative': FieldSpec(FieldKind.CONSERVATIVE, target, gaussian),
        'laplace': FieldSpec(FieldKind.DISPLACEMENT, target, make_kernel(KernelFamily.LAPLACE, 2, h),
                             ModelSource.FULL_CONFIG),
    }
    maxima = {name: max_abs_curl(supported_curl_map(config, spec, grid)[1]) for name, spec in specs.items()}
    contrast = curl_contrast(maxima['conservative'], maxima['laplace'])
    cons, lap = maxima['conservative'], maxima['laplace']
    value = max(cons / CURL_FLAT_TOL, CURL_CONTRAST * cons / lap) if lap else float('inf')
    return _result('curl_contrast', 'Conservative drift is curl-free; the Laplace displacement drift is not',
                   value, 1.0, {'curl_max_abs': maxima, **contrast})


# bounds -------------------------------------------------------------------

def check_reciprocal_self_bound(rng: np.random.Generator) -> CheckResult:
    worst = 0.0
    families = list(KernelFamily)
    for _ in range(1000):
        d, n = int(rng.integers(1, 4)), int(rng.integers(1, 51))
        k = make_kernel(families[int(rng.integers(len(families)))], d, rng.uniform(0.1, 2.0))
        config = ParticleConfig(_random_cloud(rng, n, d, rng.uniform(0.1, 5.0)))
        worst = max(worst, r_n(config, k)[0] / reciprocal_self_bound(n, k))
    return _result('reciprocal_self_bound', 'Reciprocal KDE never exceeds N h^d / K(0)', worst, 1.0 + 1e-12)


def check_quadrature_sandwich(rng: np.random.Generator) -> CheckResult:
    worst = 0.0
    cases = []
    for _ in range(20):
        k = make_kernel(KernelFamily.GAUSSIAN, 1, rng.uniform(0.5, 1.2))
        config = ParticleConfig(_random_cloud(rng, int(rng.integers(3, 10)), 1))
        target = empirical(_random_cloud(rng, 8, 1, 1.3))
        spec = FieldSpec(FieldKind.CONSERVATIVE, target, k)
        window = default_window(config, target, k, 257, pad=HESSIAN_WINDOW_PAD, rule=QuadratureRule.TRAPEZOID)
        constants = quadrature_constants(config, spec, window)
        integral = i_n(config, spec, default_window(config, target, k, 1025)).value
        m2 = kernel_moment(k, 2)
        gap_s = abs(s_n(config, spec) - integral) / (0.5 * constants.B_A * m2)
        gap_v = abs(v_n(config, spec) - integral) / (0.5 * constants.B_V * m2)
        worst = max(worst, gap_s, gap_v)
        cases.append({'B_A': constants.B_A, 'B_V': constants.B_V, 'window': constants.window})
    return _result('quadrature_sandwich', 'S_N and V_N within half B m_2(K_h) of I_N', worst, 1.0,
                   {'cases': cases})


def check_coercivity(rng: np.random.Generator) -> CheckResult:
    worst = -np.inf
    for _ in range(50):
        k, config, target = _laplace_setup(rng, d=1)
        pop = laplace_population_pair(config, target, k, default_window(config, target, k, 513),
                                      fd_step=KINK_FD_STEP)
        gamma, beta = coercivity_constants(pop.lambda_h, pop.L_h)
        slack = gamma * pop.vcal_lap - beta * pop.delta_sq - pop.j_lap
        tolerance = (2.0 * (pop.errors['j_lap'] + gamma * pop.errors['vcal_lap'] + beta * pop.errors['delta_sq'])
                     + 1e-6 * (1.0 + abs(pop.j_lap)))
        worst = max(worst, slack - tolerance)
    return _result('laplace_coercivity', 'J >= gamma V - beta Delta^2 on the sharp-smoothed model',
                   worst, 0.0)


def check_w2_domination(rng: np.random.Generator) -> CheckResult:
    worst = -np.inf
    for _ in range(100):
        d, n = int(rng.integers(1, 4)), int(rng.integers(2, 65))
        k = make_kernel(KernelFamily.GAUSSIAN, d, rng.uniform(0.3, 1.5))
        config = ParticleConfig(_random_cloud(rng, n, d))
        spec = FieldSpec(FieldKind.CONSERVATIVE, empirical(_random_cloud(rng, 12, d)), k)
        report = one_step_w2_check(config, spec, rng.uniform(0.001, 0.1))
        worst = max(worst, report.exact_w2 - report.coupling_bound)
    return _result('w2_domination', 'One-step W2 at most eta sqrt(V_N)', worst, 1e-12)


def check_balanced_bandwidth(rng: np.random.Generator) -> CheckResult:
    worst_identity, worst_argmin = 0.0, 0.0
    for _ in range(20):
        A, C = rng.uniform(0.1, 10.0), rng.uniform(0.1, 10.0)
        beta, d, N = rng.uniform(0.0, 1.5), int(rng.integers(1, 4)), int(rng.integers(10, 100000))
        choice = optimal_bandwidth(A, C, beta, d, N)
        balance = (d + 2) * choice.variance_term
        worst_identity = max(worst_identity, abs(balance - (2.0 - beta) * choice.bias_term) / balance)
        numeric = numeric_minimize_scalar(lambda h: A / (N * h ** (d + 2)) + C * h ** (2.0 - beta), 1e-6, 1e3)
        worst_argmin = max(worst_argmin, abs(numeric - choice.h_star) / choice.h_star)
    value = max(worst_identity / 1e-10, worst_argmin / 1e-6)
    return _result('balanced_bandwidth', 'Optimal bandwidth balances variance and bias terms', value, 1.0,
                   {'identity_error': worst_identity, 'argmin_error': worst_argmin})


# occupancy ----------------------------------------------------------------

def check_occupancy_implication(rng: np.random.Generator) -> CheckResult:
    false_certificates, premises = 0, 0
    families = list(KernelFamily)
    for _ in range(500):
        d, n = int(rng.integers(1, 3)), int(rng.integers(5, 51))
        family = families[int(rng.integers(len(families)))]
        k = make_kernel(family, d, rng.uniform(0.2, 1.5))
        config = ParticleConfig(_random_cloud(rng, n, d, rng.uniform(0.1, 2.0)))
        kappa = kernel_lower_bound(k, OCCUPANCY_RADIUS)
        alpha = rng.uniform(0.01, 0.5)
        loo = family == KernelFamily.LAPLACE and bool(rng.integers(2))
        report = occupancy_implication_check(config, k, OCCUPANCY_RADIUS, kappa, alpha, leave_one_out=loo)
        premises += report.holds
        false_certificates += report.false_certificate
    return _result('occupancy_implication', 'Local occupancy certifies the KDE denominator',
                   false_certificates, 0, {'premises_holding': premises})


def check_chernoff_frequency(rng: np.random.Generator) -> CheckResult:
    n, h, r_k, trials = 200, 0.5, 1.0, 2000
    # Uniform[0, 1] puts mass >= r_K h = p0 h in every ball of radius r_K h
    p0 = r_k
    threshold = p0 * n * h / 4.0
    failures = 0
    for _ in range(trials):
        config = ParticleConfig(rng.uniform(size=(n, 1)))
        failures += bool(occupancy_counts(config, h, r_k).min() < threshold)
    bound = chernoff_occupancy_bound(p0, n, h, 1)
    return _result('chernoff_occupancy', 'Low-occupancy frequency below the Chernoff bound',
                   failures / trials, bound, {'trials': trials, 'threshold': threshold})


def check_trajectory_occupancy(rng: np.random.Generator) -> CheckResult:
    k = make_kernel(KernelFamily.GAUSSIAN, 1, 0.5)
    target = _two_gaussians(1)
    config0 = ParticleConfig(sample_measure(target, 60, rng))
    spec = FieldSpec(FieldKind.CONSERVATIVE, target, k)
    traj = integrate(config0, spec, IntegratorParams(eta=0.01, t_end=0.2, record_every=5, track_lipschitz=True))
    gamma = accumulate_gamma(traj)
    kappa = kernel_lower_bound(k, 1.0)
    report = trajectory_occupancy_check(traj, k, 1.0, kappa, 0.05, gamma)
    expected = expected_reciprocal_bound(kappa, 0.5, config0.n, k.bandwidth, 1, k.normalizer,
                                         gamma)
    value = 0.0 if report.holds_all else report.max_r_n / report.bound
    return _result('trajectory_occupancy', 'Shrunken-radius occupancy bounds R_N along the run', value, 0.0,
                   {'premise_holds': report.premise_holds, 'max_r_n': report.max_r_n, 'bound': report.bound,
                    'gamma': gamma, 'expected_bound': expected})


# euler --------------------------------------------------------------------

def check_euler_order(rng: np.random.Generator) -> CheckResult:
    k = make_kernel(KernelFamily.GAUSSIAN, 2, 1.0)
    target = _two_gaussians(2)
    config0 = ParticleConfig(sample_measure(GaussianMixture(np.zeros((1, 2)), np.ones(1), np.ones(1)), 20, rng))
    spec = FieldSpec(FieldKind.CONSERVATIVE, target, k)
    etas = [0.04, 0.02, 0.01, 0.005]

    def final(eta, rk4=False):
        n_steps = int(round(1.0 / eta))
        params = IntegratorParams(eta=eta, t_end=1.0, record_every=n_steps)
        return endpoint((integrate_rk4 if rk4 else integrate)(config0, spec, params))

    reference = final(etas[-1] / 100.0, rk4=True)
    errors = [float(np.max(np.linalg.norm(final(eta) - reference, axis=1))) for eta in etas]
    slope = float(np.polyfit(np.log(etas), np.log(errors), 1)[0])
    return _result('euler_order', 'Frozen Euler converges at order one', abs(slope - 1.0), 0.2,
                   {'slope': slope, 'errors': errors, 'etas': etas})


def check_rk4_linear_field(rng: np.random.Generator) -> CheckResult:
    h = 0.5
    k = make_kernel(KernelFamily.GAUSSIAN, 1, h)
    # One particle and N(0, 1 - h^2) smoothed by K_h give the drift -x
    target = GaussianMixture(np.zeros((1, 1)), np.array([1.0 - h ** 2]), np.ones(1))
    x0 = rng.uniform(0.5, 2.0)
    traj = integrate_rk4(ParticleConfig(np.array([[x0]])), FieldSpec(FieldKind.CONSERVATIVE, target, k),
                         IntegratorParams(eta=0.01, t_end=1.0, record_every=100))
    exact = x0 * np.exp(-1.0)
    return _result('rk4_linear_field', 'RK4 reproduces exp(-t) on a linear drift',
                   abs(endpoint(traj)[0, 0] - exact) / abs(exact), 1e-8)


def check_determinism(rng: np.random.Generator) -> CheckResult:
    seed = int(rng.integers(2 ** 31))
    k = make_kernel(KernelFamily.GAUSSIAN, 2, 0.7)
    spec = FieldSpec(FieldKind.CONSERVATIVE, _two_gaussians(2), k)
    params = IntegratorParams(eta=0.02, t_end=0.4, record_every=5)
    runs = [integrate(ParticleConfig(sample_measure(_two_gaussians(2), 30, seed)), spec, params).positions()
            for _ in range(2)]
    return _result('determinism', 'Same seed gives bit-identical trajectories',
                   float(np.max(np.abs(runs[0] - runs[1]))), 0.0)


def check_stationarity(rng: np.random.Generator) -> CheckResult:
    points = _random_cloud(rng, 15, 2)
    spec = FieldSpec(FieldKind.CONSERVATIVE, empirical(points), make_kernel(KernelFamily.GAUSSIAN, 2, 0.8))
    traj = integrate(ParticleConfig(points), spec, IntegratorParams(eta=0.05, t_end=0.5))
    return _result('stationarity', 'Particles already on the target atoms stay put',
                   float(np.max(np.abs(traj.positions() - points[None]))), 0.0)


def check_potential_ascent(rng: np.random.Generator) -> CheckResult:
    k = make_kernel(KernelFamily.GAUSSIAN, 2, 0.6)
    config = ParticleConfig(_random_cloud(rng, 25, 2))
    spec = FieldSpec(FieldKind.CONSERVATIVE, _two_gaussians(2), k)
    values = potential_trace(config, spec, config.positions[0], 0.005, 200)
    drop = float(max(0.0, -np.diff(values).min()))
    return _result('potential_ascent', 'Frozen conservative flow increases log rho - log q_x', drop, 1e-12)


# trend --------------------------------------------------------------------

def check_residual_trend(rng: np.random.Generator) -> CheckResult:
    target = _two_gaussians(1)
    averages = {}
    for n in (50, 400):
        h = optimal_bandwidth(1.0, 1.0, 0.0, 1, n).h_star
        spec = FieldSpec(FieldKind.CONSERVATIVE, target, make_kernel(KernelFamily.GAUSSIAN, 1, h))
        runs = []
        for seed in rng.integers(2 ** 31, size=5):
            config0 = ParticleConfig(sample_measure(target, n, int(seed)))
            traj = integrate(config0, spec, IntegratorParams(eta=0.01, t_end=0.5, record_every=5),
                             record_hook=lambda c, t: DiagnosticsRecord(t=t, v_n=v_n(c, spec), s_n=np.nan,
                                                                         r_n=np.nan, min_q=np.nan,
                                                                         occupancy_min=0))
            runs.append(time_average(traj, 'v_n'))
        averages[n] = float(np.mean(runs))
    ratio = averages[400] / averages[50]
    return _result('residual_drift_trend', 'Time-averaged V_N decreases with N at the balanced bandwidth',
                   ratio, 1.0, {'v_n_time_average': {str(n): v for n, v in averages.items()}})


SUITES: Dict[str, List[Callable[[np.random.Generator], CheckResult]]] = {
    'identities': [check_gaussian_proportionality, check_sharp_gradient, check_sharp_score_and_scale,
                   check_laplace_decomposition, check_divergence_pair, check_kde_stein_identity,
                   check_sharp_stein_identity, check_curl_contrast],
    'bounds': [check_reciprocal_self_bound, check_quadrature_sandwich, check_coercivity,
               check_w2_domination, check_balanced_bandwidth],
    'occupancy': [check_occupancy_implication, check_chernoff_frequency, check_trajectory_occupancy],
    'euler': [check_euler_order, check_rk4_linear_field, check_determinism, check_stationarity,
              check_potential_ascent],
    'trend': [check_residual_trend],
}


def run_suite(name: str, seed: int = 0) -> List[CheckResult]:
    """
    Run one suite ('all' runs every suite in order).

    Args:
        name: suite name
        seed: root seed; each check gets its own child stream

    Returns:
        list of CheckResult
    """
    if name == 'all':
        return [r for suite in SUITE_NAMES for r in run_suite(suite, seed)]
    if name not in SUITES:
        raise ValueError(f"Unknown suite {name!r}; choose from {SUITE_NAMES + ('all',)}")
    checks = SUITES[name]
    streams = np.random.SeedSequence([seed, SUITE_NAMES.index(name)]).spawn(len(checks))
    results = []
    for check, stream in zip(checks, streams):
        rng = np.random.default_rng(stream)
        try:
            result = check(rng)
        except DriftLabError as e:
            logger.error(f"Check {check.__name__} raised {type(e).__name__}: {str(e)}")
            result = CheckResult(check.__name__.replace('check_', ''), 'raised', float('nan'), 0.0, False,
                                 {'error': type(e).__name__, 'message': str(e)})
        level = logging.INFO if result.passed else logging.ERROR
        logger.log(level, f"{result.name}: value={result.value:.4g} tolerance={result.tolerance:.4g} "
                          f"{'PASS' if result.passed else 'FAIL'}")
        results.append(result)
    return results
