import pytest
import numpy as np

from utils.diagnostics import (CURL_FLAT_TOL, DiagnosticsOptions, DiagnosticsRecord, RateInputs,
                               check_self_bound, chernoff_occupancy_bound, coercivity_constants, compute_record,
                               curl_contrast, default_window, expected_reciprocal_bound, i_n, initial_kl,
                               kde_stein_identity, laplace_occupancy_bandwidth, laplace_population_pair,
                               laplace_quadrature_errors, loo_errors, max_abs_curl, occupancy_counts,
                               occupancy_implication_check, one_step_w2_check, optimal_bandwidth,
                               quadrature_constants, r_n, rate_rhs_conservative, rate_rhs_laplace,
                               reciprocal_self_bound, root_rate_conservative, s_n, shell_alignment_bounds,
                               support_mask, supported_curl_map, time_average, trajectory_occupancy_check, v_n)
from utils.dynamics import IntegratorParams, Trajectory, integrate
from utils.errors import (InvariantViolation, OrderingError, RegimeError, UnsupportedCombinationError,
                          UnsupportedFamilyError)
from utils.fields import FieldSpec, particle_velocities
from utils.kernels import kernel_at_zero, kernel_lower_bound, make_kernel, sharp_second_moment
from utils.measures import GaussianMixture, ParticleConfig, empirical
from utils.numerics import numeric_minimize_scalar


@pytest.fixture
def rng():
    return np.random.default_rng(21)


@pytest.fixture
def line_setup(rng):
    """One-dimensional particles, empirical target and Gaussian kernel"""
    config = ParticleConfig(rng.standard_normal((8, 1)))
    target = empirical(1.5 * rng.standard_normal((10, 1)))
    return config, FieldSpec('conservative', target, make_kernel('gaussian', 1, 0.7))


@pytest.fixture
def laplace_line(rng):
    """One-dimensional particles and target with the Laplace kernel"""
    config = ParticleConfig(rng.standard_normal((5, 1)))
    target = empirical(1.3 * rng.standard_normal((6, 1)))
    return config, target, make_kernel('laplace', 1, 0.8)


def test_v_n_is_mean_squared_speed(line_setup):
    """Test V_N against the particle velocities"""
    config, spec = line_setup
    v = particle_velocities(spec, config)
    assert v_n(config, spec) == pytest.approx(np.mean(v[:, 0] ** 2), rel=1e-14)


def test_reciprocal_kde_single_particle():
    """Test R_N = 1 / K_h(0) for one particle, which is the self-bound"""
    k = make_kernel('gaussian', 2, 0.5)
    value, min_q = r_n(ParticleConfig(np.array([[0.3, 0.1]])), k)
    assert value == pytest.approx(1.0 / kernel_at_zero(k))
    assert min_q == pytest.approx(kernel_at_zero(k))
    assert value == pytest.approx(reciprocal_self_bound(1, k))


@pytest.mark.parametrize("family", ['gaussian', 'laplace', 'smooth_compact'])
def test_reciprocal_self_bound_holds(rng, family):
    """Test R_N never exceeds N / K_h(0)"""
    k = make_kernel(family, 2, 0.3)
    config = ParticleConfig(3.0 * rng.standard_normal((25, 2)))
    assert r_n(config, k)[0] <= reciprocal_self_bound(config.n, k) * (1.0 + 1e-12)


def test_occupancy_counts():
    """Test neighbour counts include the particle itself"""
    config = ParticleConfig(np.array([[0.0], [0.1], [5.0]]))
    assert list(occupancy_counts(config, 1.0, 0.5)) == [2, 2, 1]
    with pytest.raises(ValueError):
        occupancy_counts(config, 1.0, 0.0)


def test_occupancy_certificate(rng):
    """Test a dense cluster certifies min q and an isolated particle breaks the premise"""
    k = make_kernel('gaussian', 1, 1.0)
    kappa = kernel_lower_bound(k, 0.5)
    cluster = ParticleConfig(0.05 * rng.standard_normal((20, 1)))
    report = occupancy_implication_check(cluster, k, 0.5, kappa, 1.0)
    assert report.holds
    assert report.min_q >= report.bound, "Certified lower bound must hold"
    assert not report.false_certificate

    lonely = ParticleConfig(np.vstack([cluster.positions[:19], [[10.0]]]))
    assert not occupancy_implication_check(lonely, k, 0.5, kappa, 0.5).holds

    with pytest.raises(ValueError):
        occupancy_implication_check(cluster, k, 0.5, 2.0 * kappa, 1.0)


def test_occupancy_leave_one_out(rng):
    """Test the leave-one-out variant for the Laplace kernel"""
    k = make_kernel('laplace', 1, 1.0)
    cluster = ParticleConfig(0.05 * rng.standard_normal((20, 1)))
    report = occupancy_implication_check(cluster, k, 0.5, kernel_lower_bound(k, 0.5), 0.9, leave_one_out=True)
    assert report.holds
    assert not report.false_certificate


def test_chernoff_bound():
    """Test the Chernoff occupancy bound and its validation"""
    assert chernoff_occupancy_bound(1.0, 1000, 1.0, 1) == pytest.approx(1000 * np.exp(-62.5))
    assert chernoff_occupancy_bound(0.1, 10, 0.1, 1) == 1.0, "Bound saturates at one"
    assert chernoff_occupancy_bound(1.0, 1000, 1.0, 1, gamma_t=1.0) > chernoff_occupancy_bound(1.0, 1000, 1.0, 1)
    with pytest.raises(ValueError):
        chernoff_occupancy_bound(1.0, 1, 1.0, 1)
    with pytest.raises(ValueError):
        chernoff_occupancy_bound(0.0, 10, 1.0, 1)


def test_expected_reciprocal_bound_grows_with_gamma():
    """Test the expected reciprocal bound increases with the distortion budget"""
    base = expected_reciprocal_bound(0.2, 0.5, 500, 0.3, 1, 0.4)
    assert base > 4.0 / (0.2 * 0.5)
    assert expected_reciprocal_bound(0.2, 0.5, 500, 0.3, 1, 0.4, gamma_t=0.5) > base


def test_trajectory_occupancy(rng):
    """Test the trajectory check returns a consistent report"""
    k = make_kernel('gaussian', 1, 0.5)
    target = GaussianMixture(np.array([[-1.0], [1.0]]), np.array([0.25, 0.25]), np.array([0.5, 0.5]))
    config0 = ParticleConfig(rng.uniform(-1.0, 1.0, size=(40, 1)))
    traj = integrate(config0, FieldSpec('conservative', target, k), IntegratorParams(eta=0.02, t_end=0.1))
    report = trajectory_occupancy_check(traj, k, 1.0, kernel_lower_bound(k, 1.0), 0.05, 0.1)
    assert report.max_r_n > 0
    assert report.bound == pytest.approx(np.exp(0.1) / (kernel_lower_bound(k, 1.0) * 0.05))
    if report.premise_holds:
        assert report.holds_all, "Occupancy premise should bound R_N along the run"


def test_coercivity_constants():
    """Test gamma and beta from (lambda, L) and the ordering check"""
    gamma, beta = coercivity_constants(1.0, 2.0)
    assert gamma == pytest.approx(1.0 / 16.0)
    assert beta == pytest.approx(0.625)
    with pytest.raises(OrderingError):
        coercivity_constants(2.0, 1.0)
    with pytest.raises(OrderingError):
        coercivity_constants(0.0, 1.0)


def test_shell_alignment_bounds():
    """Test shell constants lambda, L and the residual bound"""
    assert shell_alignment_bounds(0.5, 1.0, 2.0, 3.0, 0.1) == pytest.approx((0.75, 1.25, 0.0225))


def test_conservative_rate():
    """Test the rate terms and the root form"""
    inputs = RateInputs(kappa0=0.4, a1=1.0, Lambda=2.0, B_A=3.0, B_V=1.0, m2_base=1.0, N=100, T=2.0, h=0.5, d=1)
    rate = rate_rhs_conservative(inputs)
    assert rate.entropy_term == pytest.approx(0.2)
    assert rate.self_term == pytest.approx(2.0 / (100 * 0.5 ** 3))
    assert rate.quad_term == pytest.approx(0.5 * 4.0 * 0.25)
    assert rate.total == pytest.approx(rate.entropy_term + rate.self_term + rate.quad_term)
    assert root_rate_conservative(inputs) >= np.sqrt(rate.total), "Root form dominates the square root"


def test_laplace_rate():
    """Test the Laplace rate terms and the regime check"""
    rate = rate_rhs_laplace(RateInputs(kappa0=1.0, N=10, gamma_h=0.5, beta_h=2.0, Delta_sq=0.1,
                                       eps_S=0.05, eps_V=0.02))
    assert rate.entropy_term == pytest.approx(0.2)
    assert rate.delta_term == pytest.approx(0.4)
    assert rate.epsS_term == pytest.approx(0.1)
    assert rate.total == pytest.approx(0.72)
    with pytest.raises(RegimeError):
        rate_rhs_laplace(RateInputs(gamma_h=0.0))


@pytest.mark.parametrize("beta, d", [(0.0, 1), (0.5, 2), (1.5, 3)])
def test_optimal_bandwidth(beta, d):
    """Test the optimal bandwidth balances both terms and minimises the bound"""
    A, C, N = 2.0, 0.5, 1000
    choice = optimal_bandwidth(A, C, beta, d, N)
    assert (d + 2) * choice.variance_term == pytest.approx((2.0 - beta) * choice.bias_term, rel=1e-10)
    assert choice.rate_value == pytest.approx(choice.variance_term + choice.bias_term, rel=1e-10)
    numeric = numeric_minimize_scalar(lambda h: A / (N * h ** (d + 2)) + C * h ** (2.0 - beta), 1e-6, 1e3)
    assert numeric == pytest.approx(choice.h_star, rel=1e-6)
    assert choice.squared_exponent == pytest.approx((2.0 - beta) / (d + 4.0 - beta))
    assert choice.eta_star == pytest.approx(choice.h_star ** 2)


def test_optimal_bandwidth_regime():
    """Test beta >= 2 and non-positive constants are refused"""
    with pytest.raises(RegimeError):
        optimal_bandwidth(1.0, 1.0, 2.0, 1, 100)
    with pytest.raises(ValueError):
        optimal_bandwidth(0.0, 1.0, 0.0, 1, 100)


def test_laplace_bandwidth_and_errors():
    """Test h_N = (log N / N)^(1/d) and the quadrature error terms"""
    assert laplace_occupancy_bandwidth(100, 2) == pytest.approx(np.sqrt(np.log(100) / 100))
    with pytest.raises(ValueError):
        laplace_occupancy_bandwidth(1, 1)
    k = make_kernel('laplace', 1, 0.5)
    eps_s, eps_v = laplace_quadrature_errors(2.0, 4.0, k, 0.1, 0.2)
    assert eps_s == pytest.approx(sharp_second_moment(k) + 0.1)
    assert eps_v == pytest.approx(2.0 * sharp_second_moment(k) + 0.2)


def test_one_step_w2(line_setup):
    """Test the exact one-step W2 is dominated by eta sqrt(V_N)"""
    config, spec = line_setup
    report = one_step_w2_check(config, spec, 0.05)
    assert report.holds
    assert report.coupling_bound == pytest.approx(0.05 * np.sqrt(v_n(config, spec)))


def test_loo_errors(laplace_line):
    """Test leave-one-out gaps are finite and need the Laplace kernel"""
    config, target, k = laplace_line
    ell_s, ell_v = loo_errors(config, target, k, fd_step=1e-7)
    assert ell_s >= 0 and np.isfinite(ell_s)
    assert ell_v >= 0 and np.isfinite(ell_v)
    with pytest.raises(UnsupportedFamilyError):
        loo_errors(config, target, make_kernel('gaussian', 1, 0.8))


def test_laplace_population_pair(laplace_line):
    """Test the sharp-smoothed Stein drift matches its projection form"""
    config, target, k = laplace_line
    grid = default_window(config, target, k, 2049)
    pop = laplace_population_pair(config, target, k, grid, fd_step=1e-7)
    tolerance = max(1e-3 * abs(pop.j_projection),
                    2.0 * (pop.errors['j_lap'] + pop.errors['j_projection']) + 1e-6 * (1.0 + abs(pop.j_projection)))
    assert abs(pop.j_lap - pop.j_projection) <= tolerance
    assert pop.vcal_lap >= 0 and pop.delta_sq >= 0
    assert 0 < pop.lambda_h <= pop.L_h
    assert pop.window['points_per_dim'] == 2049


def test_laplace_population_needs_empirical_target(laplace_line):
    """Test mixture targets and smooth kernels are refused"""
    config, target, k = laplace_line
    mixture = GaussianMixture(np.zeros((1, 1)), np.ones(1), np.ones(1))
    with pytest.raises(UnsupportedCombinationError):
        laplace_population_pair(config, mixture, k)
    with pytest.raises(UnsupportedFamilyError):
        laplace_population_pair(config, target, make_kernel('gaussian', 1, 0.8))


def test_kde_stein_identity(line_setup):
    """Test the KDE-averaged Stein drift equals I_N"""
    config, spec = line_setup
    identity = kde_stein_identity(config, spec, default_window(config, spec.target, spec.kernel, 1025))
    assert identity.rhs > 0
    tolerance = max(1e-3 * identity.rhs, 2.0 * (identity.lhs_error + identity.rhs_error) + 1e-6 * (1.0 + identity.rhs))
    assert abs(identity.lhs - identity.rhs) <= tolerance


def test_i_n_grid_and_monte_carlo_agree(line_setup):
    """Test grid and Monte Carlo estimates of I_N"""
    config, spec = line_setup
    grid_value = i_n(config, spec, default_window(config, spec.target, spec.kernel, 1025)).value
    mc = i_n(config, spec, mc_budget=40000, seed=4)
    assert mc.mode == 'mc'
    assert abs(mc.value - grid_value) <= 5.0 * mc.error + 1e-3 * grid_value


def test_s_n_single_particle():
    """Test S_N = -1 + 1 / h^2 + x^2 for the affine one-particle drift"""
    h = 0.5
    target = GaussianMixture(np.zeros((1, 1)), np.array([1.0 - h ** 2]), np.ones(1))
    spec = FieldSpec('conservative', target, make_kernel('gaussian', 1, h))
    assert s_n(ParticleConfig(np.array([[0.3]])), spec) == pytest.approx(3.09, rel=1e-6)

def test_initial_kl_vanishes_for_matched_gaussians():
    """Test KL(N(0, 1) || rho_h) = 0 when the target is N(0, 1 - h^2)"""
    h = 0.6
    target = GaussianMixture(np.zeros((1, 1)), np.array([1.0 - h ** 2]), np.ones(1))
    mu0 = GaussianMixture(np.zeros((1, 1)), np.ones(1), np.ones(1))
    assert initial_kl(mu0, target, make_kernel('gaussian', 1, h)).value == pytest.approx(0.0, abs=1e-8)
    with pytest.raises(UnsupportedFamilyError):
        initial_kl(mu0, target, make_kernel('laplace', 1, h))


def test_compute_record(line_setup):
    """Test a record carries the base and requested optional diagnostics"""
    config, spec = line_setup
    record = compute_record(config, spec, 0.5, DiagnosticsOptions(i_n=True, grid_points=513))
    assert record.t == 0.5
    assert record.v_n == pytest.approx(v_n(config, spec))
    assert record.r_n <= reciprocal_self_bound(config.n, spec.kernel)
    assert record.occupancy_min >= 1
    assert record.i_n is not None and record.i_n_error is not None
    assert record.curl_max_abs is None, "Curl is only computed when requested"
    assert record.j_lap is None


def test_compute_record_laplace(laplace_line):
    """Test Laplace records fill the Laplace functionals"""
    config, target, k = laplace_line
    spec = FieldSpec('laplace_loo', target, k)
    record = compute_record(config, spec, 0.0, DiagnosticsOptions(laplace_population=True, grid_points=257,
                                                                  fd_step=1e-7))
    assert record.v_n_lap == record.v_n
    assert record.vcal_lap is not None and record.delta_sq >= 0


def test_time_average():
    """Test the trapezoid time average over records"""
    traj = Trajectory()
    config = ParticleConfig(np.zeros((2, 1)))
    for t, value in [(0.0, 1.0), (1.0, 3.0), (2.0, 3.0)]:
        traj.append(t, int(t), config, DiagnosticsRecord(t=t, v_n=value, s_n=0.0, r_n=1.0, min_q=1.0,
                                                         occupancy_min=2))
    assert time_average(traj, 'v_n') == pytest.approx(2.5)
    with pytest.raises(ValueError):
        time_average(traj, 'i_n')


@pytest.fixture
def compact_line():
    """Smooth compact kernel with the particle support inside the target support"""
    config = ParticleConfig(np.linspace(-0.9, 0.9, 7)[:, None])
    target = empirical(np.linspace(-1.2, 1.2, 13)[:, None])
    return config, FieldSpec('conservative', target, make_kernel('smooth_compact', 1, 0.5))


def test_i_n_vanishes_at_compact_stationarity():
    """Test I_N is 0 when particles sit on the target atoms, gaps between supports included"""
    points = np.array([[-1.0], [0.0], [1.0]])
    spec = FieldSpec('conservative', empirical(points), make_kernel('smooth_compact', 1, 0.5))
    config = ParticleConfig(points)
    assert i_n(config, spec).value == pytest.approx(0.0, abs=1e-12)
    record = compute_record(config, spec, 0.0, DiagnosticsOptions(i_n=True, grid_points=257))
    assert record.i_n == pytest.approx(0.0, abs=1e-12), "Nodes outside the compact support contribute 0"


def test_support_mask():
    """Test nodes beyond h from every atom are dropped for the compact kernel only"""
    alpha = empirical(np.array([[0.0], [2.0]]))
    nodes = np.array([[0.0], [0.45], [0.55], [1.0], [1.6], [2.0]])
    compact = support_mask([alpha], make_kernel('smooth_compact', 1, 0.5), nodes)
    assert compact.tolist() == [True, True, False, False, True, True]
    shrunk = support_mask([alpha], make_kernel('smooth_compact', 1, 0.5), nodes, reach=0.1)
    assert shrunk.tolist() == [True, False, False, False, False, True], "reach pulls the edge inward"
    assert support_mask([alpha], make_kernel('gaussian', 1, 0.5), nodes).all()


def test_compact_kernel_diagnostics(compact_line):
    """Test the grid diagnostics run on a compact kernel and satisfy the Stein identity"""
    config, spec = compact_line
    grid = default_window(config, spec.target, spec.kernel, 1025)
    identity = kde_stein_identity(config, spec, grid)
    assert identity.rhs > 0
    assert identity.lhs == pytest.approx(identity.rhs, rel=2e-2)
    assert i_n(config, spec, grid).value == pytest.approx(identity.rhs)

    constants = quadrature_constants(config, spec)
    assert np.isfinite(constants.B_A) and constants.B_A >= 0
    assert np.isfinite(constants.B_V) and constants.B_V >= 0

    record = compute_record(config, spec, 0.0, DiagnosticsOptions(i_n=True, grid_points=513))
    assert record.i_n > 0 and np.isfinite(record.i_n)


def test_compact_curl_map_undefined_off_support():
    """Test curl nodes outside the compact support are NaN and the rest are finite"""
    h = 0.5
    config = ParticleConfig(np.array([[0.0, 0.0], [0.3, 0.1], [-0.2, 0.3]]))
    target = empirical(np.vstack([config.positions, [[0.1, -0.2], [0.2, 0.3]]]))
    spec = FieldSpec('conservative', target, make_kernel('smooth_compact', 2, h))
    grid = default_window(config, target, spec.kernel, 21, pad=1.0)
    nodes, curls = supported_curl_map(config, spec, grid)
    dist = np.min(np.linalg.norm(nodes[:, None, :] - config.positions[None], axis=2), axis=1)
    assert np.isnan(curls[dist >= h]).all(), "The model density vanishes there"
    assert np.isfinite(curls[dist < 0.5 * h]).all()
    assert np.isfinite(max_abs_curl(curls))

    record = compute_record(config, spec, 0.0, DiagnosticsOptions(curl=True, curl_points=21))
    assert record.curl_max_abs is not None and np.isfinite(record.curl_max_abs)


def test_max_abs_curl_and_contrast():
    """Test the curl summary skips NaN nodes and the contrast rule needs both conditions"""
    assert max_abs_curl(np.array([np.nan, -0.3, 0.1])) == pytest.approx(0.3)
    assert max_abs_curl(np.array([np.nan, np.nan])) is None
    assert curl_contrast(1e-6, 1e-3) == {'curl_contrast': pytest.approx(1000.0), 'curl_contrast_ok': True}
    assert not curl_contrast(1e-6, 5e-6)['curl_contrast_ok'], "Laplace curl must be ten times larger"
    assert not curl_contrast(10 * CURL_FLAT_TOL, 1.0)['curl_contrast_ok'], "Conservative curl must be flat"
    assert not curl_contrast(None, 1.0)['curl_contrast_ok']


def test_self_bound_breach_raises():
    """Test a reciprocal KDE above N / K_h(0) raises instead of being logged"""
    k = make_kernel('gaussian', 1, 0.5)
    bound = reciprocal_self_bound(4, k)
    assert check_self_bound(bound, 4, k) == pytest.approx(bound)
    with pytest.raises(InvariantViolation):
        check_self_bound(1.01 * bound, 4, k)


def test_r_n_raises_on_forced_breach(mocker):
    """Test r_n refuses densities below K_h(0) / N, which no configuration can produce"""
    k = make_kernel('gaussian', 1, 0.5)
    config = ParticleConfig(np.array([[0.0], [0.4], [1.1]]))
    mocker.patch('utils.diagnostics.kde_density',
                 side_effect=lambda alpha, kernel, z: np.full(len(z), 0.5 * kernel_at_zero(kernel) / len(z)))
    with pytest.raises(InvariantViolation):
        r_n(config, k)
