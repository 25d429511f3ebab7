import pytest
import numpy as np

from utils.dynamics import (IntegratorParams, Scheme, Trajectory, accumulate_gamma, check_collision_guard,
                            distortion_report, endpoint, estimate_lipschitz, integrate, integrate_rk4,
                            potential_trace, step_frozen_euler, step_rk4, tracer_paths)
from utils.errors import CollisionGuardError, DimensionMismatchError, IntegrationAbort
from utils.fields import FieldSpec, particle_velocities
from utils.kernels import make_kernel
from utils.measures import GaussianMixture, ParticleConfig, empirical


@pytest.fixture
def two_gaussians():
    """Symmetric two-component mixture in the plane"""
    means = np.array([[-1.5, 0.0], [1.5, 0.0]])
    return GaussianMixture(means, np.array([0.25, 0.25]), np.array([0.5, 0.5]))


@pytest.fixture
def conservative_spec(two_gaussians):
    return FieldSpec('conservative', two_gaussians, make_kernel('gaussian', 2, 0.8))


@pytest.fixture
def config0():
    rng = np.random.default_rng(5)
    return ParticleConfig(rng.standard_normal((15, 2)))


def test_params_validation():
    """Test integrator parameter checks and the step count"""
    assert IntegratorParams(eta=0.04, t_end=1.0).n_steps == 25
    with pytest.raises(ValueError):
        IntegratorParams(eta=0.0, t_end=1.0)
    with pytest.raises(ValueError):
        IntegratorParams(eta=0.5, t_end=0.1)
    with pytest.raises(ValueError):
        IntegratorParams(eta=0.1, t_end=1.0, record_every=0)


def test_single_euler_step(conservative_spec, config0):
    """Test one frozen Euler step is x + eta v(x)"""
    stepped = step_frozen_euler(config0, conservative_spec, 0.01)
    expected = config0.positions + 0.01 * particle_velocities(conservative_spec, config0)
    assert np.array_equal(stepped.positions, expected), "All particles move from the same frozen snapshot"


def test_integrate_records(conservative_spec, config0):
    """Test recording cadence and trajectory layout"""
    traj = integrate(config0, conservative_spec, IntegratorParams(eta=0.01, t_end=0.25, record_every=10))
    assert traj.steps == [0, 10, 20, 25], "Records every 10 steps plus the final step"
    assert traj.times[-1] == pytest.approx(0.25)
    assert traj.positions().shape == (4, 15, 2)
    assert traj.meta['integrator']['n_steps'] == 25


def test_final_step_lands_on_t_end(conservative_spec, config0):
    """Test a horizon that is not a whole number of steps ends exactly at t_end"""
    params = IntegratorParams(eta=0.1, t_end=0.25)
    assert params.n_steps == 3
    traj = integrate(config0, conservative_spec, params)
    assert traj.times == pytest.approx([0.0, 0.1, 0.2, 0.25])
    assert traj.times[-1] == 0.25, "The last step is shortened to t_end - t"

    expected = config0
    for eta in (0.1, 0.1, 0.05):
        expected = step_frozen_euler(expected, conservative_spec, eta)
    assert np.allclose(endpoint(traj), expected.positions, rtol=0.0, atol=1e-14)

    reference = integrate_rk4(config0, conservative_spec, params)
    assert reference.times[-1] == 0.25


def test_record_hook(conservative_spec, config0):
    """Test the record hook sees each recorded state"""
    seen = []
    integrate(config0, conservative_spec, IntegratorParams(eta=0.05, t_end=0.2, record_every=2),
              record_hook=lambda c, t: seen.append(t) or t)
    assert seen == pytest.approx([0.0, 0.1, 0.2])


def test_determinism(conservative_spec, config0):
    """Test two identical runs are bit-identical"""
    params = IntegratorParams(eta=0.02, t_end=0.3)
    first = integrate(config0, conservative_spec, params).positions()
    second = integrate(config0, conservative_spec, params).positions()
    assert np.array_equal(first, second)


def test_stationary_on_target_atoms():
    """Test particles sitting on the target atoms never move"""
    points = np.random.default_rng(3).standard_normal((10, 2))
    spec = FieldSpec('conservative', empirical(points), make_kernel('gaussian', 2, 0.5))
    traj = integrate(ParticleConfig(points), spec, IntegratorParams(eta=0.1, t_end=1.0))
    assert np.allclose(endpoint(traj), points, rtol=0, atol=1e-12)


def test_rk4_linear_drift():
    """Test RK4 on the exactly linear drift dx/dt = -x"""
    h = 0.5
    target = GaussianMixture(np.zeros((1, 1)), np.array([1.0 - h ** 2]), np.ones(1))
    spec = FieldSpec('conservative', target, make_kernel('gaussian', 1, h))
    traj = integrate_rk4(ParticleConfig(np.array([[1.2]])), spec, IntegratorParams(eta=0.01, t_end=1.0))
    assert endpoint(traj)[0, 0] == pytest.approx(1.2 * np.exp(-1.0), rel=1e-8)
    assert traj.meta['integrator']['scheme'] == Scheme.RK4.value


def test_step_rk4_beats_euler():
    """Test one RK4 step is closer to the exact flow than one Euler step"""
    h = 0.5
    target = GaussianMixture(np.zeros((1, 1)), np.array([1.0 - h ** 2]), np.ones(1))
    spec = FieldSpec('conservative', target, make_kernel('gaussian', 1, h))
    config = ParticleConfig(np.array([[1.0]]))
    exact = np.exp(-0.1)
    assert abs(step_rk4(config, spec, 0.1).positions[0, 0] - exact) < 1e-6
    assert abs(step_frozen_euler(config, spec, 0.1).positions[0, 0] - exact) > 1e-3


def test_euler_first_order(conservative_spec, config0):
    """Test the Euler endpoint error halves with the step"""
    reference = endpoint(integrate_rk4(config0, conservative_spec, IntegratorParams(eta=1e-3, t_end=0.5)))
    errors = []
    for eta in (0.05, 0.025, 0.0125):
        traj = integrate(config0, conservative_spec, IntegratorParams(eta=eta, t_end=0.5))
        errors.append(np.max(np.linalg.norm(endpoint(traj) - reference, axis=1)))
    slope = np.polyfit(np.log([0.05, 0.025, 0.0125]), np.log(errors), 1)[0]
    assert 0.8 <= slope <= 1.2, f"Euler slope {slope} should be close to one"


def test_collision_guard_aborts():
    """Test the guard aborts a Laplace run with the offending pair"""
    config = ParticleConfig(np.array([[0.0, 0.0], [1e-9, 0.0], [1.0, 1.0]]))
    with pytest.raises(CollisionGuardError) as info:
        check_collision_guard(config, 1e-6)
    assert set(info.value.pair) == {0, 1}

    target = empirical(np.array([[0.5, 0.5], [-0.5, 0.2]]))
    spec = FieldSpec('laplace_loo', target, make_kernel('laplace', 2, 0.5))
    with pytest.raises(IntegrationAbort) as abort:
        integrate(config, spec, IntegratorParams(eta=0.01, t_end=0.05, collision_guard=1e-6))
    details = abort.value.to_dict()
    assert details['type'] == 'CollisionGuardError'
    assert details['time'] == 0.0
    assert details['particle'] in (0, 1)


def test_lipschitz_and_distortion(conservative_spec, config0):
    """Test Lipschitz tracking feeds a satisfied distortion check"""
    traj = integrate(config0, conservative_spec,
                     IntegratorParams(eta=0.01, t_end=0.2, record_every=5, track_lipschitz=True))
    assert len(traj.lipschitz) == 21, "One estimate per step plus the initial state"
    gamma = accumulate_gamma(traj)
    assert gamma > 0
    report = distortion_report(traj, gamma)
    assert report.bound == pytest.approx(np.exp(gamma))
    assert report.max_ratio > 0
    assert bool(report.violating_pairs) == (report.max_ratio > report.bound * 1.05), \
        "Violations are reported exactly when the worst ratio exceeds the tolerance"
    assert report.excluded_pairs == ()


def test_estimate_lipschitz_linear_field():
    """Test the frozen field of one particle is affine with slope 3"""
    h = 0.5
    target = GaussianMixture(np.zeros((1, 1)), np.array([1.0 - h ** 2]), np.ones(1))
    spec = FieldSpec('conservative', target, make_kernel('gaussian', 1, h))
    config = ParticleConfig(np.array([[0.3]]))
    estimate = estimate_lipschitz(config, spec, np.array([[0.3]]))
    assert estimate.skipped_probes == ()
    assert estimate.value == pytest.approx(3.0, rel=1e-6), "b(z) = -z - (x - z) / h^2 has Jacobian 3"


def test_trajectory_append_rules(config0):
    """Test trajectory times must increase and shapes stay fixed"""
    traj = Trajectory()
    traj.append(0.0, 0, config0)
    with pytest.raises(ValueError):
        traj.append(0.0, 1, config0)
    with pytest.raises(DimensionMismatchError):
        traj.append(0.1, 1, ParticleConfig(np.zeros((3, 2))))


def test_tracer_paths(conservative_spec, config0):
    """Test tracer columns follow the chosen particles"""
    traj = integrate(config0, conservative_spec, IntegratorParams(eta=0.05, t_end=0.2))
    frame = tracer_paths(traj, [0, 3])
    assert list(frame.columns) == ['step', 't', 'tracer_0_x_0', 'tracer_0_x_1', 'tracer_3_x_0', 'tracer_3_x_1']
    assert np.array_equal(frame['tracer_3_x_1'].to_numpy(), traj.positions()[:, 3, 1])


def test_potential_trace_increases(conservative_spec, config0):
    """Test a tracer in the frozen conservative field climbs the potential"""
    values = potential_trace(config0, conservative_spec, np.array([0.2, 0.9]), 0.005, 100)
    assert len(values) == 101
    assert np.all(np.diff(values) >= -1e-12), "Potential should not decrease along the frozen flow"


def test_lipschitz_points_avoid_laplace_kinks():
    """Test evaluation points on atoms move off the kink and are evaluated there"""
    config = ParticleConfig(np.array([[0.0], [1.0]]))
    spec = FieldSpec('laplace_loo', empirical(np.array([[0.5], [2.0]])), make_kernel('laplace', 1, 0.5))
    estimate = estimate_lipschitz(config, spec, config.positions)
    assert estimate.skipped_probes == ()
    assert estimate.value > 0
    # Two stencil radii off each atom, along the first axis for a point sitting on its atom
    moved = estimate_lipschitz(config, spec, np.array([[4e-4], [1.0 + 4e-4]]))
    assert moved.value == estimate.value


def test_lipschitz_point_trapped_between_atoms_is_skipped():
    """Test a point with no kink-free spot nearby is reported instead of evaluated"""
    config = ParticleConfig(np.array([[0.0], [1.0]]))
    spec = FieldSpec('laplace_loo', empirical(np.array([[2.5e-4], [2.0]])), make_kernel('laplace', 1, 0.5))
    estimate = estimate_lipschitz(config, spec, np.array([[5e-5], [0.5]]))
    assert estimate.skipped_probes == (0,)
    assert estimate.value > 0, "The point clear of every atom is still used"
