"""
Experiment drivers behind the command line: single simulations, the
conservative-versus-Laplace comparison figure and parameter sweeps.
"""
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from utils.config import ExperimentConfig, SourceSpec, config_hash
from utils.diagnostics import (DiagnosticsOptions, compute_record, curl_contrast, default_window, initial_kl,
                               max_abs_curl, optimal_bandwidth, supported_curl_map, time_average)
from utils.dynamics import (IntegratorParams, Trajectory, accumulate_gamma, distortion_report,
                            endpoint, integrate, integrate_rk4, potential_trace, tracer_paths)
from utils.errors import ConfigError, DriftLabError, IntegrationAbort, RegimeError
from utils.export import (FLOAT_FORMAT, write_curl_map, write_diagnostics, write_error, write_json, write_tracers,
                          write_trajectory)
from utils.fields import FieldKind, FieldSpec, ModelSource
from utils.kernels import KernelFamily, KernelSpec, make_kernel
from utils.measures import (GaussianMixture, Measure, ParticleConfig, empirical, load_empirical_csv,
                            sample_measure)
from utils.numerics import QuadratureRule

logger = logging.getLogger(__name__)

FIGURE1_CURL_POINTS = 41
SWEEP_PARAMS = ('N', 'h', 'eta')
# Expected log-log slope of the swept metric, where one is known
REFERENCE_SLOPES = {'N': -1.0, 'h': None, 'eta': 1.0}
REFERENCE_REFINEMENT = 100
# A, C, beta for the h-sweep bandwidth prediction
DEFAULT_RATE_CONSTANTS = (1.0, 1.0, 0.0)


@dataclass
class RunSummary:
    out_dir: Path
    files: Dict[str, Path] = field(default_factory=dict)
    summary: Dict[str, object] = field(default_factory=dict)


def _seed_streams(seed: int) -> Tuple[np.random.SeedSequence, np.random.SeedSequence]:
    """Independent (initial, target) seed streams derived from one seed."""
    initial, target = np.random.SeedSequence(seed).spawn(2)
    return initial, target


def _mixture(source: SourceSpec) -> GaussianMixture:
    return GaussianMixture(np.asarray(source.means, dtype=float), np.asarray(source.variances, dtype=float),
                           np.asarray(source.weights, dtype=float))


def _sample_segment(source: SourceSpec, n: int, seed) -> np.ndarray:
    """Uniform points on the segment start-end plus isotropic Gaussian noise."""
    rng = np.random.default_rng(seed)
    start, end = np.asarray(source.start), np.asarray(source.end)
    along = rng.uniform(size=(n, 1))
    return start + along * (end - start) + source.noise * rng.standard_normal((n, start.size))


def _load_measure(source: SourceSpec, dim: int):
    measure = load_empirical_csv(source.path)
    if measure.dim != dim:
        raise ConfigError(f"{source.path} has dimension {measure.dim}, config says {dim}")
    return measure


def build_kernel(config: ExperimentConfig) -> KernelSpec:
    return make_kernel(config.kernel, config.dim, config.bandwidth)


def build_target(config: ExperimentConfig) -> Measure:
    """Target measure: a mixture, its sample, a CSV point cloud or a noisy segment."""
    source = config.target
    _, seed = _seed_streams(config.seed)
    if source.type == 'csv':
        return _load_measure(source, config.dim)
    if source.type == 'segment':
        return empirical(_sample_segment(source, source.sample_size, seed))
    mixture = _mixture(source)
    if source.sample_size is None:
        return mixture
    return empirical(sample_measure(mixture, source.sample_size, seed))


def build_initial(config: ExperimentConfig) -> Tuple[ParticleConfig, Optional[GaussianMixture]]:
    """Initial configuration and, when it was drawn from one, the initial mixture."""
    source = config.initial
    seed, _ = _seed_streams(config.seed)
    if source.type == 'csv':
        points = _load_measure(source, config.dim).points
        if points.shape[0] != config.n_particles:
            raise ConfigError(f"{source.path} holds {points.shape[0]} points, n_particles={config.n_particles}")
        return ParticleConfig(points), None
    if source.type == 'segment':
        return ParticleConfig(_sample_segment(source, config.n_particles, seed)), None
    mixture = _mixture(source)
    return ParticleConfig(sample_measure(mixture, config.n_particles, seed)), mixture


def build_field(config: ExperimentConfig, target: Measure, k: KernelSpec) -> FieldSpec:
    return FieldSpec(FieldKind(config.field_kind), target, k,
                     ModelSource(config.model_source) if config.model_source else None)


def build_params(config: ExperimentConfig) -> IntegratorParams:
    return IntegratorParams(eta=config.eta, t_end=config.t_end, scheme=config.scheme,
                            record_every=config.record_every, collision_guard=config.collision_guard,
                            track_lipschitz=config.diagnostics.lipschitz)


def build_options(config: ExperimentConfig) -> DiagnosticsOptions:
    d = config.diagnostics
    return DiagnosticsOptions(i_n=d.i_n, curl=d.curl, laplace_population=d.laplace_population, r_k=d.r_k,
                              grid_points=d.grid_points, mc_budget=d.mc_budget, seed=config.seed)


def _window(config0: ParticleConfig, target: Measure, k: KernelSpec, config: ExperimentConfig) -> dict:
    if config.dim <= 2 and config.diagnostics.mc_budget is None:
        return default_window(config0, target, k, config.diagnostics.grid_points).to_dict()
    return {'mode': 'mc', 'samples': config.diagnostics.mc_budget, 'seed': config.seed}


def _run_or_report(out_dir: Path, run, header: dict) -> Trajectory:
    try:
        return run()
    except IntegrationAbort as e:
        write_error(out_dir, {**header, **e.to_dict()})
        raise


def simulate(config: ExperimentConfig, out_dir=None) -> RunSummary:
    """
    Run one configured simulation and write its artifacts.

    Writes trajectory.csv (with a trajectory.json sidecar), diagnostics.csv,
    report.json and, when tracers are configured, tracers.csv.  An aborted run
    leaves error.json instead and re-raises the IntegrationAbort.
    """
    out_dir = Path(out_dir or config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    k = build_kernel(config)
    target = build_target(config)
    config0, mu0 = build_initial(config)
    spec = build_field(config, target, k)
    params = build_params(config)
    options = build_options(config)
    digest = config_hash(config)
    header = {'config_hash': digest, 'seed': config.seed}
    meta = {**header, 'config': config.to_dict(), 'window': _window(config0, target, k, config)}

    traj = _run_or_report(out_dir, lambda: integrate(
        config0, spec, params, record_hook=lambda c, t: compute_record(c, spec, t, options), meta=meta), header)

    summary = {**header, 'final_time': traj.times[-1], 'n_records': len(traj.times),
               'v_n_time_average': time_average(traj, 'v_n'),
               'final_record': traj.records[-1].to_row(), 'window': meta['window']}
    if config.diagnostics.i_n:
        summary['i_n_time_average'] = time_average(traj, 'i_n')
    if config.diagnostics.lipschitz:
        gamma_hat = accumulate_gamma(traj)
        summary['gamma_hat'] = gamma_hat
        summary['distortion'] = distortion_report(traj, gamma_hat).to_dict()
    if mu0 is not None and k.family == KernelFamily.GAUSSIAN and config.dim <= 2:
        try:
            summary['kappa0'] = initial_kl(mu0, target, k).value
        except DriftLabError as e:
            logger.warning(f"Initial KL not available: {str(e)}")

    result = RunSummary(out_dir=out_dir)
    result.files['trajectory'], result.files['trajectory_meta'] = write_trajectory(traj, out_dir / 'trajectory.csv')
    result.files['diagnostics'] = write_diagnostics(traj.records, out_dir / 'diagnostics.csv')
    if config.tracers:
        result.files['tracers'] = write_tracers(tracer_paths(traj, config.tracers), out_dir / 'tracers.csv')
    result.files['report'] = write_json(summary, out_dir / 'report.json')
    result.summary = summary
    logger.info(f"Simulation finished: V_N time average {summary['v_n_time_average']:.4e}")
    return result


def figure1(config: ExperimentConfig, out_dir=None) -> RunSummary:
    """
    Conservative Gaussian drift against the Laplace displacement drift.

    Both runs start from the same configuration and take the same number of
    steps. The displacement step is displacement_eta when the config sets it,
    else eta / h^2 so that both move particles by the same amount per step under
    the Gaussian identity u = h^2 b.  Curl maps of both fields are taken on the
    initial configuration, and the summary records whether the Laplace curl
    dominates the conservative one.
    """
    if config.dim != 2 or config.field_kind != 'conservative':
        raise ConfigError("figure1 needs a planar conservative config")
    out_dir = Path(out_dir or config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    h = config.bandwidth
    k = build_kernel(config)
    target = build_target(config)
    config0, _ = build_initial(config)
    tracers = [int(t) for t in (config.tracers or np.linspace(0, config.n_particles - 1, 4).astype(int))]
    header = {'config_hash': config_hash(config), 'seed': config.seed}

    specs = {
        'conservative': FieldSpec(FieldKind.CONSERVATIVE, target, k),
        'laplace': FieldSpec(FieldKind.DISPLACEMENT, target, make_kernel(KernelFamily.LAPLACE, 2, h),
                             ModelSource.FULL_CONFIG),
    }
    n_steps = build_params(config).n_steps
    eta_laplace = config.displacement_eta or config.eta / h ** 2
    params = {
        'conservative': replace(build_params(config), track_lipschitz=False),
        'laplace': IntegratorParams(eta=eta_laplace, t_end=n_steps * eta_laplace,
                                    record_every=config.record_every, collision_guard=config.collision_guard),
    }
    grid = default_window(config0, target, k, FIGURE1_CURL_POINTS, pad=1.0, rule=QuadratureRule.TRAPEZOID)

    result = RunSummary(out_dir=out_dir)
    summary = {**header, 'tracers': tracers, 'n_steps': n_steps, 'curl_window': grid.to_dict(), 'runs': {}}
    for name, spec in specs.items():
        traj = _run_or_report(out_dir, lambda: integrate(config0, spec, params[name], meta=header),
                              {**header, 'run': name})
        nodes, curls = supported_curl_map(config0, spec, grid)
        result.files[f"tracers_{name}"] = write_tracers(tracer_paths(traj, tracers), out_dir / f"tracers_{name}.csv")
        result.files[f"curl_{name}"] = write_curl_map(nodes, curls, out_dir / f"curl_{name}.csv")
        summary['runs'][name] = {
            'eta': params[name].eta,
            'curl_max_abs': max_abs_curl(curls),
            'tracer_endpoints': endpoint(traj)[tracers].tolist(),
        }
        logger.info(f"figure1 {name}: max |curl| {summary['runs'][name]['curl_max_abs']}")

    summary.update(curl_contrast(summary['runs']['conservative']['curl_max_abs'],
                                 summary['runs']['laplace']['curl_max_abs']))
    if not summary['curl_contrast_ok']:
        logger.warning(f"figure1 curl contrast not reached: {summary['curl_contrast']}")

    potential = potential_trace(config0, specs['conservative'], config0.positions[tracers[0]], config.eta, n_steps)
    summary['potential_nondecreasing'] = bool(np.all(np.diff(potential) >= -1e-12))
    cons = np.asarray(summary['runs']['conservative']['tracer_endpoints'])
    lap = np.asarray(summary['runs']['laplace']['tracer_endpoints'])
    summary['tracer_endpoint_gap'] = float(np.max(np.linalg.norm(cons - lap, axis=1)))
    result.files['summary'] = write_json(summary, out_dir / 'figure1.json')
    result.summary = summary
    return result


def _with_value(config: ExperimentConfig, param: str, value: float) -> ExperimentConfig:
    if param == 'N':
        n = int(round(value))
        return replace(config, n_particles=n, tracers=tuple(t for t in config.tracers if t < n))
    if param == 'h':
        return replace(config, bandwidth=float(value))
    return replace(config, eta=float(value))


def _time_averaged_speed(config: ExperimentConfig) -> float:
    k = build_kernel(config)
    target = build_target(config)
    config0, _ = build_initial(config)
    spec = build_field(config, target, k)
    traj = integrate(config0, spec, replace(build_params(config), track_lipschitz=False),
                     record_hook=lambda c, t: compute_record(c, spec, t))
    return time_average(traj, 'v_n')


def _endpoint(config: ExperimentConfig, reference: bool = False) -> np.ndarray:
    k = build_kernel(config)
    config0, _ = build_initial(config)
    spec = build_field(config, build_target(config), k)
    params = replace(build_params(config), track_lipschitz=False)
    params = replace(params, record_every=params.n_steps)
    traj = (integrate_rk4 if reference else integrate)(config0, spec, params)
    return endpoint(traj)


def fit_slope(values: Sequence[float], metrics: Sequence[float]) -> Optional[float]:
    """Least-squares slope of log(metric) against log(value) over usable points."""
    x, y = np.asarray(values, dtype=float), np.asarray(metrics, dtype=float)
    keep = np.isfinite(y) & (y > 0) & (x > 0)
    if keep.sum() < 2:
        return None
    return float(np.polyfit(np.log(x[keep]), np.log(y[keep]), 1)[0])


def sweep(config: ExperimentConfig, param: str, values: Sequence[float], out_dir=None,
          rate_constants: Tuple[float, float, float] = DEFAULT_RATE_CONSTANTS) -> pd.DataFrame:
    """
    Vary N, h or eta and record one metric per value.

    For N and h the metric is the time-averaged V_N.  For eta it is the
    largest endpoint deviation from an RK4 reference run with step
    min(values) / 100.  A failed value is kept as a row with its error.
    An h sweep also reports the balanced bandwidth for rate_constants
    (A, C, beta) at the config's N and dimension.
    """
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"Sweep parameter must be one of {SWEEP_PARAMS}, got {param!r}")
    values = sorted(float(v) for v in values)
    if len(values) < 3:
        raise ConfigError("A sweep needs at least three values")
    if any(v <= 0 for v in values):
        raise ConfigError("Sweep values must be positive")
    prediction = None
    if param == 'h':
        A, C, beta = rate_constants
        try:
            prediction = asdict(optimal_bandwidth(A, C, beta, config.dim, config.n_particles))
        except (RegimeError, ValueError) as e:
            raise ConfigError(f"Invalid rate constants {rate_constants}: {str(e)}") from e
    out_dir = Path(out_dir or config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    reference = None
    if param == 'eta':
        for v in values:
            steps = config.t_end / v
            if abs(steps - round(steps)) > 1e-9 * steps:
                raise ConfigError(f"t_end={config.t_end} is not a whole number of steps of {v}")
        ref_eta = values[0] / REFERENCE_REFINEMENT
        logger.info(f"Computing RK4 reference with eta={ref_eta}")
        reference = _endpoint(replace(config, eta=ref_eta, scheme='rk4'), reference=True)

    rows: List[dict] = []
    for value in values:
        run_config = _with_value(config, param, value)
        try:
            if reference is None:
                metric = _time_averaged_speed(run_config)
            else:
                metric = float(np.max(np.linalg.norm(_endpoint(run_config) - reference, axis=1)))
            rows.append({'param': param, 'value': value, 'metric': metric, 'status': 'ok'})
        except DriftLabError as e:
            logger.error(f"Sweep value {param}={value} failed: {str(e)}")
            rows.append({'param': param, 'value': value, 'metric': np.nan, 'status': f"failed: {str(e)}"})

    frame = pd.DataFrame(rows)
    slope = fit_slope(frame['value'], frame['metric'])
    frame.to_csv(out_dir / 'sweep.csv', index=False, float_format=FLOAT_FORMAT)
    report = {'param': param, 'values': values, 'metric': 'endpoint_error' if param == 'eta' else 'v_n_time_average',
              'slope': slope, 'reference_slope': REFERENCE_SLOPES[param],
              'config_hash': config_hash(config), 'seed': config.seed}
    if prediction is not None:
        report['optimal_bandwidth'] = prediction
    write_json(report, out_dir / 'sweep.json')
    logger.info(f"Sweep over {param}: fitted log-log slope {slope}")
    return frame
