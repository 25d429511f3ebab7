"""
Experiment configuration: one JSON document per run.

Unknown keys are rejected at every level.  default_config() holds the
templates written by scripts/write_config.py.
"""
import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple

from utils.errors import ConfigError

logger = logging.getLogger(__name__)

FIELD_KINDS = ('conservative', 'displacement', 'laplace_loo')
MODEL_SOURCES = ('full_config', 'leave_one_out')
KERNELS = ('gaussian', 'laplace', 'smooth_compact')
SCHEMES = ('frozen_euler', 'rk4')
SOURCE_TYPES = ('mixture', 'csv', 'segment')

SOURCE_KEYS = {
    'mixture': ({'type', 'means', 'variances', 'weights'}, {'sample_size'}),
    'csv': ({'type', 'path'}, set()),
    'segment': ({'type', 'start', 'end', 'noise'}, {'sample_size'}),
}
DIAGNOSTICS_KEYS = {'i_n', 'curl', 'laplace_population', 'lipschitz', 'r_k', 'grid_points', 'mc_budget'}
TOP_LEVEL_REQUIRED = {'field_kind', 'kernel', 'dim', 'bandwidth', 'eta', 't_end', 'n_particles',
                      'seed', 'target', 'initial'}
TOP_LEVEL_OPTIONAL = {'model_source', 'scheme', 'record_every', 'collision_guard', 'diagnostics',
                      'tracers', 'output_dir', 'displacement_eta'}


@dataclass(frozen=True)
class SourceSpec:
    """Where a measure comes from: a Gaussian mixture, a CSV file or a noisy segment."""
    type: str
    means: Optional[Tuple[Tuple[float, ...], ...]] = None
    variances: Optional[Tuple[float, ...]] = None
    weights: Optional[Tuple[float, ...]] = None
    sample_size: Optional[int] = None
    path: Optional[str] = None
    start: Optional[Tuple[float, ...]] = None
    end: Optional[Tuple[float, ...]] = None
    noise: Optional[float] = None

    def to_dict(self) -> dict:
        return {k: (list(map(list, v)) if k == 'means' else list(v) if isinstance(v, tuple) else v)
                for k, v in asdict(self).items() if v is not None}


@dataclass(frozen=True)
class DiagnosticsConfig:
    i_n: bool = False
    curl: bool = False
    laplace_population: bool = False
    lipschitz: bool = False
    r_k: float = 1.0
    grid_points: int = 257
    mc_budget: Optional[int] = None


@dataclass(frozen=True)
class ExperimentConfig:
    field_kind: str
    kernel: str
    dim: int
    bandwidth: float
    eta: float
    t_end: float
    n_particles: int
    seed: int
    target: SourceSpec
    initial: SourceSpec
    model_source: Optional[str] = None
    scheme: str = 'frozen_euler'
    record_every: int = 1
    collision_guard: Optional[float] = None
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)
    tracers: Tuple[int, ...] = ()
    output_dir: str = 'output'
    # figure1 only: step of the displacement run, eta / h^2 when unset
    displacement_eta: Optional[float] = None

    def to_dict(self) -> dict:
        data = {k: v for k, v in asdict(self).items() if k not in ('target', 'initial', 'diagnostics')}
        data['tracers'] = list(self.tracers)
        data['target'] = self.target.to_dict()
        data['initial'] = self.initial.to_dict()
        data['diagnostics'] = asdict(self.diagnostics)
        return data


def _check_keys(section: Dict[str, Any], required: set, optional: set, where: str):
    if not isinstance(section, dict):
        raise ConfigError(f"{where} must be a JSON object")
    missing = required - section.keys()
    unknown = section.keys() - required - optional
    if missing:
        raise ConfigError(f"{where}: missing keys {sorted(missing)}")
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


def _positive(value, name: str, integer: bool = False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{name} must be a number, got {value!r}")
    if integer and int(value) != value:
        raise ConfigError(f"{name} must be an integer, got {value!r}")
    if not value > 0:
        raise ConfigError(f"{name} must be positive, got {value!r}")
    return int(value) if integer else float(value)


def _vector(value, dim: int, name: str) -> Tuple[float, ...]:
    if not isinstance(value, list) or len(value) != dim:
        raise ConfigError(f"{name} must be a list of {dim} numbers")
    return tuple(float(v) for v in value)


def _parse_source(section: Dict[str, Any], dim: int, where: str) -> SourceSpec:
    if not isinstance(section, dict) or section.get('type') not in SOURCE_TYPES:
        raise ConfigError(f"{where}.type must be one of {SOURCE_TYPES}")
    required, optional = SOURCE_KEYS[section['type']]
    _check_keys(section, required, optional, where)
    sample_size = section.get('sample_size')
    if sample_size is not None:
        sample_size = _positive(sample_size, f"{where}.sample_size", integer=True)

    if section['type'] == 'csv':
        if not isinstance(section['path'], str) or not section['path']:
            raise ConfigError(f"{where}.path must be a non-empty string")
        return SourceSpec(type='csv', path=section['path'])

    if section['type'] == 'segment':
        return SourceSpec(type='segment', start=_vector(section['start'], dim, f"{where}.start"),
                          end=_vector(section['end'], dim, f"{where}.end"),
                          noise=float(section['noise']), sample_size=sample_size)

    means = section['means']
    if not isinstance(means, list) or not means:
        raise ConfigError(f"{where}.means must be a non-empty list")
    means = tuple(_vector(m, dim, f"{where}.means[{i}]") for i, m in enumerate(means))
    variances = tuple(_positive(v, f"{where}.variances") for v in section['variances'])
    weights = tuple(_positive(w, f"{where}.weights") for w in section['weights'])
    if not len(means) == len(variances) == len(weights):
        raise ConfigError(f"{where}: means, variances and weights differ in length")
    if abs(sum(weights) - 1.0) > 1e-12:
        raise ConfigError(f"{where}.weights must sum to 1")
    return SourceSpec(type='mixture', means=means, variances=variances, weights=weights,
                      sample_size=sample_size)


def _parse_diagnostics(section: Optional[Dict[str, Any]]) -> DiagnosticsConfig:
    if section is None:
        return DiagnosticsConfig()
    _check_keys(section, set(), DIAGNOSTICS_KEYS, "diagnostics")
    values = dict(section)
    for flag in ('i_n', 'curl', 'laplace_population', 'lipschitz'):
        if flag in values and not isinstance(values[flag], bool):
            raise ConfigError(f"diagnostics.{flag} must be true or false")
    if 'r_k' in values:
        values['r_k'] = _positive(values['r_k'], "diagnostics.r_k")
    if 'grid_points' in values:
        values['grid_points'] = _positive(values['grid_points'], "diagnostics.grid_points", integer=True)
        if values['grid_points'] < 17 or values['grid_points'] % 2 == 0:
            raise ConfigError("diagnostics.grid_points must be odd and at least 17")
    if values.get('mc_budget') is not None:
        values['mc_budget'] = _positive(values['mc_budget'], "diagnostics.mc_budget", integer=True)
    return DiagnosticsConfig(**values)


def parse_config(data: Dict[str, Any]) -> ExperimentConfig:
    """Validate a decoded JSON document and build an ExperimentConfig."""
    _check_keys(data, TOP_LEVEL_REQUIRED, TOP_LEVEL_OPTIONAL, "config")
    for key, allowed in (('field_kind', FIELD_KINDS), ('kernel', KERNELS)):
        if data[key] not in allowed:
            raise ConfigError(f"{key} must be one of {allowed}, got {data[key]!r}")
    if data.get('model_source') is not None and data['model_source'] not in MODEL_SOURCES:
        raise ConfigError(f"model_source must be one of {MODEL_SOURCES}")
    if data.get('scheme', 'frozen_euler') not in SCHEMES:
        raise ConfigError(f"scheme must be one of {SCHEMES}")

    dim = _positive(data['dim'], "dim", integer=True)
    seed = data['seed']
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    eta = _positive(data['eta'], "eta")
    t_end = _positive(data['t_end'], "t_end")
    if t_end < eta:
        raise ConfigError("t_end must be at least eta")
    n_particles = _positive(data['n_particles'], "n_particles", integer=True)
    collision_guard = data.get('collision_guard')
    if collision_guard is not None:
        collision_guard = _positive(collision_guard, "collision_guard")
    displacement_eta = data.get('displacement_eta')
    if displacement_eta is not None:
        displacement_eta = _positive(displacement_eta, "displacement_eta")
    tracers = data.get('tracers', [])
    if not isinstance(tracers, list) or any(not isinstance(t, int) or not 0 <= t < n_particles for t in tracers):
        raise ConfigError(f"tracers must be particle indices below n_particles={n_particles}")

    config = ExperimentConfig(
        field_kind=data['field_kind'], kernel=data['kernel'], dim=dim,
        bandwidth=_positive(data['bandwidth'], "bandwidth"), eta=eta, t_end=t_end,
        n_particles=n_particles, seed=seed,
        target=_parse_source(data['target'], dim, "target"),
        initial=_parse_source(data['initial'], dim, "initial"),
        model_source=data.get('model_source'), scheme=data.get('scheme', 'frozen_euler'),
        record_every=_positive(data.get('record_every', 1), "record_every", integer=True),
        collision_guard=collision_guard, diagnostics=_parse_diagnostics(data.get('diagnostics')),
        tracers=tuple(tracers), output_dir=str(data.get('output_dir', 'output')),
        displacement_eta=displacement_eta)
    validate_config(config)
    return config


def validate_config(config: ExperimentConfig):
    """Cross-field rules."""
    if config.field_kind == 'laplace_loo':
        if config.kernel != 'laplace':
            raise ConfigError("laplace_loo needs the laplace kernel")
        if config.model_source not in (None, 'leave_one_out'):
            raise ConfigError("laplace_loo needs model_source leave_one_out")
        if config.n_particles < 2:
            raise ConfigError("Leave-one-out dynamics need at least two particles")
    if config.field_kind == 'conservative':
        if config.kernel == 'laplace':
            raise ConfigError("conservative fields need the gaussian or smooth_compact kernel")
        if config.model_source not in (None, 'full_config'):
            raise ConfigError("conservative fields use the full configuration")
    if config.diagnostics.curl and config.dim != 2:
        raise ConfigError("curl diagnostics need dim = 2")
    if config.diagnostics.laplace_population and config.kernel != 'laplace':
        raise ConfigError("laplace_population diagnostics need the laplace kernel")
    if config.target.type == 'mixture' and config.kernel != 'gaussian' and config.target.sample_size is None:
        raise ConfigError("A mixture target with a non-Gaussian kernel needs sample_size")
    if config.target.type == 'segment' and config.target.sample_size is None:
        raise ConfigError("A segment target needs sample_size")


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, 'r') as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config {path} is not valid JSON: {str(e)}") from e
    config = parse_config(data)
    logger.info(f"Loaded {config.field_kind} config from {path} (hash {config_hash(config)[:12]})")
    return config


def with_seed(config: ExperimentConfig, seed: Optional[int]) -> ExperimentConfig:
    """Config with the command-line seed applied, if one was given."""
    if seed is None:
        return config
    if seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    return replace(config, seed=int(seed))


def config_hash(config: ExperimentConfig) -> str:
    """SHA-256 of the canonical (sorted-key) JSON of the effective config."""
    canonical = json.dumps(config.to_dict(), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


_TEMPLATES: Dict[str, Dict[str, Any]] = {
    'toy': {
        'field_kind': 'conservative', 'kernel': 'gaussian', 'dim': 1, 'bandwidth': 0.4,
        'eta': 0.01, 't_end': 1.0, 'n_particles': 100, 'seed': 0, 'record_every': 10,
        'target': {'type': 'mixture', 'means': [[-1.5], [1.5]], 'variances': [0.25, 0.25],
                   'weights': [0.5, 0.5]},
        'initial': {'type': 'mixture', 'means': [[0.0]], 'variances': [1.0], 'weights': [1.0]},
        'diagnostics': {'i_n': True, 'grid_points': 513},
        'tracers': [0, 1],
        'output_dir': 'output/toy',
    },
    'figure1': {
        # eta = 0.01 h^2: the displacement run uses 0.01, the same per-step motion
        'field_kind': 'conservative', 'kernel': 'gaussian', 'dim': 2, 'bandwidth': 0.55,
        'eta': 0.003025, 't_end': 1.815, 'n_particles': 80, 'seed': 0, 'record_every': 5,
        'target': {'type': 'segment', 'start': [-1.5, 0.0], 'end': [1.5, 0.0], 'noise': 0.05,
                   'sample_size': 200},
        'initial': {'type': 'segment', 'start': [0.0, -1.5], 'end': [0.0, 1.5], 'noise': 0.05},
        'diagnostics': {'curl': True, 'grid_points': 129},
        'tracers': [5, 30, 50, 75],
        'output_dir': 'output/figure1',
    },
    'figure1_literal': {
        # Conservative step 0.01 and displacement step 0.01 h^2, 600 steps each
        'field_kind': 'conservative', 'kernel': 'gaussian', 'dim': 2, 'bandwidth': 0.55,
        'eta': 0.01, 'displacement_eta': 0.003025, 't_end': 6.0, 'n_particles': 80, 'seed': 0,
        'record_every': 5,
        'target': {'type': 'segment', 'start': [-1.5, 0.0], 'end': [1.5, 0.0], 'noise': 0.05,
                   'sample_size': 200},
        'initial': {'type': 'segment', 'start': [0.0, -1.5], 'end': [0.0, 1.5], 'noise': 0.05},
        'diagnostics': {'curl': True, 'grid_points': 129},
        'tracers': [5, 30, 50, 75],
        'output_dir': 'output/figure1_literal',
    },
    'laplace': {
        'field_kind': 'laplace_loo', 'kernel': 'laplace', 'dim': 1, 'bandwidth': 0.5,
        'eta': 0.01, 't_end': 1.0, 'n_particles': 50, 'seed': 0, 'record_every': 10,
        'target': {'type': 'mixture', 'means': [[-1.5], [1.5]], 'variances': [0.25, 0.25],
                   'weights': [0.5, 0.5], 'sample_size': 200},
        'initial': {'type': 'mixture', 'means': [[0.0]], 'variances': [1.0], 'weights': [1.0]},
        'diagnostics': {'laplace_population': True, 'grid_points': 513},
        'tracers': [0],
        'output_dir': 'output/laplace',
    },
}

TEMPLATE_NAMES: List[str] = sorted(_TEMPLATES)


def default_config(name: str) -> Dict[str, Any]:
    """Template config document by name, one of TEMPLATE_NAMES."""
    if name not in _TEMPLATES:
        raise ConfigError(f"Unknown template {name!r}; choose from {TEMPLATE_NAMES}")
    return copy.deepcopy(_TEMPLATES[name])
