import json
import logging

import pytest

import main
from utils.config import default_config
from utils.errors import ConfigError, IntegrationAbort, KernelDomainError
from utils.verification import CheckResult

# Configure logging for tests
logging.basicConfig(
    level=logging.DEBUG,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)


@pytest.fixture
def config_file(tmp_path):
    """The toy template written to disk"""
    path = tmp_path / "toy.json"
    path.write_text(json.dumps(default_config('toy')))
    return path


@pytest.fixture
def passing_check():
    return CheckResult('determinism', 'Same seed gives bit-identical trajectories', 0.0, 0.0, True)


def test_verify_pass(mocker, tmp_path, passing_check):
    """Test a passing suite exits 0 and writes its report"""
    run_suite = mocker.patch('main.run_suite', return_value=[passing_check])
    code = main.main(["verify", "--suite", "euler", "--seed", "3", "--out", str(tmp_path)])
    assert code == 0
    run_suite.assert_called_once_with("euler", 3)
    report = json.loads((tmp_path / "verify_euler.json").read_text())
    assert report['seed'] == 3
    assert report['checks'][0]['pass'] is True
    logger.info("Verify report written")


def test_verify_failure_exit_code(mocker, tmp_path, passing_check):
    """Test a failed check gives exit code 3"""
    failing = CheckResult('euler_order', 'Frozen Euler converges at order one', 0.5, 0.2, False)
    mocker.patch('main.run_suite', return_value=[passing_check, failing])
    assert main.main(["verify", "--suite", "all", "--out", str(tmp_path)]) == 3


def test_simulate_dispatch(mocker, tmp_path, config_file):
    """Test simulate loads the config, applies the seed and uses --out"""
    simulate = mocker.patch('main.simulate')
    code = main.main(["simulate", "--config", str(config_file), "--out", str(tmp_path / "run"), "--seed", "9"])
    assert code == 0
    config, out_dir = simulate.call_args[0]
    assert config.seed == 9
    assert out_dir == tmp_path / "run"


def test_figure1_uses_template(mocker, tmp_path):
    """Test figure1 falls back to the built-in template"""
    figure1 = mocker.patch('main.figure1')
    assert main.main(["figure1", "--out", str(tmp_path)]) == 0
    assert figure1.call_args[0][0].dim == 2
    assert figure1.call_args[0][0].displacement_eta is None


def test_figure1_literal_preset(mocker, tmp_path):
    """Test --preset picks the template that takes both step sizes as written"""
    figure1 = mocker.patch('main.figure1')
    assert main.main(["figure1", "--preset", "figure1_literal", "--out", str(tmp_path)]) == 0
    config = figure1.call_args[0][0]
    assert (config.eta, config.displacement_eta) == (0.01, 0.003025)


def test_sweep_values_parsed(mocker, tmp_path, config_file):
    """Test comma-separated sweep values reach the sweep"""
    sweep = mocker.patch('main.sweep')
    main.main(["sweep", "--config", str(config_file), "--param", "N", "--values", "50,100,200",
               "--out", str(tmp_path)])
    assert sweep.call_args[0][1:3] == ("N", [50.0, 100.0, 200.0])
    assert sweep.call_args[1]["rate_constants"] == (1.0, 1.0, 0.0)


def test_integration_abort_exit_code(mocker, tmp_path, config_file):
    """Test an aborted run exits 1"""
    mocker.patch('main.simulate', side_effect=IntegrationAbort("step 3 failed", time=0.02, particle=1))
    assert main.main(["simulate", "--config", str(config_file), "--out", str(tmp_path)]) == 1


def test_library_error_writes_error_file(mocker, tmp_path, config_file):
    """Test other library errors leave error.json and exit 1"""
    mocker.patch('main.simulate', side_effect=KernelDomainError("gradient at an atom"))
    assert main.main(["simulate", "--config", str(config_file), "--out", str(tmp_path)]) == 1
    error = json.loads((tmp_path / "error.json").read_text())
    assert error['type'] == 'KernelDomainError'


def test_invalid_config_exit_code(tmp_path):
    """Test a config with unknown keys exits 1"""
    document = default_config('toy')
    document['colour'] = 'blue'
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(document))
    assert main.main(["simulate", "--config", str(path)]) == 1


def test_missing_config_file_exit_code(tmp_path):
    """Test a missing config file exits 1"""
    assert main.main(["simulate", "--config", str(tmp_path / "absent.json")]) == 1


@pytest.mark.parametrize("argv", [
    [],
    ["verify", "--suite", "unknown"],
    ["sweep", "--config", "x.json", "--param", "N", "--values", "a,b"],
    ["figure1", "--preset", "toy"],
])
def test_usage_errors(argv):
    """Test argparse usage errors exit with status 2"""
    with pytest.raises(SystemExit) as info:
        main.main(argv)
    assert info.value.code == 2


def test_config_error_from_experiment(mocker, tmp_path, config_file):
    """Test experiment-level config errors exit 1"""
    mocker.patch('main.sweep', side_effect=ConfigError("A sweep needs at least three values"))
    assert main.main(["sweep", "--config", str(config_file), "--param", "h", "--values", "0.1",
                      "--out", str(tmp_path)]) == 1
