import os
import sys
import json

import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..', 'scripts')))

from write_config import write_config  # noqa: E402
from utils.config import TEMPLATE_NAMES, parse_config  # noqa: E402


@pytest.mark.parametrize("name", TEMPLATE_NAMES)
def test_write_config_templates(tmp_path, name):
    """Test each template is written as a config that parses back"""
    path = tmp_path / "configs" / f"{name}.json"
    assert write_config(name, str(path))
    parse_config(json.loads(path.read_text()))


def test_write_config_unknown_template(tmp_path):
    """Test an unknown template reports failure instead of raising"""
    assert not write_config("missing", str(tmp_path / "missing.json"))
    assert not (tmp_path / "missing.json").exists()
