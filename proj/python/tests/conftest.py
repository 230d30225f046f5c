import json
import os
import pathlib

import pytest

ROOT = pathlib.Path(__file__).resolve().parents[2]


@pytest.fixture
def smoke_config(tmp_path):
    cfg = json.loads((ROOT / "configs" / "smoke.json").read_text())
    cfg["out"] = str(tmp_path / "run")
    return cfg


@pytest.fixture
def cli():
    path = os.environ.get("HALOROUTE_CLI")
    if not path:
        pytest.skip("command-line harness not built")
    return path
