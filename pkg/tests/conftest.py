from pathlib import Path

import pytest

REPO_ROOT = Path(__file__).resolve().parent.parent
SMOKE_CONFIG = REPO_ROOT / "configs" / "smoke.yaml"
ACCEPTANCE_CONFIG = REPO_ROOT / "configs" / "acceptance.yaml"


@pytest.fixture(scope="session")
def smoke_config_path() -> Path:
    return SMOKE_CONFIG


@pytest.fixture(scope="session")
def acceptance_config_path() -> Path:
    return ACCEPTANCE_CONFIG
