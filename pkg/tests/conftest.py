import shutil
from importlib import resources
from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures() -> Path:
    return FIXTURES


@pytest.fixture
def toy_dir(tmp_path) -> Path:
    """A writable copy of the bundled toy experiment."""
    src = Path(str(resources.files("xlrr").joinpath("data", "toy")))
    dst = tmp_path / "toy"
    shutil.copytree(src, dst)
    return dst
