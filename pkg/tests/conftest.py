"""Pytest configuration file for tests."""

import sys
from pathlib import Path

import pytest

# Add the project root directory to the Python path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))


@pytest.fixture(autouse=True)
def solver_environment(monkeypatch: pytest.MonkeyPatch) -> None:
    """Keep solver routing independent of the developer's shell and .env"""
    monkeypatch.delenv("HJBSOS_BLOCK_THRESHOLD", raising=False)
    monkeypatch.delenv("HJBSOS_SDP_SOLVER", raising=False)
