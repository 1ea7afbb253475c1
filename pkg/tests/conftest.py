from __future__ import annotations

from pathlib import Path

import pytest

from txdeploy import pml, world as world_mod

REPO = Path(__file__).resolve().parent.parent
SCENARIOS = REPO / "scenarios"


def load_process(name: str):
    path = SCENARIOS / name
    result = pml.parse(path.read_text(encoding="utf-8"), file=str(path))
    assert result.ok, [str(d) for d in result.diagnostics]
    return result.process


def load_world(name: str, verify_replay: bool = True):
    path = SCENARIOS / name
    result = world_mod.parse_world(path.read_text(encoding="utf-8"), file=str(path))
    assert result.ok, [str(d) for d in result.diagnostics]
    result.world.verify_replay = verify_replay
    return result.world


@pytest.fixture
def scenarios_dir() -> Path:
    return SCENARIOS
