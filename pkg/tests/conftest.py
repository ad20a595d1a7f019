"""Shared fixtures: operators are expensive, so they are cached on disk."""
import os
import tempfile
from pathlib import Path

import numpy as np
import pytest

from kinlayer.collision import build_operator
from kinlayer.velocity import build_grid

CACHE = Path(os.environ.get("KINLAYER_OPCACHE",
                            Path(tempfile.gettempdir()) / "kinlayer-opcache"))


def operator(n_r, n_phi, vmax=6.0):
    CACHE.mkdir(parents=True, exist_ok=True)
    return build_operator(build_grid(vmax, n_r, n_phi), cache_dir=CACHE)


@pytest.fixture(scope="session")
def op():
    return operator(24, 32)


@pytest.fixture(scope="session")
def grid(op):
    return op.grid


@pytest.fixture(scope="session")
def op_fine():
    return operator(48, 64)


@pytest.fixture
def rng():
    return np.random.default_rng(20261016)


ROOT = Path(__file__).resolve().parents[1]


def write_config(path, drop=(), **overrides):
    """Example config with the shared cache; ``sec__key=value`` overrides, ``drop`` removes blocks."""
    import configparser
    cp = configparser.ConfigParser()
    cp.read(ROOT / "configs" / "example.ini")
    cp.set("velocity", "cache_dir", str(CACHE))
    for sec in drop:
        cp.remove_section(sec)
    for key, val in overrides.items():
        sec, k = key.split("__")
        cp.set(sec, k, val)
    with open(path, "w") as fh:
        cp.write(fh)
    return path


_ACCEPTANCE = []


@pytest.fixture(scope="session")
def record():
    """Collects one pass/fail line per acceptance criterion for the terminal summary."""
    def add(line):
        print(line)
        _ACCEPTANCE.append(line)
    return add


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
