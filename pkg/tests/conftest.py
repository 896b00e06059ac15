import math
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from bbtrap.optics import BeamSpec, VolumeSpec  # noqa: E402
from bbtrap.trap import PotentialGrid, build_trap, load_species  # noqa: E402

SMOKE = VolumeSpec(64, 64, 32, 200e-9, 200e-9, 2e-6)
FULL = VolumeSpec()


def matched_beams(waist=3.5e-6, power_each=0.24, theta=0.058):
    a = BeamSpec(waist, power_each, half_angle_theta=theta, polarization_tag="H")
    b = BeamSpec(waist, power_each, half_angle_theta=-theta, polarization_tag="V")
    return a, b


def harmonic_grid(n=64, pitch=50e-9, omega=2 * math.pi * 20e3, mass=2.20694650e-25, aniso=(1.0, 1.0, 1.0)):
    ax = (np.arange(n) - n // 2) * pitch
    X, Y, Z = np.meshgrid(ax, ax, ax, indexing="ij")
    k = mass * omega**2
    a = np.asarray(aniso) ** 2
    U = 0.5 * k * (a[0] * X**2 + a[1] * Y**2 + a[2] * Z**2)
    return PotentialGrid(U, (pitch,) * 3, (ax[0],) * 3)


@pytest.fixture(scope="session")
def cesium():
    return load_species("cesium")


@pytest.fixture(scope="session")
def smoke_trap(cesium):
    a, b = matched_beams()
    return build_trap(a, b, SMOKE, cesium)


@pytest.fixture(scope="session")
def full_trap(cesium):
    a, b = matched_beams()
    return build_trap(a, b, FULL, cesium)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
