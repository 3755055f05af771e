"""
Shared fixtures and configuration for all tests.
"""

import sys
from pathlib import Path

import pytest

# Add src to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from blank_gen import BlankSpec, parse_blank_spec, parse_circuit_spec  # noqa: E402
from gesture import synth_corpus  # noqa: E402
from settings import ToolSettings  # noqa: E402

from tests.fixtures.shapes import (  # noqa: E402
    create_blank_document,
    create_cube_mesh,
    create_egg_scan,
    create_mouse_circuit,
    create_small_circuit,
    create_sphere_mesh,
    egg_window_pose,
)


@pytest.fixture
def cube_mesh():
    """10 mm cube centred on the origin."""
    return create_cube_mesh()


@pytest.fixture
def sphere_mesh():
    return create_sphere_mesh(radius=10.0)


@pytest.fixture(scope="session")
def egg_scan():
    """Watertight stand-in for a scanned sculpture (built once per session)."""
    return create_egg_scan()


@pytest.fixture
def egg_pose():
    return egg_window_pose()


@pytest.fixture
def small_blank_spec() -> BlankSpec:
    return parse_blank_spec(create_blank_document())


@pytest.fixture
def mouse_circuit():
    return parse_circuit_spec(create_mouse_circuit())


@pytest.fixture
def small_circuit():
    return parse_circuit_spec(create_small_circuit())


@pytest.fixture
def coarse_settings():
    """Voxel settings coarse enough for fast end-to-end runs."""
    return ToolSettings(pitch=0.75)


@pytest.fixture(scope="session")
def synth_strokes():
    return synth_corpus(n_per_class=12, noise_sigma=0.1, seed=3, n_users=3, device_id="mouse-01", slip_rate=0.0)
