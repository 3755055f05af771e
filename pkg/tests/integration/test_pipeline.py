"""
End-to-end run: scanned sculpture + circuit spec -> two printable parts.
"""

import json
import sys
from pathlib import Path

import numpy as np
import pytest

# Add src to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent.parent / "src"))

from assembly import PlanOverrides, RunConfig, run_pipeline
from blank_gen import parse_blank_spec, reference_points
from errors import StageError
from mesh_core import TriangleMesh, load_mesh, validate
from registration import FiducialObservation
from settings import ToolSettings
from tests.fixtures.shapes import create_blank_document, create_egg_scan, egg_window_pose

SETTINGS = ToolSettings(pitch=1.0)


@pytest.fixture(scope="module")
def spec():
    return parse_blank_spec(create_blank_document())


@pytest.fixture(scope="module")
def picked(spec):
    """Fiducials as a user would pick them on the egg scan, shuffled."""
    return FiducialObservation(egg_window_pose().apply(reference_points(spec))[[1, 2, 0]])


@pytest.fixture(scope="module")
def run(spec, picked, tmp_path_factory):
    out = tmp_path_factory.mktemp("egg")
    config = RunConfig(name="egg", settings=SETTINGS)
    parts = run_pipeline(create_egg_scan(), spec, picked, config=config, out_dir=out)
    return parts, out


@pytest.mark.integration
@pytest.mark.slow
class TestPipeline:
    """Test run_pipeline on the egg scan."""

    def test_all_stages_ran(self, run):
        parts, _ = run
        assert parts.report["stages"] == [
            "repair",
            "validate",
            "register",
            "bracket_pose",
            "plan",
            "shell",
            "split",
            "cut_window",
            "place_bracket",
            "fasteners",
            "fidelity",
            "export",
        ]
        assert "failed_stage" not in parts.report

    def test_parts_are_printable(self, run):
        parts, _ = run
        for mesh in (parts.part_a, parts.part_b):
            d = validate(mesh)
            assert d.watertight and d.manifold
        assert parts.report["parts"]["volumes"]["part_a"] > 0
        assert parts.report["parts"]["volumes"]["part_b"] > 0

    def test_parts_do_not_interfere(self, run):
        parts, _ = run
        p = parts.report["parts"]
        assert p["interference_volume"] <= p["interference_bound"] + 1e-9

    def test_window_half_holds_the_window(self, run):
        parts, _ = run
        # the part containing the flat face is the one cut for the window
        assert parts.part_b.vertices[:, 2].max() == pytest.approx(22.0, abs=1.0)
        assert parts.part_a.vertices[:, 2].max() < parts.part_b.vertices[:, 2].max()

    def test_registration_recovered_window(self, run):
        parts, _ = run
        reg = parts.report["registration"]
        assert reg["residual_rms"] < 1e-6
        assert reg["source"] == "manual"

    def test_exterior_stays_close_to_scan(self, run):
        parts, _ = run
        assert parts.report["exterior_hausdorff"] <= 2.0 * SETTINGS.pitch

    def test_outputs_written(self, run):
        parts, out = run
        a = load_mesh(out / "egg_a.stl")
        b = load_mesh(out / "egg_b.stl")
        assert len(a.triangles) == len(parts.part_a.triangles)
        assert len(b.triangles) == len(parts.part_b.triangles)

        report = json.loads((out / "egg_report.json").read_text())
        assert report["config"]["name"] == "egg"
        assert report["config"]["settings"]["pitch"] == 1.0
        assert report["bom"]
        assert report["plan"]["shell_thickness"] == pytest.approx(3.0)

    def test_rerun_is_byte_identical(self, run, spec, picked, tmp_path):
        _, out = run
        again = tmp_path / "again"
        run_pipeline(create_egg_scan(), spec, picked, config=RunConfig(name="egg", settings=SETTINGS), out_dir=again)
        for name in ("egg_a.stl", "egg_b.stl", "egg_report.json"):
            assert (again / name).read_bytes() == (out / name).read_bytes()


@pytest.mark.integration
class TestPipelineFailures:
    """Test stage reporting when a run cannot finish."""

    def test_bad_fiducials_fail_at_register(self, spec, tmp_path):
        points = egg_window_pose().apply(reference_points(spec))
        points[0] += np.array([0.0, 0.0, 4.0])
        with pytest.raises(StageError) as exc:
            run_pipeline(
                create_egg_scan(),
                spec,
                FiducialObservation(points),
                config=RunConfig(name="bad", settings=SETTINGS),
                out_dir=tmp_path,
            )
        assert exc.value.stage == "register"
        assert exc.value.code == "HighResidual"

        report = json.loads((tmp_path / "bad_report.json").read_text())
        assert report["failed_stage"] == "register"
        assert report["stages"] == ["repair", "validate"]
        assert report["error"]["code"] == "HighResidual"
        assert not (tmp_path / "bad_a.stl").exists()

    def test_open_scan_fails_at_validate(self, spec, picked):
        egg = create_egg_scan()
        opened = TriangleMesh(egg.vertices, egg.triangles[10:])
        with pytest.raises(StageError) as exc:
            run_pipeline(opened, spec, picked, config=RunConfig(settings=SETTINGS))
        assert exc.value.stage == "validate"
        assert exc.value.code == "NotWatertight"

    def test_split_plane_missing_the_piece(self, spec, picked):
        overrides = PlanOverrides.model_validate({"split_plane": {"normal": [0, 0, 1], "offset": 500.0}})
        with pytest.raises(StageError) as exc:
            run_pipeline(create_egg_scan(), spec, picked, overrides=overrides, config=RunConfig(settings=SETTINGS))
        assert exc.value.stage == "plan"
        assert exc.value.code == "PlaneMiss"
