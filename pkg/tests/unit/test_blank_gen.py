"""
Test circuit specs, blank generation and bracket generation.
"""

import json
import sys
from pathlib import Path

import numpy as np
import pytest

# Add src to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent.parent / "src"))

from blank_gen import (
    BlankSpec,
    blank_shape,
    bracket_profile,
    channel_width,
    fiducial_side_lengths,
    generate_blank,
    generate_bracket,
    load_blank_spec,
    parse_blank_spec,
    parse_circuit_spec,
    reference_points,
)
from errors import SpecInvalid
from mesh_core import metrics, validate
from voxel_csg import contains, extract_surface, field_from_shape
from tests.fixtures.shapes import create_blank_document, create_mouse_circuit, create_small_circuit


class TestSpecParsing:
    """Test BlankSpec / CircuitSpec validation."""

    @pytest.mark.unit
    def test_bare_circuit_gets_default_fiducials(self):
        spec = parse_blank_spec(create_small_circuit())
        assert isinstance(spec, BlankSpec)
        assert spec.expansion == 3.0
        assert [f.angle_deg for f in spec.fiducials] == [0.0, 100.0, 220.0]
        assert all(f.radius_mm == pytest.approx(17.0) for f in spec.fiducials)

    @pytest.mark.unit
    def test_default_layout_is_scalene(self, small_blank_spec):
        sides = np.sort(fiducial_side_lengths(reference_points(small_blank_spec)))
        assert np.all(np.diff(sides) >= 0.2)

    @pytest.mark.unit
    def test_reference_points_sit_on_bump_apexes(self, small_blank_spec):
        pts = reference_points(small_blank_spec)
        assert pts.shape == (3, 3)
        assert np.allclose(pts[:, 2], 1.0)
        assert np.allclose(np.linalg.norm(pts[:, :2], axis=1), 17.0)

    @pytest.mark.unit
    def test_equilateral_fiducials_rejected(self):
        fiducials = [{"angle_deg": a, "radius_mm": 9.0} for a in (0, 120, 240)]
        with pytest.raises(SpecInvalid):
            parse_blank_spec(create_blank_document(fiducials=fiducials))

    @pytest.mark.unit
    def test_wrong_fiducial_count_rejected(self):
        fiducials = [{"angle_deg": a, "radius_mm": 9.0} for a in (0, 100)]
        with pytest.raises(SpecInvalid):
            parse_blank_spec(create_blank_document(fiducials=fiducials))

    @pytest.mark.unit
    def test_tilt_out_of_range_names_field(self):
        with pytest.raises(SpecInvalid) as exc:
            parse_circuit_spec(create_small_circuit(tilt_deg=45.0))
        assert exc.value.field.endswith("tilt_deg")

    @pytest.mark.unit
    def test_non_positive_board_rejected(self):
        circuit = create_small_circuit()
        circuit["board_size"] = [30.0, 0.0, 1.6]
        with pytest.raises(SpecInvalid):
            parse_circuit_spec(circuit)

    @pytest.mark.unit
    def test_expansion_below_shell_rejected(self):
        doc = create_blank_document(expansion=2.0)
        doc["shell_thickness"] = 3.0
        with pytest.raises(SpecInvalid):
            parse_blank_spec(doc)

    @pytest.mark.unit
    def test_unknown_key_rejected(self):
        with pytest.raises(SpecInvalid):
            parse_circuit_spec(create_small_circuit(colour="green"))

    @pytest.mark.unit
    def test_load_from_file(self, tmp_path):
        path = tmp_path / "mouse.json"
        path.write_text(json.dumps({"circuit": create_mouse_circuit(), "expansion": 4.0}))
        spec = load_blank_spec(path)
        assert spec.circuit.long_side == 51.0
        assert spec.circuit.short_side == 38.0
        assert spec.expansion == 4.0

    @pytest.mark.unit
    def test_board_in_window(self, mouse_circuit):
        t = mouse_circuit.board_in_window()
        assert np.allclose(t.translation, [0.0, 0.0, -4.0])
        assert t.rotation_angle_deg() == pytest.approx(10.0)
        # sensor point sits straight under the window centre
        assert np.allclose(t.apply([0.0, 0.0, 0.0]), [0.0, 0.0, -4.0])


@pytest.mark.geometry
class TestGenerateBlank:
    """Test blank meshes."""

    @pytest.mark.unit
    def test_blank_is_watertight_and_encloses_board(self, small_blank_spec):
        mesh = generate_blank(small_blank_spec, pitch=0.5)
        assert validate(mesh).watertight
        assert metrics(mesh).signed_volume > 0

        circuit = small_blank_spec.circuit
        board_frame = circuit.board_in_window()
        half = np.array([circuit.long_side, circuit.short_side, circuit.height]) / 2.0
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
        corners = board_frame.apply(circuit.board_center() + 0.95 * signs * half)
        assert contains(mesh, corners).all()

    @pytest.mark.unit
    def test_blank_envelope_size(self):
        # a tight ring keeps the fiducial flange inside the envelope outline
        fiducials = [{"angle_deg": a, "radius_mm": 9.0} for a in (0.0, 100.0, 220.0)]
        mesh = generate_blank(parse_blank_spec(create_blank_document(fiducials=fiducials)), pitch=0.5)
        lo, hi = metrics(mesh).bbox
        # board 30 x 20 grown by 3 mm on every side
        assert hi[0] - lo[0] == pytest.approx(36.0, abs=0.6)
        assert hi[1] - lo[1] == pytest.approx(26.0, abs=0.6)
        # window face is flush at z = 0, bumps stand 1 mm proud
        assert hi[2] == pytest.approx(1.0, abs=0.3)

    @pytest.mark.unit
    def test_bumps_are_present(self, small_blank_spec):
        mesh = generate_blank(small_blank_spec, pitch=0.25)
        apexes = reference_points(small_blank_spec)
        below_apex = apexes - np.array([0.0, 0.0, 0.4])
        beside_apex = apexes * np.array([1.0, 1.0, 0.0]) + np.array([0.0, 0.0, 0.5]) + np.array([2.0, 0.0, 0.0])
        assert contains(mesh, below_apex).all()
        assert not contains(mesh, beside_apex).any()

    @pytest.mark.unit
    def test_bumps_add_three_hemispheres(self, small_blank_spec):
        full = blank_shape(small_blank_spec)
        # same lattice for both so only the bumps differ
        bounds = full.bounds()
        with_bumps = extract_surface(field_from_shape(full, pitch=0.2, bounds=bounds))
        bare = extract_surface(field_from_shape(blank_shape(small_blank_spec, bumps=False), pitch=0.2, bounds=bounds))
        excess = metrics(with_bumps).signed_volume - metrics(bare).signed_volume
        assert excess == pytest.approx(3 * (2.0 / 3.0) * np.pi, rel=0.1)

    @pytest.mark.unit
    def test_flange_carries_the_fiducial_ring(self, small_blank_spec):
        mesh = generate_blank(small_blank_spec, pitch=0.25)
        ring = 17.0 * np.array([[np.cos(a), np.sin(a), 0.0] for a in np.radians([50.0, 160.0, 290.0])])
        assert contains(mesh, ring - [0.0, 0.0, 0.5]).all()
        assert not contains(mesh, ring + [0.0, 0.0, 0.3]).any()

    @pytest.mark.unit
    def test_windowless_board_bbox(self):
        spec = parse_blank_spec({"board_size": [38.0, 51.0, 4.0], "tilt_deg": 0.0})
        mesh = generate_blank(spec, pitch=0.5)
        assert validate(mesh).watertight
        assert np.sort(metrics(mesh).extents) == pytest.approx([10.0, 44.0, 57.0], abs=0.3)

    @pytest.mark.unit
    def test_blank_without_window(self):
        circuit = create_small_circuit()
        del circuit["window"]
        spec = parse_blank_spec(circuit)
        assert spec.fiducials == []
        mesh = generate_blank(spec, pitch=0.5)
        assert validate(mesh).watertight
        assert metrics(mesh).extents[2] == pytest.approx(1.6 + 6.0, abs=0.6)

    @pytest.mark.unit
    def test_flexible_link_adds_volume(self):
        plain = parse_blank_spec(create_small_circuit())
        linked = parse_blank_spec(
            create_small_circuit(
                flexible_links=[{"start": [15.0, 0.0, -0.8], "end": [30.0, 0.0, -0.8], "slack": 20.0}]
            )
        )
        v_plain = metrics(generate_blank(plain, pitch=0.5)).signed_volume
        v_linked = metrics(generate_blank(linked, pitch=0.5)).signed_volume
        assert v_linked > v_plain


class TestGenerateBracket:
    """Test the snap-in bracket."""

    @pytest.mark.unit
    def test_mouse_channel_width(self, mouse_circuit):
        assert channel_width(mouse_circuit, 0.15) == pytest.approx(38.3)

    @pytest.mark.unit
    def test_profile_is_valid_polygon(self, mouse_circuit):
        profile = bracket_profile(mouse_circuit, 0.15)
        assert profile.is_valid
        assert profile.area > 0

    @pytest.mark.unit
    def test_bracket_mesh(self, mouse_circuit):
        mesh = generate_bracket(mouse_circuit, 0.15)
        assert validate(mesh).watertight
        lo, hi = metrics(mesh).bbox
        assert hi[0] - lo[0] == pytest.approx(51.3)
        assert hi[1] - lo[1] == pytest.approx(38.3 + 4.0)
        # base below the board, lips rise above the board top
        assert lo[2] == pytest.approx(-1.6 - 2.0)
        assert hi[2] == pytest.approx(1.0)

    @pytest.mark.unit
    def test_board_fits_in_channel(self, small_circuit):
        mesh = generate_bracket(small_circuit, 0.15)
        # board interior points must not be inside bracket material
        interior = np.array([[0.0, 0.0, -0.8], [14.0, 9.9, -0.8], [-14.0, -9.9, -0.1]])
        assert not contains(mesh, interior).any()

    @pytest.mark.unit
    def test_negative_clearance(self, small_circuit):
        with pytest.raises(SpecInvalid):
            generate_bracket(small_circuit, -0.1)
