"""
Test signed distance fields, Booleans and surface extraction.
"""

import sys
from pathlib import Path

import numpy as np
import pytest
from shapely.geometry import box as rectangle

# Add src to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent.parent / "src"))

from errors import DeltaExceedsPadding, GridTooLarge, NotWatertight, PitchMismatch
from mesh_core import RigidTransform, TriangleMesh, metrics, validate
from voxel_csg import (
    Box,
    Cylinder,
    Obround,
    Prism,
    ScalarField,
    Sphere,
    closest_points,
    contains,
    csg_apply,
    dump_field,
    extract_surface,
    field_from_shape,
    lattice_for_bounds,
    offset_field,
    voxelize,
)
from tests.fixtures.shapes import create_sphere_mesh


class TestPrimitives:
    """Test analytic distance functions."""

    @pytest.mark.unit
    def test_box_distances(self):
        b = Box((10, 10, 10))
        d = b(np.array([[0, 0, 0], [8, 0, 0], [5, 5, 5], [8, 9, 5]], dtype=float))
        assert d == pytest.approx([-5.0, 3.0, 0.0, 5.0])

    @pytest.mark.unit
    def test_posed_cylinder(self):
        frame = RigidTransform.from_axis_angle([1, 0, 0], 90, translation=(0, 0, 10))
        c = Cylinder(2.0, -1.0, 1.0, frame)
        # local z is world -y after the rotation
        assert c(np.array([[0.0, 0.0, 10.0]]))[0] == pytest.approx(-1.0)
        assert c(np.array([[0.0, 3.0, 10.0]]))[0] == pytest.approx(2.0)
        lo, hi = c.bounds()
        assert np.allclose(lo, [-2, -1, 8]) and np.allclose(hi, [2, 1, 12])

    @pytest.mark.unit
    def test_obround_caps_are_round(self):
        o = Obround(length=6.0, width=2.0, z0=0.0, z1=2.0)
        assert o(np.array([[3.0, 0.0, 1.0]]))[0] == pytest.approx(0.0, abs=1e-12)
        assert o(np.array([[3.0, 1.0, 1.0]]))[0] == pytest.approx(np.sqrt(2.0) - 1.0)

    @pytest.mark.unit
    def test_prism_from_polygon(self):
        p = Prism(rectangle(-5, -5, 5, 5), 0.0, 5.0)
        d = p(np.array([[0.0, 0.0, 2.5], [8.0, 0.0, 2.5], [0.0, 0.0, 7.0]]))
        assert d == pytest.approx([-2.5, 3.0, 2.0])

    @pytest.mark.unit
    def test_algebra(self):
        a = Sphere(5.0)
        b = Box((4, 4, 20))
        p = np.array([[0.0, 0.0, 0.0], [4.0, 0.0, 0.0]])
        assert (a | b)(p)[0] < 0
        assert (a - b)(p)[0] > 0
        assert (a - b)(p)[1] < 0
        assert (a & b)(p)[1] > 0
        assert a.grown(1.0)(np.array([[5.5, 0.0, 0.0]]))[0] == pytest.approx(-0.5)


class TestLattice:
    """Test lattice sizing."""

    @pytest.mark.unit
    def test_padding_and_anchor(self):
        origin, dims = lattice_for_bounds([0, 0, 0], [1, 1, 1], 0.5, 2, anchor=[0.25, 0.25, 0.25])
        assert np.allclose((origin - 0.25) / 0.5, np.round((origin - 0.25) / 0.5))
        assert np.all(origin <= -1.0)
        assert np.all(origin + (np.array(dims) - 1) * 0.5 >= 2.0)

    @pytest.mark.unit
    def test_grid_cap(self):
        with pytest.raises(GridTooLarge):
            lattice_for_bounds([0, 0, 0], [100, 100, 100], 0.1, 3, max_voxels=1_000_000)

    @pytest.mark.unit
    def test_field_dims_at_least_two(self):
        with pytest.raises(ValueError):
            ScalarField(np.zeros(3), 1.0, np.zeros((1, 4, 4)))


class TestVoxelize:
    """Test mesh to field conversion."""

    @pytest.mark.unit
    def test_cube_field_signs(self, cube_mesh):
        f = voxelize(cube_mesh, pitch=0.5)
        samples = f.sample(np.array([[0.0, 0.0, 0.0], [9.0, 0.0, 0.0], [4.0, 4.0, 4.0]]))
        assert samples[0] == pytest.approx(-5.0, abs=0.5)
        assert samples[1] == pytest.approx(4.0, abs=0.5)
        assert samples[2] < 0

    @pytest.mark.unit
    def test_volume_close_to_mesh(self):
        sphere = create_sphere_mesh(radius=8.0, subdivisions=4)
        f = voxelize(sphere, pitch=0.5)
        assert f.solid_volume() == pytest.approx(metrics(sphere).signed_volume, rel=0.05)

    @pytest.mark.unit
    def test_open_mesh_rejected(self, cube_mesh):
        opened = TriangleMesh(cube_mesh.vertices, cube_mesh.triangles[1:])
        with pytest.raises(NotWatertight):
            voxelize(opened)

    @pytest.mark.unit
    def test_contains(self, cube_mesh):
        inside = contains(cube_mesh, np.array([[0.0, 0.0, 0.0], [20.0, 0.0, 0.0], [4.9, -4.9, 4.9]]))
        assert inside.tolist() == [True, False, True]

    @pytest.mark.unit
    def test_closest_points_on_sphere(self, sphere_mesh):
        queries = np.array([[20.0, 0.0, 0.0], [0.0, -3.0, 0.0]])
        cp = closest_points(sphere_mesh, queries)
        assert np.linalg.norm(cp, axis=1) == pytest.approx([10.0, 10.0], abs=0.3)
        assert cp[0, 0] > 9.5 and cp[1, 1] < -9.5


class TestFieldAlgebra:
    """Test csg_apply and offset_field."""

    @pytest.mark.unit
    def test_subtract_volume(self):
        block = field_from_shape(Box((10, 10, 10)), pitch=0.5)
        post = field_from_shape(Box((4, 4, 20)), pitch=0.5)
        mesh = extract_surface(csg_apply(block, post, "subtract"))
        assert validate(mesh).watertight
        assert metrics(mesh).signed_volume == pytest.approx(1000.0 - 160.0, rel=0.03)

    @pytest.mark.unit
    def test_union_grows_lattice(self):
        a = field_from_shape(Sphere(3.0), pitch=0.5)
        b = field_from_shape(Sphere(3.0, center=(10.0, 0.0, 0.0)), pitch=0.5)
        u = csg_apply(a, b, "union")
        assert u.upper[0] >= 13.0
        assert u.sample(np.array([[10.0, 0.0, 0.0]]))[0] == pytest.approx(-3.0, abs=0.3)

    @pytest.mark.unit
    def test_intersection_of_disjoint_is_empty(self):
        a = field_from_shape(Sphere(2.0), pitch=0.5)
        b = field_from_shape(Sphere(2.0, center=(10.0, 0.0, 0.0)), pitch=0.5)
        result = csg_apply(a, b, "intersect")
        assert result.is_empty
        assert extract_surface(result).is_empty

    @pytest.mark.unit
    def test_pitch_mismatch(self):
        a = field_from_shape(Sphere(2.0), pitch=0.5)
        b = field_from_shape(Sphere(2.0), pitch=0.25)
        with pytest.raises(PitchMismatch):
            csg_apply(a, b, "union")

    @pytest.mark.unit
    def test_unknown_op(self):
        a = field_from_shape(Sphere(2.0), pitch=0.5)
        with pytest.raises(ValueError):
            csg_apply(a, a, "xor")

    @pytest.mark.unit
    def test_offset_erodes_and_grows(self):
        f = field_from_shape(Sphere(5.0), pitch=0.25, padding=8)
        eroded = extract_surface(offset_field(f, 1.0))
        grown = extract_surface(offset_field(f, -1.0))
        assert metrics(eroded).extents[0] == pytest.approx(8.0, abs=0.3)
        assert metrics(grown).extents[0] == pytest.approx(12.0, abs=0.3)

    @pytest.mark.unit
    def test_growth_beyond_padding(self):
        f = field_from_shape(Sphere(5.0), pitch=0.5, padding=3)
        with pytest.raises(DeltaExceedsPadding):
            offset_field(f, -2.0)

    @pytest.mark.unit
    def test_zero_offset_is_identity(self):
        f = field_from_shape(Sphere(1.0), pitch=0.5)
        assert offset_field(f, 0.0) is f


class TestExtract:
    """Test isosurface extraction."""

    @pytest.mark.unit
    def test_extracted_sphere_is_outward_and_watertight(self):
        mesh = extract_surface(field_from_shape(Sphere(4.0), pitch=0.25), name="ball")
        assert mesh.name == "ball"
        assert validate(mesh).watertight
        assert metrics(mesh).signed_volume == pytest.approx(4.0 / 3.0 * np.pi * 64.0, rel=0.03)

    @pytest.mark.unit
    def test_dump_field(self, tmp_path):
        f = field_from_shape(Sphere(1.0), pitch=0.5)
        raw, header = dump_field(f, tmp_path / "ball")
        assert raw.stat().st_size == 4 * int(np.prod(f.dims))
        assert header.read_text().startswith(f"dims {f.dims[0]} {f.dims[1]} {f.dims[2]}")
