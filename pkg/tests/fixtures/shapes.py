"""
Geometry, spec and stroke fixtures for testing.
"""

import numpy as np
import trimesh

from gesture import FlowSample
from mesh_core import RigidTransform, TriangleMesh, repair_basic


EGG_RADIUS = 30.0
EGG_FLAT_Z = 22.0


def create_box_mesh(extents, center=(0.0, 0.0, 0.0), name="box", subdivisions=0):
    box = trimesh.creation.box(extents=extents)
    for _ in range(subdivisions):
        box = box.subdivide()
    box.apply_translation(center)
    return TriangleMesh.from_trimesh(box, name)


def create_cube_mesh(size=10.0, center=(0.0, 0.0, 0.0), name="cube"):
    """Watertight axis-aligned cube, 8 vertices and 12 triangles."""
    return create_box_mesh((size, size, size), center, name)


def create_cylinder_mesh(radius=25.0, height=40.0, sections=64, name="can"):
    """Closed cylinder along z, centred on the origin."""
    return TriangleMesh.from_trimesh(trimesh.creation.cylinder(radius=radius, height=height, sections=sections), name)


def create_sphere_mesh(radius=10.0, subdivisions=3, center=(0.0, 0.0, 0.0), name="sphere"):
    sphere = trimesh.creation.icosphere(subdivisions=subdivisions, radius=radius)
    sphere.apply_translation(center)
    return TriangleMesh.from_trimesh(sphere, name)


def create_egg_scan(radius=EGG_RADIUS, flat_z=EGG_FLAT_Z, name="egg"):
    """Slightly stretched sphere with a flat window face at z = flat_z.

    Stands in for a scanned sculpture: the window face was pressed flat by
    the blank and the circuit sits under its centre.
    """
    body = trimesh.creation.icosphere(subdivisions=4, radius=radius)
    body.apply_scale([1.1, 1.0, 1.0])
    cut = trimesh.intersections.slice_mesh_plane(
        body, plane_normal=[0.0, 0.0, -1.0], plane_origin=[0.0, 0.0, flat_z], cap=True
    )
    cut.merge_vertices()
    return repair_basic(TriangleMesh.from_trimesh(cut, name))


def egg_window_pose(flat_z=EGG_FLAT_Z):
    """Window frame of the egg scan: centre of the flat face, +z outward."""
    return RigidTransform(np.eye(3), [0.0, 0.0, flat_z])


def create_open_patch(size=10.0, name="patch"):
    """Single square at z = 0; has four boundary edges."""
    h = size / 2.0
    vertices = np.array([[-h, -h, 0.0], [h, -h, 0.0], [h, h, 0.0], [-h, h, 0.0]])
    triangles = np.array([[0, 1, 2], [0, 2, 3]])
    return TriangleMesh(vertices, triangles, name)


def create_bump_patch(apexes_xy, bump_radius=1.0, size=30.0, spacing=0.1, pose=None):
    """Flat height-field patch with hemispherical bumps, optionally posed.

    Bump centres are snapped to the grid so each apex is a vertex.
    """
    n = int(round(size / spacing)) + 1
    axis = (np.arange(n) - (n - 1) / 2.0) * spacing
    x, y = np.meshgrid(axis, axis, indexing="ij")
    z = np.zeros_like(x)
    snapped = []
    for cx, cy in apexes_xy:
        cx = round(cx / spacing) * spacing
        cy = round(cy / spacing) * spacing
        snapped.append((cx, cy))
        d2 = (x - cx) ** 2 + (y - cy) ** 2
        z = np.maximum(z, np.sqrt(np.clip(bump_radius**2 - d2, 0.0, None)))
    vertices = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)

    idx = np.arange(n * n).reshape(n, n)
    a, b = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel()
    c, d = idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()
    triangles = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    mesh = TriangleMesh(vertices, triangles, "bump_patch")
    apexes = np.array([[cx, cy, bump_radius] for cx, cy in snapped])
    if pose is not None:
        mesh = TriangleMesh(pose.apply(mesh.vertices), mesh.triangles, mesh.name)
        apexes = pose.apply(apexes)
    return mesh, apexes


def create_small_circuit(standoff=4.0, **extra):
    """20 x 30 mm test board with a 14 mm window."""
    spec = {
        "board_size": [30.0, 20.0, 1.6],
        "window": {"shape": "circle", "diameter": 14.0, "center_offset": [0.0, 0.0], "standoff": standoff},
        "tilt_deg": 0.0,
    }
    spec.update(extra)
    return spec


def create_mouse_circuit(standoff=4.0):
    """Optical mouse sensor board, 38 x 51 mm."""
    return {
        "board_size": [38.0, 51.0, 1.6],
        "window": {"shape": "circle", "diameter": 14.0, "center_offset": [0.0, 5.0], "standoff": standoff},
        "tilt_deg": 10.0,
        "keepouts": [{"min": [-20.0, -9.0, 0.0], "max": [-12.0, 9.0, 3.0]}],
    }


def create_blank_document(circuit=None, expansion=3.0, fiducials=None):
    doc = {"circuit": circuit or create_small_circuit(), "expansion": expansion}
    if fiducials is not None:
        doc["fiducials"] = fiducials
    return doc


def create_sample_stream(moves=12, idle_ms=300, dt=8):
    """Two motion bursts separated by an idle gap, as the sensor reports them."""
    samples = []
    t = 0
    for burst, (dx, dy) in enumerate([(3, 0), (0, -2)]):
        for _ in range(moves):
            samples.append(FlowSample(dx, dy, t))
            t += dt
        if burst == 0:
            for _ in range(3):
                samples.append(FlowSample(0, 0, t))
                t += idle_ms // 3 + 1
    return samples
