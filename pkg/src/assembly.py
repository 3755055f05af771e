"""
Turn a scanned sculpture and a recovered circuit pose into two printable parts.

Stages: shell -> split -> window cut -> bracket fusion -> fasteners. Booleans
run in the signed-distance domain (``voxel_csg``); the split is an exact
mesh clip so the mating faces stay crisp.
"""

import json
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
import trimesh
from pydantic import BaseModel, ConfigDict, Field, InstanceOf, ValidationError, field_validator, model_validator
from shapely.geometry import LineString, Point, Polygon

from blank_gen import BlankSpec, CircuitSpec, generate_bracket
from errors import (
    BossOffWall,
    BracketOutsideCavity,
    FabError,
    NotWatertight,
    PlaneMiss,
    PreconditionFailed,
    StageError,
    ThinFeature,
    WindowOffPiece,
    spec_invalid_from,
)
from mesh_core import (
    RigidTransform,
    TriangleMesh,
    concatenate,
    metrics,
    repair_basic,
    save_mesh,
    transform,
    triangle_areas,
    validate,
)
from registration import FiducialObservation, bracket_pose, pose_from_fiducials
from settings import DEFAULT_SETTINGS, ToolSettings, read_json
from voxel_csg import (
    Box,
    Cylinder,
    Obround,
    Prism,
    ScalarField,
    Shape,
    Union as ShapeUnion,
    closest_points,
    contains,
    csg_apply,
    extract_surface,
    field_from_shape,
    offset_field,
    voxelize,
)

logger = logging.getLogger(__name__)

RIM_PER_FASTENER = 60.0
MIN_FASTENERS = 3
CAVITY_RELIEF = 0.3
MAX_BRACKET_REACH = 100.0
FASTENER_STYLES = ("boss", "pin", "tongue_groove")

WINDOW_BOM = {
    "item": "window disc",
    "material": "clear acrylic (Plexiglas)",
    "diameter_mm": 20.0,
    "thickness_mm": 2.0,
    "engraved_circle_mm": 13.0,
    "note": "glued into the counterbore; the engraved circle marks the sensor's tracking area",
}


# ---------------------------------------------------------------------------
# Plan documents
# ---------------------------------------------------------------------------


class SplitPlane(BaseModel):
    model_config = ConfigDict(extra="forbid")

    normal: Tuple[float, float, float]
    offset: float

    @field_validator("normal")
    @classmethod
    def _unit(cls, v):
        n = np.asarray(v, dtype=np.float64)
        length = np.linalg.norm(n)
        if not length > 0:
            raise ValueError("split plane normal must be non-zero")
        return tuple(float(x) for x in n / length)

    @property
    def unit_normal(self) -> np.ndarray:
        return np.asarray(self.normal, dtype=np.float64)


class Counterbore(BaseModel):
    model_config = ConfigDict(extra="forbid")

    diameter: float = Field(20.0, gt=0)
    depth: float = Field(2.0, ge=0)


class FastenerSpec(BaseModel):
    """One fastener; ``position`` is the fraction of the rim loop length from its start."""

    model_config = ConfigDict(extra="forbid")

    position: float = Field(0.0, ge=0.0, lt=1.0)
    length: float = Field(6.0, gt=0)
    width: float = Field(2.0, gt=0)
    height: float = Field(3.0, gt=0)
    clearance: float = Field(0.15, ge=0)


FASTENER_PRESETS: Dict[str, Dict[str, float]] = {
    "boss": {"length": 6.0, "width": 2.0, "height": 3.0},
    "pin": {"length": 3.0, "width": 3.0, "height": 5.0},
    "tongue_groove": {"length": 0.0, "width": 1.0, "height": 2.0},
}


class AssemblyPlan(BaseModel):
    model_config = ConfigDict(extra="forbid", arbitrary_types_allowed=True)

    shell_thickness: float = Field(3.0, gt=0)
    split_plane: SplitPlane
    window_pose: InstanceOf[RigidTransform]
    through_hole_diameter: float = Field(16.0, gt=0)
    counterbore: Counterbore = Counterbore()
    fastener_style: Literal["boss", "pin", "tongue_groove"] = "boss"
    fasteners: List[FastenerSpec] = []
    fit_clearance: float = Field(0.15, ge=0)

    @model_validator(mode="after")
    def _check(self):
        if self.counterbore.diameter <= self.through_hole_diameter:
            raise ValueError("counterbore diameter must exceed the through-hole diameter")
        for f in self.fasteners:
            if f.width >= self.shell_thickness:
                raise ValueError(
                    f"fastener width {f.width} mm must be below shell thickness {self.shell_thickness} mm"
                )
        return self

    @property
    def rim_width(self) -> float:
        return (self.counterbore.diameter - self.through_hole_diameter) / 2.0

    def to_dict(self) -> Dict[str, Any]:
        data = self.model_dump(exclude={"window_pose"})
        data["window_pose"] = self.window_pose.to_dict()
        return data


class PlanOverrides(BaseModel):
    """User overrides merged over ``plan_default``; unset fields keep defaults."""

    model_config = ConfigDict(extra="forbid")

    shell_thickness: Optional[float] = Field(None, gt=0)
    split_plane: Optional[SplitPlane] = None
    through_hole_diameter: Optional[float] = Field(None, gt=0)
    counterbore: Optional[Counterbore] = None
    fastener_style: Optional[Literal["boss", "pin", "tongue_groove"]] = None
    fastener_count: Optional[int] = Field(None, ge=1)
    fasteners: Optional[List[FastenerSpec]] = None
    fit_clearance: Optional[float] = Field(None, ge=0)


def parse_overrides(data: Optional[dict]) -> PlanOverrides:
    try:
        return PlanOverrides.model_validate(data or {})
    except ValidationError as e:
        raise spec_invalid_from(e) from e


def load_overrides(path: Union[str, Path, None]) -> PlanOverrides:
    if not path:
        return PlanOverrides()
    return parse_overrides(read_json(path))


class RunConfig(BaseModel):
    """Everything that shaped a pipeline run, echoed into its report."""

    model_config = ConfigDict(extra="forbid")

    name: str = "part"
    settings: ToolSettings = DEFAULT_SETTINGS
    overrides: PlanOverrides = PlanOverrides()


@dataclass
class PartSet:
    part_a: TriangleMesh
    part_b: TriangleMesh
    report: Dict[str, Any] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Geometry helpers
# ---------------------------------------------------------------------------


def plane_frame(normal, offset: float) -> RigidTransform:
    """Frame whose xy plane is the given plane and whose +z is ``normal``."""
    z = np.asarray(normal, dtype=np.float64)
    z = z / np.linalg.norm(z)
    helper = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = helper - (helper @ z) * z
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return RigidTransform(np.column_stack([x, y, z]), z * offset)


def _as_plane(plane) -> Tuple[np.ndarray, float]:
    if isinstance(plane, SplitPlane):
        return plane.unit_normal, float(plane.offset)
    normal, offset = plane
    n = np.asarray(normal, dtype=np.float64)
    return n / np.linalg.norm(n), float(offset)


def section_polygons(mesh: TriangleMesh, frame: RigidTransform) -> list:
    """Cross-section of ``mesh`` by the frame's xy plane, as shapely polygons in frame coordinates."""
    path = mesh.to_trimesh().section(
        plane_origin=frame.translation, plane_normal=frame.rotation[:, 2]
    )
    if path is None:
        return []
    planar, _ = path.to_planar(to_2D=frame.inverse().matrix, check=False)
    return [p for p in planar.polygons_full if p is not None and not p.is_empty]


def fastener_count(rim_perimeter: float) -> int:
    return max(MIN_FASTENERS, int(math.floor(rim_perimeter / RIM_PER_FASTENER)))


def _ray_hits(mesh: TriangleMesh, origins, directions, min_distance: float = 0.0) -> List[np.ndarray]:
    """Sorted hit distances along each ray."""
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    directions = np.broadcast_to(directions, origins.shape)
    tm = mesh.to_trimesh()
    locations, index_ray, _ = tm.ray.intersects_location(origins, directions, multiple_hits=True)
    out: List[np.ndarray] = []
    for i in range(len(origins)):
        sel = index_ray == i
        d = np.linalg.norm(locations[sel] - origins[i], axis=1)
        out.append(np.sort(d[d > min_distance]))
    return out


def ray_thickness(mesh: TriangleMesh, max_samples: int = 2000) -> Tuple[np.ndarray, np.ndarray]:
    """Local material thickness measured inward from sampled vertices along -normal."""
    if mesh.is_empty:
        return np.zeros((0, 3)), np.zeros(0)
    tm = mesh.to_trimesh()
    idx = np.unique(np.linspace(0, len(mesh.vertices) - 1, min(max_samples, len(mesh.vertices))).astype(np.int64))
    normals = np.asarray(tm.vertex_normals)[idx]
    origins = mesh.vertices[idx]
    hits = _ray_hits(mesh, origins, -normals, min_distance=1e-3)
    thickness = np.array([h[0] if len(h) else np.inf for h in hits])
    return origins, thickness


def _sample_surface(mesh: TriangleMesh, n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    areas = triangle_areas(mesh)
    tri = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    w = np.stack([1.0 - s, s * (1.0 - r2), s * r2], axis=1)
    return np.einsum("nk,nkd->nd", w, mesh.corners[tri])


def hausdorff_sampled(
    a: TriangleMesh, b: TriangleMesh, n: int = 10_000, seed: int = 0, exclude=None
) -> float:
    """Directed Hausdorff distance from ``n`` area-weighted samples on ``a`` to the surface of ``b``.

    ``exclude`` is an optional predicate over sample points; masked samples are ignored.
    """
    if a.is_empty or b.is_empty:
        return float("inf")
    pts = _sample_surface(a, n, seed)
    if exclude is not None:
        pts = pts[~exclude(pts)]
    if len(pts) == 0:
        return 0.0
    cp = closest_points(b, pts)
    return float(np.linalg.norm(cp - pts, axis=1).max())


def interference_volume(a: TriangleMesh, b: TriangleMesh, pitch: float) -> float:
    """Volume where both solids are inside by more than half a voxel."""
    if a.is_empty or b.is_empty:
        return 0.0
    fa = voxelize(a, pitch=pitch)
    fb = voxelize(b, pitch=pitch, anchor=fa.origin)
    both = csg_apply(fa, fb, "intersect")
    return float(np.count_nonzero(both.values < -0.5 * pitch)) * pitch**3


def _union_shapes(base: ScalarField, shapes: List[Shape], op: str) -> ScalarField:
    if not shapes:
        return base
    extra = field_from_shape(ShapeUnion(*shapes), pitch=base.pitch, padding=base.padding, anchor=base.origin)
    return csg_apply(base, extra, op)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def plan_default(
    scan: TriangleMesh,
    window_pose: RigidTransform,
    spec: Union[CircuitSpec, BlankSpec],
    overrides: Optional[PlanOverrides] = None,
) -> AssemblyPlan:
    """Split through the centroid parallel to the window; fasteners spread along the rim."""
    overrides = overrides or PlanOverrides()
    if not validate(scan).watertight:
        raise PreconditionFailed(f"scan '{scan.name}' must be watertight to plan an assembly")

    if overrides.split_plane is not None:
        plane = overrides.split_plane
    else:
        centroid = np.asarray(scan.to_trimesh().center_mass)
        normal = window_pose.rotation[:, 2]
        plane = SplitPlane(normal=tuple(normal), offset=float(normal @ centroid))
    n, offset = _as_plane(plane)
    d = scan.vertices @ n - offset
    scale = max(float(np.abs(scan.vertices).max()), 1.0)
    if not (d.min() < -1e-9 * scale and d.max() > 1e-9 * scale):
        raise PlaneMiss("split plane does not cross the solid")
    polygons = section_polygons(scan, plane_frame(n, offset))
    if not polygons:
        raise PlaneMiss("split plane produced an empty cross-section")
    perimeter = max(p.exterior.length for p in polygons)

    logger.info(f"Plan: split offset {offset:.3f} along {np.round(n, 4).tolist()}, rim {perimeter:.1f} mm")
    return _build_plan(plane, window_pose, perimeter, overrides)


def _build_plan(
    plane: SplitPlane, window_pose: RigidTransform, perimeter: float, overrides: PlanOverrides
) -> AssemblyPlan:
    style = overrides.fastener_style or "boss"
    preset = FASTENER_PRESETS[style]
    thickness = overrides.shell_thickness or max(3.0, preset["width"] + 1.0)
    clearance = overrides.fit_clearance if overrides.fit_clearance is not None else 0.15
    if overrides.fasteners is not None:
        fasteners = overrides.fasteners
    elif style == "tongue_groove":
        fasteners = [FastenerSpec(position=0.0, clearance=clearance, **preset)]
    else:
        count = overrides.fastener_count or fastener_count(perimeter)
        fasteners = [FastenerSpec(position=k / count, clearance=clearance, **preset) for k in range(count)]

    values = {
        "shell_thickness": thickness,
        "split_plane": plane,
        "window_pose": window_pose,
        "fastener_style": style,
        "fasteners": fasteners,
        "fit_clearance": clearance,
    }
    if overrides.through_hole_diameter is not None:
        values["through_hole_diameter"] = overrides.through_hole_diameter
    if overrides.counterbore is not None:
        values["counterbore"] = overrides.counterbore
    try:
        return AssemblyPlan(**values)
    except ValidationError as e:
        raise spec_invalid_from(e) from e


def shell(
    scan: TriangleMesh,
    thickness: float,
    settings: ToolSettings = DEFAULT_SETTINGS,
    warnings: Optional[List[Dict[str, Any]]] = None,
) -> TriangleMesh:
    """Hollow solid: the scan minus its inward offset by ``thickness``."""
    if thickness < 2 * settings.pitch:
        raise PreconditionFailed(
            f"shell thickness {thickness} mm must be at least twice the pitch ({settings.pitch} mm)"
        )
    f = voxelize(
        scan,
        pitch=settings.pitch,
        padding=settings.padding,
        narrow_band=settings.narrow_band,
        max_voxels=settings.max_voxels,
    )
    hollow = csg_apply(f, offset_field(f, thickness), "subtract")
    result = extract_surface(hollow, name=f"{scan.name or 'scan'}_shell")

    points, local = ray_thickness(scan)
    thin = local < 2 * thickness - settings.pitch
    if thin.any():
        where = points[np.argmin(local)]
        warning = ThinFeature(
            f"{int(thin.sum())} sampled regions thinner than {2 * thickness} mm stay solid",
            location=where,
            min_thickness=float(local.min()),
        )
        logger.warning(f"{warning.message} (thinnest {local.min():.2f} mm at {np.round(where, 2).tolist()})")
        if warnings is not None:
            warnings.append(warning.to_dict())
    return result


def split_by_plane(solid: TriangleMesh, plane) -> Tuple[TriangleMesh, TriangleMesh]:
    """Exact clip into (normal side, opposite side), both capped."""
    n, offset = _as_plane(plane)
    d = solid.vertices @ n - offset
    scale = max(float(np.abs(solid.vertices).max()), 1.0) if len(d) else 1.0
    if len(d) == 0 or not (d.min() < -1e-9 * scale and d.max() > 1e-9 * scale):
        raise PlaneMiss("split plane does not cross the solid interior")

    # zero-area slivers break the section loops the caps are built from
    if validate(solid).degenerate_triangle_count:
        solid = repair_basic(solid)

    origin = n * offset
    tm = solid.to_trimesh()
    halves = []
    for side, direction in (("above", n), ("below", -n)):
        piece = trimesh.intersections.slice_mesh_plane(tm, direction, origin, cap=True)
        mesh = TriangleMesh.from_trimesh(piece, name=f"{solid.name or 'solid'}_{side}")
        if mesh.is_empty:
            raise PlaneMiss(f"nothing of the solid lies {side} the split plane")
        if not validate(mesh).watertight:
            mesh = repair_basic(mesh)
        diagnostics = validate(mesh)
        if not diagnostics.watertight:
            raise NotWatertight(
                f"{side} half has {diagnostics.boundary_edge_count} open edges after capping",
                side=side,
                boundary_edges=diagnostics.boundary_edge_count,
            )
        halves.append(mesh)
    logger.info(
        f"Split volumes {metrics(halves[0]).signed_volume:.2f} / {metrics(halves[1]).signed_volume:.2f} mm^3"
    )
    return halves[0], halves[1]


def cut_window(
    piece: TriangleMesh, plan: AssemblyPlan, settings: ToolSettings = DEFAULT_SETTINGS
) -> TriangleMesh:
    """Bore the window hole and the flush counterbore for the disc."""
    pose = plan.window_pose
    axis = pose.rotation[:, 2]
    reach = 1.0 + 2.0 * plan.shell_thickness
    hits = _ray_hits(piece, pose.apply([0.0, 0.0, reach]), -axis)[0]
    if len(hits) < 2 or hits[0] > 2.0 * reach:
        raise WindowOffPiece("window axis does not pass through this piece's wall")
    # window-frame heights of the outer and inner wall surfaces on the axis
    outer, inner = reach - hits[0], reach - hits[1]
    r_th = plan.through_hole_diameter / 2.0
    cutters: List[Shape] = [Cylinder(r_th, inner - 1.0, outer + 1.0, frame=pose)]
    if plan.counterbore.depth > 0:
        cutters.append(
            Cylinder(plan.counterbore.diameter / 2.0, outer - plan.counterbore.depth, outer + 1.0, frame=pose)
        )
    logger.info(
        f"Cutting window: bore {plan.through_hole_diameter} mm through {outer - inner:.2f} mm wall, "
        f"seat {plan.counterbore.depth} mm below the surface"
    )
    f = voxelize(piece, pitch=settings.pitch, padding=settings.padding, narrow_band=settings.narrow_band)
    return extract_surface(_union_shapes(f, cutters, "subtract"), name=piece.name)


def _base_geometry(bracket: TriangleMesh, spacing: float = 1.0):
    """Base footprint rectangle (local) and perimeter samples on the base face."""
    v = bracket.vertices
    z = v[:, 2].min()
    on_base = v[np.abs(v[:, 2] - z) < 1e-9]
    lo, hi = on_base[:, :2].min(axis=0), on_base[:, :2].max(axis=0)
    ring = LineString([(lo[0], lo[1]), (hi[0], lo[1]), (hi[0], hi[1]), (lo[0], hi[1]), (lo[0], lo[1])])
    n = max(int(math.ceil(ring.length / spacing)), 4)
    pts = np.array([ring.interpolate(i / n, normalized=True).coords[0] for i in range(n)])
    samples = np.column_stack([pts, np.full(len(pts), z)])
    return lo, hi, z, samples


def stem_length(piece: TriangleMesh, bracket: TriangleMesh, pose: RigidTransform, max_reach: float = MAX_BRACKET_REACH) -> float:
    """Distance the bracket base must be extruded to meet the inner shell surface."""
    lo, hi, z, samples = _base_geometry(bracket)
    centre = pose.apply([(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, z])
    if contains(piece, centre[None, :])[0]:
        raise BracketOutsideCavity("bracket base lies inside the shell material, not the cavity")
    direction = pose.apply_vector([0.0, 0.0, -1.0])
    hits = _ray_hits(piece, pose.apply(samples), direction)
    distances = []
    for h in hits:
        if len(h) == 0 or h[0] > max_reach:
            raise BracketOutsideCavity(f"bracket base ray finds no inner surface within {max_reach} mm")
        distances.append(h[0])
    return float(max(distances))


def place_bracket(
    piece: TriangleMesh,
    bracket: TriangleMesh,
    pose: RigidTransform,
    settings: ToolSettings = DEFAULT_SETTINGS,
) -> TriangleMesh:
    """Fuse the posed bracket to the piece with a stem down to the inner surface."""
    reach = stem_length(piece, bracket, pose)
    lo, hi, z, _ = _base_geometry(bracket)
    logger.info(f"Bracket stem length {reach:.2f} mm")

    f = voxelize(piece, pitch=settings.pitch, padding=settings.padding, narrow_band=settings.narrow_band)
    fb = voxelize(transform(bracket, pose), pitch=settings.pitch, padding=settings.padding, anchor=f.origin)
    merged = csg_apply(f, fb, "union")
    if reach > 0:
        sink = 2.0 * settings.pitch
        height = reach + sink
        centre = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, z - height / 2.0 + 1e-3]
        stem = Box((hi[0] - lo[0], hi[1] - lo[1], height + 2e-3), frame=pose.compose(RigidTransform(np.eye(3), centre)))
        merged = _union_shapes(merged, [stem], "union")
    return extract_surface(merged, name=piece.name)


def mating_frame(part_a: TriangleMesh, part_b: TriangleMesh, plane) -> RigidTransform:
    """Split-plane frame whose +z points from part_a toward part_b."""
    n, offset = _as_plane(plane)
    towards_b = metrics(part_b).bbox.mean(axis=0) - metrics(part_a).bbox.mean(axis=0)
    up = n if towards_b @ n >= 0 else -n
    return plane_frame(up, offset if up @ n > 0 else -offset)


def rim_loop(part_a: TriangleMesh, frame: RigidTransform, depth: float = 0.05):
    """Longest wall cross-section of part_a, ``depth`` below the split plane."""
    section_frame = RigidTransform(frame.rotation, frame.apply([0.0, 0.0, -depth]))
    polygons = section_polygons(part_a, section_frame)
    if not polygons:
        raise PreconditionFailed("part_a has no material at the split plane")
    return max(polygons, key=lambda p: p.exterior.length)


def plan_for_parts(
    part_a: TriangleMesh, part_b: TriangleMesh, plane: SplitPlane, overrides: Optional[PlanOverrides] = None
) -> AssemblyPlan:
    """Fastener plan for an already split pair, sized from part_a's rim."""
    ring = rim_loop(part_a, mating_frame(part_a, part_b, plane))
    return _build_plan(plane, RigidTransform.identity(), ring.exterior.length, overrides or PlanOverrides())


def _rim_midline(part_a: TriangleMesh, frame: RigidTransform, thickness: float, depth: float):
    ring = rim_loop(part_a, frame, depth)
    inner = Polygon(ring.exterior.coords).buffer(-thickness / 2.0)
    if inner.is_empty:
        raise BossOffWall("rim loop is too small for the wall midline")
    if inner.geom_type == "MultiPolygon":
        inner = max(inner.geoms, key=lambda g: g.area)
    return ring, inner.exterior


def _fastener_shapes(
    spec: FastenerSpec, style: str, midline, ring, frame: RigidTransform, sink: float
) -> Tuple[Shape, Shape, float]:
    """Boss shape, cavity shape and the boss's lateral area."""
    c = spec.clearance
    if style == "tongue_groove":
        footprint = midline.buffer(spec.width / 2.0)
        groove = midline.buffer(spec.width / 2.0 + c)
        if not ring.buffer(1e-6).contains(footprint):
            raise BossOffWall("tongue leaves the wall ring")
        boss = Prism(footprint, -sink, spec.height, frame)
        cavity = Prism(groove, -sink, spec.height + CAVITY_RELIEF, frame)
        return boss, cavity, footprint.length * spec.height

    s = spec.position * midline.length
    p = np.array(midline.interpolate(s).coords[0])
    ahead = np.array(midline.interpolate((s + 0.5) % midline.length).coords[0])
    behind = np.array(midline.interpolate((s - 0.5) % midline.length).coords[0])
    tangent = ahead - behind
    tangent /= np.linalg.norm(tangent)
    theta = math.degrees(math.atan2(tangent[1], tangent[0]))
    local = frame.compose(RigidTransform.from_axis_angle([0.0, 0.0, 1.0], theta, [p[0], p[1], 0.0]))

    if style == "pin":
        footprint = Point(p).buffer(spec.width / 2.0, quad_segs=32)
        boss = Cylinder(spec.width / 2.0, -sink, spec.height, local)
        cavity = Cylinder(spec.width / 2.0 + c, -sink, spec.height + CAVITY_RELIEF, local)
    else:
        half = max(spec.length - spec.width, 0.0) / 2.0
        footprint = LineString([p - tangent * half, p + tangent * half]).buffer(spec.width / 2.0, quad_segs=32) if half > 0 else Point(p).buffer(spec.width / 2.0, quad_segs=32)
        boss = Obround(spec.length, spec.width, -sink, spec.height, local)
        cavity = Obround(spec.length + 2 * c, spec.width + 2 * c, -sink, spec.height + CAVITY_RELIEF, local)
    if not ring.buffer(1e-6).contains(footprint):
        raise BossOffWall(
            f"{style} at rim position {spec.position:.3f} is not inside the wall ring",
            position=p,
        )
    return boss, cavity, footprint.length * spec.height


def add_fasteners(
    part_a: TriangleMesh,
    part_b: TriangleMesh,
    plan: AssemblyPlan,
    settings: ToolSettings = DEFAULT_SETTINGS,
) -> PartSet:
    """Bosses on part_a rising across the split plane, matching cavities in part_b."""
    frame = mating_frame(part_a, part_b, plan.split_plane)
    ring, midline = _rim_midline(part_a, frame, plan.shell_thickness, 0.5 * settings.pitch)
    sink = 2.0 * settings.pitch
    bosses, cavities, lateral = [], [], 0.0
    for spec in plan.fasteners:
        boss, cavity, area = _fastener_shapes(spec, plan.fastener_style, midline, ring, frame, sink)
        bosses.append(boss)
        cavities.append(cavity)
        lateral += area
    logger.info(f"Adding {len(bosses)} {plan.fastener_style} fastener(s)")

    fa = voxelize(part_a, pitch=settings.pitch, padding=settings.padding, narrow_band=settings.narrow_band)
    fb = voxelize(part_b, pitch=settings.pitch, padding=settings.padding, narrow_band=settings.narrow_band)
    new_a = extract_surface(_union_shapes(fa, bosses, "union"), name="part_a")
    new_b = extract_surface(_union_shapes(fb, cavities, "subtract"), name="part_b")
    return PartSet(new_a, new_b, parts_report(new_a, new_b, settings.pitch, lateral))


def parts_report(part_a: TriangleMesh, part_b: TriangleMesh, pitch: float, boss_lateral_area: float = 0.0) -> Dict[str, Any]:
    diag_a, diag_b = validate(part_a), validate(part_b)
    _, thick_a = ray_thickness(part_a)
    _, thick_b = ray_thickness(part_b)
    return {
        "volumes": {
            "part_a": metrics(part_a).signed_volume,
            "part_b": metrics(part_b).signed_volume,
        },
        "watertight": {"part_a": diag_a.watertight, "part_b": diag_b.watertight},
        "manifold": {"part_a": diag_a.manifold, "part_b": diag_b.manifold},
        "interference_volume": interference_volume(part_a, part_b, pitch),
        "interference_bound": 3.0 * pitch * boss_lateral_area,
        "wall_thickness_min": {
            "part_a": float(np.min(thick_a)) if len(thick_a) else None,
            "part_b": float(np.min(thick_b)) if len(thick_b) else None,
        },
    }


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


@contextmanager
def _stage(name: str, report: Dict[str, Any]):
    logger.info(f"Running stage {name}")
    try:
        yield
    except FabError as e:
        report["failed_stage"] = name
        report["error"] = e.to_dict()
        raise StageError(name, e) from e
    report["stages"].append(name)


def _window_exclusion(plan: AssemblyPlan, margin: float):
    pose_inv = plan.window_pose.inverse()
    n, offset = _as_plane(plan.split_plane)
    radius = plan.counterbore.diameter / 2.0 + margin

    def exclude(points):
        local = pose_inv.apply(points)
        near_window = np.linalg.norm(local[:, :2], axis=1) <= radius
        near_split = np.abs(points @ n - offset) <= margin
        return near_window | near_split

    return exclude


def run_pipeline(
    scan: TriangleMesh,
    spec: BlankSpec,
    fiducials: FiducialObservation,
    overrides: Optional[PlanOverrides] = None,
    config: Optional[RunConfig] = None,
    out_dir: Union[str, Path, None] = None,
) -> PartSet:
    """Scan to two printable parts; writes ``<name>_a.stl``, ``<name>_b.stl`` and a report when ``out_dir`` is set."""
    config = config or RunConfig(overrides=overrides or PlanOverrides())
    overrides = overrides or config.overrides
    settings = config.settings
    report: Dict[str, Any] = {
        "config": config.model_dump(mode="json"),
        "stages": [],
        "warnings": [],
        "bom": [WINDOW_BOM],
    }

    try:
        with _stage("repair", report):
            repaired = repair_basic(scan, settings.weld_epsilon, settings.degenerate_area)
        with _stage("validate", report):
            diagnostics = validate(repaired, settings.degenerate_area)
            report["scan"] = {"diagnostics": diagnostics.to_dict(), "metrics": metrics(repaired).to_dict()}
            if not diagnostics.watertight:
                raise NotWatertight(
                    f"scan has {diagnostics.boundary_edge_count} boundary edges after repair"
                )
        with _stage("register", report):
            registration = pose_from_fiducials(fiducials, spec)
            window_pose = registration.transform
            report["registration"] = registration.to_dict()
            report["registration"]["source"] = fiducials.source
        with _stage("bracket_pose", report):
            mount = bracket_pose(window_pose, spec.circuit)
            report["bracket_pose"] = mount.to_dict()
        with _stage("plan", report):
            plan = plan_default(repaired, window_pose, spec.circuit, overrides)
            report["plan"] = plan.to_dict()
        with _stage("shell", report):
            shelled = shell(repaired, plan.shell_thickness, settings, report["warnings"])
        with _stage("split", report):
            above, below = split_by_plane(shelled, plan.split_plane)
            n, offset = _as_plane(plan.split_plane)
            window_above = window_pose.translation @ n - offset >= 0
            part_b, part_a = (above, below) if window_above else (below, above)
            shell_volume = metrics(shelled).signed_volume
            report["split"] = {
                "shell_volume": shell_volume,
                "piece_volumes": [metrics(part_a).signed_volume, metrics(part_b).signed_volume],
            }
        with _stage("cut_window", report):
            part_b = cut_window(part_b, plan, settings)
        with _stage("place_bracket", report):
            bracket = generate_bracket(spec.circuit, plan.fit_clearance)
            report["bracket"] = {"stem_length": stem_length(part_a, bracket, mount)}
            part_a = place_bracket(part_a, bracket, mount, settings)
        with _stage("fasteners", report):
            parts = add_fasteners(part_a, part_b, plan, settings)
            report["parts"] = parts.report
        with _stage("fidelity", report):
            union = concatenate([parts.part_a, parts.part_b])
            report["exterior_hausdorff"] = hausdorff_sampled(
                repaired,
                union,
                n=10_000,
                seed=settings.seed,
                exclude=_window_exclusion(plan, margin=2.0 * settings.pitch + plan.shell_thickness),
            )
    except StageError:
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            write_report(report, Path(out_dir) / f"{config.name}_report.json")
        raise
    parts.part_a = parts.part_a.renamed(f"{config.name}_a")
    parts.part_b = parts.part_b.renamed(f"{config.name}_b")

    if out_dir is not None:
        with _stage("export", report):
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            save_mesh(parts.part_a, out / f"{config.name}_a.stl")
            save_mesh(parts.part_b, out / f"{config.name}_b.stl")
        write_report(report, out / f"{config.name}_report.json")
    parts.report = report
    return parts


def write_report(report: Dict[str, Any], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_jsonable(report), indent=2, sort_keys=True) + "\n")
    return path


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value
