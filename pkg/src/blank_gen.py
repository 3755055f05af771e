"""
Printable circuit blanks and mounting brackets.

Frames used throughout the toolchain:

* window frame: origin at the centre of the interaction window face,
  +z the outward window normal. The blank is generated in this frame.
* board frame (== bracket frame): origin at the sensor point on the board
  top face, x along the board's long side, +z up out of the board. The
  bracket's base faces -z.

``board_in_window`` maps board frame to window frame; registration uses the
same relation to pose the bracket inside a scan.
"""

import logging
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

import numpy as np
import trimesh
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from shapely.geometry import Polygon

from errors import SpecInvalid, spec_invalid_from
from mesh_core import RigidTransform, TriangleMesh
from settings import DEFAULT_SETTINGS, read_json
from voxel_csg import Box, Cylinder, Shape, Sphere, Union as ShapeUnion, extract_surface, field_from_shape

logger = logging.getLogger(__name__)

RIBBON_SECTION = 1.5
BRACKET_WALL = 2.0
BRACKET_BASE = 2.0
BRACKET_LIP = 0.8
BRACKET_RISE = 1.0
SCALENE_TOLERANCE = 0.2
# default fiducial ring sits this far outside the window edge
FIDUCIAL_RING_OFFSET = 10.0
FLANGE_THICKNESS = 2.0
FLANGE_MARGIN = 1.0


# ---------------------------------------------------------------------------
# Specification documents
# ---------------------------------------------------------------------------


class WindowSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    shape: Literal["circle"] = "circle"
    diameter: float = Field(14.0, ge=1.0)
    center_offset: Tuple[float, float] = (0.0, 0.0)
    standoff: float = Field(2.0, ge=0.0, description="window face height above the sensor point")


class KeepoutBox(BaseModel):
    """Axis-aligned box in the board frame (connectors, battery)."""

    model_config = ConfigDict(extra="forbid")

    min: Tuple[float, float, float]
    max: Tuple[float, float, float]

    @model_validator(mode="after")
    def _positive_size(self):
        if any(b <= a for a, b in zip(self.min, self.max)):
            raise ValueError("keepout max must exceed min on every axis")
        return self


class FlexibleLink(BaseModel):
    model_config = ConfigDict(extra="forbid")

    start: Tuple[float, float, float]
    end: Tuple[float, float, float]
    slack: float = Field(gt=0)

    @model_validator(mode="after")
    def _distinct(self):
        if np.allclose(self.start, self.end):
            raise ValueError("link endpoints must differ")
        return self


class CircuitSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    board_size: Tuple[float, float, float]
    window: Optional[WindowSpec] = None
    tilt_deg: float = Field(0.0, ge=0.0, le=30.0)
    keepouts: List[KeepoutBox] = []
    flexible_links: List[FlexibleLink] = []

    @field_validator("board_size")
    @classmethod
    def _positive(cls, v):
        if any(d <= 0 for d in v):
            raise ValueError("board dimensions must be > 0")
        return v

    @property
    def long_side(self) -> float:
        return max(self.board_size[0], self.board_size[1])

    @property
    def short_side(self) -> float:
        return min(self.board_size[0], self.board_size[1])

    @property
    def height(self) -> float:
        return self.board_size[2]

    @property
    def sensor_offset(self) -> np.ndarray:
        """Window centre relative to the board centre, in the board x/y plane."""
        return np.array(self.window.center_offset if self.window else (0.0, 0.0))

    @property
    def standoff(self) -> float:
        return self.window.standoff if self.window else 0.0

    def board_center(self) -> np.ndarray:
        """Board box centre in the board frame."""
        ox, oy = self.sensor_offset
        return np.array([-ox, -oy, -self.height / 2.0])

    def board_in_window(self) -> RigidTransform:
        """Board frame -> window frame: tilt about the long axis, sensor below the face."""
        tilt = RigidTransform.from_axis_angle([1.0, 0.0, 0.0], self.tilt_deg)
        return RigidTransform(tilt.rotation, [0.0, 0.0, -self.standoff])


class FiducialSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    angle_deg: float
    radius_mm: float = Field(gt=0)
    bump_radius: float = Field(1.0, gt=0)


def default_fiducials(window: WindowSpec) -> List[FiducialSpec]:
    radius = window.diameter / 2.0 + FIDUCIAL_RING_OFFSET
    return [FiducialSpec(angle_deg=a, radius_mm=radius, bump_radius=1.0) for a in (0.0, 100.0, 220.0)]


class BlankSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    circuit: CircuitSpec
    expansion: float = Field(3.0, ge=0.0)
    fiducials: Optional[List[FiducialSpec]] = None
    shell_thickness: Optional[float] = Field(None, gt=0)

    @model_validator(mode="after")
    def _check(self):
        if self.fiducials is None:
            self.fiducials = default_fiducials(self.circuit.window) if self.circuit.window else []
        if self.fiducials:
            if len(self.fiducials) != 3:
                raise ValueError("exactly three fiducials are required")
            angles = sorted(f.angle_deg % 360.0 for f in self.fiducials)
            if len(set(np.round(angles, 9))) != 3:
                raise ValueError("fiducial angles must be pairwise distinct")
            gaps = np.diff(angles + [angles[0] + 360.0])
            if len(set(np.round(gaps, 6))) != 3:
                raise ValueError("fiducial angular gaps must all differ")
            sides = fiducial_side_lengths(reference_points(self))
            if min(abs(sides[0] - sides[1]), abs(sides[1] - sides[2]), abs(sides[0] - sides[2])) < SCALENE_TOLERANCE:
                raise ValueError("fiducial triangle must be scalene")
        if self.shell_thickness is not None and self.expansion < self.shell_thickness:
            raise ValueError("expansion must be >= planned shell thickness")
        return self


def reference_points(spec: BlankSpec) -> np.ndarray:
    """Bump apexes in the window frame, in fiducial order."""
    pts = []
    for f in spec.fiducials or []:
        a = np.radians(f.angle_deg)
        pts.append([f.radius_mm * np.cos(a), f.radius_mm * np.sin(a), f.bump_radius])
    return np.array(pts, dtype=np.float64).reshape(-1, 3)


def fiducial_side_lengths(points: np.ndarray) -> np.ndarray:
    """Side lengths opposite each vertex: |p1p2|, |p2p0|, |p0p1|."""
    p = np.asarray(points)
    return np.array(
        [np.linalg.norm(p[1] - p[2]), np.linalg.norm(p[2] - p[0]), np.linalg.norm(p[0] - p[1])]
    )


def parse_blank_spec(data: dict) -> BlankSpec:
    """Accept a full BlankSpec document or a bare CircuitSpec."""
    if not isinstance(data, dict):
        raise SpecInvalid("blank spec must be a JSON object", field="spec")
    try:
        if "circuit" in data:
            return BlankSpec.model_validate(data)
        return BlankSpec(circuit=CircuitSpec.model_validate(data))
    except ValidationError as e:
        raise spec_invalid_from(e) from e


def parse_circuit_spec(data: dict) -> CircuitSpec:
    if not isinstance(data, dict):
        raise SpecInvalid("circuit spec must be a JSON object", field="circuit")
    try:
        return CircuitSpec.model_validate(data.get("circuit", data))
    except ValidationError as e:
        raise spec_invalid_from(e) from e


def load_blank_spec(path: Union[str, Path]) -> BlankSpec:
    return parse_blank_spec(read_json(path))


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------


def board_shape(circuit: CircuitSpec, frame: Optional[RigidTransform] = None) -> Shape:
    """Board box plus keepouts, optionally posed by ``frame`` (board -> world)."""
    frame = frame or RigidTransform.identity()
    size = (circuit.long_side, circuit.short_side, circuit.height)
    parts: List[Shape] = [
        Box(size, RigidTransform(frame.rotation, frame.apply(circuit.board_center())))
    ]
    for k in circuit.keepouts:
        lo, hi = np.array(k.min), np.array(k.max)
        parts.append(Box(hi - lo, RigidTransform(frame.rotation, frame.apply((lo + hi) / 2.0))))
    return ShapeUnion(*parts)


def _ribbon(link: FlexibleLink, frame: RigidTransform) -> Shape:
    start = frame.apply(link.start)
    direction = frame.apply(link.end) - start
    direction /= np.linalg.norm(direction)
    helper = np.array([0.0, 0.0, 1.0]) if abs(direction[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    y = np.cross(helper, direction)
    y /= np.linalg.norm(y)
    z = np.cross(direction, y)
    rotation = np.column_stack([direction, y, z])
    center = start + direction * link.slack / 2.0
    return Box((link.slack, RIBBON_SECTION, RIBBON_SECTION), RigidTransform(rotation, center))


class _HalfSpaceBelow(Shape):
    """z <= level, bounded to a box so it can be intersected."""

    def __init__(self, level: float, lo, hi):
        self.level = level
        self.lo, self.hi = np.asarray(lo), np.asarray(hi)

    def __call__(self, points):
        return np.asarray(points)[..., 2] - self.level

    def bounds(self):
        return self.lo, np.array([self.hi[0], self.hi[1], self.level])


def _hemisphere(radius: float, base) -> Shape:
    """Half ball above z = base[2], flat side down."""
    cap = Cylinder(radius, 0.0, radius, frame=RigidTransform(np.eye(3), np.asarray(base, dtype=np.float64)))
    return Sphere(radius, base) & cap


def blank_shape(spec: BlankSpec, bumps: bool = True) -> Shape:
    """Blank solid in the window frame; ``bumps=False`` leaves the flange face bare."""
    circuit = spec.circuit
    board_frame = circuit.board_in_window()
    envelope: Shape = board_shape(circuit, board_frame).grown(spec.expansion)
    if circuit.window is None:
        parts: List[Shape] = [envelope]
    else:
        lo, hi = envelope.bounds()
        envelope = envelope & _HalfSpaceBelow(0.0, lo, hi)
        radius = circuit.window.diameter / 2.0
        depth = circuit.standoff + circuit.height
        parts = [envelope, Cylinder(radius, -depth, 0.0)]
        if spec.fiducials:
            # flush pad under the fiducial ring, top face on the window plane
            reach = max(np.hypot(*apex[:2]) + apex[2] for apex in reference_points(spec))
            parts.append(Cylinder(max(reach + FLANGE_MARGIN, radius), -FLANGE_THICKNESS, 0.0))
        if bumps:
            for apex in reference_points(spec):
                parts.append(_hemisphere(apex[2], [apex[0], apex[1], 0.0]))
    for link in circuit.flexible_links:
        parts.append(_ribbon(link, board_frame))
    return ShapeUnion(*parts)


def generate_blank(spec: BlankSpec, pitch: float = DEFAULT_SETTINGS.pitch) -> TriangleMesh:
    """Expanded board envelope with unexpanded window, bumps and ribbons."""
    if not isinstance(spec, BlankSpec):
        spec = parse_blank_spec(spec)
    logger.info(
        f"Generating blank: board {spec.circuit.board_size}, expansion {spec.expansion} mm, "
        f"{len(spec.fiducials or [])} fiducials"
    )
    field = field_from_shape(blank_shape(spec), pitch=pitch)
    return extract_surface(field, name="blank")


def bracket_profile(circuit: CircuitSpec, fit_clearance: float) -> Polygon:
    """U-channel cross-section in the board frame's (y, z) plane."""
    a = circuit.short_side / 2.0 + fit_clearance
    b = a + BRACKET_WALL
    z_base = -circuit.height - BRACKET_BASE
    z_floor = -circuit.height
    z_top = BRACKET_RISE
    z_lip = z_top - BRACKET_LIP
    lip = BRACKET_LIP
    return Polygon(
        [
            (-b, z_base),
            (b, z_base),
            (b, z_top),
            (a - lip, z_top),
            (a - lip, z_lip),
            (a, z_lip),
            (a, z_floor),
            (-a, z_floor),
            (-a, z_lip),
            (-a + lip, z_lip),
            (-a + lip, z_top),
            (-b, z_top),
        ]
    )


def generate_bracket(circuit: CircuitSpec, fit_clearance: float = 0.15) -> TriangleMesh:
    """Snap-in U-channel tray in the board frame; base outward normal -z."""
    if isinstance(circuit, BlankSpec):
        circuit = circuit.circuit
    if fit_clearance < 0:
        raise SpecInvalid("fit_clearance must be >= 0", field="fit_clearance")
    length = circuit.long_side + 2.0 * fit_clearance
    prism = trimesh.creation.extrude_polygon(bracket_profile(circuit, fit_clearance), height=length)
    # extrusion (u, v, w) -> board (w, u, v), then centre on the board
    to_board = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    ox, oy = circuit.sensor_offset
    vertices = prism.vertices @ to_board.T + np.array([-length / 2.0 - ox, -oy, 0.0])
    mesh = TriangleMesh(vertices, prism.faces, "bracket")
    logger.info(f"Bracket channel width {2 * (circuit.short_side / 2 + fit_clearance):.3f} mm")
    return mesh


def channel_width(circuit: CircuitSpec, fit_clearance: float = 0.15) -> float:
    return circuit.short_side + 2.0 * fit_clearance
