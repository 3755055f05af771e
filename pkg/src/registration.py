"""
Locate the embedded circuit inside a scanned sculpture.

The sculptor presses the blank's three fiducial bumps into the clay; after
scanning, the bump apexes are picked (by hand or by ``detect_fiducials``)
and mapped back onto the blank's reference layout. The resulting window
pose, composed with the circuit tilt and standoff, places the bracket.
"""

import itertools
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Optional, Sequence, Union

import numpy as np
from scipy.spatial import cKDTree

from blank_gen import BlankSpec, CircuitSpec, SCALENE_TOLERANCE, fiducial_side_lengths, reference_points
from errors import AmbiguousCorrespondence, DegenerateInput, DetectionFailed, HighResidual, SpecInvalid
from mesh_core import RigidTransform, TriangleMesh

logger = logging.getLogger(__name__)

MIN_TRIANGLE_AREA = 1.0
MAX_RESIDUAL = 0.5


@dataclass(frozen=True)
class Plane:
    normal: np.ndarray
    offset: float

    def distance(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.normal - self.offset

    def to_dict(self):
        return {"normal": self.normal.tolist(), "offset": float(self.offset)}


@dataclass(frozen=True, eq=False)
class FiducialObservation:
    """Three picked points on the scan surface."""

    points: np.ndarray
    source: Literal["manual", "detected"] = "manual"

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64)
        if p.shape != (3, 3):
            raise DegenerateInput(f"expected 3 points, got array of shape {p.shape}")
        area = 0.5 * np.linalg.norm(np.cross(p[1] - p[0], p[2] - p[0]))
        if area <= MIN_TRIANGLE_AREA:
            raise DegenerateInput(f"fiducial triangle area {area:.3f} mm^2 is too small", area=area)
        p.setflags(write=False)
        object.__setattr__(self, "points", p)


@dataclass(frozen=True)
class FiducialPose:
    transform: RigidTransform
    residual_rms: float
    order: tuple

    def to_dict(self):
        return {
            "transform": self.transform.to_dict(),
            "residual_rms": float(self.residual_rms),
            "order": list(self.order),
        }


def _mean_normal_near(scan: TriangleMesh, points: np.ndarray) -> Optional[np.ndarray]:
    if scan is None or scan.is_empty:
        return None
    normals = scan.to_trimesh().vertex_normals
    spread = max(np.ptp(points, axis=0).max(), 1.0)
    near = cKDTree(scan.vertices).query_ball_point(points.mean(axis=0), r=spread)
    if not near:
        _, near = cKDTree(scan.vertices).query(points, k=1)
    return np.asarray(normals)[np.atleast_1d(near)].mean(axis=0)


def fit_plane(points, scan: Optional[TriangleMesh] = None) -> Plane:
    """Exact plane through 3 points, least-squares through more.

    With a scan the normal faces the scan's outward side; otherwise the
    first non-zero component of (z, y, x) is made positive.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(p) < 3:
        raise DegenerateInput(f"need at least 3 points, got {len(p)}")
    centroid = p.mean(axis=0)
    _, s, vt = np.linalg.svd(p - centroid)
    if s[1] <= 1e-6 * max(s[0], 1.0):
        raise DegenerateInput("points are collinear")
    normal = vt[2] / np.linalg.norm(vt[2])

    outward = _mean_normal_near(scan, p)
    if outward is not None and np.linalg.norm(outward) > 0:
        if normal @ outward < 0:
            normal = -normal
    else:
        for axis in (2, 1, 0):
            if abs(normal[axis]) > 1e-12:
                if normal[axis] < 0:
                    normal = -normal
                break
    return Plane(normal, float(normal @ centroid))


def _kabsch(source: np.ndarray, target: np.ndarray) -> RigidTransform:
    cs, ct = source.mean(axis=0), target.mean(axis=0)
    h = (source - cs).T @ (target - ct)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    rotation = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(rotation, ct - rotation @ cs)


def _layout_points(layout) -> np.ndarray:
    if isinstance(layout, BlankSpec):
        return reference_points(layout)
    return np.asarray(layout, dtype=np.float64).reshape(3, 3)


def pose_from_fiducials(
    obs: FiducialObservation,
    layout: Union[BlankSpec, np.ndarray],
    max_residual: float = MAX_RESIDUAL,
) -> FiducialPose:
    """Rigid transform taking the reference bump apexes onto the observed points."""
    reference = _layout_points(layout)
    ref_sides = fiducial_side_lengths(reference)
    for i, j in itertools.combinations(range(3), 2):
        if abs(ref_sides[i] - ref_sides[j]) < SCALENE_TOLERANCE:
            raise AmbiguousCorrespondence(
                f"reference sides {ref_sides[i]:.3f} and {ref_sides[j]:.3f} mm are within {SCALENE_TOLERANCE} mm"
            )

    observed = obs.points
    obs_sides = fiducial_side_lengths(observed)
    # each vertex is identified by the length of its opposite side
    best = min(
        itertools.permutations(range(3)),
        key=lambda perm: float(np.abs(obs_sides[list(perm)] - ref_sides).sum()),
    )
    matched = observed[list(best)]

    transform = _kabsch(reference, matched)
    residual = float(np.sqrt(np.mean(np.sum((transform.apply(reference) - matched) ** 2, axis=1))))
    logger.info(f"Fiducial pose residual {residual:.4f} mm (order {best})")
    if residual > max_residual:
        raise HighResidual(
            f"fiducial residual {residual:.3f} mm exceeds {max_residual} mm; check the picked points",
            residual=residual,
        )
    return FiducialPose(transform, residual, tuple(int(i) for i in best))


def detect_fiducials(
    scan: TriangleMesh,
    hint_center,
    hint_radius: float,
    bump_radius: float = 1.0,
) -> FiducialObservation:
    """Find the three bump apexes near ``hint_center``."""
    center = np.asarray(hint_center, dtype=np.float64)
    vertices = scan.vertices
    in_ball = np.flatnonzero(np.linalg.norm(vertices - center, axis=1) <= hint_radius)
    if len(in_ball) < 3:
        raise DetectionFailed(f"only {len(in_ball)} scan vertices inside the hint ball")
    local = vertices[in_ball]

    # refit on the flat part so bumps do not bias the plane
    try:
        plane = fit_plane(local, scan)
        for _ in range(2):
            flat = np.abs(plane.distance(local)) < 0.25 * bump_radius
            if flat.sum() < 3:
                break
            refit = fit_plane(local[flat])
            normal = refit.normal if refit.normal @ plane.normal >= 0 else -refit.normal
            plane = Plane(normal, float(normal @ local[flat].mean(axis=0)))
    except DegenerateInput as e:
        raise DetectionFailed(f"cannot fit a plane inside the hint ball: {e.message}") from e

    height = plane.distance(local)
    candidates = np.flatnonzero(height >= 0.5 * bump_radius)
    peaks = []
    for idx in candidates[np.argsort(-height[candidates], kind="stable")]:
        if all(np.linalg.norm(local[idx] - local[p]) > bump_radius for p in peaks):
            peaks.append(idx)
        if len(peaks) == 3:
            break
    if len(peaks) < 3:
        raise DetectionFailed(f"found {len(peaks)} protrusions, need 3")

    apexes = []
    flat_pos = local - np.outer(height, plane.normal)
    for idx in peaks:
        cap = (np.linalg.norm(flat_pos - flat_pos[idx], axis=1) <= bump_radius) & (height >= 0.5 * bump_radius)
        axis_point = flat_pos[cap].mean(axis=0)
        apexes.append(axis_point + plane.normal * height[idx])
    apexes = np.array(apexes)

    u = np.cross(plane.normal, [1.0, 0.0, 0.0])
    if np.linalg.norm(u) < 1e-6:
        u = np.cross(plane.normal, [0.0, 1.0, 0.0])
    u /= np.linalg.norm(u)
    v = np.cross(plane.normal, u)
    rel = apexes - apexes.mean(axis=0)
    order = np.argsort(np.arctan2(rel @ v, rel @ u))
    logger.info(f"Detected fiducials at heights {np.round(height[peaks], 3).tolist()} mm")
    return FiducialObservation(apexes[order], source="detected")


def bracket_pose(window_pose: RigidTransform, spec: Union[CircuitSpec, BlankSpec]) -> RigidTransform:
    """Bracket (board) frame in scan coordinates."""
    circuit = spec.circuit if isinstance(spec, BlankSpec) else spec
    return window_pose.compose(circuit.board_in_window())


def read_points_file(path: Union[str, Path]) -> FiducialObservation:
    """Three ``x y z`` lines (mm); blank lines and ``#`` comments are skipped."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        try:
            if len(parts) != 3:
                raise ValueError
            rows.append([float(x) for x in parts])
        except ValueError:
            raise SpecInvalid(f"{path}:{lineno}: expected 'x y z'", field="points")
    if len(rows) != 3:
        raise SpecInvalid(f"{path}: expected 3 points, found {len(rows)}", field="points")
    return FiducialObservation(np.array(rows), source="manual")


def parse_points(values: Sequence[float]) -> FiducialObservation:
    """Nine numbers from the command line."""
    if len(values) != 9:
        raise SpecInvalid(f"expected 9 coordinates, got {len(values)}", field="points")
    return FiducialObservation(np.asarray(values, dtype=np.float64).reshape(3, 3), source="manual")
