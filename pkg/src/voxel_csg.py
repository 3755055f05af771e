"""
Signed-distance-field substrate: voxelization, offsets, Booleans and
isosurface extraction.

Fields are negative inside, positive outside, sampled on a uniform lattice.
Analytic primitives (boxes, cylinders, spheres, obround prisms) share the
same field type so parametric parts and scanned meshes mix freely.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
import typing
from typing import Optional, Tuple

import numpy as np
import shapely
import trimesh
from scipy import ndimage
from scipy.spatial import cKDTree
from skimage import measure

from errors import DeltaExceedsPadding, GridTooLarge, NotWatertight, PitchMismatch
from mesh_core import RigidTransform, TriangleMesh, metrics, validate
from settings import DEFAULT_SETTINGS

logger = logging.getLogger(__name__)

CSG_OPS = ("union", "intersect", "subtract")
_RAY_JITTER = np.array([0.7548776662466927, 0.5698402909980532]) * 1e-7
_CHUNK = 2_000_000
SURFACE_SNAP = 0.01  # fraction of the pitch


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Dense signed distances (mm) on a lattice ``origin + index * pitch``."""

    origin: np.ndarray
    pitch: float
    values: np.ndarray
    padding: int = DEFAULT_SETTINGS.padding

    def __post_init__(self):
        origin = np.array(self.origin, dtype=np.float64).reshape(3)
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 3 or min(values.shape) < 2:
            raise ValueError("field dims must each be >= 2")
        if not self.pitch > 0:
            raise ValueError("pitch must be positive")
        values.setflags(write=False)
        origin.setflags(write=False)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "pitch", float(self.pitch))

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(d) for d in self.values.shape)

    @property
    def upper(self) -> np.ndarray:
        return self.origin + (np.array(self.dims) - 1) * self.pitch

    @property
    def is_empty(self) -> bool:
        return not np.any(self.values < 0)

    def axes(self):
        return [self.origin[i] + np.arange(self.dims[i]) * self.pitch for i in range(3)]

    def points(self) -> np.ndarray:
        x, y, z = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([x, y, z], axis=-1).reshape(-1, 3)

    def solid_volume(self) -> float:
        """Voxel-count volume estimate, used for quick interference checks."""
        return float(np.count_nonzero(self.values < 0)) * self.pitch**3

    def sample(self, points) -> np.ndarray:
        """Trilinear samples; outside the lattice the value grows with distance."""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        clamped = np.clip(p, self.origin, self.upper)
        coords = ((clamped - self.origin) / self.pitch).T
        inner = ndimage.map_coordinates(self.values, coords, order=1, mode="nearest")
        return inner + np.linalg.norm(p - clamped, axis=1)


# ---------------------------------------------------------------------------
# Lattice helpers
# ---------------------------------------------------------------------------


def lattice_for_bounds(
    lo,
    hi,
    pitch: float,
    padding: int,
    anchor=None,
    max_voxels: int = DEFAULT_SETTINGS.max_voxels,
) -> Tuple[np.ndarray, Tuple[int, int, int]]:
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    origin = lo - padding * pitch
    if anchor is not None:
        anchor = np.asarray(anchor, dtype=np.float64)
        origin = anchor + np.floor((origin - anchor) / pitch) * pitch
    dims = np.ceil((hi + padding * pitch - origin) / pitch).astype(np.int64) + 1
    dims = np.maximum(dims, 2)
    total = int(np.prod(dims))
    if total > max_voxels:
        raise GridTooLarge(
            f"grid of {tuple(dims)} = {total} voxels exceeds cap {max_voxels}",
            voxels=total,
        )
    return origin, tuple(int(d) for d in dims)


def _grid_points(origin, dims, pitch, i_slice=slice(None)) -> np.ndarray:
    ix = np.arange(dims[0])[i_slice]
    x, y, z = np.meshgrid(
        origin[0] + ix * pitch,
        origin[1] + np.arange(dims[1]) * pitch,
        origin[2] + np.arange(dims[2]) * pitch,
        indexing="ij",
    )
    return np.stack([x, y, z], axis=-1)


def resample(field: ScalarField, origin, dims) -> ScalarField:
    """Field values on another lattice with the same pitch."""
    origin = np.asarray(origin, dtype=np.float64)
    shift = (origin - field.origin) / field.pitch
    if np.allclose(shift, np.round(shift), atol=1e-9):
        shift = np.round(shift).astype(np.int64)
        out = np.empty(dims)
        src_lo = np.maximum(shift, 0)
        src_hi = np.minimum(shift + np.array(dims), field.dims)
        if np.all(src_hi > src_lo):
            dst_lo = src_lo - shift
            dst_hi = src_hi - shift
            out.fill(np.nan)
            out[dst_lo[0]:dst_hi[0], dst_lo[1]:dst_hi[1], dst_lo[2]:dst_hi[2]] = field.values[
                src_lo[0]:src_hi[0], src_lo[1]:src_hi[1], src_lo[2]:src_hi[2]
            ]
            missing = np.isnan(out)
            if missing.any():
                idx = np.argwhere(missing)
                out[missing] = field.sample(origin + idx * field.pitch)
            return ScalarField(origin, field.pitch, out, field.padding)
    values = np.empty(dims)
    for i in range(dims[0]):
        values[i] = field.sample(_grid_points(origin, dims, field.pitch, slice(i, i + 1)).reshape(-1, 3)).reshape(dims[1], dims[2])
    return ScalarField(origin, field.pitch, values, field.padding)


# ---------------------------------------------------------------------------
# Analytic primitives
# ---------------------------------------------------------------------------


class Shape:
    """Vectorized analytic signed distance function with bounds."""

    def __call__(self, points: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def __or__(self, other: "Shape") -> "Shape":
        return Union(self, other)

    def __and__(self, other: "Shape") -> "Shape":
        return Intersection(self, other)

    def __sub__(self, other: "Shape") -> "Shape":
        return Difference(self, other)

    def grown(self, delta: float) -> "Shape":
        return Offset(self, -delta)


def _local_corners(half, frame: RigidTransform):
    signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
    return frame.apply(signs * half)


class Box(Shape):
    """Box of ``size`` centred at the local origin of ``frame``."""

    def __init__(self, size, frame: Optional[RigidTransform] = None, center=None):
        self.half = np.asarray(size, dtype=np.float64) / 2.0
        frame = frame or RigidTransform.identity()
        if center is not None:
            frame = RigidTransform(frame.rotation, np.asarray(center, dtype=np.float64))
        self.frame = frame
        self._inverse = frame.inverse()

    def __call__(self, points):
        q = np.abs(self._inverse.apply(points)) - self.half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def bounds(self):
        c = _local_corners(self.half, self.frame)
        return c.min(axis=0), c.max(axis=0)


class Cylinder(Shape):
    """Cylinder of ``radius`` along local z between ``z0`` and ``z1``."""

    def __init__(self, radius: float, z0: float, z1: float, frame: Optional[RigidTransform] = None):
        self.radius = float(radius)
        self.z0, self.z1 = float(z0), float(z1)
        self.frame = frame or RigidTransform.identity()
        self._inverse = self.frame.inverse()

    def __call__(self, points):
        p = self._inverse.apply(points)
        mid = 0.5 * (self.z0 + self.z1)
        half = 0.5 * (self.z1 - self.z0)
        d = np.stack(
            [np.linalg.norm(p[..., :2], axis=-1) - self.radius, np.abs(p[..., 2] - mid) - half],
            axis=-1,
        )
        return np.minimum(d.max(axis=-1), 0.0) + np.linalg.norm(np.maximum(d, 0.0), axis=-1)

    def bounds(self):
        half = np.array([self.radius, self.radius, 0.5 * (self.z1 - self.z0)])
        centre = RigidTransform(
            self.frame.rotation, self.frame.apply([0.0, 0.0, 0.5 * (self.z0 + self.z1)])
        )
        c = _local_corners(half, centre)
        return c.min(axis=0), c.max(axis=0)


class Sphere(Shape):
    def __init__(self, radius: float, center=(0.0, 0.0, 0.0)):
        self.radius = float(radius)
        self.center = np.asarray(center, dtype=np.float64)

    def __call__(self, points):
        return np.linalg.norm(np.asarray(points) - self.center, axis=-1) - self.radius

    def bounds(self):
        return self.center - self.radius, self.center + self.radius


class Obround(Shape):
    """Stadium profile (``length`` x ``width`` along local x/y) extruded z0..z1."""

    def __init__(self, length: float, width: float, z0: float, z1: float, frame: Optional[RigidTransform] = None):
        self.length, self.width = float(length), float(width)
        self.z0, self.z1 = float(z0), float(z1)
        self.frame = frame or RigidTransform.identity()
        self._inverse = self.frame.inverse()

    def __call__(self, points):
        p = self._inverse.apply(points)
        r = 0.5 * self.width
        seg = max(0.5 * self.length - r, 0.0)
        qx = np.maximum(np.abs(p[..., 0]) - seg, 0.0)
        d2 = np.hypot(qx, p[..., 1]) - r
        mid = 0.5 * (self.z0 + self.z1)
        half = 0.5 * (self.z1 - self.z0)
        d = np.stack([d2, np.abs(p[..., 2] - mid) - half], axis=-1)
        return np.minimum(d.max(axis=-1), 0.0) + np.linalg.norm(np.maximum(d, 0.0), axis=-1)

    def bounds(self):
        half = np.array([0.5 * self.length, 0.5 * self.width, 0.5 * (self.z1 - self.z0)])
        centre = RigidTransform(
            self.frame.rotation, self.frame.apply([0.0, 0.0, 0.5 * (self.z0 + self.z1)])
        )
        c = _local_corners(half, centre)
        return c.min(axis=0), c.max(axis=0)


class Prism(Shape):
    """Planar shapely polygon (local x/y) extruded between z0 and z1."""

    def __init__(self, polygon, z0: float, z1: float, frame: Optional[RigidTransform] = None):
        self.polygon = polygon
        self.boundary = polygon.boundary
        shapely.prepare(self.polygon)
        self.z0, self.z1 = float(z0), float(z1)
        self.frame = frame or RigidTransform.identity()
        self._inverse = self.frame.inverse()

    def __call__(self, points):
        p = self._inverse.apply(points)
        shape = p.shape[:-1]
        xy = p[..., :2].reshape(-1, 2)
        d2 = shapely.distance(self.boundary, shapely.points(xy))
        inside = shapely.contains_xy(self.polygon, xy[:, 0], xy[:, 1])
        d2 = np.where(inside, -d2, d2).reshape(shape)
        mid = 0.5 * (self.z0 + self.z1)
        half = 0.5 * (self.z1 - self.z0)
        d = np.stack([d2, np.abs(p[..., 2] - mid) - half], axis=-1)
        return np.minimum(d.max(axis=-1), 0.0) + np.linalg.norm(np.maximum(d, 0.0), axis=-1)

    def bounds(self):
        x0, y0, x1, y1 = self.polygon.bounds
        local = np.array(
            [[x, y, z] for x in (x0, x1) for y in (y0, y1) for z in (self.z0, self.z1)]
        )
        c = self.frame.apply(local)
        return c.min(axis=0), c.max(axis=0)


class Union(Shape):
    def __init__(self, *shapes: Shape):
        self.shapes = shapes

    def __call__(self, points):
        return np.min([s(points) for s in self.shapes], axis=0)

    def bounds(self):
        b = [s.bounds() for s in self.shapes]
        return np.min([x[0] for x in b], axis=0), np.max([x[1] for x in b], axis=0)


class Intersection(Shape):
    def __init__(self, a: Shape, b: Shape):
        self.a, self.b = a, b

    def __call__(self, points):
        return np.maximum(self.a(points), self.b(points))

    def bounds(self):
        (alo, ahi), (blo, bhi) = self.a.bounds(), self.b.bounds()
        return np.maximum(alo, blo), np.minimum(ahi, bhi)


class Difference(Shape):
    def __init__(self, a: Shape, b: Shape):
        self.a, self.b = a, b

    def __call__(self, points):
        return np.maximum(self.a(points), -self.b(points))

    def bounds(self):
        return self.a.bounds()


class Offset(Shape):
    """Adds ``delta`` to the distance: positive erodes, negative grows."""

    def __init__(self, shape: Shape, delta: float):
        self.shape, self.delta = shape, float(delta)

    def __call__(self, points):
        return self.shape(points) + self.delta

    def bounds(self):
        lo, hi = self.shape.bounds()
        grow = max(-self.delta, 0.0)
        return lo - grow, hi + grow


def field_from_shape(
    shape: Shape,
    pitch: float = DEFAULT_SETTINGS.pitch,
    padding: int = DEFAULT_SETTINGS.padding,
    anchor=None,
    max_voxels: int = DEFAULT_SETTINGS.max_voxels,
    bounds=None,
) -> ScalarField:
    """Sample an analytic shape onto a lattice covering its bounds."""
    lo, hi = bounds if bounds is not None else shape.bounds()
    origin, dims = lattice_for_bounds(lo, hi, pitch, padding, anchor, max_voxels)
    values = np.empty(dims)
    for i in range(dims[0]):
        values[i] = shape(_grid_points(origin, dims, pitch, slice(i, i + 1))[0])
    return ScalarField(origin, pitch, values, padding)


# ---------------------------------------------------------------------------
# Mesh voxelization
# ---------------------------------------------------------------------------


def winding_numbers(mesh: TriangleMesh, points) -> np.ndarray:
    """Generalized winding number of the mesh around each point."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    corners = mesh.corners
    out = np.zeros(len(p))
    if len(corners) == 0 or len(p) == 0:
        return out
    step = max(1, 200_000 // max(len(corners), 1))
    for s in range(0, len(p), step):
        rel = corners[None, :, :, :] - p[s:s + step, None, None, :]
        a, b, c = rel[:, :, 0], rel[:, :, 1], rel[:, :, 2]
        la, lb, lc = (np.linalg.norm(x, axis=-1) for x in (a, b, c))
        num = np.einsum("...i,...i->...", a, np.cross(b, c))
        den = (
            la * lb * lc
            + np.einsum("...i,...i->...", a, b) * lc
            + np.einsum("...i,...i->...", b, c) * la
            + np.einsum("...i,...i->...", c, a) * lb
        )
        out[s:s + step] = np.arctan2(num, den).sum(axis=1) / (2.0 * np.pi)
    return out


def contains(mesh: TriangleMesh, points) -> np.ndarray:
    return winding_numbers(mesh, points) >= 0.5


def _column_crossings(corners_rel: np.ndarray, pitch: float, dims):
    """Crossings of +z rays through lattice columns: (column id, z)."""
    nx, ny, _ = dims
    jitter = _RAY_JITTER * pitch
    a, b, c = corners_rel[:, 0], corners_rel[:, 1], corners_rel[:, 2]
    area2 = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    keep = area2 != 0
    a, b, c, area2 = a[keep], b[keep], c[keep], area2[keep]
    xy = np.stack([a[:, :2], b[:, :2], c[:, :2]], axis=1)
    i0 = np.clip(np.ceil((xy[:, :, 0].min(axis=1) - jitter[0]) / pitch), 0, nx).astype(np.int64)
    i1 = np.clip(np.floor((xy[:, :, 0].max(axis=1) - jitter[0]) / pitch), -1, nx - 1).astype(np.int64)
    j0 = np.clip(np.ceil((xy[:, :, 1].min(axis=1) - jitter[1]) / pitch), 0, ny).astype(np.int64)
    j1 = np.clip(np.floor((xy[:, :, 1].max(axis=1) - jitter[1]) / pitch), -1, ny - 1).astype(np.int64)
    ni = np.maximum(i1 - i0 + 1, 0)
    nj = np.maximum(j1 - j0 + 1, 0)
    counts = ni * nj

    cols, zs = [], []
    csum = np.cumsum(counts)
    start = 0
    while start < len(counts):
        base = csum[start - 1] if start else 0
        stop = int(np.searchsorted(csum, base + _CHUNK, side="right"))
        stop = max(stop, start + 1)
        sel = np.arange(start, stop)
        n = counts[sel]
        total = int(n.sum())
        start = stop
        if total == 0:
            continue
        tri = np.repeat(sel, n)
        local = np.arange(total) - np.repeat(np.cumsum(n) - n, n)
        ii = i0[tri] + local // nj[tri]
        jj = j0[tri] + local % nj[tri]
        qx = ii * pitch + jitter[0]
        qy = jj * pitch + jitter[1]
        ta, tb, tc = a[tri], b[tri], c[tri]
        w0 = (tc[:, 0] - tb[:, 0]) * (qy - tb[:, 1]) - (tc[:, 1] - tb[:, 1]) * (qx - tb[:, 0])
        w1 = (ta[:, 0] - tc[:, 0]) * (qy - tc[:, 1]) - (ta[:, 1] - tc[:, 1]) * (qx - tc[:, 0])
        w2 = (tb[:, 0] - ta[:, 0]) * (qy - ta[:, 1]) - (tb[:, 1] - ta[:, 1]) * (qx - ta[:, 0])
        hit = ((w0 > 0) & (w1 > 0) & (w2 > 0)) | ((w0 < 0) & (w1 < 0) & (w2 < 0))
        if not hit.any():
            continue
        ar = area2[tri][hit]
        z = (w0[hit] * ta[hit, 2] + w1[hit] * tb[hit, 2] + w2[hit] * tc[hit, 2]) / ar
        cols.append(ii[hit] * ny + jj[hit])
        zs.append(z)
    if not cols:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    return np.concatenate(cols), np.concatenate(zs)


def _inside_mask(mesh: TriangleMesh, origin, pitch: float, dims) -> np.ndarray:
    """Ray-parity inside test per lattice column, winding number where parity is odd."""
    nx, ny, nz = dims
    col, z = _column_crossings(mesh.corners - origin, pitch, dims)
    inside = np.zeros((nx * ny, nz), dtype=bool)
    if len(col) == 0:
        return inside.reshape(dims)
    order = np.lexsort((z, col))
    col, z = col[order], z[order]
    uniq, first, counts = np.unique(col, return_index=True, return_counts=True)
    odd = counts % 2 == 1
    rank = np.arange(len(col)) - np.repeat(first, counts)
    even_col = np.repeat(~odd, counts)
    enter = np.flatnonzero(even_col & (rank % 2 == 0))
    k_lo = np.clip(np.ceil(z[enter] / pitch), 0, nz).astype(np.int64)
    k_hi = np.clip(np.floor(z[enter + 1] / pitch), -1, nz - 1).astype(np.int64)
    ok = k_lo <= k_hi
    diff = np.zeros((nx * ny, nz + 1), dtype=np.int16)
    np.add.at(diff, (col[enter][ok], k_lo[ok]), 1)
    np.add.at(diff, (col[enter][ok], k_hi[ok] + 1), -1)
    inside = np.cumsum(diff[:, :nz], axis=1, dtype=np.int16) > 0

    if odd.any():
        odd_cols = uniq[odd]
        logger.warning(f"{len(odd_cols)} lattice columns had odd ray parity; using winding numbers")
        ii, jj = np.divmod(odd_cols, ny)
        ks = np.arange(nz)
        pts = np.stack(
            [
                np.repeat(origin[0] + ii * pitch, nz),
                np.repeat(origin[1] + jj * pitch, nz),
                np.tile(origin[2] + ks * pitch, len(odd_cols)),
            ],
            axis=1,
        )
        inside[odd_cols] = contains(mesh, pts).reshape(len(odd_cols), nz)
    return inside.reshape(dims)


def _surface_samples(corners: np.ndarray, spacing: float) -> Tuple[np.ndarray, np.ndarray]:
    """Deterministic surface samples no farther than ``spacing`` apart, with triangle ids."""
    ids = np.arange(len(corners))
    pts = [corners.reshape(-1, 3), corners.mean(axis=1)]
    owners = [np.repeat(ids, 3), ids]

    for k0, k1 in ((0, 1), (1, 2), (2, 0)):
        p0, p1 = corners[:, k0], corners[:, k1]
        steps = np.ceil(np.linalg.norm(p1 - p0, axis=1) / spacing).astype(np.int64)
        for n in np.unique(steps[steps > 1]):
            sel = np.flatnonzero(steps == n)
            t = (np.arange(1, n) / n)[None, :, None]
            seg = p0[sel, None, :] + (p1[sel] - p0[sel])[:, None, :] * t
            pts.append(seg.reshape(-1, 3))
            owners.append(np.repeat(sel, n - 1))

    area = 0.5 * np.linalg.norm(
        np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0]), axis=1
    )
    levels = np.minimum(np.ceil(np.sqrt(2.0 * area) / spacing), 512).astype(np.int64)
    for n in np.unique(levels[levels > 2]):
        sel = np.flatnonzero(levels == n)
        i, j = np.meshgrid(np.arange(1, n), np.arange(1, n), indexing="ij")
        mask = (i + j) < n
        w = np.stack([i[mask], j[mask], n - i[mask] - j[mask]], axis=1) / n
        lattice = np.einsum("wk,tkd->twd", w, corners[sel])
        pts.append(lattice.reshape(-1, 3))
        owners.append(np.repeat(sel, len(w)))
    return np.vstack(pts), np.concatenate(owners)


def _closest_points(corners, samples, owners, points, k: int = 4) -> np.ndarray:
    """Closest surface point for each query, over candidate triangles near it."""
    tree = cKDTree(samples)
    out = np.empty_like(points)
    step = max(1, _CHUNK // (4 * k))
    for s in range(0, len(points), step):
        q = points[s:s + step]
        _, nn = tree.query(q, k=min(k, len(samples)))
        cand = owners[nn.reshape(len(q), -1)]
        kk = cand.shape[1]
        cp = trimesh.triangles.closest_point(corners[cand.ravel()], np.repeat(q, kk, axis=0))
        d = np.linalg.norm(cp - np.repeat(q, kk, axis=0), axis=1).reshape(len(q), kk)
        best = d.argmin(axis=1)
        out[s:s + step] = cp.reshape(len(q), kk, 3)[np.arange(len(q)), best]
    return out


def voxelize(
    mesh: TriangleMesh,
    pitch: float = DEFAULT_SETTINGS.pitch,
    padding: int = DEFAULT_SETTINGS.padding,
    narrow_band: int = DEFAULT_SETTINGS.narrow_band,
    max_voxels: int = DEFAULT_SETTINGS.max_voxels,
    anchor=None,
) -> ScalarField:
    """Signed distance field of a watertight mesh, negative inside."""
    if not validate(mesh).watertight or mesh.is_empty:
        raise NotWatertight(f"mesh '{mesh.name}' is not watertight; cannot voxelize")
    if padding < 2:
        raise ValueError("padding must be >= 2")
    bbox = metrics(mesh).bbox
    origin, dims = lattice_for_bounds(bbox[0], bbox[1], pitch, padding, anchor, max_voxels)
    logger.info(f"Voxelizing '{mesh.name}' on {dims} lattice at pitch {pitch}")

    inside = _inside_mask(mesh, origin, pitch, dims)

    corners = mesh.corners
    samples, owners = _surface_samples(corners, pitch)
    surface = np.zeros(dims, dtype=bool)
    for axis in range(3):
        change = np.diff(inside, axis=axis)
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        surface[tuple(lo)] |= change
        surface[tuple(hi)] |= change
    cells = np.clip(np.round((samples - origin) / pitch).astype(np.int64), 0, np.array(dims) - 1)
    surface[cells[:, 0], cells[:, 1], cells[:, 2]] = True

    band = ndimage.distance_transform_edt(~surface) <= narrow_band
    band_idx = np.argwhere(band)
    band_pts = origin + band_idx * pitch
    cp = _closest_points(corners, samples, owners, band_pts)

    nearest_grid = np.zeros(dims + (3,), dtype=np.float32)
    nearest_grid[band] = (cp - origin).astype(np.float32)
    feature = ndimage.distance_transform_edt(~band, return_distances=False, return_indices=True)

    values = np.empty(dims)
    axes = [np.arange(d) * pitch for d in dims]
    for i in range(dims[0]):
        fi, fj, fk = feature[0][i], feature[1][i], feature[2][i]
        target = nearest_grid[fi, fj, fk].astype(np.float64)
        y, z = np.meshgrid(axes[1], axes[2], indexing="ij")
        delta = np.stack([axes[0][i] - target[..., 0], y - target[..., 1], z - target[..., 2]], axis=-1)
        values[i] = np.linalg.norm(delta, axis=-1)
    values[band] = np.linalg.norm(band_pts - cp, axis=1)
    values = np.where(inside, -values, values)
    return ScalarField(origin, pitch, values, padding)


# ---------------------------------------------------------------------------
# Field algebra
# ---------------------------------------------------------------------------


def _check_pitch(a: ScalarField, b: ScalarField) -> None:
    if abs(a.pitch - b.pitch) > 1e-12 * max(a.pitch, b.pitch):
        raise PitchMismatch(f"pitch {a.pitch} != {b.pitch}")


def csg_apply(a: ScalarField, b: ScalarField, op: str) -> ScalarField:
    """Boolean of two fields on a's lattice (grown to cover b for unions)."""
    _check_pitch(a, b)
    if op not in CSG_OPS:
        raise ValueError(f"unknown CSG op '{op}'")
    if op == "union":
        lo = np.minimum(a.origin, b.origin)
        hi = np.maximum(a.upper, b.upper)
        origin, dims = lattice_for_bounds(lo, hi, a.pitch, 0, anchor=a.origin, max_voxels=2**62)
        if tuple(dims) != a.dims or not np.allclose(origin, a.origin):
            a = resample(a, origin, dims)
    bv = resample(b, a.origin, a.dims).values
    if op == "union":
        values = np.minimum(a.values, bv)
    elif op == "intersect":
        values = np.maximum(a.values, bv)
    else:
        values = np.maximum(a.values, -bv)
    return ScalarField(a.origin, a.pitch, values, a.padding)


def offset_field(f: ScalarField, delta: float) -> ScalarField:
    """output = f + delta; positive delta erodes, negative grows."""
    if delta < 0 and -delta >= f.padding * f.pitch:
        raise DeltaExceedsPadding(
            f"growing by {-delta} mm needs more than {f.padding} voxels of padding"
        )
    if delta == 0:
        return f
    return ScalarField(f.origin, f.pitch, f.values + delta, f.padding)


def extract_surface(f: ScalarField, name: Optional[str] = None) -> TriangleMesh:
    """Marching-cubes isosurface at 0, watertight and outward oriented."""
    if f.is_empty:
        return TriangleMesh.empty(name)
    values = np.pad(f.values, 1, mode="constant", constant_values=f.pitch)
    # a sample on the surface would put a vertex on a lattice corner and collapse triangles
    snap = SURFACE_SNAP * f.pitch
    values = np.where(np.abs(values) < snap, np.where(values < 0, -snap, snap), values)
    verts, faces, _, _ = measure.marching_cubes(
        values, level=0.0, spacing=(f.pitch,) * 3, gradient_direction="ascent"
    )
    verts = verts.astype(np.float64) + f.origin - f.pitch
    mesh = TriangleMesh(verts, faces.astype(np.int64), name)
    if metrics(mesh).signed_volume < 0:
        mesh = mesh.flipped()
    return mesh


def dump_field(f: ScalarField, path: typing.Union[str, Path]) -> Tuple[Path, Path]:
    """Debug dump: raw little-endian float32 plus a text header."""
    path = Path(path)
    raw = path.with_suffix(".raw")
    header = path.with_suffix(".txt")
    raw.write_bytes(f.values.astype("<f4").tobytes(order="C"))
    header.write_text(
        f"dims {f.dims[0]} {f.dims[1]} {f.dims[2]}\n"
        f"origin {f.origin[0]!r} {f.origin[1]!r} {f.origin[2]!r}\n"
        f"pitch {f.pitch!r}\n"
        "order C (x slowest)\n"
    )
    return raw, header


def closest_points(mesh: TriangleMesh, points, spacing: Optional[float] = None) -> np.ndarray:
    """Closest surface point on ``mesh`` for each query point."""
    corners = mesh.corners
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if spacing is None:
        edges = np.linalg.norm(corners[:, 1] - corners[:, 0], axis=1)
        spacing = float(np.median(edges)) if len(edges) else 1.0
    samples, owners = _surface_samples(corners, max(spacing, 1e-6))
    return _closest_points(corners, samples, owners, p)
