"""
Triangle mesh carrier, file codecs, diagnostics and light repair.

Every other stage consumes and produces TriangleMesh values. Meshes are
treated as immutable: operations return new meshes and never touch their
inputs.
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import trimesh
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from errors import (
    IndexOutOfRange,
    InvalidTransform,
    MalformedRecord,
    SpecInvalid,
    TruncatedFile,
    UnsupportedFeature,
)
from settings import DEFAULT_SETTINGS

logger = logging.getLogger(__name__)

STL_HEADER_BANNER = b"sculptfab binary STL"
STL_RECORD = np.dtype(
    [("normal", "<f4", (3,)), ("corners", "<f4", (3, 3)), ("attr", "<u2")]
)
FORMATS = ("stl_binary", "stl_ascii", "obj")


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Indexed triangle mesh in millimetres, counter-clockwise outward."""

    vertices: np.ndarray
    triangles: np.ndarray
    name: Optional[str] = None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        v.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    @classmethod
    def empty(cls, name: Optional[str] = None) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), name)

    @classmethod
    def from_trimesh(cls, mesh: trimesh.Trimesh, name: Optional[str] = None) -> "TriangleMesh":
        return cls(np.array(mesh.vertices), np.array(mesh.faces), name)

    def to_trimesh(self) -> trimesh.Trimesh:
        return trimesh.Trimesh(
            vertices=np.array(self.vertices), faces=np.array(self.triangles), process=False
        )

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    @property
    def corners(self) -> np.ndarray:
        """(m, 3, 3) triangle corner coordinates."""
        return self.vertices[self.triangles]

    def flipped(self) -> "TriangleMesh":
        return TriangleMesh(self.vertices, self.triangles[:, ::-1], self.name)

    def renamed(self, name: Optional[str]) -> "TriangleMesh":
        return TriangleMesh(self.vertices, self.triangles, name)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TriangleMesh):
            return NotImplemented
        return (
            self.vertices.shape == other.vertices.shape
            and self.triangles.shape == other.triangles.shape
            and np.array_equal(self.vertices, other.vertices)
            and np.array_equal(self.triangles, other.triangles)
        )

    __hash__ = None


@dataclass(frozen=True)
class MeshDiagnostics:
    watertight: bool
    manifold: bool
    boundary_edge_count: int
    inverted_adjacent_pairs: int
    degenerate_triangle_count: int
    connected_components: int

    def to_dict(self) -> Dict[str, Union[bool, int]]:
        return {
            "watertight": self.watertight,
            "manifold": self.manifold,
            "boundary_edge_count": self.boundary_edge_count,
            "inverted_adjacent_pairs": self.inverted_adjacent_pairs,
            "degenerate_triangle_count": self.degenerate_triangle_count,
            "connected_components": self.connected_components,
        }


@dataclass(frozen=True)
class MeshMetrics:
    signed_volume: float
    surface_area: float
    bbox: np.ndarray = field(repr=False)

    @property
    def extents(self) -> np.ndarray:
        return self.bbox[1] - self.bbox[0]

    def to_dict(self) -> Dict[str, object]:
        return {
            "signed_volume": float(self.signed_volume),
            "surface_area": float(self.surface_area),
            "bbox": self.bbox.tolist(),
        }


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Proper rotation followed by translation: v -> R v + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_axis_angle(
        cls, axis, angle_deg: float, translation=(0.0, 0.0, 0.0)
    ) -> "RigidTransform":
        matrix = trimesh.transformations.rotation_matrix(np.radians(angle_deg), axis)
        return cls(matrix[:3, :3], translation)

    @classmethod
    def from_matrix(cls, matrix) -> "RigidTransform":
        m = np.asarray(matrix, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def check(self, tol: float = 1e-9) -> "RigidTransform":
        r = self.rotation
        if not np.all(np.isfinite(r)) or not np.all(np.isfinite(self.translation)):
            raise InvalidTransform("transform has non-finite entries")
        if np.abs(r.T @ r - np.eye(3)).max() > tol or np.linalg.det(r) < 0:
            raise InvalidTransform("rotation is not orthonormal with det +1")
        return self

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def apply_vector(self, vectors) -> np.ndarray:
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other."""
        return RigidTransform(
            self.rotation @ other.rotation, self.rotation @ other.translation + self.translation
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def rotation_angle_deg(self) -> float:
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))

    def to_dict(self) -> Dict[str, List]:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def _dedupe_exact(corners: np.ndarray, keys: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Merge bit-identical corners, keeping first-appearance order."""
    if len(corners) == 0:
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    vertices = corners[first[order]]
    triangles = rank[inverse].reshape(-1, 3)
    return vertices, triangles


def _parse_stl_binary(data: bytes) -> TriangleMesh:
    if len(data) < 84:
        raise TruncatedFile(f"binary STL needs at least 84 bytes, got {len(data)}")
    count = int(np.frombuffer(data, dtype="<u4", count=1, offset=80)[0])
    expected = 84 + 50 * count
    if len(data) != expected:
        raise TruncatedFile(
            f"binary STL declares {count} triangles ({expected} bytes) but holds {len(data)} bytes",
            declared=count,
            size=len(data),
        )
    records = np.frombuffer(data, dtype=STL_RECORD, count=count, offset=84)
    corners32 = np.ascontiguousarray(records["corners"]).reshape(-1, 3)
    vertices, triangles = _dedupe_exact(corners32.astype(np.float64), corners32.view("<u4"))
    return TriangleMesh(vertices, triangles)


def _parse_stl_ascii(data: bytes) -> TriangleMesh:
    try:
        text = data.decode("ascii")
    except UnicodeDecodeError as e:
        raise MalformedRecord("ASCII STL contains non-ASCII bytes", offset=e.start) from e

    corners: List[Tuple[float, float, float]] = []
    name = None
    state = "start"
    loop_count = 0
    offset = 0
    for raw in text.splitlines(keepends=True):
        line_offset = offset
        offset += len(raw)
        tokens = raw.split()
        if not tokens:
            continue
        head = tokens[0].lower()
        if state == "start":
            if head != "solid":
                raise MalformedRecord("expected 'solid'", offset=line_offset)
            name = " ".join(tokens[1:]) or None
            state = "solid"
        elif state == "solid":
            if head == "facet" and len(tokens) == 5 and tokens[1].lower() == "normal":
                state = "facet"
            elif head == "endsolid":
                state = "end"
            else:
                raise MalformedRecord(f"unexpected record '{raw.strip()}'", offset=line_offset)
        elif state == "facet":
            if head == "outer" and len(tokens) == 2 and tokens[1].lower() == "loop":
                state = "loop"
                loop_count = 0
            else:
                raise MalformedRecord("expected 'outer loop'", offset=line_offset)
        elif state == "loop":
            if head == "vertex" and len(tokens) == 4:
                try:
                    corners.append(tuple(float(x) for x in tokens[1:]))
                except ValueError as e:
                    raise MalformedRecord(f"bad vertex '{raw.strip()}'", offset=line_offset) from e
                loop_count += 1
            elif head == "endloop" and loop_count == 3:
                state = "endfacet"
            else:
                raise MalformedRecord("facet loop must hold exactly 3 vertices", offset=line_offset)
        elif state == "endfacet":
            if head != "endfacet":
                raise MalformedRecord("expected 'endfacet'", offset=line_offset)
            state = "solid"
        elif state == "end":
            raise MalformedRecord("data after 'endsolid'", offset=line_offset)
    if state != "end":
        raise TruncatedFile(f"ASCII STL ended inside '{state}' block")

    arr = np.array(corners, dtype=np.float64).reshape(-1, 3)
    vertices, triangles = _dedupe_exact(arr, arr.view("<u8") if len(arr) else arr)
    return TriangleMesh(vertices, triangles, name)


_OBJ_UNSUPPORTED = {"vt", "vn", "vp", "g", "o", "s", "l", "p", "usemtl", "mtllib", "curv", "surf"}


def _parse_obj(data: bytes) -> TriangleMesh:
    vertices: List[Tuple[float, float, float]] = []
    faces: List[Tuple[int, int, int]] = []
    offset = 0
    for raw in data.splitlines(keepends=True):
        line_offset = offset
        offset += len(raw)
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise MalformedRecord("OBJ line is not UTF-8 text", offset=line_offset + e.start) from e
        line = text.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        head = tokens[0]
        if head == "v":
            if len(tokens) != 4:
                raise MalformedRecord("vertex record needs x y z", offset=line_offset)
            try:
                vertices.append(tuple(float(x) for x in tokens[1:]))
            except ValueError as e:
                raise MalformedRecord(f"bad vertex '{line}'", offset=line_offset) from e
        elif head == "f":
            if len(tokens) != 4:
                raise UnsupportedFeature(
                    "only triangular faces are supported", offset=line_offset
                )
            if any("/" in tok for tok in tokens[1:]):
                raise UnsupportedFeature(
                    "texture/normal face references are not supported", offset=line_offset
                )
            try:
                idx = tuple(int(x) for x in tokens[1:])
            except ValueError as e:
                raise MalformedRecord(f"bad face '{line}'", offset=line_offset) from e
            if min(idx) < 1:
                raise UnsupportedFeature("relative face indices are not supported", offset=line_offset)
            faces.append(tuple(i - 1 for i in idx))
        elif head in _OBJ_UNSUPPORTED:
            raise UnsupportedFeature(f"OBJ record '{head}' is not supported", offset=line_offset)
        else:
            raise MalformedRecord(f"unknown OBJ record '{head}'", offset=line_offset)
    tri = np.array(faces, dtype=np.int64).reshape(-1, 3)
    if len(tri) and tri.max() >= len(vertices):
        raise MalformedRecord("face references a missing vertex")
    return TriangleMesh(np.array(vertices, dtype=np.float64).reshape(-1, 3), tri)


def parse_mesh(data: bytes, fmt: str) -> TriangleMesh:
    """Decode mesh bytes in one of ``FORMATS``, preserving triangle order."""
    if fmt == "stl_binary":
        return _parse_stl_binary(data)
    if fmt == "stl_ascii":
        return _parse_stl_ascii(data)
    if fmt == "obj":
        return _parse_obj(data)
    raise UnsupportedFeature(f"unknown mesh format '{fmt}'")


def sniff_format(path: Union[str, Path], data: bytes) -> str:
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        return "obj"
    if len(data) >= 84:
        count = int(np.frombuffer(data, dtype="<u4", count=1, offset=80)[0])
        if len(data) == 84 + 50 * count:
            return "stl_binary"
    if data.lstrip()[:5].lower() == b"solid":
        return "stl_ascii"
    return "stl_binary"


def load_mesh(path: Union[str, Path], fmt: Optional[str] = None) -> TriangleMesh:
    data = Path(path).read_bytes()
    mesh = parse_mesh(data, fmt or sniff_format(path, data))
    logger.info(f"Loaded {path}: {len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles")
    return mesh if mesh.name else mesh.renamed(Path(path).stem)


# ---------------------------------------------------------------------------
# Writing
# ---------------------------------------------------------------------------


def _unit_normals(corners: np.ndarray) -> np.ndarray:
    n = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
    length = np.linalg.norm(n, axis=1, keepdims=True)
    return np.divide(n, length, out=np.zeros_like(n), where=length > 0)


def write_mesh(mesh: TriangleMesh, fmt: str) -> bytes:
    """Encode a mesh; binary STL output re-parses to identical coordinates."""
    _check_indices(mesh)
    if fmt == "stl_binary":
        corners32 = mesh.corners.astype("<f4")
        records = np.zeros(len(mesh.triangles), dtype=STL_RECORD)
        records["corners"] = corners32
        records["normal"] = _unit_normals(corners32.astype(np.float64)).astype("<f4")
        header = STL_HEADER_BANNER.ljust(80, b" ")
        count = np.array([len(records)], dtype="<u4").tobytes()
        return header + count + records.tobytes()
    if fmt == "stl_ascii":
        name = mesh.name or "sculptfab"
        lines = [f"solid {name}"]
        corners = mesh.corners
        for tri, n in zip(corners, _unit_normals(corners)):
            lines.append(f"  facet normal {n[0]:.6g} {n[1]:.6g} {n[2]:.6g}")
            lines.append("    outer loop")
            for p in tri:
                lines.append(f"      vertex {p[0]:.6g} {p[1]:.6g} {p[2]:.6g}")
            lines.append("    endloop")
            lines.append("  endfacet")
        lines.append(f"endsolid {name}")
        return ("\n".join(lines) + "\n").encode("ascii")
    if fmt == "obj":
        lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles.tolist()]
        return ("\n".join(lines) + "\n").encode("ascii")
    raise UnsupportedFeature(f"unknown mesh format '{fmt}'")


def save_mesh(mesh: TriangleMesh, path: Union[str, Path], fmt: str = "stl_binary") -> Path:
    path = Path(path)
    path.write_bytes(write_mesh(mesh, fmt))
    logger.info(f"Wrote {path} ({len(mesh.triangles)} triangles)")
    return path


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------


def _check_indices(mesh: TriangleMesh) -> None:
    t = mesh.triangles
    if len(t) and (t.min() < 0 or t.max() >= len(mesh.vertices)):
        raise IndexOutOfRange(
            f"triangle index out of range for {len(mesh.vertices)} vertices",
            max_index=int(t.max()),
        )


def triangle_areas(mesh: TriangleMesh) -> np.ndarray:
    c = mesh.corners
    return 0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)


def _edge_table(triangles: np.ndarray):
    """Undirected edge keys with per-edge use counts and forward counts."""
    directed = np.concatenate(
        [triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]]
    )
    forward = directed[:, 0] < directed[:, 1]
    keys = np.sort(directed, axis=1)
    uniq, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    forward_counts = np.bincount(inverse, weights=forward, minlength=len(uniq)).astype(np.int64)
    return uniq, inverse, counts, forward_counts


def _component_labels(n_vertices: int, triangles: np.ndarray) -> Tuple[int, np.ndarray]:
    rows = np.concatenate([triangles[:, 0], triangles[:, 1]])
    cols = np.concatenate([triangles[:, 1], triangles[:, 2]])
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n_vertices, n_vertices))
    return connected_components(graph, directed=False)


def validate(mesh: TriangleMesh, degenerate_area: float = DEFAULT_SETTINGS.degenerate_area) -> MeshDiagnostics:
    """Exact edge-pairing diagnostics over vertex index pairs."""
    _check_indices(mesh)
    t = mesh.triangles
    if len(t) == 0:
        return MeshDiagnostics(True, True, 0, 0, 0, 0)

    _, _, counts, forward_counts = _edge_table(t)
    boundary = int(np.sum(counts == 1))
    nonmanifold = int(np.sum(counts > 2))
    inverted = int(np.sum((counts == 2) & (forward_counts != 1)))
    degenerate = int(np.sum(triangle_areas(mesh) < degenerate_area))

    _, labels = _component_labels(len(mesh.vertices), t)
    components = len(np.unique(labels[np.unique(t)]))

    manifold = nonmanifold == 0
    watertight = boundary == 0 and manifold and inverted == 0
    return MeshDiagnostics(watertight, manifold, boundary, inverted, degenerate, components)


def metrics(mesh: TriangleMesh) -> MeshMetrics:
    if mesh.is_empty:
        return MeshMetrics(0.0, 0.0, np.zeros((2, 3)))
    c = mesh.corners
    volume = float(np.einsum("ij,ij->i", c[:, 0], np.cross(c[:, 1], c[:, 2])).sum() / 6.0)
    area = float(triangle_areas(mesh).sum())
    used = mesh.vertices[np.unique(mesh.triangles)]
    bbox = np.array([used.min(axis=0), used.max(axis=0)])
    return MeshMetrics(volume, area, bbox)


def transform(mesh: TriangleMesh, t: RigidTransform) -> TriangleMesh:
    t.check()
    if np.array_equal(t.rotation, np.eye(3)) and not np.any(t.translation):
        return TriangleMesh(mesh.vertices.copy(), mesh.triangles, mesh.name)
    return TriangleMesh(t.apply(mesh.vertices), mesh.triangles, mesh.name)


def concatenate(meshes: List[TriangleMesh], name: Optional[str] = None) -> TriangleMesh:
    parts = [m for m in meshes if not m.is_empty]
    if not parts:
        return TriangleMesh.empty(name)
    offsets = np.cumsum([0] + [len(m.vertices) for m in parts[:-1]])
    vertices = np.vstack([m.vertices for m in parts])
    triangles = np.vstack([m.triangles + o for m, o in zip(parts, offsets)])
    return TriangleMesh(vertices, triangles, name)


# ---------------------------------------------------------------------------
# Repair
# ---------------------------------------------------------------------------


def _weld(vertices: np.ndarray, epsilon: float) -> np.ndarray:
    """Map each vertex to the lowest index within its epsilon cluster."""
    n = len(vertices)
    pairs = cKDTree(vertices).query_pairs(r=epsilon, output_type="ndarray")
    if len(pairs) == 0:
        return np.arange(n)
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    representative = np.full(labels.max() + 1, n, dtype=np.int64)
    np.minimum.at(representative, labels, np.arange(n))
    return representative[labels]


def _orient_components(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Unify winding per edge-connected component, outward by signed volume."""
    tri = triangles.copy()
    m = len(tri)
    if m == 0:
        return tri
    keys = np.sort(np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]]), axis=1)
    owner = np.tile(np.arange(m), 3)
    order = np.lexsort((keys[:, 1], keys[:, 0]))
    keys, owner = keys[order], owner[order]
    same = np.all(keys[1:] == keys[:-1], axis=1)
    a, b = owner[:-1][same], owner[1:][same]
    neighbours: List[List[int]] = [[] for _ in range(m)]
    for i, j in zip(a.tolist(), b.tolist()):
        if i != j:
            neighbours[i].append(j)
            neighbours[j].append(i)

    c = vertices[tri]
    areas = np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)
    visited = np.zeros(m, dtype=bool)
    for seed in np.argsort(-areas, kind="stable").tolist():
        if visited[seed]:
            continue
        component = [seed]
        visited[seed] = True
        queue = deque([seed])
        while queue:
            i = queue.popleft()
            edges_i = {(tri[i, k], tri[i, (k + 1) % 3]) for k in range(3)}
            for j in neighbours[i]:
                if visited[j]:
                    continue
                edges_j = {(tri[j, k], tri[j, (k + 1) % 3]) for k in range(3)}
                if edges_i & edges_j:
                    tri[j] = tri[j, ::-1]
                visited[j] = True
                component.append(j)
                queue.append(j)
        cc = vertices[tri[component]]
        volume = np.einsum("ij,ij->i", cc[:, 0], np.cross(cc[:, 1], cc[:, 2])).sum()
        if volume < 0:
            tri[component] = tri[component][:, ::-1]
    return tri


def repair_basic(
    mesh: TriangleMesh,
    weld_epsilon: float = DEFAULT_SETTINGS.weld_epsilon,
    degenerate_area: float = DEFAULT_SETTINGS.degenerate_area,
) -> TriangleMesh:
    """Weld, drop degenerate triangles and unify orientation; best effort."""
    _check_indices(mesh)
    if weld_epsilon <= 0:
        raise SpecInvalid("weld_epsilon must be positive", field="weld_epsilon")
    if mesh.is_empty:
        return mesh

    mapping = _weld(mesh.vertices, weld_epsilon)
    tri = mapping[mesh.triangles]
    distinct = (tri[:, 0] != tri[:, 1]) & (tri[:, 1] != tri[:, 2]) & (tri[:, 0] != tri[:, 2])
    tri = tri[distinct]
    c = mesh.vertices[tri]
    areas = 0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)
    tri = tri[areas >= degenerate_area]

    used = np.unique(tri)
    remap = np.full(len(mesh.vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    vertices = mesh.vertices[used]
    tri = remap[tri]

    tri = _orient_components(vertices, tri)
    dropped = len(mesh.triangles) - len(tri)
    welded = len(mesh.vertices) - len(vertices)
    logger.info(f"repair_basic: welded {welded} vertices, dropped {dropped} triangles")
    return TriangleMesh(vertices, tri, mesh.name)
