"""Triangle-mesh surface interaction on top of the trained density field.

An isosurface extracted from the density grid turns the volumetric scene into
geometry that supports constant-time surface queries: ray casting for
single-sample feature rendering, projecting 2D masks into per-triangle votes
accumulated across views, re-projecting clicked surface points into new
views, and exporting the selected sub-mesh (ASCII OBJ or binary PLY).

Isosurface extraction itself is delegated to scikit-image's marching cubes;
everything on top (BVH ray casting, vote bookkeeping, tracking, export) lives
here.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field as dfield
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from skimage.measure import marching_cubes

from .cameras import CameraPose, generate_rays
from .errors import ContractViolation, EmptySelectionError, EmptySurfaceError
from .kernels import raycast_bvh
from .radiance import RadianceField, query_density

DEFAULT_SIGMA_THRESHOLD = 5.0
DEFAULT_RESOLUTION = 96
SELECT_THRESHOLD = 0.5
OCCLUSION_TOLERANCE = 1e-3
_DEGENERATE_AREA = 1e-12


@dataclass
class TriMesh:
    """Indexed triangle soup in world units."""

    vertices: np.ndarray  # [V,3] f64
    triangles: np.ndarray  # [T,3] i32
    per_triangle_object_id: np.ndarray | None = None  # [T] i32, optional labels

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int32).reshape(-1, 3)
        if not np.isfinite(self.vertices).all():
            raise ContractViolation("TriMesh: non-finite vertex coordinates")
        if self.triangles.size and (self.triangles.min() < 0
                                    or self.triangles.max() >= len(self.vertices)):
            raise ContractViolation("TriMesh: triangle index out of range")
        if self.per_triangle_object_id is not None:
            ids = np.asarray(self.per_triangle_object_id, dtype=np.int32).reshape(-1)
            if ids.shape[0] != self.n_triangles:
                raise ContractViolation("TriMesh: one object id per triangle required")
            self.per_triangle_object_id = ids

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    @property
    def is_empty(self) -> bool:
        return self.n_triangles == 0

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, k]] for k in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def triangle_centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    def connected_component_count(self) -> int:
        """Components of the triangle-connectivity graph (shared vertices)."""
        if self.is_empty:
            return 0
        edges = np.concatenate([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]],
                                self.triangles[:, [2, 0]]])
        graph = coo_matrix((np.ones(len(edges)), (edges[:, 0], edges[:, 1])),
                           shape=(self.n_vertices, self.n_vertices))
        n, labels = connected_components(graph, directed=False)
        return len(np.unique(labels[np.unique(self.triangles)]))

    def is_watertight(self) -> bool:
        """Every edge shared by exactly two triangles (reported, not required)."""
        if self.is_empty:
            return False
        edges = np.sort(np.concatenate([
            self.triangles[:, [0, 1]], self.triangles[:, [1, 2]],
            self.triangles[:, [2, 0]]]), axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        return bool((counts == 2).all())


def empty_mesh() -> TriMesh:
    return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int32))


def _drop_degenerate(vertices: np.ndarray, faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mesh = TriMesh(vertices, faces)
    keep = mesh.triangle_areas() > _DEGENERATE_AREA
    return vertices, faces[keep]


def extract_mesh_from_density(density_fn, bounds, resolution: int = DEFAULT_RESOLUTION,
                              sigma_threshold: float = DEFAULT_SIGMA_THRESHOLD) -> TriMesh:
    """Marching cubes over ``density_fn([N,3]) -> [N]`` sampled on a
    ``resolution``^3 lattice covering ``bounds``.

    Deterministic; a threshold above the sampled maximum yields an empty mesh
    rather than an error.
    """
    if resolution < 2:
        raise ContractViolation("extract_mesh: resolution must be >= 2")
    lo, hi = bounds.lo, bounds.hi
    axes = [np.linspace(lo[k], hi[k], resolution) for k in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    sigma = np.empty(grid.shape[0], dtype=np.float64)
    chunk = 1 << 17
    for s in range(0, grid.shape[0], chunk):
        sigma[s:s + chunk] = np.asarray(density_fn(grid[s:s + chunk]), dtype=np.float64)
    vol = sigma.reshape(resolution, resolution, resolution)
    try:
        spacing = tuple((hi[k] - lo[k]) / (resolution - 1) for k in range(3))
        verts, faces, _, _ = marching_cubes(vol, level=sigma_threshold, spacing=spacing)
    except ValueError:
        # iso-level outside the sampled range: no surface crosses it
        return empty_mesh()
    verts = verts + np.asarray(lo, dtype=np.float64)[None, :]
    verts, faces = _drop_degenerate(verts, np.asarray(faces, dtype=np.int32))
    return TriMesh(verts, faces)


def extract_mesh(field: RadianceField, resolution: int = DEFAULT_RESOLUTION,
                 sigma_threshold: float = DEFAULT_SIGMA_THRESHOLD) -> TriMesh:
    """Isosurface of a trained field's density at ``sigma_threshold``."""
    return extract_mesh_from_density(
        lambda p: query_density(field, p.astype(np.float32)),
        field.bounds, resolution, sigma_threshold)


# ----------------------------------------------------------------- raycast


@dataclass
class _BvhArrays:
    node_lo: np.ndarray
    node_hi: np.ndarray
    node_left: np.ndarray
    node_right: np.ndarray
    node_start: np.ndarray
    node_count: np.ndarray
    tri_index: np.ndarray


def _build_bvh(mesh: TriMesh, leaf_size: int = 4) -> _BvhArrays:
    tris = mesh.vertices[mesh.triangles]  # [T,3,3]
    tri_lo = tris.min(axis=1)
    tri_hi = tris.max(axis=1)
    centroids = tris.mean(axis=1)
    order = np.arange(mesh.n_triangles)

    node_lo, node_hi = [], []
    node_left, node_right = [], []
    node_start, node_count = [], []

    def new_node() -> int:
        for arr in (node_lo, node_hi):
            arr.append(np.zeros(3))
        for arr in (node_left, node_right, node_start, node_count):
            arr.append(-1)
        return len(node_left) - 1

    root = new_node()
    stack = [(root, 0, mesh.n_triangles)]
    while stack:
        node, start, end = stack.pop()
        sub = order[start:end]
        node_lo[node] = tri_lo[sub].min(axis=0)
        node_hi[node] = tri_hi[sub].max(axis=0)
        count = end - start
        if count <= leaf_size:
            node_left[node] = -1
            node_right[node] = -1
            node_start[node] = start
            node_count[node] = count
            continue
        cents = centroids[sub]
        axis = int(np.argmax(cents.max(axis=0) - cents.min(axis=0)))
        local = np.argsort(cents[:, axis], kind="stable")
        order[start:end] = sub[local]
        mid = start + count // 2
        left, right = new_node(), new_node()
        node_left[node] = left
        node_right[node] = right
        stack.append((left, start, mid))
        stack.append((right, mid, end))

    return _BvhArrays(
        node_lo=np.asarray(node_lo, dtype=np.float64),
        node_hi=np.asarray(node_hi, dtype=np.float64),
        node_left=np.asarray(node_left, dtype=np.int32),
        node_right=np.asarray(node_right, dtype=np.int32),
        node_start=np.asarray(node_start, dtype=np.int32),
        node_count=np.asarray(node_count, dtype=np.int32),
        tri_index=np.asarray(order, dtype=np.int32),
    )


class MeshRaycaster:
    """Immutable mesh + BVH; nearest-hit queries are read-only and reusable."""

    def __init__(self, mesh: TriMesh):
        if mesh.is_empty:
            raise EmptySurfaceError("cannot build a raycaster over an empty mesh; "
                                    "extract with a lower density threshold")
        self.mesh = mesh
        self._bvh = _build_bvh(mesh)
        tris = mesh.vertices[mesh.triangles]
        self._v0 = np.ascontiguousarray(tris[:, 0])
        self._e1 = np.ascontiguousarray(tris[:, 1] - tris[:, 0])
        self._e2 = np.ascontiguousarray(tris[:, 2] - tris[:, 0])

    def cast(self, origins: np.ndarray, dirs: np.ndarray,
             t_max: np.ndarray | float = np.inf):
        """Nearest hits: (t [N] with inf at misses, triangle [N] with -1,
        points [N,3] with the origin repeated at misses)."""
        origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
        dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
        if origins.shape != dirs.shape:
            raise ContractViolation("cast: origins/dirs shape mismatch")
        n = origins.shape[0]
        t_arr = np.broadcast_to(np.asarray(t_max, dtype=np.float64), (n,)).copy()
        out_t = np.empty(n, dtype=np.float64)
        out_tri = np.empty(n, dtype=np.int64)
        b = self._bvh
        raycast_bvh(origins, dirs, t_arr, b.node_lo, b.node_hi, b.node_left,
                    b.node_right, b.node_start, b.node_count, b.tri_index,
                    self._v0, self._e1, self._e2, out_t, out_tri)
        hit = out_tri >= 0
        points = origins + dirs * np.where(hit, out_t, 0.0)[:, None]
        return out_t, out_tri, points

    def raycast(self, origins: np.ndarray, dirs: np.ndarray):
        """(t, hit) pair — the surface-lookup interface the feature renderer
        expects from an attached mesh."""
        t, tri, _ = self.cast(origins, dirs)
        return t, tri >= 0


# --------------------------------------------------------------- selection


@dataclass
class SelectionState:
    """Per-triangle vote counters; the selected set is derived, never stored."""

    pos_votes: np.ndarray  # [T] i64
    neg_votes: np.ndarray  # [T] i64
    threshold: float = SELECT_THRESHOLD

    def __post_init__(self):
        self.pos_votes = np.asarray(self.pos_votes, dtype=np.int64).reshape(-1)
        self.neg_votes = np.asarray(self.neg_votes, dtype=np.int64).reshape(-1)
        if self.pos_votes.shape != self.neg_votes.shape:
            raise ContractViolation("SelectionState: vote array shapes differ")
        if (self.pos_votes < 0).any() or (self.neg_votes < 0).any():
            raise ContractViolation("SelectionState: negative vote count")
        if not (0.0 <= self.threshold < 1.0):
            raise ContractViolation("SelectionState: threshold must be in [0, 1)")

    @staticmethod
    def for_mesh(mesh: TriMesh, threshold: float = SELECT_THRESHOLD) -> "SelectionState":
        zeros = np.zeros(mesh.n_triangles, dtype=np.int64)
        return SelectionState(zeros, zeros.copy(), threshold)

    @property
    def n_triangles(self) -> int:
        return self.pos_votes.shape[0]

    @property
    def selected(self) -> np.ndarray:
        """Boolean per triangle: vote ratio above threshold with >= 1 vote."""
        total = self.pos_votes + self.neg_votes
        ratio = np.divide(self.pos_votes, total,
                          out=np.zeros(self.n_triangles), where=total > 0)
        return (total >= 1) & (ratio > self.threshold)

    @property
    def n_selected(self) -> int:
        return int(self.selected.sum())

    def reset(self) -> None:
        self.pos_votes[:] = 0
        self.neg_votes[:] = 0

    def to_json(self) -> dict:
        return {
            "threshold": float(self.threshold),
            "votes": [[int(p), int(n)] for p, n in zip(self.pos_votes, self.neg_votes)],
        }

    @staticmethod
    def from_json(data: dict) -> "SelectionState":
        try:
            votes = np.asarray(data["votes"], dtype=np.int64).reshape(-1, 2)
            return SelectionState(votes[:, 0].copy(), votes[:, 1].copy(),
                                  float(data["threshold"]))
        except (KeyError, TypeError, ValueError) as e:
            raise ContractViolation(f"selection JSON invalid: {e}") from e


def project_mask(caster: MeshRaycaster, selection: SelectionState,
                 pose: CameraPose, mask: np.ndarray) -> SelectionState:
    """Cast every pixel ray; each front-most hit votes its triangle up when
    the pixel is masked, down otherwise. Occluded triangles receive nothing.
    Returns the mutated ``selection``; commutative across (pose, mask) order.
    """
    mask = np.asarray(mask)
    if mask.dtype != bool:
        raise ContractViolation("project_mask: mask must be boolean")
    if mask.shape != (pose.height, pose.width):
        raise ContractViolation(
            f"project_mask: mask {mask.shape} vs pose {(pose.height, pose.width)}")
    if selection.n_triangles != caster.mesh.n_triangles:
        raise ContractViolation("project_mask: selection sized for a different mesh")
    rays = generate_rays(pose)
    _, tri, _ = caster.cast(rays.origins, rays.dirs)
    hit = tri >= 0
    flat = mask.reshape(-1)
    np.add.at(selection.pos_votes, tri[hit & flat], 1)
    np.add.at(selection.neg_votes, tri[hit & ~flat], 1)
    return selection


# ---------------------------------------------------------------- tracking


@dataclass
class TrackedClick:
    """A click promoted to a surface point, re-projectable into other views."""

    world_point: np.ndarray  # [3]
    source_pose: CameraPose

    def __post_init__(self):
        self.world_point = np.asarray(self.world_point, dtype=np.float64).reshape(3)

    def to_json(self) -> dict:
        return {"worldPoint": [float(v) for v in self.world_point],
                "sourcePose": self.source_pose.to_wire()}

    @staticmethod
    def from_json(data: dict) -> "TrackedClick":
        try:
            return TrackedClick(np.asarray(data["worldPoint"], dtype=np.float64),
                                CameraPose.from_wire(data["sourcePose"]))
        except (KeyError, TypeError, ValueError) as e:
            raise ContractViolation(f"tracked-click JSON invalid: {e}") from e


def click_to_surface(caster: MeshRaycaster, pose: CameraPose,
                     u: float, v: float) -> TrackedClick | None:
    """Promote a pixel click to the surface point under it (None if the click
    ray misses the mesh)."""
    rays = generate_rays(pose, u=np.array([u]), v=np.array([v]))
    _, tri, points = caster.cast(rays.origins, rays.dirs)
    if tri[0] < 0:
        return None
    return TrackedClick(world_point=points[0], source_pose=pose)


@dataclass
class TrackResult:
    u: float
    v: float
    status: str  # "visible" | "off-screen" | "occluded"

    @property
    def visible(self) -> bool:
        return self.status == "visible"

    def to_json(self) -> dict:
        return {"u": float(self.u), "v": float(self.v), "status": self.status}


def project_point(pose: CameraPose, point: np.ndarray) -> tuple[float, float, float]:
    """(u, v, depth) of a world point; depth <= 0 means behind the camera.

    Exact inverse of the pixel->ray mapping, so projecting a point that a
    pixel's ray passes through returns that pixel.
    """
    p_cam = pose.rotation.T @ (np.asarray(point, dtype=np.float64) - pose.translation)
    depth = -p_cam[2]  # camera looks along -Z
    if depth <= 0:
        return float("nan"), float("nan"), float(depth)
    tan_y = np.tan(np.radians(pose.fov_y_deg) / 2)
    tan_x = tan_y * pose.width / pose.height
    ndc_u = (p_cam[0] / depth) / tan_x
    ndc_v = -(p_cam[1] / depth) / tan_y
    u = (ndc_u + 1.0) * (pose.width - 1) / 2.0
    v = (ndc_v + 1.0) * (pose.height - 1) / 2.0
    return float(u), float(v), float(depth)


def track_click(caster: MeshRaycaster, click: TrackedClick,
                new_pose: CameraPose) -> TrackResult:
    """Where the clicked surface point lands in ``new_pose``: its pixel when
    visible, otherwise why not (off-screen, or occluded by nearer geometry
    within a 1e-3 world-unit tolerance)."""
    u, v, depth = project_point(new_pose, click.world_point)
    if depth <= 0:
        return TrackResult(float("nan"), float("nan"), "off-screen")
    if not (0 <= u <= new_pose.width - 1 and 0 <= v <= new_pose.height - 1):
        return TrackResult(u, v, "off-screen")
    to_point = click.world_point - new_pose.translation
    dist = float(np.linalg.norm(to_point))
    t, tri, _ = caster.cast(new_pose.translation[None, :], (to_point / dist)[None, :])
    if tri[0] >= 0 and t[0] < dist - OCCLUSION_TOLERANCE:
        return TrackResult(u, v, "occluded")
    return TrackResult(u, v, "visible")


# ----------------------------------------------------------------- export


def extract_selected(mesh: TriMesh, selection: SelectionState) -> TriMesh:
    """Sub-mesh of the selected triangles with compacted vertex indices; the
    input mesh is untouched."""
    if selection.n_triangles != mesh.n_triangles:
        raise ContractViolation("extract_selected: selection sized for a different mesh")
    chosen = selection.selected
    if not chosen.any():
        raise EmptySelectionError(
            "no triangles selected; project masks from more camera views first")
    faces = mesh.triangles[chosen]
    used = np.unique(faces)
    remap = np.full(mesh.n_vertices, -1, dtype=np.int32)
    remap[used] = np.arange(len(used), dtype=np.int32)
    ids = mesh.per_triangle_object_id
    return TriMesh(mesh.vertices[used].copy(), remap[faces],
                   None if ids is None else ids[chosen].copy())


def save_obj(mesh: TriMesh, path: str | Path) -> None:
    """ASCII OBJ with v/f records (1-based indices)."""
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def obj_bytes(mesh: TriMesh) -> bytes:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    return ("\n".join(lines) + ("\n" if lines else "")).encode()


def load_obj(path: str | Path) -> TriMesh:
    verts, faces = [], []
    for raw in Path(path).read_text().splitlines():
        parts = raw.split()
        if not parts or parts[0] not in ("v", "f"):
            continue
        if parts[0] == "v":
            if len(parts) < 4:
                raise ContractViolation(f"OBJ vertex record too short: {raw!r}")
            verts.append([float(x) for x in parts[1:4]])
        else:
            if len(parts) != 4:
                raise ContractViolation(f"only triangle faces supported: {raw!r}")
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return TriMesh(np.asarray(verts, dtype=np.float64).reshape(-1, 3),
                   np.asarray(faces, dtype=np.int32).reshape(-1, 3))


_PLY_HEADER = """ply
format binary_little_endian 1.0
element vertex {nv}
property float x
property float y
property float z
element face {nf}
property list uchar int vertex_indices
end_header
"""


def save_ply(mesh: TriMesh, path: str | Path) -> None:
    """Binary little-endian PLY (float32 vertices, uchar-counted int faces)."""
    with open(path, "wb") as f:
        f.write(_PLY_HEADER.format(nv=mesh.n_vertices, nf=mesh.n_triangles).encode())
        f.write(np.ascontiguousarray(mesh.vertices, dtype="<f4").tobytes())
        for tri in mesh.triangles:
            f.write(struct.pack("<B3i", 3, int(tri[0]), int(tri[1]), int(tri[2])))


def load_ply(path: str | Path) -> TriMesh:
    blob = Path(path).read_bytes()
    end = blob.find(b"end_header\n")
    if end < 0:
        raise ContractViolation("PLY: missing end_header")
    header = blob[:end].decode()
    if "format binary_little_endian 1.0" not in header:
        raise ContractViolation("PLY: only binary little-endian 1.0 is supported")
    nv = nf = None
    for line in header.splitlines():
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            nv = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            nf = int(parts[2])
    if nv is None or nf is None:
        raise ContractViolation("PLY: missing vertex/face element declarations")
    body = blob[end + len(b"end_header\n"):]
    vbytes = nv * 12
    verts = np.frombuffer(body[:vbytes], dtype="<f4").reshape(nv, 3).astype(np.float64)
    faces = np.empty((nf, 3), dtype=np.int32)
    off = vbytes
    for i in range(nf):
        count = body[off]
        if count != 3:
            raise ContractViolation(f"PLY: face {i} has {count} vertices; triangles only")
        faces[i] = struct.unpack_from("<3i", body, off + 1)
        off += 13
    return TriMesh(verts, faces)


def save_selection(selection: SelectionState, path: str | Path) -> None:
    Path(path).write_text(json.dumps(selection.to_json()))


def load_selection(path: str | Path) -> SelectionState:
    return SelectionState.from_json(json.loads(Path(path).read_text()))
