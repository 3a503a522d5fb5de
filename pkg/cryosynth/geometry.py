"""Surface meshes and spatial indexing.

Isosurface extraction, Laplacian smoothing, topology-preserving edge
collapse, mesh quality cleanup and an octree for sphere proximity
queries. Meshes and octrees are not mutated once handed out, so
queries may run from many threads.
"""

import heapq
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage, sparse
from skimage import measure

from cryosynth.errors import GeometryError, InputError

logger = logging.getLogger("cryosynth")

RELAXATION = 0.2
DECIMATION_SKIP = 0.05
MAX_ASPECT_RATIO = 50.0
MIN_ANGLE_DEG = 1.0


@dataclass(frozen=True)
class ScaleParams:
    """Scale-adaptive geometry and placement parameters for factor ``s``."""

    s: float

    def __post_init__(self):
        if not 0.2 <= self.s <= 1.0:
            raise InputError(f"scale factor must lie in [0.2, 1.0] (got {self.s})")

    @property
    def overlap_threshold(self):
        return 0.4 - 0.3 * self.s

    @property
    def placement_density(self):
        return 0.7 + 0.5 * self.s

    @property
    def collision_strictness(self):
        return 0.5 + 0.5 * self.s

    @property
    def mesh_reduction(self):
        return 0.7 - 0.7 * self.s

    @property
    def decimation_factor(self):
        return 0.6 * (1.0 - self.s)

    @property
    def marching_step(self):
        if self.s > 0.8:
            return 1
        return int(min(4, max(1, round(1.0 / self.s))))

    @property
    def smoothing_iterations(self):
        return int(round(max(1.0, 5.0 * self.s)))

    @property
    def octree_depth(self):
        return 4 + int(round(4 * self.s))

    @property
    def leaf_capacity(self):
        return int(round(16 - 8 * self.s))


# --- Meshes ---


def face_normals(vertices, faces):
    """Unnormalized face normals; their length is twice the face area."""
    if len(faces) == 0:
        return np.zeros((0, 3))
    a, b, c = (vertices[faces[:, i]] for i in range(3))
    return np.cross(b - a, c - a)


def vertex_normals(vertices, faces):
    """Area-weighted unit vertex normals (isolated vertices get +z)."""
    normals = np.zeros((len(vertices), 3))
    weighted = face_normals(vertices, faces)
    for i in range(3):
        np.add.at(normals, faces[:, i], weighted)
    length = np.linalg.norm(normals, axis=1)
    empty = length == 0
    normals[empty] = (0.0, 0.0, 1.0)
    length[empty] = 1.0
    return normals / length[:, None]


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Indexed triangle surface in Angstrom with per-vertex unit normals."""

    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray
    label: int | None = None

    @classmethod
    def from_arrays(cls, vertices, faces, label=None):
        vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        if len(faces) and (faces.min() < 0 or faces.max() >= len(vertices)):
            raise GeometryError("face index out of range")
        return cls(vertices, faces, vertex_normals(vertices, faces), label)

    @classmethod
    def empty(cls, label=None):
        return cls.from_arrays(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), label)

    @property
    def is_empty(self):
        return len(self.faces) == 0

    def edges(self):
        """Unique undirected edges as a sorted ``(E, 2)`` array."""
        if self.is_empty:
            return np.zeros((0, 2), dtype=np.int64)
        pairs = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        return np.unique(np.sort(pairs, axis=1), axis=0)

    def euler_characteristic(self):
        used = len(np.unique(self.faces)) if len(self.faces) else 0
        return used - len(self.edges()) + len(self.faces)

    def face_areas(self):
        return 0.5 * np.linalg.norm(face_normals(self.vertices, self.faces), axis=1)

    def with_vertices(self, vertices):
        """Same topology and label, new positions, normals recomputed."""
        return TriangleMesh.from_arrays(vertices, self.faces, self.label)

    def contains(self, points):
        """Inside test for a closed mesh by ray-crossing parity."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if self.is_empty:
            return np.zeros(len(points), dtype=bool)
        direction = np.array([1.0, math.sqrt(2) * 1e-3, math.sqrt(3) * 1e-3])
        direction /= np.linalg.norm(direction)
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        e1, e2 = b - a, c - a
        p = np.cross(direction, e2)
        det = np.einsum("ij,ij->i", e1, p)
        usable = np.abs(det) > 1e-12
        inv = np.zeros_like(det)
        inv[usable] = 1.0 / det[usable]
        inside = np.zeros(len(points), dtype=bool)
        for k, origin in enumerate(points):
            s = origin - a
            u = np.einsum("ij,ij->i", s, p) * inv
            q = np.cross(s, e1)
            v = (q @ direction) * inv
            t = np.einsum("ij,ij->i", e2, q) * inv
            hit = usable & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)
            inside[k] = bool(np.count_nonzero(hit) % 2)
        return inside

    def sample_surface(self, n, rng):
        """Area-weighted random points on the surface with their face normals."""
        if self.is_empty:
            raise GeometryError("cannot sample an empty mesh")
        areas = self.face_areas()
        chosen = rng.choice(len(self.faces), size=n, p=areas / areas.sum())
        r1, r2 = rng.random(n), rng.random(n)
        root = np.sqrt(r1)
        w = np.stack([1 - root, root * (1 - r2), root * r2], axis=1)
        corners = self.vertices[self.faces[chosen]]
        points = np.einsum("ij,ijk->ik", w, corners)
        normals = face_normals(self.vertices, self.faces[chosen])
        normals /= np.linalg.norm(normals, axis=1)[:, None]
        return points, normals


def write_obj(mesh, path):
    """Write an ASCII Wavefront OBJ (1-based indices)."""
    lines = [f"# cryosynth mesh label={mesh.label}"]
    lines.extend(f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in mesh.vertices)
    lines.extend(f"vn {x:.6f} {y:.6f} {z:.6f}" for x, y, z in mesh.normals)
    lines.extend(f"f {a}//{a} {b}//{b} {c}//{c}" for a, b, c in mesh.faces + 1)
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def extract_isosurface(vol, iso, scale):
    """Marching-cubes surface of ``vol`` at level ``iso``, normals outward.

    The cube step is 1 voxel for ``s > 0.8`` and ``round(1/s)`` (1..4)
    otherwise. An ``iso`` outside the open value range gives an empty mesh.
    """
    grid = np.asarray(vol.grid, dtype=np.float64)
    if not np.all(np.isfinite(grid)):
        raise InputError("volume contains non-finite samples")
    if grid.size == 0 or not grid.min() < iso < grid.max():
        return TriangleMesh.empty()

    step = scale.marching_step
    spacing = (vol.voxel_size,) * 3
    try:
        verts, faces, _, _ = measure.marching_cubes(
            grid, level=iso, spacing=spacing, step_size=step, allow_degenerate=False
        )
    except (RuntimeError, ValueError) as e:
        logger.debug(f"marching cubes found no surface: {e}")
        return TriangleMesh.empty()

    # (z, y, x) voxel frame to (x, y, z) Angstrom
    index_coords = verts.T / vol.voxel_size
    verts = verts[:, ::-1] + np.asarray(vol.origin)
    faces = faces.astype(np.int64)

    # outward = down the density gradient
    gradients = np.gradient(grid)
    descent = -np.stack(
        [ndimage.map_coordinates(g, index_coords, order=1, mode="nearest") for g in gradients[::-1]],
        axis=1,
    )
    winding = vertex_normals(verts, faces)
    if np.einsum("ij,ij->", winding, descent) < 0:
        faces = faces[:, ::-1]

    mesh = TriangleMesh.from_arrays(verts, faces)
    mesh = enforce_quality(mesh)
    logger.debug(
        f"isosurface at {iso:.4g}: {len(mesh.vertices)} vertices, {len(mesh.faces)} faces (step {step})"
    )
    return mesh


def smooth_mesh(mesh, scale):
    """Laplacian relaxation ``v += 0.2 * (mean(neighbors) - v)``, repeated
    ``round(max(1, 5s))`` times."""
    if mesh.is_empty:
        return mesh
    edges = mesh.edges()
    n = len(mesh.vertices)
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    adjacency = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    degree = np.asarray(adjacency.sum(axis=1)).ravel()
    connected = degree > 0

    vertices = mesh.vertices.copy()
    for _ in range(scale.smoothing_iterations):
        neighbor_mean = adjacency @ vertices
        neighbor_mean[connected] /= degree[connected, None]
        neighbor_mean[~connected] = vertices[~connected]
        vertices += RELAXATION * (neighbor_mean - vertices)
    return mesh.with_vertices(vertices)


# --- Edge collapse ---


class _Collapser:
    """Mutable half-built mesh supporting link-condition edge collapses."""

    def __init__(self, mesh):
        self.vertices = mesh.vertices.copy()
        self.faces = mesh.faces.copy()
        self.alive = np.ones(len(self.faces), dtype=bool)
        self.faces_alive = len(self.faces)
        self.vertex_faces = [set() for _ in range(len(self.vertices))]
        for f, face in enumerate(self.faces):
            for v in face:
                self.vertex_faces[v].add(f)
        self.vertices_alive = sum(1 for fs in self.vertex_faces if fs)

        counts = {}
        for face in self.faces:
            for a, b in ((face[0], face[1]), (face[1], face[2]), (face[2], face[0])):
                key = (min(a, b), max(a, b))
                counts[key] = counts.get(key, 0) + 1
        if any(c > 2 for c in counts.values()):
            raise GeometryError("non-manifold edge (shared by more than two faces)")
        self.boundary = {v for key, c in counts.items() if c == 1 for v in key}
        self.edges = list(counts)

    def neighbors(self, v):
        out = set()
        for f in self.vertex_faces[v]:
            out.update(int(w) for w in self.faces[f])
        out.discard(v)
        return out

    def length(self, u, v):
        return float(np.linalg.norm(self.vertices[u] - self.vertices[v]))

    def shares_edge(self, u, v):
        return bool(self.vertex_faces[u] & self.vertex_faces[v])

    def can_collapse(self, u, v):
        if u in self.boundary or v in self.boundary or self.vertices_alive <= 4:
            return False
        shared = self.vertex_faces[u] & self.vertex_faces[v]
        if len(shared) != 2:
            return False
        opposite = {int(w) for f in shared for w in self.faces[f]} - {u, v}
        if self.neighbors(u) & self.neighbors(v) != opposite:
            return False
        target = 0.5 * (self.vertices[u] + self.vertices[v])
        for f in (self.vertex_faces[u] | self.vertex_faces[v]) - shared:
            corners = self.vertices[self.faces[f]]
            before = np.cross(corners[1] - corners[0], corners[2] - corners[0])
            moved = corners.copy()
            moved[(self.faces[f] == u) | (self.faces[f] == v)] = target
            after = np.cross(moved[1] - moved[0], moved[2] - moved[0])
            if np.dot(before, after) <= 0:
                return False
        return True

    def collapse(self, u, v):
        """Merge ``v`` into ``u`` at the edge midpoint."""
        shared = self.vertex_faces[u] & self.vertex_faces[v]
        for f in shared:
            self.alive[f] = False
            self.faces_alive -= 1
            for w in self.faces[f]:
                self.vertex_faces[w].discard(f)
        for f in self.vertex_faces[v]:
            self.faces[f][self.faces[f] == v] = u
            self.vertex_faces[u].add(f)
        self.vertex_faces[v] = set()
        self.vertices_alive -= 1
        self.vertices[u] = 0.5 * (self.vertices[u] + self.vertices[v])

    def to_mesh(self, label):
        faces = self.faces[self.alive]
        used = np.unique(faces)
        remap = np.full(len(self.vertices), -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        return TriangleMesh.from_arrays(self.vertices[used], remap[faces], label)


def decimate_mesh(mesh, scale):
    """Shortest-edge-first collapse to ``round(F * (1 - 0.6(1 - s)))`` faces.

    Skipped when the reduction factor is below 0.05. Boundary vertices are
    never moved and every collapse satisfies the link condition, so the
    Euler characteristic is preserved.
    """
    factor = scale.decimation_factor
    if factor < DECIMATION_SKIP or mesh.is_empty:
        return mesh
    state = _Collapser(mesh)
    target = int(round(len(mesh.faces) * (1.0 - factor)))

    heap = [(state.length(u, v), int(u), int(v)) for u, v in state.edges]
    heapq.heapify(heap)
    while state.faces_alive > target and heap:
        length, u, v = heapq.heappop(heap)
        if not state.vertex_faces[u] or not state.vertex_faces[v] or not state.shares_edge(u, v):
            continue
        current = state.length(u, v)
        if current != length:
            heapq.heappush(heap, (current, u, v))
            continue
        if not state.can_collapse(u, v):
            continue
        state.collapse(u, v)
        for w in state.neighbors(u):
            heapq.heappush(heap, (state.length(u, w), min(u, w), max(u, w)))

    result = state.to_mesh(mesh.label)
    logger.debug(f"decimated {len(mesh.faces)} -> {len(result.faces)} faces (target {target})")
    return result


def face_quality(mesh):
    """Per-face aspect ratio (longest edge over its altitude) and minimum angle in degrees."""
    corners = mesh.vertices[mesh.faces]
    edges = np.stack(
        [corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 1], corners[:, 0] - corners[:, 2]],
        axis=1,
    )
    lengths = np.linalg.norm(edges, axis=2)
    double_area = np.linalg.norm(np.cross(edges[:, 0], -edges[:, 2]), axis=1)
    longest = lengths.max(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        aspect = np.where(double_area > 0, longest**2 / double_area, np.inf)
        cosines = []
        for i in range(3):
            a, b = -edges[:, (i - 1) % 3], edges[:, i]
            cosines.append(
                np.einsum("ij,ij->i", a, b) / (lengths[:, (i - 1) % 3] * lengths[:, i])
            )
        angles = np.degrees(np.arccos(np.clip(np.stack(cosines, axis=1), -1, 1)))
    return aspect, np.nan_to_num(angles.min(axis=1), nan=0.0)


def enforce_quality(mesh, max_aspect=MAX_ASPECT_RATIO, min_angle=MIN_ANGLE_DEG):
    """Collapse the shortest edge of every sliver or zero-area face."""
    if mesh.is_empty:
        return mesh
    aspect, angles = face_quality(mesh)
    bad = np.flatnonzero((aspect > max_aspect) | (angles < min_angle))
    if len(bad) == 0:
        return mesh
    try:
        state = _Collapser(mesh)
    except GeometryError:
        logger.debug("quality cleanup skipped on non-manifold mesh")
        return mesh
    for f in bad:
        if not state.alive[f]:
            continue
        face = [int(v) for v in state.faces[f]]
        pairs = sorted(
            ((face[i], face[(i + 1) % 3]) for i in range(3)),
            key=lambda e: state.length(*e),
        )
        for u, v in pairs:
            if state.can_collapse(u, v):
                state.collapse(u, v)
                break
    result = state.to_mesh(mesh.label)
    remaining = np.count_nonzero(np.isinf(face_quality(result)[0])) if not result.is_empty else 0
    if remaining:
        logger.warning(f"{remaining} zero-area faces could not be collapsed")
    return result


# --- Octree ---


class _Node:
    __slots__ = ("lo", "hi", "depth", "items", "children", "max_radius")

    def __init__(self, lo, hi, depth):
        self.lo = lo
        self.hi = hi
        self.depth = depth
        self.items = []
        self.children = None
        self.max_radius = 0.0


class Octree:
    """Sphere index with adaptive subdivision.

    A leaf splits once it holds more than ``leaf_capacity`` items, down to
    ``max_depth``. Every node tracks the largest item radius below it so
    queries can prune whole cells.
    """

    def __init__(self, bounds, max_depth=8, leaf_capacity=8):
        lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
        if lo.shape != (3,) or np.any(hi < lo):
            raise GeometryError(f"invalid octree bounds {bounds}")
        self.root = _Node(lo, hi, 0)
        self.max_depth = int(max_depth)
        self.leaf_capacity = max(1, int(leaf_capacity))
        self._centers = []
        self._radii = []
        self._ids = []

    @classmethod
    def for_scale(cls, bounds, scale):
        return cls(bounds, scale.octree_depth, scale.leaf_capacity)

    def __len__(self):
        return len(self._ids)

    def insert(self, item_id, center, radius):
        center = np.asarray(center, dtype=np.float64)
        root = self.root
        if np.any(center < root.lo) or np.any(center > root.hi):
            raise GeometryError(f"item {item_id} at {center.tolist()} lies outside the octree bounds")
        index = len(self._ids)
        self._ids.append(item_id)
        self._centers.append(center)
        self._radii.append(float(radius))

        node = root
        while True:
            node.max_radius = max(node.max_radius, float(radius))
            if node.children is None:
                break
            node = node.children[self._octant(node, center)]
        node.items.append(index)
        if len(node.items) > self.leaf_capacity and node.depth < self.max_depth:
            self._split(node)

    def _octant(self, node, center):
        mid = 0.5 * (node.lo + node.hi)
        upper = center >= mid
        return int(upper[0]) | int(upper[1]) << 1 | int(upper[2]) << 2

    def _split(self, node):
        mid = 0.5 * (node.lo + node.hi)
        node.children = []
        for octant in range(8):
            bits = np.array([(octant >> axis) & 1 for axis in range(3)], dtype=bool)
            lo = np.where(bits, mid, node.lo)
            hi = np.where(bits, node.hi, mid)
            node.children.append(_Node(lo, hi, node.depth + 1))
        items, node.items = node.items, []
        for index in items:
            child = node.children[self._octant(node, self._centers[index])]
            child.items.append(index)
            child.max_radius = max(child.max_radius, self._radii[index])
        for child in node.children:
            if len(child.items) > self.leaf_capacity and child.depth < self.max_depth:
                self._split(child)

    def query_near(self, center, radius):
        """Ids of items whose sphere overlaps the query sphere."""
        center = np.asarray(center, dtype=np.float64)
        found = []
        stack = [self.root]
        while stack:
            node = stack.pop()
            if not node.items and node.children is None:
                continue
            gap = np.maximum(np.maximum(node.lo - center, center - node.hi), 0.0)
            if np.linalg.norm(gap) > radius + node.max_radius:
                continue
            for index in node.items:
                if np.linalg.norm(self._centers[index] - center) < radius + self._radii[index]:
                    found.append(self._ids[index])
            if node.children is not None:
                stack.extend(node.children)
        return found


def build_octree(items, bounds, scale=None, max_depth=None, leaf_capacity=None):
    """Index ``(id, center, radius)`` items; depth and capacity follow ``scale``."""
    if scale is not None:
        max_depth = scale.octree_depth if max_depth is None else max_depth
        leaf_capacity = scale.leaf_capacity if leaf_capacity is None else leaf_capacity
    tree = Octree(bounds, max_depth or 8, leaf_capacity or 8)
    for item_id, center, radius in items:
        tree.insert(item_id, center, radius)
    return tree


def query_near(octree, center, radius):
    return octree.query_near(center, radius)
