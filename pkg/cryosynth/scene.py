"""Particle placement, orientation sampling and cellular context.

Positions are ``(x, y, z)`` in Angstrom inside a box running from the
origin to the scene extents; the ice mid-plane sits at ``z = extents[2] / 2``.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation
from scipy.stats import truncnorm

from cryosynth.density import DensityVolume, smooth_and_threshold
from cryosynth.errors import CapacityError, InputError
from cryosynth.geometry import (
    Octree,
    ScaleParams,
    TriangleMesh,
    extract_isosurface,
    smooth_mesh,
)
from cryosynth.ice import perlin3d
from cryosynth.params import ClassRule, OrientationSpec

logger = logging.getLogger("cryosynth")

SIZE_LADDER = ((10.0, 1.0), (50.0, 0.8), (200.0, 0.6))
CLUSTER_PRIMARY_WEIGHT = 0.7
RSA_PACKING_FRACTION = 0.38
MIN_PLACED_FRACTION = 0.5
MAX_CONSECUTIVE_FAILURES = 10
CONTEXT_WAVELENGTH = 50.0
UNIT_TOLERANCE = 1e-12


# --- Quaternions ---


@dataclass(frozen=True)
class Quaternion:
    """Unit rotation quaternion ``(w, x, y, z)``, renormalized on drift."""

    w: float = 1.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    def __post_init__(self):
        norm = math.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2)
        if not norm > 0 or not math.isfinite(norm):
            raise InputError(f"cannot normalize quaternion {self.as_tuple()}")
        # at most 3 passes
        for _ in range(3):
            if abs(norm - 1.0) <= UNIT_TOLERANCE:
                break
            for name in "wxyz":
                object.__setattr__(self, name, float(getattr(self, name)) / norm)
            norm = math.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2)

    @classmethod
    def identity(cls):
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, values):
        w, x, y, z = (float(v) for v in values)
        return cls(w, x, y, z)

    @classmethod
    def from_rotation(cls, rotation):
        x, y, z, w = rotation.as_quat()
        return canonical(cls(w, x, y, z))

    def as_tuple(self):
        return (self.w, self.x, self.y, self.z)

    def as_array(self):
        return np.array(self.as_tuple())

    @property
    def norm(self):
        return math.sqrt(sum(c * c for c in self.as_tuple()))

    def conjugate(self):
        return Quaternion(self.w, -self.x, -self.y, -self.z)

    def __mul__(self, other):
        a1, b1, c1, d1 = self.as_tuple()
        a2, b2, c2, d2 = other.as_tuple()
        return Quaternion(
            a1 * a2 - b1 * b2 - c1 * c2 - d1 * d2,
            a1 * b2 + b1 * a2 + c1 * d2 - d1 * c2,
            a1 * c2 - b1 * d2 + c1 * a2 + d1 * b2,
            a1 * d2 + b1 * c2 - c1 * b2 + d1 * a2,
        )

    def to_rotation(self):
        return Rotation.from_quat([self.x, self.y, self.z, self.w])

    def to_matrix(self):
        return self.to_rotation().as_matrix()

    def rotate(self, vectors):
        return self.to_rotation().apply(vectors)


def canonical(q):
    """Pick the sign with ``w >= 0`` (ties broken on the first non-zero axis)."""
    values = q.as_tuple()
    if abs(values[0]) > UNIT_TOLERANCE:
        flip = values[0] < 0
    else:
        lead = next((v for v in values[1:] if abs(v) > UNIT_TOLERANCE), 0.0)
        flip = lead < 0
    return Quaternion(*(-v for v in values)) if flip else q


def euler_to_quaternion(alpha, beta, gamma):
    """Intrinsic ZYZ angles in degrees (``Rz(a) Ry(b) Rz(g)``) to a quaternion."""
    angles = np.array([alpha, beta, gamma], dtype=np.float64)
    if not np.all(np.isfinite(angles)):
        raise InputError(f"non-finite Euler angles: {angles.tolist()}")
    return Quaternion.from_rotation(Rotation.from_euler("ZYZ", angles, degrees=True))


def _wxyz(rotations):
    quats = np.atleast_2d(rotations.as_quat())[:, [3, 0, 1, 2]]
    quats[quats[:, 0] < 0] *= -1.0
    return quats


def _align_z(directions):
    """Minimal rotations carrying +z onto each unit direction."""
    z = np.array([0.0, 0.0, 1.0])
    axes = np.cross(z, directions)
    sines = np.linalg.norm(axes, axis=1)
    angles = np.arctan2(sines, directions @ z)
    unit = np.zeros_like(axes)
    ok = sines > 1e-12
    unit[ok] = axes[ok] / sines[ok, None]
    unit[~ok] = (1.0, 0.0, 0.0)
    return Rotation.from_rotvec(unit * angles[:, None])


def _spun_to(directions, rng):
    spin = Rotation.from_euler("z", rng.uniform(0.0, 2 * np.pi, len(directions)))
    return _align_z(directions) * spin


def sample_orientations(spec, rng, n):
    """``n`` quaternions as an ``(n, 4)`` array in ``(w, x, y, z)`` order."""
    if spec.mode == "uniform":
        quats = rng.normal(size=(n, 4))
        quats /= np.linalg.norm(quats, axis=1)[:, None]
        quats[quats[:, 0] < 0] *= -1.0
        return quats

    if spec.mode == "preferred":
        kappa = spec.kappa
        mu = np.asarray(spec.mu, dtype=np.float64)
        mu /= np.linalg.norm(mu)
        u = rng.random(n)
        cos_t = 1.0 + np.log(u + (1.0 - u) * np.exp(-2.0 * kappa)) / kappa
        cos_t = np.clip(cos_t, -1.0, 1.0)
        phi = rng.uniform(0.0, 2 * np.pi, n)
        sin_t = np.sqrt(1.0 - cos_t**2)
        local = np.stack([sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t], axis=1)
        directions = _align_z(mu[None, :])[0].apply(local)
    else:
        sigma = spec.theta_max / 2.0
        tilt = truncnorm.rvs(0.0, spec.theta_max / sigma, scale=sigma, size=n, random_state=rng)
        tilt = np.minimum(tilt, spec.theta_max)
        phi = rng.uniform(0.0, 2 * np.pi, n)
        directions = np.stack(
            [np.sin(tilt) * np.cos(phi), np.sin(tilt) * np.sin(phi), np.cos(tilt)], axis=1
        )
    return _wxyz(_spun_to(directions, rng))


def sample_orientation(spec, rng):
    return Quaternion.from_array(sample_orientations(spec, rng, 1)[0])


# --- Scale ---


def size_scale(particle_size):
    for bound, value in SIZE_LADDER:
        if particle_size < bound:
            return value
    return 0.4 if particle_size <= 1000.0 else 0.2


def derive_scale_params(particle_size, volume_size):
    """Composite scale ``0.7 * s_size + 0.3 * s_density``, clamped to [0.2, 1]."""
    if not particle_size > 0 or not volume_size > 0:
        raise InputError(
            f"particle_size and volume_size must be > 0 (got {particle_size}, {volume_size})"
        )
    s_size = size_scale(particle_size)
    s_density = min(1.0, particle_size**3 / (volume_size / 1000.0))
    s = 0.7 * s_size + 0.3 * s_density
    logger.debug(f"scale: s_size={s_size} s_density={s_density:.4f} s={s:.4f}")
    return ScaleParams(min(1.0, max(0.2, s)))


# --- Placement ---


@dataclass(frozen=True)
class Placement:
    structure_id: str
    position: tuple
    orientation: Quaternion
    radius: float
    source: str = "synthetic"
    confidence: float = 1.0

    def __post_init__(self):
        if not self.radius > 0:
            raise InputError(f"placement radius must be > 0 (got {self.radius})")
        if self.source not in ("experimental", "synthetic"):
            raise InputError(f"unknown placement source: {self.source}")


def import_experimental_poses(
    picks, pixel_size, volume_origin=(0.0, 0.0, 0.0), default_z=0.0, structure_id="", radius=1.0
):
    """Lift 2D picks into placements at depth ``default_z``."""
    if not pixel_size > 0:
        raise InputError(f"pixel_size must be > 0 (got {pixel_size})")
    origin = np.asarray(volume_origin, dtype=np.float64)
    placements = []
    for pick in picks:
        position = np.array([pick.x * pixel_size, pick.y * pixel_size, default_z]) + origin
        q = euler_to_quaternion(*pick.euler) if pick.euler is not None else Quaternion.identity()
        placements.append(
            Placement(
                structure_id,
                tuple(float(c) for c in position),
                q,
                radius,
                "experimental",
                float(pick.confidence),
            )
        )
    return placements


def grid_spacing(radius, scale):
    return 2.0 * radius * (1.0 - scale.overlap_threshold / 2.0)


class _Collisions:
    """Placed spheres indexed for overlap rejection.

    Two particles collide when their centers are closer than
    ``(R_i + R_j) * (1 - overlap)``; same-species pairs under a separation
    rule also need ``min_separation``.
    """

    def __init__(self, bounds, scale, overlap):
        self.tree = Octree.for_scale(bounds, scale)
        self.overlap = overlap
        self.entries = []

    def _reach(self, radius):
        return radius * (1.0 - self.overlap)

    def add(self, placement):
        self.tree.insert(len(self.entries), placement.position, self._reach(placement.radius))
        self.entries.append(placement)

    def clear(self, position, radius, structure_id="", separation=None):
        reach = self._reach(radius)
        query = max(reach, separation or 0.0)
        position = np.asarray(position)
        for index in self.tree.query_near(position, query):
            other = self.entries[index]
            required = reach + self._reach(other.radius)
            if separation is not None and other.structure_id == structure_id:
                required = max(required, separation)
            if np.linalg.norm(np.asarray(other.position) - position) < required:
                return False
        return True


def _capacity(radius, extents, scale, rule):
    floor = 2.0 * radius * (1.0 - scale.overlap_threshold)
    if rule.kind == "separated":
        floor = max(floor, rule.min_separation)
    volume = float(np.prod(extents))
    return max(1, int(RSA_PACKING_FRACTION * volume / (4.0 / 3.0 * math.pi * (floor / 2.0) ** 3)))


def _candidate_source(strategy, radius, scale, lo, hi, rng, mesh, tolerance):
    """Return a zero-argument sampler for one placement strategy."""
    if strategy == "uniform":
        return lambda: rng.uniform(lo, hi)

    if strategy == "cluster":
        extents = hi + lo
        sigma_primary = float(np.min(extents)) / 6.0
        sigma_secondary = 0.7 * sigma_primary
        primary = extents / 2.0
        secondary = rng.uniform(lo, hi)

        def cluster():
            if rng.random() < CLUSTER_PRIMARY_WEIGHT:
                return rng.normal(primary, sigma_primary)
            return rng.normal(secondary, sigma_secondary)

        return cluster

    if strategy == "grid":
        spacing = grid_spacing(radius, scale)
        axes = [np.arange(lo[i], hi[i] + 1e-9, spacing) for i in range(3)]
        sites = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        sites = sites[rng.permutation(len(sites))]
        cursor = iter(sites)

        def grid():
            site = next(cursor, None)
            if site is None:
                return None
            jitter = rng.uniform(-spacing / 4.0, spacing / 4.0, 3)
            return np.clip(site + jitter, lo, hi)

        return grid

    if strategy == "interface":
        if mesh is None or mesh.is_empty:
            raise InputError("interface placement needs a non-empty target mesh")

        def interface():
            points, normals = mesh.sample_surface(1, rng)
            return points[0] + normals[0] * rng.uniform(-tolerance, tolerance)

        return interface

    raise InputError(f"unknown placement strategy: {strategy}")


def place_particles(
    count,
    radius,
    strategy,
    rule,
    scale,
    extents,
    rng,
    *,
    mesh=None,
    tolerance=5.0,
    confinement=None,
    existing=(),
    orientation=OrientationSpec(),
    max_attempts=1000,
    structure_id="particle",
):
    """Place ``round(count * placement_density)`` particles by rejection sampling.

    Every accepted center is at least ``2R(1 - overlap_threshold)`` from the
    others (and from ``existing`` placements). Each particle gets
    ``round(collision_strictness * max_attempts)`` tries. Fewer than half the
    target placed raises :class:`CapacityError`.
    """
    rule = rule or ClassRule()
    if not radius > 0:
        raise InputError(f"radius must be > 0 (got {radius})")
    extents = np.asarray(extents, dtype=np.float64)
    lo = np.full(3, float(radius))
    hi = extents - radius
    if np.any(hi < lo):
        raise InputError(f"extents {extents.tolist()} cannot hold a particle of radius {radius}")
    if rule.kind == "confined" and (confinement is None or confinement.is_empty):
        raise InputError(f"{structure_id}: confined rule needs a confinement mesh")
    if count <= 0:
        return []

    wanted = int(round(count * scale.placement_density))
    capacity = _capacity(radius, extents, scale, rule)
    target = min(wanted, capacity)
    if target < wanted:
        logger.warning(f"{structure_id}: capacity limits placement to {target} of {wanted}")

    budget = max(1, int(round(scale.collision_strictness * max_attempts)))
    collisions = _Collisions((np.zeros(3), extents), scale, scale.overlap_threshold)
    for other in existing:
        collisions.add(other)
    separation = rule.min_separation if rule.kind == "separated" else None
    sample = _candidate_source(strategy, radius, scale, lo, hi, rng, mesh, tolerance)

    placed = []
    failures = 0
    exhausted = False
    while len(placed) < target and failures < MAX_CONSECUTIVE_FAILURES and not exhausted:
        accepted = None
        for _ in range(budget):
            if rule.kind == "cluster" and placed:
                anchor = placed[rng.integers(len(placed))].position
                direction = rng.normal(size=3)
                direction /= np.linalg.norm(direction)
                distance = rng.normal(rule.cluster_distance, 0.1 * rule.cluster_distance)
                candidate = np.asarray(anchor) + direction * distance
            else:
                candidate = sample()
            if candidate is None:
                exhausted = True
                break
            if np.any(candidate < lo) or np.any(candidate > hi):
                continue
            if rule.kind == "confined" and not confinement.contains(candidate)[0]:
                continue
            if not collisions.clear(candidate, radius, structure_id, separation):
                continue
            accepted = candidate
            break
        if accepted is None:
            failures += 1
            continue
        failures = 0
        placement = Placement(
            structure_id,
            tuple(float(c) for c in accepted),
            sample_orientation(orientation, rng),
            float(radius),
        )
        collisions.add(placement)
        placed.append(placement)

    if len(placed) < MIN_PLACED_FRACTION * target:
        raise CapacityError(target, len(placed), structure_id)
    if len(placed) < target:
        logger.warning(f"{structure_id}: placed {len(placed)} of {target} particles")
    logger.debug(f"{structure_id}: placed {len(placed)} particles ({strategy}, {rule.kind})")
    return placed


def blend_placements(
    experimental,
    synthetic,
    w_exp,
    rng,
    *,
    count=None,
    overlap_threshold=0.0,
    existing=(),
    scale=None,
):
    """Merge the two pose pools slot by slot without replacement.

    A slot takes an experimental pose with probability ``w_exp`` and
    otherwise a synthetic one. Experimental poses are drawn in a
    confidence-weighted order, so the chance of a given pose is ``w_exp``
    times its renormalized confidence. ``w_exp == 1`` and ``w_exp == 0``
    only ever read their own pool and stop when it is exhausted; in between,
    a dry pool hands the remaining slots to the other. ``count`` defaults to
    the size of the pool ``w_exp`` selects from (the larger one when mixing).
    Poses colliding with accepted ones are dropped.
    """
    if not 0.0 <= w_exp <= 1.0:
        raise InputError(f"w_exp must lie in [0, 1] (got {w_exp})")
    experimental, synthetic = list(experimental), list(synthetic)
    if not experimental and not synthetic:
        raise InputError("both placement pools are empty")
    exclusive = w_exp in (0.0, 1.0)
    if count is None:
        if w_exp == 1.0:
            count = len(experimental)
        elif w_exp == 0.0:
            count = len(synthetic)
        else:
            count = max(len(experimental), len(synthetic))

    confidences = np.array([p.confidence for p in experimental], dtype=np.float64)
    keys = rng.random(len(experimental)) ** (1.0 / np.maximum(confidences, 1e-12))
    keys[confidences <= 0] = 0.0
    exp_order = [experimental[i] for i in np.argsort(-keys, kind="stable")]
    syn_order = [synthetic[i] for i in rng.permutation(len(synthetic))]

    everything = [*existing, *experimental, *synthetic]
    positions = np.array([p.position for p in everything])
    pad = max(p.radius for p in everything) + 1.0
    bounds = (positions.min(axis=0) - pad, positions.max(axis=0) + pad)
    collisions = _Collisions(bounds, scale or ScaleParams(1.0), overlap_threshold)
    for other in existing:
        collisions.add(other)

    out = []
    e = s = 0
    while len(out) < count:
        exp_left, syn_left = e < len(exp_order), s < len(syn_order)
        if exclusive:
            take_exp = w_exp == 1.0
            if not (exp_left if take_exp else syn_left):
                break
        elif not (exp_left or syn_left):
            break
        elif not exp_left:
            take_exp = False
        elif not syn_left:
            take_exp = True
        else:
            take_exp = rng.random() < w_exp
        if take_exp:
            candidate, e = exp_order[e], e + 1
        else:
            candidate, s = syn_order[s], s + 1
        if collisions.clear(candidate.position, candidate.radius):
            collisions.add(candidate)
            out.append(candidate)
    dropped = e + s - len(out)
    if dropped:
        logger.debug(f"blend dropped {dropped} colliding poses")
    return out


# --- Context ---


def embed_context(labeled, amplitude, rng, *, labels=None, resolution=None, scale=None):
    """Surface meshes for each segmented compartment, lightly deformed.

    Each label is binarized, blurred, meshed at half its peak and smoothed;
    vertices then move along their normals by ``amplitude`` times a clipped
    3D Perlin field.
    """
    if amplitude < 0:
        raise InputError(f"perturb amplitude must be >= 0 (got {amplitude})")
    grid = np.asarray(labeled.grid)
    if np.any(grid < 0) or np.any(grid != np.rint(grid)):
        raise InputError("label volume must hold non-negative integers")
    scale = scale or ScaleParams(1.0)
    resolution = resolution or 2.0 * labeled.voxel_size
    present = {int(v) for v in np.unique(grid)} - {0}
    wanted = sorted(present) if labels is None else list(labels)

    meshes = []
    for label in wanted:
        if label not in present:
            logger.warning(f"label {label} is absent from the context volume, skipped")
            continue
        mask = DensityVolume((grid == label).astype(np.float64), labeled.voxel_size, labeled.origin)
        blurred = smooth_and_threshold(mask, resolution)
        mesh = extract_isosurface(blurred, 0.5 * float(blurred.grid.max()), scale)
        if mesh.is_empty:
            logger.warning(f"label {label} produced no surface, skipped")
            continue
        mesh = smooth_mesh(mesh, scale)
        if amplitude > 0:
            field_values = perlin3d(mesh.vertices, CONTEXT_WAVELENGTH, rng)
            offsets = amplitude * np.clip(field_values, -1.0, 1.0)
            mesh = mesh.with_vertices(mesh.vertices + offsets[:, None] * mesh.normals)
        meshes.append(TriangleMesh(mesh.vertices, mesh.faces, mesh.normals, label))
        logger.debug(f"context label {label}: {len(mesh.faces)} faces")
    return meshes


# --- Scene ---


@dataclass(frozen=True)
class Scene:
    extents: tuple
    placements: tuple
    scale: ScaleParams
    seed: int = 0
    index: int = 0
    context: tuple = field(default=(), compare=False)


def scene_to_manifest(scene):
    """Ground-truth annotation document for one scene."""
    return {
        "scene": scene.index,
        "seed": scene.seed,
        "extents": list(scene.extents),
        "scale": scene.scale.s,
        "context_labels": [m.label for m in scene.context],
        "placements": [
            {
                "structure_id": p.structure_id,
                "position": list(p.position),
                "quaternion": list(p.orientation.as_tuple()),
                "radius": p.radius,
                "source": p.source,
                "confidence": p.confidence,
            }
            for p in scene.placements
        ],
    }


def scene_from_manifest(doc):
    """Rebuild a :class:`Scene` (without context meshes) from its manifest."""
    try:
        placements = tuple(
            Placement(
                p["structure_id"],
                tuple(float(c) for c in p["position"]),
                Quaternion.from_array(p["quaternion"]),
                float(p["radius"]),
                p.get("source", "synthetic"),
                float(p.get("confidence", 1.0)),
            )
            for p in doc["placements"]
        )
        return Scene(
            tuple(float(e) for e in doc["extents"]),
            placements,
            ScaleParams(float(doc["scale"])),
            int(doc.get("seed", 0)),
            int(doc.get("scene", 0)),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise InputError(f"malformed placement manifest: {e}") from None
