"""Atomic model to density volume conversion and conformer sampling."""

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from cryosynth.errors import GeometryError, InputError
from cryosynth.formats import MRC_MODE_FLOAT32, VolumeHeader
from cryosynth.params import ConformerParams

logger = logging.getLogger("cryosynth")

KERNEL_TRUNCATION = 4.0
BOUNDARY_VIOLATION_FRACTION = 0.10
THRESHOLD_FRACTION = 0.005

__all__ = [
    "ConformerParams",
    "DensityVolume",
    "perturb_conformer",
    "smooth_and_threshold",
    "voxelize",
]


@dataclass(frozen=True, eq=False)
class DensityVolume:
    """Scalar grid indexed ``[z, y, x]`` with isotropic spacing.

    ``origin`` is the position in Angstrom of the center of voxel
    ``(0, 0, 0)``, given as ``(x, y, z)``.
    """

    grid: np.ndarray
    voxel_size: float
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.voxel_size > 0:
            raise InputError(f"voxel_size must be > 0 (got {self.voxel_size})")
        if self.grid.ndim != 3:
            raise InputError(f"density grid must be 3D (got {self.grid.ndim}D)")

    @property
    def extent(self):
        """Grid size as ``(nx, ny, nz)``."""
        nz, ny, nx = self.grid.shape
        return (nx, ny, nz)

    def axis_coordinates(self, axis):
        """Sample positions in Angstrom along ``"x"``, ``"y"`` or ``"z"``."""
        i = "xyz".index(axis)
        n = self.extent[i]
        return self.origin[i] + self.voxel_size * np.arange(n)

    def header(self):
        nx, ny, nz = self.extent
        size = float(self.voxel_size)
        return VolumeHeader(nx, ny, nz, MRC_MODE_FLOAT32, (size, size, size), tuple(self.origin))

    @classmethod
    def from_mrc(cls, header, grid):
        return cls(np.asarray(grid, dtype=np.float64), float(header.voxel_size[0]), header.origin)


def _violations(frac, reach, shape_xyz):
    """Atoms whose truncated kernel crosses the grid boundary."""
    low = frac - reach[:, None] < 0
    high = frac + reach[:, None] > shape_xyz - 1
    return np.any(low | high, axis=1)


def voxelize(model, resolution, box=None):
    """Deposit one unit-amplitude Gaussian per atom on a regular grid.

    Voxel spacing is ``resolution / 2`` and each kernel has width
    ``R_vdW / (2 * spacing)`` voxels, truncated at 4 sigma. Without an
    explicit ``box`` (``(lo, hi)`` corners in Angstrom) the grid spans the
    atom bounding box plus ``max(3 * r_max, 2 * resolution)``. When more than
    10% of the kernels cross the box, it grows by ``4 * r_max`` once.
    """
    if not resolution > 0:
        raise InputError(f"resolution must be > 0 (got {resolution})")
    positions = model.positions
    if not np.all(np.isfinite(positions)):
        raise InputError(f"{model.id}: non-finite atom coordinates")

    spacing = resolution / 2.0
    radii = model.radii
    sigma = radii / (2.0 * spacing)
    reach = np.ceil(KERNEL_TRUNCATION * sigma)

    if box is None:
        margin = max(3.0 * model.r_max, 2.0 * resolution)
        lo = positions.min(axis=0) - margin
        hi = positions.max(axis=0) + margin
    else:
        lo, hi = (np.asarray(c, dtype=np.float64) for c in box)

    for attempt in range(2):
        shape_xyz = np.ceil((hi - lo) / spacing).astype(int) + 1
        frac = (positions - lo) / spacing
        outside = _violations(frac, reach, shape_xyz)
        fraction = float(np.mean(outside))
        if fraction <= BOUNDARY_VIOLATION_FRACTION:
            break
        if attempt == 1:
            raise GeometryError(
                f"{model.id}: {fraction:.0%} of atoms still cross the expanded box"
            )
        logger.warning(
            f"{model.id}: {fraction:.0%} of atoms cross the box, expanding by "
            f"{4.0 * model.r_max:.2f} A"
        )
        lo = lo - 4.0 * model.r_max
        hi = hi + 4.0 * model.r_max

    nx, ny, nz = (int(n) for n in shape_xyz)
    grid = np.zeros((nz, ny, nx), dtype=np.float64)
    for center, s, k in zip(frac, sigma, reach):
        start = np.maximum(np.floor(center - k).astype(int), 0)
        stop = np.minimum(np.ceil(center + k).astype(int), shape_xyz - 1) + 1
        if np.any(stop <= start):
            continue
        dx, dy, dz = (
            np.arange(start[i], stop[i]) - center[i] for i in range(3)
        )
        d2 = dz[:, None, None] ** 2 + dy[None, :, None] ** 2 + dx[None, None, :] ** 2
        block = np.exp(-0.5 * d2 / (s * s))
        block[d2 > (KERNEL_TRUNCATION * s) ** 2] = 0.0
        grid[start[2]:stop[2], start[1]:stop[1], start[0]:stop[0]] += block

    logger.debug(
        f"{model.id}: voxelized {len(model)} atoms into {nx}x{ny}x{nz} at {spacing:.3f} A"
    )
    return DensityVolume(grid, spacing, tuple(float(c) for c in lo))


def smooth_and_threshold(vol, resolution):
    """Gaussian blur with sigma ``resolution / (2 * spacing)`` voxels, then
    zero every sample below 0.005 of the blurred maximum."""
    if not np.all(np.isfinite(vol.grid)):
        raise InputError("volume contains non-finite samples")
    sigma = resolution / (2.0 * vol.voxel_size)
    blurred = ndimage.gaussian_filter(
        vol.grid.astype(np.float64), sigma, mode="constant", truncate=KERNEL_TRUNCATION
    )
    np.maximum(blurred, 0.0, out=blurred)
    peak = float(blurred.max()) if blurred.size else 0.0
    if peak > 0:
        blurred[blurred < THRESHOLD_FRACTION * peak] = 0.0
    return DensityVolume(blurred, vol.voxel_size, vol.origin)


def stratum_amplitudes(confidences, params):
    """Per-atom displacement width for each confidence stratum."""
    _, constrained, enhanced, flexible = params.amplitudes
    return np.select(
        [confidences > 90, confidences > 70, confidences > 50],
        [0.0, constrained, enhanced],
        default=flexible,
    )


def perturb_conformer(model, params, rng):
    """Sample a conformational variant guided by per-atom confidence.

    Atoms above 90 stay put; lower strata receive isotropic Gaussian jitter
    of growing width. Each domain ``(start, stop)`` of atom indices is then
    moved as a rigid body about its centroid.
    """
    positions = model.positions
    sigma = stratum_amplitudes(model.confidences, params)
    moved = positions + rng.normal(size=positions.shape) * sigma[:, None]

    for start, stop in params.domains:
        block = slice(int(start), min(int(stop), len(model)))
        if block.start >= block.stop:
            logger.warning(f"{model.id}: domain {start}-{stop} is empty, skipped")
            continue
        centroid = moved[block].mean(axis=0)
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = math.radians(rng.normal(0.0, params.rotation_sigma))
        rotation = Rotation.from_rotvec(axis * angle)
        shift = rng.normal(0.0, params.translation_sigma, size=3)
        moved[block] = rotation.apply(moved[block] - centroid) + centroid + shift

    return model.with_positions(moved)
