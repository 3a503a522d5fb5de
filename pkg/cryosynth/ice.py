"""Vitreous ice slab: thickness topography and correlated density."""

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from cryosynth.errors import InputError
from cryosynth.params import IceParams
from cryosynth.rng import derive_rng

logger = logging.getLogger("cryosynth")

NM = 10.0  # Angstrom per nanometre
KERNEL_TRUNCATION = 4.0
LAYER_KEY_OFFSET = 1 << 16


def _fade(t):
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def perlin2d(shape, wavelength, rng):
    """Gradient noise on an ``(ny, nx)`` pixel grid, lattice spacing ``wavelength`` pixels."""
    ny, nx = shape
    if not wavelength > 0:
        raise InputError(f"wavelength must be > 0 (got {wavelength})")
    gy, gx = int(ny / wavelength) + 2, int(nx / wavelength) + 2
    angles = rng.uniform(0.0, 2 * np.pi, (gy, gx))
    gradients = np.stack([np.cos(angles), np.sin(angles)], axis=-1)

    y, x = np.meshgrid(np.arange(ny) / wavelength, np.arange(nx) / wavelength, indexing="ij")
    y0, x0 = np.floor(y).astype(int), np.floor(x).astype(int)
    fy, fx = y - y0, x - x0

    def corner(dy, dx):
        g = gradients[y0 + dy, x0 + dx]
        return g[..., 0] * (fx - dx) + g[..., 1] * (fy - dy)

    u, v = _fade(fx), _fade(fy)
    bottom = corner(0, 0) + u * (corner(0, 1) - corner(0, 0))
    top = corner(1, 0) + u * (corner(1, 1) - corner(1, 0))
    return bottom + v * (top - bottom)


def perlin3d(points, wavelength, rng):
    """Gradient noise sampled at ``(n, 3)`` points, lattice spacing ``wavelength``."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if not wavelength > 0:
        raise InputError(f"wavelength must be > 0 (got {wavelength})")
    if len(points) == 0:
        return np.zeros(0)
    p = (points - points.min(axis=0)) / wavelength
    dims = np.floor(p.max(axis=0)).astype(int) + 2
    gradients = rng.normal(size=(*dims, 3))
    gradients /= np.linalg.norm(gradients, axis=-1, keepdims=True)

    base = np.floor(p).astype(int)
    frac = p - base
    fade = _fade(frac)
    total = np.zeros(len(p))
    for corner in range(8):
        offset = np.array([(corner >> axis) & 1 for axis in range(3)])
        g = gradients[base[:, 0] + offset[0], base[:, 1] + offset[1], base[:, 2] + offset[2]]
        dot = np.einsum("ij,ij->i", g, frac - offset)
        weight = np.prod(np.where(offset, fade, 1.0 - fade), axis=1)
        total += weight * dot
    return total


def sample_base_thickness(params, rng):
    """One log-normal slab thickness draw in nm."""
    return float(rng.lognormal(params.mu, params.sigma))


def thickness_topography(footprint, params, rng):
    """Summed Perlin octaves in nm over an ``(nx, ny)`` footprint."""
    nx, ny = footprint
    field = np.zeros((ny, nx))
    for amplitude, wavelength in zip(params.octave_amplitudes, params.octave_wavelengths):
        field += amplitude * perlin2d((ny, nx), wavelength, rng)
    return field


def _gaussian_kernel(sigma):
    radius = int(KERNEL_TRUNCATION * sigma + 0.5)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    return kernel / kernel.sum()


@dataclass(frozen=True, eq=False)
class IceSlab:
    """Ice layer over a micrograph footprint.

    ``thickness`` is ``(ny, nx)`` in nm. Density is generated on demand in
    z-blocks; layer ``k`` sits at ``z = k * pixel_size`` Angstrom and is
    ice wherever it lies within half the local thickness of ``mid_plane``.
    """

    thickness: np.ndarray
    base_thickness: float
    pixel_size: float
    params: IceParams
    density_seed: int
    mid_plane: float

    @property
    def footprint(self):
        ny, nx = self.thickness.shape
        return (nx, ny)

    def density_noise(self, z0, nz):
        """Unmasked density ``(nz, ny, nx)``: 0.92 plus correlated Gaussian fluctuation."""
        ny, nx = self.thickness.shape
        corr = self.params.correlation_length
        kernel = _gaussian_kernel(corr)
        halo = len(kernel) // 2
        layers = np.stack(
            [
                derive_rng(self.density_seed, k + LAYER_KEY_OFFSET).standard_normal((ny, nx))
                for k in range(z0 - halo, z0 + nz + halo)
            ]
        )
        for axis in (1, 2):
            layers = ndimage.correlate1d(layers, kernel, axis=axis, mode="wrap")
        layers = ndimage.correlate1d(layers, kernel, axis=0, mode="nearest")[halo:halo + nz]
        layers /= math.sqrt(float(np.sum(kernel**2)) ** 3)
        values = self.params.density + self.params.density_sigma * layers
        return np.maximum(values, 0.0)

    def mask(self, z0, nz):
        z = (np.arange(z0, z0 + nz) * self.pixel_size)[:, None, None]
        half = self.thickness[None, :, :] * NM / 2.0
        return np.abs(z - self.mid_plane) <= half

    def density_block(self, z0, nz):
        """Density in g/cm^3 for layers ``z0 .. z0 + nz - 1``, zero outside the slab."""
        return np.where(self.mask(z0, nz), self.density_noise(z0, nz), 0.0)

    def density_field(self, nz):
        return self.density_block(0, nz)


def generate_ice(footprint, pixel_size, params=None, rng=None, mid_plane=0.0):
    """Draw an ice slab over ``footprint = (nx, ny)`` pixels.

    Thickness is a log-normal base (one draw) plus Perlin topography,
    clamped to ``params.thickness_bounds`` nm.
    """
    params = params or IceParams()
    nx, ny = footprint
    if nx < 1 or ny < 1:
        raise InputError(f"footprint must be positive (got {footprint})")
    if not pixel_size > 0:
        raise InputError(f"pixel_size must be > 0 (got {pixel_size})")
    rng = rng if rng is not None else np.random.default_rng()

    base = sample_base_thickness(params, rng)
    lo, hi = params.thickness_bounds
    thickness = np.clip(base + thickness_topography(footprint, params, rng), lo, hi)
    seed = int(rng.integers(0, 2**63))
    logger.debug(
        f"ice: base {base:.1f} nm, thickness {thickness.min():.1f}-{thickness.max():.1f} nm"
    )
    return IceSlab(thickness, base, float(pixel_size), params, seed, float(mid_plane))
