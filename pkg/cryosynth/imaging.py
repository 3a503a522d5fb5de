"""Image formation: potential assembly, projection, CTF, masks and noise."""

import logging
import math
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import fft, ndimage
from skimage.draw import disk

from cryosynth.density import DensityVolume
from cryosynth.errors import DegenerateSignalError, InputError, InvariantError
from cryosynth.formats import MRC_MODE_FLOAT32, VolumeHeader
from cryosynth.params import CtfParams, NoiseSpec
from cryosynth.rng import derive_rng

logger = logging.getLogger("cryosynth")

PROVENANCES = ("clean", "ctf", "noisy", "mask")
IMAG_RESIDUE_LIMIT = 1e-6
DOSE_BISECTION_STEPS = 32
DOSE_TOLERANCE = 0.01
PURE_NOISE_DOSE = 1000.0


@dataclass(frozen=True, eq=False)
class Micrograph:
    """2D image ``[y, x]``; ``origin`` is the ``(x, y)`` of pixel ``(0, 0)`` in Angstrom."""

    pixels: np.ndarray
    pixel_size: float
    provenance: str = "clean"
    origin: tuple = (0.0, 0.0)

    def __post_init__(self):
        if self.pixels.ndim != 2:
            raise InputError(f"micrograph must be 2D (got {self.pixels.ndim}D)")
        if not self.pixel_size > 0:
            raise InputError(f"pixel_size must be > 0 (got {self.pixel_size})")
        if self.provenance not in PROVENANCES:
            raise InputError(f"unknown provenance: {self.provenance}")

    @property
    def footprint(self):
        ny, nx = self.pixels.shape
        return (nx, ny)

    def header(self):
        nx, ny = self.footprint
        size = float(self.pixel_size)
        return VolumeHeader(nx, ny, 1, MRC_MODE_FLOAT32, (size, size, size), (*self.origin, 0.0))

    @classmethod
    def from_mrc(cls, header, grid, provenance="clean"):
        if header.nz != 1:
            raise InputError(f"expected a single-section image (got nz={header.nz})")
        return cls(np.asarray(grid[0], dtype=np.float64), float(header.voxel_size[0]), provenance,
                   tuple(header.origin[:2]))


def write_png_preview(m, path):
    """16-bit grayscale PNG with linear min-max scaling."""
    pixels = np.asarray(m.pixels, dtype=np.float64)
    lo, hi = float(pixels.min()), float(pixels.max())
    if hi > lo:
        scaled = np.rint((pixels - lo) / (hi - lo) * 65535.0)
    else:
        scaled = np.zeros_like(pixels)
    Image.fromarray(scaled.astype(np.uint16)).save(path, format="PNG")


def electron_wavelength(voltage):
    """Relativistic electron wavelength in Angstrom for ``voltage`` kV."""
    if not voltage > 0:
        raise InputError(f"voltage must be > 0 (got {voltage})")
    volts = voltage * 1e3
    return 12.2643247 / math.sqrt(volts * (1.0 + 0.978466e-6 * volts))


# --- Potential and projection ---


def _bounding_radius(vol):
    lo = np.asarray(vol.origin, dtype=np.float64)
    hi = lo + vol.voxel_size * (np.asarray(vol.extent) - 1)
    bounds = (lo, hi)
    corners = np.array(
        [[bounds[b][axis] for axis, b in enumerate(bits)] for bits in np.ndindex(2, 2, 2)]
    )
    return float(np.linalg.norm(corners, axis=1).max())


def _deposit(out, out_origin, spacing, source, position, rotation):
    """Add ``source`` resampled at ``R^T (r - T)`` into ``out`` in place."""
    nz, ny, nx = out.shape
    reach = _bounding_radius(source) + spacing
    center = (np.asarray(position) - out_origin) / spacing
    lo = np.maximum(np.floor(center - reach / spacing).astype(int), 0)
    hi = np.minimum(np.ceil(center + reach / spacing).astype(int) + 1, (nx, ny, nz))
    if np.any(hi <= lo):
        return
    xs, ys, zs = (out_origin[i] + spacing * np.arange(lo[i], hi[i]) for i in range(3))
    z, y, x = np.meshgrid(zs, ys, xs, indexing="ij")
    r = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1) - np.asarray(position)
    u = r @ rotation
    index = (u - np.asarray(source.origin)) / source.voxel_size
    values = ndimage.map_coordinates(
        source.grid, [index[:, 2], index[:, 1], index[:, 0]], order=1, mode="constant", cval=0.0
    )
    out[lo[2]:hi[2], lo[1]:hi[1], lo[0]:hi[0]] += values.reshape(z.shape)


def assemble_potential(
    scene,
    structures,
    ice=None,
    out_spacing=1.0,
    *,
    shape=None,
    origin=(0.0, 0.0, 0.0),
    layers=None,
    ice_contrast=0.1,
):
    """Sum every placed structure, rotated and translated, plus scaled ice.

    ``shape`` is the full output grid ``(nz, ny, nx)`` (default: scene extents
    over ``out_spacing``); ``layers = (z0, nz)`` restricts assembly to a
    z-block of it. Samples falling outside a source volume contribute 0.
    """
    if not out_spacing > 0:
        raise InputError(f"out_spacing must be > 0 (got {out_spacing})")
    missing = sorted({p.structure_id for p in scene.placements} - set(structures))
    if missing:
        raise InputError(f"unresolved structure id(s): {', '.join(missing)}")
    if shape is None:
        ex, ey, ez = scene.extents
        shape = tuple(max(1, math.ceil(e / out_spacing)) for e in (ez, ey, ex))
    nz_full, ny, nx = shape
    z0, nz = layers if layers is not None else (0, nz_full)
    if z0 < 0 or nz < 1 or z0 + nz > nz_full:
        raise InputError(f"layer block {z0}+{nz} outside 0..{nz_full}")

    block_origin = np.asarray(origin, dtype=np.float64) + (0.0, 0.0, z0 * out_spacing)
    out = np.zeros((nz, ny, nx), dtype=np.float64)
    for placement in scene.placements:
        rotation = placement.orientation.to_matrix()
        _deposit(out, block_origin, out_spacing, structures[placement.structure_id],
                 placement.position, rotation)

    if ice is not None and ice_contrast > 0:
        if ice.footprint != (nx, ny) or not math.isclose(ice.pixel_size, out_spacing):
            raise InputError(
                f"ice footprint {ice.footprint} at {ice.pixel_size} A does not match "
                f"volume {(nx, ny)} at {out_spacing} A"
            )
        out += ice_contrast * ice.density_block(z0, nz)
    return DensityVolume(out, float(out_spacing), tuple(float(c) for c in block_origin))


def project(vol, slab=None):
    """Integrate along z with the midpoint rule over layers whose center
    lies in ``[z_lo, z_hi)`` Angstrom (default: the whole volume)."""
    z = vol.axis_coordinates("z")
    if slab is None:
        chosen = np.ones(len(z), dtype=bool)
    else:
        z_lo, z_hi = slab
        chosen = (z >= z_lo) & (z < z_hi)
    if not np.any(chosen):
        raise InputError(f"projection slab {slab} selects no layers")
    pixels = vol.grid[chosen].sum(axis=0) * vol.voxel_size
    return Micrograph(pixels, vol.voxel_size, "clean", tuple(vol.origin[:2]))


# --- CTF ---


def transfer_function(s, ctf):
    """Isotropic contrast transfer ``H(s)`` for spatial frequency ``s`` in 1/Angstrom."""
    s = np.asarray(s, dtype=np.float64)
    wavelength = electron_wavelength(ctf.voltage)
    cs = ctf.cs * 1e7
    gamma = (math.pi / 2.0) * (
        2.0 * wavelength * ctf.defocus * s**2 + wavelength**3 * cs * s**4
    ) - ctf.phase_shift
    w = ctf.amplitude_contrast
    envelope = np.exp(-ctf.bfactor * s**2 / 4.0)
    return -(math.sqrt(1.0 - w * w) * np.sin(gamma) - w * np.cos(gamma)) * envelope


def frequency_grid(shape, pixel_size):
    """Spatial frequency magnitude and azimuth in standard FFT layout."""
    ny, nx = shape
    ky = fft.fftfreq(ny, d=pixel_size)
    kx = fft.fftfreq(nx, d=pixel_size)
    ky, kx = np.meshgrid(ky, kx, indexing="ij")
    return np.hypot(kx, ky), np.arctan2(ky, kx)


def ctf_filter(m, ctf=None, transfer=None):
    """Filter ``m`` by the CTF in Fourier space.

    ``transfer`` replaces ``H`` with a given real array (e.g. all ones).
    """
    ctf = ctf or CtfParams()
    pixels = np.asarray(m.pixels, dtype=np.float64)
    if not np.all(np.isfinite(pixels)):
        raise InputError("micrograph contains non-finite pixels")
    s, _azimuth = frequency_grid(pixels.shape, m.pixel_size)
    h = transfer_function(s, ctf) if transfer is None else np.broadcast_to(transfer, s.shape)
    filtered = fft.ifft2(h * fft.fft2(pixels, norm="ortho"), norm="ortho")
    scale = max(float(np.abs(filtered.real).max()), np.finfo(float).tiny)
    residue = float(np.abs(filtered.imag).max())
    if residue > IMAG_RESIDUE_LIMIT * scale:
        raise InvariantError(f"CTF output not real: imaginary residue {residue:.3g}")
    return Micrograph(filtered.real.copy(), m.pixel_size, "ctf", m.origin)


# --- Masks ---


def render_mask(scene, footprint, pixel_size, origin=(0.0, 0.0)):
    """Binary occupancy: 1 where a pixel center falls inside a projected particle disk."""
    if not pixel_size > 0:
        raise InputError(f"pixel_size must be > 0 (got {pixel_size})")
    nx, ny = footprint
    mask = np.zeros((ny, nx), dtype=np.float64)
    for p in scene.placements:
        cx = (p.position[0] - origin[0]) / pixel_size
        cy = (p.position[1] - origin[1]) / pixel_size
        rr, cc = disk((cy, cx), p.radius / pixel_size, shape=(ny, nx))
        mask[rr, cc] = 1.0
    return Micrograph(mask, pixel_size, "mask", tuple(origin))


# --- Noise ---


def measured_snr(signal, noisy):
    noise = np.var(noisy - signal)
    return float(np.var(signal) / noise) if noise > 0 else math.inf


def _poisson_stage(pixels, dose, seed):
    """Shot noise on the signal mapped to ``[0, 1]``, mapped back afterwards."""
    lo, hi = float(pixels.min()), float(pixels.max())
    span = hi - lo
    normalized = (pixels - lo) / span
    counts = np.random.Generator(np.random.Philox(seed)).poisson(dose * normalized)
    return lo + span * counts / dose


def _calibrated_poisson(pixels, snr, seed):
    """Pick the dose whose measured SNR hits ``snr`` by log-space bisection."""
    span = float(pixels.max() - pixels.min())
    mean_level = float(np.mean((pixels - pixels.min()) / span))
    guess = max(snr * span**2 * mean_level / float(np.var(pixels)), 1e-6)
    lo, hi = math.log(guess / 100.0), math.log(guess * 100.0)
    best = None
    for step in range(DOSE_BISECTION_STEPS):
        dose = math.exp(0.5 * (lo + hi))
        noisy = _poisson_stage(pixels, dose, seed)
        achieved = measured_snr(pixels, noisy)
        error = abs(achieved - snr) / snr
        if best is None or error < best[0]:
            best = (error, dose, noisy)
        if error <= DOSE_TOLERANCE:
            break
        if achieved < snr:
            lo = math.log(dose)
        else:
            hi = math.log(dose)
    error, dose, noisy = best
    logger.debug(f"poisson dose {dose:.4g} e/px after {step + 1} steps (SNR error {error:.2%})")
    return noisy


def apply_noise(m, spec=None, rng=None):
    """Add traditional detector noise at ``spec.snr = var(signal) / var(noise)``.

    ``snr == 0`` selects pure-noise mode: zero-mean noise of standard
    deviation ``spec.sigma`` added regardless of the signal.
    """
    spec = spec or NoiseSpec()
    rng = rng if rng is not None else derive_rng(spec.seed, "noise")
    pixels = np.asarray(m.pixels, dtype=np.float64)
    if not np.all(np.isfinite(pixels)):
        raise InputError("micrograph contains non-finite pixels")

    if spec.pure_noise:
        parts = 2 if spec.model == "poisson_gaussian" else 1
        sigma = spec.sigma / math.sqrt(parts)
        noisy = pixels.copy()
        if spec.model != "gaussian":
            dose = spec.dose or PURE_NOISE_DOSE
            noisy += sigma * (rng.poisson(dose, pixels.shape) - dose) / math.sqrt(dose)
        if spec.model != "poisson":
            noisy += rng.normal(0.0, sigma, pixels.shape)
        return Micrograph(noisy, m.pixel_size, "noisy", m.origin)

    variance = float(np.var(pixels))
    if not variance > 0:
        raise DegenerateSignalError("signal has zero variance; use snr = 0 for pure noise")

    if spec.model == "gaussian":
        noisy = pixels + rng.normal(0.0, math.sqrt(variance / spec.snr), pixels.shape)
    else:
        stage_snr = spec.snr if spec.model == "poisson" else 2.0 * spec.snr
        seed = int(rng.integers(0, 2**63))
        if spec.dose is not None:
            noisy = _poisson_stage(pixels, spec.dose, seed)
        else:
            noisy = _calibrated_poisson(pixels, stage_snr, seed)
        if spec.model == "poisson_gaussian":
            noisy = noisy + rng.normal(0.0, math.sqrt(variance / stage_snr), pixels.shape)
    logger.debug(f"{spec.model} noise: measured SNR {measured_snr(pixels, noisy):.4f}")
    return Micrograph(noisy, m.pixel_size, "noisy", m.origin)
