"""Parameter records shared by the simulation stages and the scene config.

Defaults here are the single source of truth for the documented optics,
ice, noise, orientation and conformer settings.
"""

import math
from dataclasses import dataclass

from cryosynth.errors import ConfigError

RULE_KINDS = ("uniform", "cluster", "confined", "separated")
ORIENTATION_MODES = ("uniform", "preferred", "limited_tilt")
NOISE_MODELS = ("gaussian", "poisson", "poisson_gaussian")
STRATEGIES = ("uniform", "cluster", "grid", "interface")


def _positive(name, value):
    if value is None or not value > 0:
        raise ConfigError(f"{name} must be > 0 (got {value})")


@dataclass(frozen=True)
class ClassRule:
    """Class-specific distribution rule for one particle species."""

    kind: str = "uniform"
    cluster_distance: float | None = None
    confinement_label: int | None = None
    min_separation: float | None = None

    def __post_init__(self):
        if self.kind not in RULE_KINDS:
            raise ConfigError(f"unknown rule kind: {self.kind}")
        if self.kind == "cluster":
            _positive("cluster_distance", self.cluster_distance)
        if self.kind == "confined":
            if self.confinement_label is None or self.confinement_label <= 0:
                raise ConfigError("confined rule needs a positive confinement_label")
        if self.kind == "separated":
            _positive("min_separation", self.min_separation)


@dataclass(frozen=True)
class OrientationSpec:
    """Orientation distribution: uniform, preferred axis or limited tilt."""

    mode: str = "uniform"
    kappa: float = 10.0
    mu: tuple = (0.0, 0.0, 1.0)
    theta_max: float = math.pi / 6

    def __post_init__(self):
        if self.mode not in ORIENTATION_MODES:
            raise ConfigError(f"unknown orientation mode: {self.mode}")
        _positive("kappa", self.kappa)
        if not 0 < self.theta_max <= math.pi:
            raise ConfigError(f"theta_max must lie in (0, pi] (got {self.theta_max})")
        if len(self.mu) != 3 or math.hypot(*self.mu) == 0:
            raise ConfigError("mu must be a non-zero 3-vector")


@dataclass(frozen=True)
class ConformerParams:
    """Confidence-stratified displacement ladder and rigid domains.

    ``amplitudes`` are the Gaussian displacement widths in Angstrom for the
    static (>90), constrained (70-90], enhanced (50-70] and flexible (<=50)
    strata. The static stratum never moves, so its amplitude must be 0.
    """

    amplitudes: tuple = (0.0, 0.5, 1.5, 3.0)
    domains: tuple = ()
    rotation_sigma: float = 5.0
    translation_sigma: float = 2.0

    def __post_init__(self):
        amps = tuple(float(a) for a in self.amplitudes)
        if len(amps) != 4:
            raise ConfigError("conformer amplitudes need exactly 4 strata")
        if any(a < 0 for a in amps):
            raise ConfigError("conformer amplitudes must be >= 0")
        if any(b < a for a, b in zip(amps, amps[1:])):
            raise ConfigError("conformer amplitudes must be non-decreasing")
        if amps[0] != 0.0:
            raise ConfigError("static stratum amplitude must be 0")
        for domain in self.domains:
            if len(domain) != 2 or not 0 <= domain[0] < domain[1]:
                raise ConfigError(f"invalid domain range: {domain}")


@dataclass(frozen=True)
class IceParams:
    """Vitreous ice slab parameters (thickness in nm, density in g/cm^3)."""

    mu: float = math.log(100.0)
    sigma: float = 0.2
    octaves: int = 4
    base_amplitude: float = 5.0
    wavelength: float = 10.0
    density: float = 0.92
    density_sigma_fraction: float = 0.05
    correlation_length: float = 2.0
    thickness_bounds: tuple = (30.0, 300.0)
    contrast: float = 0.1

    def __post_init__(self):
        _positive("ice sigma", self.sigma)
        _positive("ice wavelength", self.wavelength)
        _positive("ice correlation_length", self.correlation_length)
        if self.octaves < 1:
            raise ConfigError("ice needs at least one octave")
        lo, hi = self.thickness_bounds
        if not 0 < lo < hi:
            raise ConfigError(f"invalid thickness bounds: {self.thickness_bounds}")
        if self.density < 0 or self.contrast < 0:
            raise ConfigError("ice density and contrast must be >= 0")

    @property
    def octave_amplitudes(self):
        return tuple(self.base_amplitude / 2**i for i in range(self.octaves))

    @property
    def octave_wavelengths(self):
        return tuple(self.wavelength * 2**i for i in range(self.octaves))

    @property
    def density_sigma(self):
        return self.density_sigma_fraction * self.density


@dataclass(frozen=True)
class CtfParams:
    """Microscope optics.

    voltage in kV, defocus in Angstrom (positive = underfocus), cs in mm,
    amplitude contrast w in [0, 1], B-factor in Angstrom^2, phase shift in
    radians.
    """

    voltage: float = 300.0
    defocus: float = 15000.0
    cs: float = 2.7
    amplitude_contrast: float = 0.07
    bfactor: float = 0.0
    phase_shift: float = 0.0

    def __post_init__(self):
        _positive("voltage", self.voltage)
        if not 0 <= self.amplitude_contrast <= 1:
            raise ConfigError("amplitude_contrast must lie in [0, 1]")
        if self.bfactor < 0:
            raise ConfigError("bfactor must be >= 0")


@dataclass(frozen=True)
class NoiseSpec:
    """Traditional noise baseline.

    ``snr`` is var(signal)/var(noise); ``snr == 0`` selects pure-noise mode
    where ``sigma`` (gaussian) or ``dose`` (poisson) set the noise level
    directly. ``dose`` in electrons/pixel; ``None`` means calibrate.
    """

    model: str = "gaussian"
    snr: float = 0.1
    dose: float | None = None
    sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.model not in NOISE_MODELS:
            raise ConfigError(f"unknown noise model: {self.model}")
        if self.snr < 0:
            raise ConfigError("snr must be > 0 (or 0 for pure noise)")
        if self.dose is not None:
            _positive("dose", self.dose)
        _positive("noise sigma", self.sigma)

    @property
    def pure_noise(self):
        return self.snr == 0
