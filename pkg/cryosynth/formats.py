"""Readers and writers for external data.

Covers fixed-column PDB coordinate records, the STAR subset used for
particle picks, MRC2014 volumes (mode 2, little-endian) and the JSON
scene configuration. All parsers are pure functions over in-memory
buffers and report problems through :mod:`cryosynth.errors`.
"""

import io
import json
import logging
import math
import tempfile
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import mrcfile
import numpy as np
from mrcfile.dtypes import HEADER_DTYPE
from mrcfile.mrcinterpreter import MrcInterpreter

from cryosynth.errors import (
    ConfigError,
    ContainerError,
    EmptyModelError,
    InputError,
    LengthError,
    ParseError,
    SchemaError,
    UnsupportedModeError,
)
from cryosynth.params import (
    STRATEGIES,
    ClassRule,
    ConformerParams,
    CtfParams,
    IceParams,
    NoiseSpec,
    OrientationSpec,
)
from cryosynth.rng import SEED_MAX

logger = logging.getLogger("cryosynth")

# Van der Waals radii in Angstrom
VDW_RADII = {
    "C": 1.70,
    "N": 1.55,
    "O": 1.52,
    "S": 1.80,
    "H": 1.20,
    "P": 1.80,
}
DEFAULT_VDW_RADIUS = 1.5


# --- Atomic models ---


@dataclass(frozen=True)
class Atom:
    element: str
    position: tuple
    confidence: float = 100.0
    vdw_radius: float = DEFAULT_VDW_RADIUS


@dataclass(frozen=True, eq=False)
class AtomicModel:
    """Ordered atoms of one structure plus cached array views."""

    atoms: tuple
    id: str = "model"
    r_max: float = field(init=False)

    def __post_init__(self):
        if not self.atoms:
            raise EmptyModelError(f"{self.id}: model has no atoms")
        object.__setattr__(self, "r_max", max(a.vdw_radius for a in self.atoms))

    def __len__(self):
        return len(self.atoms)

    @property
    def positions(self):
        return np.array([a.position for a in self.atoms], dtype=np.float64)

    @property
    def radii(self):
        return np.array([a.vdw_radius for a in self.atoms], dtype=np.float64)

    @property
    def confidences(self):
        return np.array([a.confidence for a in self.atoms], dtype=np.float64)

    def with_positions(self, positions):
        """Return a copy with atom positions replaced, topology unchanged."""
        positions = np.asarray(positions, dtype=np.float64)
        if positions.shape != (len(self.atoms), 3):
            raise ValueError(f"expected {(len(self.atoms), 3)} positions")
        atoms = tuple(
            replace(a, position=tuple(float(c) for c in p))
            for a, p in zip(self.atoms, positions)
        )
        return AtomicModel(atoms, id=self.id)

    def centered(self):
        """Return a copy translated so the atom centroid is at the origin."""
        pos = self.positions
        return self.with_positions(pos - pos.mean(axis=0))

    @property
    def particle_size(self):
        """Radius of the bounding sphere about the centroid, in Angstrom."""
        pos = self.positions
        return float(np.linalg.norm(pos - pos.mean(axis=0), axis=1).max() + self.r_max)


def _normalize_element(symbol):
    symbol = "".join(ch for ch in symbol if ch.isalpha())
    return symbol[:1].upper() + symbol[1:].lower()


def _field_float(line, start, stop, name, lineno):
    text = line[start:stop].strip()
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"unparseable {name} field {text!r}", line=lineno) from None
    if not math.isfinite(value):
        raise ParseError(f"non-finite {name} field {text!r}", line=lineno)
    return value


def parse_atomic_model(data, model_id="model"):
    """Parse ATOM/HETATM records (PDB v3.3 fixed columns) into a model.

    Only the first MODEL of a multi-model file is read.
    """
    if isinstance(data, (bytes, bytearray)):
        data = bytes(data).decode("latin-1")

    atoms = []
    unknown = set()
    models_seen = 0
    for lineno, line in enumerate(data.splitlines(), start=1):
        record = line[:6].strip()
        if record == "MODEL":
            models_seen += 1
            if models_seen > 1:
                logger.warning(f"{model_id}: ignoring models after the first")
                break
            continue
        if record not in ("ATOM", "HETATM"):
            continue
        if len(line) < 54:
            raise ParseError(f"record too short ({len(line)} columns)", line=lineno)

        position = (
            _field_float(line, 30, 38, "x", lineno),
            _field_float(line, 38, 46, "y", lineno),
            _field_float(line, 46, 54, "z", lineno),
        )
        confidence = 100.0
        if line[60:66].strip():
            confidence = _field_float(line, 60, 66, "temperature factor", lineno)
        confidence = min(100.0, max(0.0, confidence))

        element = _normalize_element(line[76:78])
        if not element:
            element = _normalize_element(line[12:16])[:1]
        radius = VDW_RADII.get(element.upper())
        if radius is None:
            unknown.add(element or "?")
            radius = DEFAULT_VDW_RADIUS
        atoms.append(Atom(element, position, confidence, radius))

    if not atoms:
        raise EmptyModelError(f"{model_id}: no ATOM/HETATM records")
    if unknown:
        logger.warning(
            f"{model_id}: default radius {DEFAULT_VDW_RADIUS} A for elements "
            f"{', '.join(sorted(unknown))}"
        )
    logger.debug(f"{model_id}: parsed {len(atoms)} atoms")
    return AtomicModel(tuple(atoms), id=model_id)


# --- STAR pick tables ---

COLUMN_X = "_rlnCoordinateX"
COLUMN_Y = "_rlnCoordinateY"
COLUMNS_EULER = ("_rlnAngleRot", "_rlnAngleTilt", "_rlnAnglePsi")
COLUMN_FOM = "_rlnAutopickFigureOfMerit"


@dataclass(frozen=True)
class PickRecord:
    x: float
    y: float
    euler: tuple | None = None
    confidence: float = 1.0


def _star_float(token, lineno):
    try:
        value = float(token)
    except ValueError:
        raise ParseError(f"unparseable value {token!r}", line=lineno) from None
    if not math.isfinite(value):
        raise ParseError(f"non-finite value {token!r}", line=lineno)
    return value


def parse_pick_table(data):
    """Parse a single-block, single-loop STAR table of particle picks.

    Figures of merit outside [0, 1] are clamped into that range.
    """
    if isinstance(data, (bytes, bytearray)):
        data = bytes(data).decode("latin-1")

    labels = []
    rows = []
    state = "start"
    for lineno, raw in enumerate(data.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            if state == "rows" and not line:
                state = "done"
            continue
        if state == "start":
            if line.startswith("data_"):
                state = "block"
            continue
        if state == "block":
            if line == "loop_":
                state = "labels"
            continue
        if state == "labels":
            if line.startswith("_"):
                labels.append(line.split()[0])
                continue
            state = "rows"
        if state == "rows":
            if line.startswith("data_") or line == "loop_":
                state = "done"
                continue
            rows.append((lineno, line.split()))

    if state == "start":
        raise SchemaError("no data_ block")
    if not labels:
        raise SchemaError("no loop_ with column labels")
    for required in (COLUMN_X, COLUMN_Y):
        if required not in labels:
            raise SchemaError(f"missing column {required}")
    has_euler = [c in labels for c in COLUMNS_EULER]
    if any(has_euler) and not all(has_euler):
        raise SchemaError("Euler columns must be given together")

    index = {name: i for i, name in enumerate(labels)}
    picks = []
    for lineno, tokens in rows:
        if len(tokens) != len(labels):
            raise ParseError(
                f"expected {len(labels)} values, found {len(tokens)}", line=lineno
            )
        x = _star_float(tokens[index[COLUMN_X]], lineno)
        y = _star_float(tokens[index[COLUMN_Y]], lineno)
        if x < 0 or y < 0:
            raise ParseError(f"negative coordinate ({x}, {y})", line=lineno)
        euler = None
        if all(has_euler):
            euler = tuple(_star_float(tokens[index[c]], lineno) for c in COLUMNS_EULER)
        confidence = 1.0
        if COLUMN_FOM in index:
            confidence = min(1.0, max(0.0, _star_float(tokens[index[COLUMN_FOM]], lineno)))
        picks.append(PickRecord(x, y, euler, confidence))
    return picks


def format_pick_table(picks):
    """Render picks as a STAR table readable by :func:`parse_pick_table`."""
    has_euler = any(p.euler is not None for p in picks)
    labels = [COLUMN_X, COLUMN_Y]
    if has_euler:
        labels.extend(COLUMNS_EULER)
    labels.append(COLUMN_FOM)
    lines = ["", "data_", "", "loop_"]
    lines.extend(f"{name} #{i + 1}" for i, name in enumerate(labels))
    for p in picks:
        values = [p.x, p.y]
        if has_euler:
            values.extend(p.euler or (0.0, 0.0, 0.0))
        values.append(p.confidence)
        lines.append(" ".join(f"{v:.6f}" for v in values))
    return "\n".join(lines) + "\n"


# --- MRC2014 volumes ---

MRC_HEADER_BYTES = 1024
MRC_MODE_FLOAT32 = 2
MRC_STAMP = b"MAP "
MRC_MACHINE_STAMP = bytes((0x44, 0x44, 0x00, 0x00))
MRC_HEADER_DTYPE = HEADER_DTYPE.newbyteorder("<")
CELL_NUDGE_STEPS = 8


@dataclass(frozen=True)
class VolumeHeader:
    """Grid dimensions, sample mode and geometry (Angstrom) of a volume.

    ``voxel_size`` is held at float32 precision, the precision the container
    stores it with.
    """

    nx: int
    ny: int
    nz: int
    mode: int = MRC_MODE_FLOAT32
    voxel_size: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(
            self, "voxel_size", tuple(float(np.float32(v)) for v in self.voxel_size)
        )

    @property
    def shape(self):
        """Array shape in (z, y, x) order."""
        return (self.nz, self.ny, self.nx)


def _voxel_length(cell, sampling):
    return float(np.float32(float(cell) / sampling))


def _cell_axis(length, n):
    """Cell length and sampling whose quotient reads back as ``length``."""
    up = down = np.float32(length * n)
    for _ in range(CELL_NUDGE_STEPS):
        for cell in (up, down):
            if _voxel_length(cell, n) == length:
                return float(cell), n
        up = np.nextafter(up, np.float32(np.inf))
        down = np.nextafter(down, np.float32(0.0))
    return length, 1


def read_volume(data):
    """Decode an MRC2014 mode-2 little-endian container.

    Returns ``(header, grid)`` with ``grid`` shaped ``(nz, ny, nx)``.
    """
    data = bytes(data)
    if len(data) < MRC_HEADER_BYTES:
        raise LengthError(f"header truncated: {len(data)} of {MRC_HEADER_BYTES} bytes")
    hdr = np.frombuffer(data, dtype=MRC_HEADER_DTYPE, count=1)[0]
    if bytes(hdr["map"]) != MRC_STAMP:
        raise ContainerError(f"format stamp {bytes(hdr['map'])!r} is not {MRC_STAMP!r}")
    if int(hdr["machst"][0]) != 0x44:
        raise ContainerError("only little-endian containers are supported")
    mode = int(hdr["mode"])
    if mode != MRC_MODE_FLOAT32:
        raise UnsupportedModeError(f"unsupported mode {mode} (only mode 2)")
    nx, ny, nz = int(hdr["nx"]), int(hdr["ny"]), int(hdr["nz"])
    if min(nx, ny, nz) < 1:
        raise ContainerError(f"invalid dimensions {nx}x{ny}x{nz}")
    nsymbt = int(hdr["nsymbt"])
    if nsymbt < 0:
        raise ContainerError(f"invalid extended header size {nsymbt}")
    need = nx * ny * nz * 4
    available = len(data) - MRC_HEADER_BYTES - nsymbt
    if available < need:
        raise LengthError(f"payload truncated: {max(0, available)} of {need} bytes")

    try:
        mrc = MrcInterpreter(io.BytesIO(data), permissive=False)
        grid = np.array(mrc.data, dtype="<f4").reshape(nz, ny, nx)
    except (ValueError, ArithmeticError) as e:
        raise ContainerError(f"unreadable container: {e}") from None

    h = mrc.header
    voxel_size = []
    for cell, m, n in zip(
        (h.cella.x, h.cella.y, h.cella.z), (int(h.mx), int(h.my), int(h.mz)), (nx, ny, nz)
    ):
        voxel_size.append(_voxel_length(cell, m if m > 0 else n) if cell > 0 else 1.0)
    origin = (float(h.origin.x), float(h.origin.y), float(h.origin.z))
    return VolumeHeader(nx, ny, nz, mode, tuple(voxel_size), origin), grid


def write_volume(header, grid):
    """Encode ``grid`` (shape ``(nz, ny, nx)`` or ``(ny, nx)``) as MRC2014 bytes."""
    grid = np.asarray(grid)
    if grid.ndim == 2:
        grid = grid[np.newaxis]
    if grid.shape != header.shape:
        raise ContainerError(f"grid shape {grid.shape} does not match header {header.shape}")
    if header.mode != MRC_MODE_FLOAT32:
        raise UnsupportedModeError(f"unsupported mode {header.mode} (only mode 2)")
    payload = np.ascontiguousarray(grid, dtype="<f4")

    with tempfile.TemporaryDirectory(prefix="cryosynth-") as tmp:
        path = Path(tmp) / "volume.mrc"
        with mrcfile.new(str(path)) as mrc:
            mrc.set_data(payload)
            h = mrc.header
            for axis, n, length in zip("xyz", (header.nx, header.ny, header.nz), header.voxel_size):
                cell, sampling = _cell_axis(length, n)
                setattr(h, f"m{axis}", sampling)
                setattr(h.cella, axis, cell)
            for axis, value in zip("xyz", header.origin):
                setattr(h.origin, axis, value)
            h.exttyp = b"MRCO"
            h.nversion = 20140
            h.machst = bytearray(MRC_MACHINE_STAMP)
            h.nlabl = 1
            h.label[0] = b"cryosynth"
        return path.read_bytes()


def read_input(path):
    """Read a whole input file, mapping I/O failures to :class:`InputError`."""
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise InputError(f"cannot read {path}: {e}") from None


def load_volume(path):
    """Read an MRC file from disk with :func:`read_volume`."""
    return read_volume(read_input(path))


def save_volume(path, header, grid):
    """Write an MRC file and return its bytes."""
    data = write_volume(header, grid)
    Path(path).write_bytes(data)
    return data


def load_label_volume(path):
    """Read an integer segmentation map written by any MRC-producing tool.

    Segmentations come in integer modes (0, 1, 6) that :func:`read_volume`
    refuses, so they go through mrcfile.
    """
    try:
        with mrcfile.open(path, permissive=True) as mrc:
            if mrc.data is None:
                raise ContainerError(f"{path}: no data block")
            grid = np.array(mrc.data)
            voxel = mrc.voxel_size
            origin = mrc.header.origin
            voxel_size = (float(voxel.x), float(voxel.y), float(voxel.z))
            origin = (float(origin.x), float(origin.y), float(origin.z))
    except ValueError as e:
        raise ContainerError(f"{path}: {e}") from e
    if grid.ndim != 3:
        raise ContainerError(f"{path}: label map must be 3D")
    if not np.all(np.isfinite(grid)) or np.any(grid < 0):
        raise ContainerError(f"{path}: labels must be non-negative integers")
    nz, ny, nx = grid.shape
    header = VolumeHeader(nx, ny, nz, MRC_MODE_FLOAT32, voxel_size, origin)
    return header, np.rint(grid).astype(np.int32)


# --- Scene configuration ---


@dataclass(frozen=True)
class StructureEntry:
    id: str
    path: Path
    count: int = 1
    rule: ClassRule = ClassRule()
    weight: float = 0.5
    radius: float | None = None
    picks: Path | None = None
    pixel_size: float = 1.0


@dataclass(frozen=True)
class MicrographSpec:
    size: tuple = (1024, 1024)
    pixel_size: float | None = None
    previews: bool = False


@dataclass(frozen=True)
class PlacementSpec:
    strategy: str = "uniform"
    interface_tolerance: float = 5.0
    interface_label: int | None = None
    orientation: OrientationSpec = OrientationSpec()
    max_attempts: int = 1000


@dataclass(frozen=True)
class ConformerSpec:
    enabled: bool = False
    params: ConformerParams = ConformerParams()


@dataclass(frozen=True)
class ContextSpec:
    labels: Path | None = None
    perturb_amplitude: float = 1.0


@dataclass(frozen=True)
class SceneConfig:
    """Fully validated scene configuration with all defaults filled."""

    structures: tuple
    extents: tuple
    resolution: float
    micrograph: MicrographSpec = MicrographSpec()
    placement: PlacementSpec = PlacementSpec()
    conformer: ConformerSpec = ConformerSpec()
    ice: IceParams = IceParams()
    ctf: CtfParams = CtfParams()
    noise: NoiseSpec = NoiseSpec()
    context: ContextSpec = ContextSpec()
    scenes: int = 1
    seed: int = 0

    @property
    def pixel_size(self):
        if self.micrograph.pixel_size is not None:
            return self.micrograph.pixel_size
        return self.extents[0] / self.micrograph.size[0]

    @property
    def volume_shape(self):
        """Scene grid shape in (z, y, x) order at micrograph pixel spacing."""
        nx, ny = self.micrograph.size
        nz = max(1, math.ceil(self.extents[2] / self.pixel_size))
        return (nz, ny, nx)


def _freeze(value):
    if isinstance(value, list):
        return tuple(_freeze(v) for v in value)
    return value


def _check_keys(doc, cls, where, extra=()):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where} must be a JSON object")
    allowed = {f.name for f in fields(cls)} | set(extra)
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


_TYPE_NAMES = {bool: "true or false", int: "an integer", float: "a finite number", str: "a string"}


def _scalar_type(annotation):
    """Scalar type a config value must have, and whether null is allowed."""
    args = typing.get_args(annotation) or (annotation,)
    options = [t for t in args if t is not type(None)]
    scalar = options[0] if len(options) == 1 and options[0] in _TYPE_NAMES else None
    return scalar, len(options) < len(args)


def _check_types(cls, values, where):
    annotations = {f.name: f.type for f in fields(cls)}
    for key, value in values.items():
        scalar, nullable = _scalar_type(annotations[key])
        if scalar is None or (value is None and nullable):
            continue
        if scalar in (bool, str):
            ok = isinstance(value, scalar)
        elif isinstance(value, bool):
            ok = False
        elif scalar is int:
            ok = isinstance(value, int)
        else:
            ok = isinstance(value, (int, float)) and math.isfinite(value)
        if not ok:
            suffix = " or null" if nullable else ""
            raise ConfigError(f"{where}.{key} must be {_TYPE_NAMES[scalar]}{suffix} (got {value!r})")


def _integer(value, where, minimum):
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise ConfigError(f"{where} must be an integer >= {minimum} (got {value!r})")
    return value


def _build(cls, doc, where, extra=(), **overrides):
    _check_keys(doc, cls, where, extra)
    kwargs = {k: _freeze(v) for k, v in doc.items() if k not in extra}
    _check_types(cls, kwargs, where)
    kwargs.update(overrides)
    try:
        return cls(**kwargs)
    except ConfigError as e:
        raise ConfigError(f"{where}: {e}") from None
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: invalid value ({e})") from None


def _number(doc, key, where, positive=True):
    value = doc.get(key)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where}.{key} must be a number")
    if positive and not value > 0:
        raise ConfigError(f"{where}.{key} must be > 0 (got {value})")
    return float(value)


def _resolve(path_text, base_dir, where):
    if not isinstance(path_text, str) or not path_text:
        raise ConfigError(f"{where} must be a path string")
    path = Path(path_text)
    if not path.is_absolute():
        path = base_dir / path
    if not path.is_file():
        raise ConfigError(f"{where}: file not found: {path}")
    return path


def _parse_structure(doc, index, base_dir):
    where = f"structures[{index}]"
    _check_keys(doc, StructureEntry, where)
    if "path" not in doc:
        raise ConfigError(f"{where}.path is required")
    entry = dict(doc)
    entry["path"] = _resolve(doc["path"], base_dir, f"{where}.path")
    entry.setdefault("id", entry["path"].stem)
    if doc.get("picks") is not None:
        entry["picks"] = _resolve(doc["picks"], base_dir, f"{where}.picks")
    entry["rule"] = _build(ClassRule, doc.get("rule", {}), f"{where}.rule")
    count = entry.get("count", 1)
    if isinstance(count, bool) or not isinstance(count, int) or count < 0:
        raise ConfigError(f"{where}.count must be a non-negative integer")
    weight = entry.get("weight", 0.5)
    if isinstance(weight, bool) or not isinstance(weight, (int, float)) or not 0 <= weight <= 1:
        raise ConfigError(f"{where}.weight must lie in [0, 1]")
    if entry.get("radius") is not None:
        _number(entry, "radius", where)
    _number({"pixel_size": entry.get("pixel_size", 1.0)}, "pixel_size", where)
    return _build(StructureEntry, entry, where)


def parse_scene_config(text, base_dir=None):
    """Parse and validate a JSON scene configuration.

    Relative paths resolve against ``base_dir`` (default: current directory).
    Unknown keys are rejected at every level.
    """
    base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
    if isinstance(text, (bytes, bytearray)):
        text = bytes(text).decode("utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    _check_keys(doc, SceneConfig, "config")

    for key in ("extents", "resolution"):
        if key not in doc:
            raise ConfigError(f"config.{key} is required")
    extents = doc["extents"]
    if not isinstance(extents, list) or len(extents) != 3:
        raise ConfigError("config.extents must be [x, y, z] in Angstrom")
    extents = tuple(
        _number({"extent": v}, "extent", f"config.extents[{i}]") for i, v in enumerate(extents)
    )
    resolution = _number(doc, "resolution", "config")

    seed = doc.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed <= SEED_MAX:
        raise ConfigError("config.seed must be an unsigned 64-bit integer")
    scenes = doc.get("scenes", 1)
    if isinstance(scenes, bool) or not isinstance(scenes, int) or scenes < 1:
        raise ConfigError("config.scenes must be a positive integer")

    structures = doc.get("structures", [])
    if not isinstance(structures, list):
        raise ConfigError("config.structures must be a list")
    entries = tuple(_parse_structure(s, i, base_dir) for i, s in enumerate(structures))
    ids = [e.id for e in entries]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate structure ids: {ids}")

    micrograph = _build(MicrographSpec, doc.get("micrograph", {}), "config.micrograph")
    size = micrograph.size
    if not isinstance(size, tuple) or len(size) != 2:
        raise ConfigError("config.micrograph.size must be [nx, ny] positive integers")
    for n in size:
        _integer(n, "config.micrograph.size", 1)
    if micrograph.pixel_size is not None:
        _number({"pixel_size": micrograph.pixel_size}, "pixel_size", "config.micrograph")

    placement_doc = doc.get("placement", {})
    _check_keys(placement_doc, PlacementSpec, "config.placement")
    orientation = _build(
        OrientationSpec, placement_doc.get("orientation", {}), "config.placement.orientation"
    )
    placement = _build(
        PlacementSpec, placement_doc, "config.placement", orientation=orientation
    )
    if placement.strategy not in STRATEGIES:
        raise ConfigError(f"config.placement.strategy must be one of {STRATEGIES}")
    if placement.interface_tolerance < 0:
        raise ConfigError("config.placement.interface_tolerance must be >= 0")
    if placement.interface_label is not None:
        _integer(placement.interface_label, "config.placement.interface_label", 0)
    _integer(placement.max_attempts, "config.placement.max_attempts", 1)

    conformer_doc = doc.get("conformer", {})
    _check_keys(conformer_doc, ConformerParams, "config.conformer", extra=("enabled",))
    _check_types(ConformerSpec, {"enabled": conformer_doc.get("enabled", False)}, "config.conformer")
    conformer = ConformerSpec(
        enabled=conformer_doc.get("enabled", False),
        params=_build(
            ConformerParams, conformer_doc, "config.conformer", extra=("enabled",)
        ),
    )

    context_doc = doc.get("context", {})
    _check_keys(context_doc, ContextSpec, "config.context")
    labels = None
    if context_doc.get("labels") is not None:
        labels = _resolve(context_doc["labels"], base_dir, "config.context.labels")
    context = _build(ContextSpec, context_doc, "config.context", labels=labels)
    amplitude = context.perturb_amplitude
    if isinstance(amplitude, bool) or not isinstance(amplitude, (int, float)) or amplitude < 0:
        raise ConfigError("config.context.perturb_amplitude must be a number >= 0")

    return SceneConfig(
        structures=entries,
        extents=extents,
        resolution=resolution,
        micrograph=micrograph,
        placement=placement,
        conformer=conformer,
        ice=_build(IceParams, doc.get("ice", {}), "config.ice"),
        ctf=_build(CtfParams, doc.get("ctf", {}), "config.ctf"),
        noise=_build(NoiseSpec, doc.get("noise", {}), "config.noise", extra=()),
        context=context,
        scenes=scenes,
        seed=seed,
    )


def load_scene_config(path):
    """Read and parse a config file; relative paths resolve beside it."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_scene_config(text, base_dir=path.parent)
