"""End-to-end micrograph synthesis.

A run builds the structure library, then for every scene places particles,
grows the ice slab, assembles and projects the potential, applies the CTF,
renders the occupancy mask and adds noise. Outputs are staged in a
temporary directory and only moved into place once every scene succeeded.
"""

import hashlib
import json
import logging
import shutil
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cryosynth import __version__
from cryosynth.density import DensityVolume, perturb_conformer, smooth_and_threshold, voxelize
from cryosynth.errors import CryosynthError, InputError, InvariantError, StageError
from cryosynth.formats import (
    MRC_MODE_FLOAT32,
    VolumeHeader,
    load_label_volume,
    parse_atomic_model,
    parse_pick_table,
    write_volume,
)
from cryosynth.geometry import decimate_mesh, extract_isosurface, smooth_mesh
from cryosynth.ice import generate_ice
from cryosynth.imaging import (
    Micrograph,
    apply_noise,
    assemble_potential,
    ctf_filter,
    project,
    render_mask,
    write_png_preview,
)
from cryosynth.rng import derive_rng
from cryosynth.scene import (
    Scene,
    blend_placements,
    derive_scale_params,
    embed_context,
    import_experimental_poses,
    place_particles,
    scene_to_manifest,
)

logger = logging.getLogger("cryosynth")

LIBRARY_ISO_FRACTION = 0.1
LAYER_BLOCK = 32
DIGEST_ALGORITHM = "sha256"
MANIFEST_NAME = "manifest.json"


@contextmanager
def stage(name, timings=None):
    """Log START/DONE around a stage and tag any failure with its name."""
    logger.info(f"{name}: START")
    start = time.monotonic()
    try:
        yield
    except StageError:
        raise
    except CryosynthError as e:
        logger.error(f"{name}: FAILED ({e})")
        raise StageError(name, e) from e
    except Exception as e:
        logger.error(f"{name}: FAILED ({type(e).__name__}: {e})")
        raise StageError(name, InvariantError(f"{type(e).__name__}: {e}")) from e
    elapsed = time.monotonic() - start
    if timings is not None:
        timings[name] = round(elapsed, 3)
    logger.info(f"{name}: DONE ({elapsed:.2f}s)")


# --- Library ---


@dataclass(frozen=True, eq=False)
class LibraryEntry:
    id: str
    model: object
    volume: DensityVolume
    mesh: object
    particle_size: float
    radius: float


def load_models(config):
    """Parse every structure's coordinate file, centered on its centroid."""
    models = {}
    for entry in config.structures:
        try:
            data = entry.path.read_bytes()
        except OSError as e:
            raise InputError(f"cannot read {entry.path}: {e}") from None
        models[entry.id] = parse_atomic_model(data, entry.id).centered()
        logger.debug(f"{entry.id}: {len(models[entry.id])} atoms from {entry.path}")
    return models


def scene_scale(config, models):
    """Scale parameters driven by the largest structure in the scene."""
    nz, ny, nx = config.volume_shape
    size = max((m.particle_size for m in models.values()), default=0.0)
    if size <= 0:
        size = config.resolution
    return derive_scale_params(size, nx * ny * nz)


def build_library(config, scale, models=None, rng=None):
    """Voxelized, smoothed density and surface mesh for every structure.

    With ``rng`` and an enabled conformer section each model is perturbed
    first, giving one conformational variant per call.
    """
    models = models if models is not None else load_models(config)
    library = {}
    for entry in config.structures:
        model = models[entry.id]
        if rng is not None and config.conformer.enabled:
            model = perturb_conformer(model, config.conformer.params, rng)
        volume = smooth_and_threshold(voxelize(model, config.resolution), config.resolution)
        peak = float(volume.grid.max())
        mesh = extract_isosurface(volume, LIBRARY_ISO_FRACTION * peak, scale)
        mesh = decimate_mesh(smooth_mesh(mesh, scale), scale)
        size = model.particle_size
        library[entry.id] = LibraryEntry(
            entry.id, model, volume, mesh, size, entry.radius or size
        )
        logger.debug(
            f"{entry.id}: volume {volume.extent}, mesh {len(mesh.faces)} faces, size {size:.1f} A"
        )
    return library


# --- Run context ---


@dataclass(eq=False)
class RunContext:
    """Shared, read-only inputs of every scene in a run."""

    config: object
    seed: int
    models: dict
    scale: object
    library: dict
    labels: DensityVolume | None = None
    picks: dict = field(default_factory=dict)


def prepare_run(config, seed=None, timings=None):
    seed = config.seed if seed is None else seed
    with stage("library", timings):
        models = load_models(config)
        scale = scene_scale(config, models)
        library = build_library(config, scale, models)
        logger.info(f"scale factor s={scale.s:.3f} for {len(library)} structure(s)")
    labels = None
    if config.context.labels is not None:
        with stage("context-load", timings):
            header, grid = load_label_volume(config.context.labels)
            labels = DensityVolume(grid.astype(np.float64), header.voxel_size[0], header.origin)
    picks = {}
    for entry in config.structures:
        if entry.picks is not None:
            with stage(f"picks:{entry.id}", timings):
                picks[entry.id] = parse_pick_table(entry.picks.read_bytes())
    return RunContext(config, seed, models, scale, library, labels, picks)


def scene_rng(ctx, index, purpose):
    return derive_rng(ctx.seed, "scene", index, purpose)


def _inside(placement, extents):
    r = placement.radius
    return all(r <= c <= e - r for c, e in zip(placement.position, extents))


def compose_scene(ctx, index, library=None, timings=None):
    """Context meshes plus blended experimental/synthetic placements."""
    config = ctx.config
    library = library or ctx.library
    extents = config.extents
    placement_spec = config.placement

    meshes = ()
    if ctx.labels is not None:
        with stage(f"scene_{index:03d}/context", timings):
            meshes = tuple(
                embed_context(
                    ctx.labels,
                    config.context.perturb_amplitude,
                    scene_rng(ctx, index, "context"),
                    resolution=config.resolution,
                    scale=ctx.scale,
                )
            )
    by_label = {m.label: m for m in meshes}
    interface = by_label.get(placement_spec.interface_label) if meshes else None
    if interface is None and meshes:
        interface = meshes[0]

    placed = []
    with stage(f"scene_{index:03d}/placement", timings):
        rng = scene_rng(ctx, index, "placement")
        for entry in config.structures:
            radius = library[entry.id].radius
            rule = entry.rule
            confinement = by_label.get(rule.confinement_label) if rule.kind == "confined" else None
            synthetic = place_particles(
                entry.count,
                radius,
                placement_spec.strategy,
                rule,
                ctx.scale,
                extents,
                rng,
                mesh=interface,
                tolerance=placement_spec.interface_tolerance,
                confinement=confinement,
                existing=placed,
                orientation=placement_spec.orientation,
                max_attempts=placement_spec.max_attempts,
                structure_id=entry.id,
            )
            if entry.id in ctx.picks:
                experimental = import_experimental_poses(
                    ctx.picks[entry.id],
                    entry.pixel_size,
                    default_z=extents[2] / 2.0,
                    structure_id=entry.id,
                    radius=radius,
                )
                kept = [p for p in experimental if _inside(p, extents)]
                if len(kept) < len(experimental):
                    logger.warning(
                        f"{entry.id}: {len(experimental) - len(kept)} picks fall outside the scene"
                    )
                if kept or synthetic:
                    synthetic = blend_placements(
                        kept,
                        synthetic,
                        entry.weight,
                        rng,
                        overlap_threshold=ctx.scale.overlap_threshold,
                        existing=placed,
                        scale=ctx.scale,
                    )
            placed.extend(synthetic)
    logger.info(f"scene {index}: {len(placed)} particle(s) placed")
    return Scene(tuple(extents), tuple(placed), ctx.scale, ctx.seed, index, meshes)


def scene_ice(ctx, index):
    config = ctx.config
    nx, ny = config.micrograph.size
    return generate_ice(
        (nx, ny),
        config.pixel_size,
        config.ice,
        scene_rng(ctx, index, "ice"),
        mid_plane=config.extents[2] / 2.0,
    )


def project_scene(ctx, scene, ice, library=None):
    """Assemble the potential in z-blocks and accumulate their projection."""
    config = ctx.config
    library = library or ctx.library
    volumes = {k: v.volume for k, v in library.items()}
    shape = config.volume_shape
    total = None
    for z0 in range(0, shape[0], LAYER_BLOCK):
        block = assemble_potential(
            scene,
            volumes,
            ice,
            config.pixel_size,
            shape=shape,
            layers=(z0, min(LAYER_BLOCK, shape[0] - z0)),
            ice_contrast=config.ice.contrast,
        )
        image = project(block).pixels
        total = image if total is None else total + image
    return Micrograph(total, config.pixel_size, "clean")


# --- Outputs ---


def digest(data):
    return hashlib.new(DIGEST_ALGORITHM, data).hexdigest()


@dataclass(frozen=True)
class OutputFile:
    path: str
    digest: str
    size: int


@dataclass
class RunManifest:
    config_hash: str
    seed: int
    version: str = __version__
    digest_algorithm: str = DIGEST_ALGORITHM
    outputs: list = field(default_factory=list)
    stages: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "config_hash": self.config_hash,
            "seed": self.seed,
            "version": self.version,
            "digest_algorithm": self.digest_algorithm,
            "outputs": [vars(o) for o in self.outputs],
            "stages": self.stages,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


class _Writer:
    """Single writer per output file, recording digests as it goes."""

    def __init__(self, root):
        self.root = Path(root)
        self.files = []

    def write(self, relative, data):
        path = self.root / relative
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
        self.files.append(OutputFile(str(relative), digest(data), len(data)))
        return path

    def micrograph(self, relative, m):
        self.write(relative, write_volume(m.header(), m.pixels))

    def png(self, relative, m):
        path = self.root / relative
        write_png_preview(m, path)
        data = path.read_bytes()
        self.files.append(OutputFile(str(relative), digest(data), len(data)))


def config_hash(config):
    return digest(repr(config).encode("utf-8"))


def render_scene(ctx, index, writer):
    """Run one scene end to end and write its files under ``scene_NNN/``."""
    config = ctx.config
    timings = {}
    prefix = f"scene_{index:03d}"

    library = ctx.library
    if config.conformer.enabled:
        with stage(f"{prefix}/conformer", timings):
            library = build_library(
                config, ctx.scale, ctx.models, rng=scene_rng(ctx, index, "conformer")
            )
    scene = compose_scene(ctx, index, library, timings)
    with stage(f"{prefix}/ice", timings):
        ice = scene_ice(ctx, index)
        logger.debug(f"{prefix}: ice thickness {thickness_summary(ice)}")
    with stage(f"{prefix}/projection", timings):
        clean = project_scene(ctx, scene, ice, library)
    with stage(f"{prefix}/ctf", timings):
        ctf = ctf_filter(clean, config.ctf)
    with stage(f"{prefix}/mask", timings):
        mask = render_mask(scene, config.micrograph.size, config.pixel_size)
    with stage(f"{prefix}/noise", timings):
        noisy = apply_noise(
            ctf, config.noise, derive_rng(ctx.seed, "scene", index, "noise", config.noise.seed)
        )

    with stage(f"{prefix}/write", timings):
        manifest = json.dumps(scene_to_manifest(scene), indent=2, sort_keys=True) + "\n"
        writer.write(f"{prefix}/placements.json", manifest.encode("utf-8"))
        for name, image in (("clean", clean), ("ctf", ctf), ("noisy", noisy), ("mask", mask)):
            writer.micrograph(f"{prefix}/{name}.mrc", image)
            if config.micrograph.previews:
                writer.png(f"{prefix}/{name}.png", image)
        nx, ny = config.micrograph.size
        ps = config.pixel_size
        header = VolumeHeader(nx, ny, 1, MRC_MODE_FLOAT32, (ps, ps, ps), (0.0, 0.0, 0.0))
        writer.write(f"{prefix}/ice_thickness.mrc", write_volume(header, ice.thickness))
    return timings


def _publish(staging, out_dir):
    out_dir.mkdir(parents=True, exist_ok=True)
    for item in sorted(staging.iterdir()):
        target = out_dir / item.name
        if target.is_dir():
            shutil.rmtree(target)
        elif target.exists():
            target.unlink()
        shutil.move(str(item), str(target))


def run_pipeline(config, out_dir, threads=1, seed=None):
    """Generate ``config.scenes`` micrographs into ``out_dir``.

    Scenes run on up to ``threads`` workers; every scene draws from its own
    ``(seed, "scene", index)`` streams, so outputs do not depend on the
    thread count. On failure nothing is left in ``out_dir``.
    """
    seed = config.seed if seed is None else seed
    out_dir = Path(out_dir)
    parent = out_dir.parent if out_dir.parent.exists() else Path.cwd()
    staging = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}-", dir=parent))
    manifest = RunManifest(config_hash(config), seed)
    logger.info(f"pipeline: {config.scenes} scene(s), seed {seed}, {threads} thread(s)")
    try:
        ctx = prepare_run(config, seed, manifest.stages)
        writer = _Writer(staging)
        workers = max(1, min(int(threads), config.scenes))
        if workers == 1:
            results = [render_scene(ctx, i, writer) for i in range(config.scenes)]
        else:
            writers = [_Writer(staging) for _ in range(config.scenes)]
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(
                    pool.map(lambda i: render_scene(ctx, i, writers[i]), range(config.scenes))
                )
            for w in writers:
                writer.files.extend(w.files)
        for timings in results:
            manifest.stages.update(timings)
        manifest.outputs = sorted(writer.files, key=lambda f: f.path)
        (staging / MANIFEST_NAME).write_text(manifest.to_json(), encoding="utf-8")
        _publish(staging, out_dir)
    finally:
        if staging.exists():
            shutil.rmtree(staging, ignore_errors=True)
    logger.info(f"pipeline: wrote {len(manifest.outputs)} file(s) to {out_dir}")
    return manifest


def thickness_summary(ice):
    t = ice.thickness
    return {
        "base": ice.base_thickness,
        "min": float(t.min()),
        "max": float(t.max()),
        "mean": float(t.mean()),
        "median": float(np.median(t)),
    }

