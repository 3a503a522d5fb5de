#!/usr/bin/env python3
"""Command-line entry point for cryosynth.

Every pipeline stage is exposed as ``cryosynth <group> <action>``;
``cryosynth pipeline run`` chains them all.
"""

import argparse
import json
import locale
import logging
import logging.config
import os
import signal
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from cryosynth import __version__
from cryosynth.density import DensityVolume
from cryosynth.errors import ConfigError, CryosynthError, InputError
from cryosynth.formats import (
    load_scene_config,
    load_volume,
    parse_pick_table,
    read_input,
    save_volume,
)
from cryosynth.geometry import write_obj
from cryosynth.imaging import (
    Micrograph,
    apply_noise,
    assemble_potential,
    ctf_filter,
    project,
    render_mask,
)
from cryosynth.metrics import (
    PoseBatch,
    angular_error,
    auprc,
    fsc,
    match_picks,
    pose_loss,
    pr_curve,
    resolution_at,
)
from cryosynth.params import CtfParams, NoiseSpec
from cryosynth.pipeline import (
    build_library,
    compose_scene,
    load_models,
    prepare_run,
    run_pipeline,
    scene_ice,
    scene_scale,
)
from cryosynth.rng import SEED_MAX, derive_rng
from cryosynth.scene import scene_from_manifest, scene_to_manifest

logger = logging.getLogger("cryosynth")

CONFIG_NAME = "cryosynth.json"
FSC_THRESHOLDS = (0.143, 0.5)

# ロケール判定（ja_JP 等で始まれば日本語）
_LANG_JA = (locale.getlocale()[0] or os.environ.get("LANG", "")).startswith("ja")

# ユーザ向けメッセージ辞書 (日本語, 英語)
_MESSAGES = {
    "config_not_found_cli": (
        "{path} が見つかりません",
        "{path} not found",
    ),
    "config_not_found": (
        "cryosynth.json が見つかりません。\n"
        "  --config で指定するか、以下のいずれかに配置してください:\n"
        "    ./cryosynth.json\n"
        "    ~/.config/cryosynth/cryosynth.json",
        "cryosynth.json not found.\n"
        "  Pass --config or place it in one of the following locations:\n"
        "    ./cryosynth.json\n"
        "    ~/.config/cryosynth/cryosynth.json",
    ),
    "config_loaded": (
        "設定を読み込みました: {path}",
        "Config loaded: {path}",
    ),
    "wrote": (
        "{path} を書き出しました",
        "Wrote {path}",
    ),
    "failed": (
        "エラー: {error}",
        "Error: {error}",
    ),
    "interrupted": (
        "ユーザにより中断されました",
        "Interrupted by user",
    ),
    "manual_not_found": (
        "マニュアルが見つかりません。",
        "Manual not found.",
    ),
}


def _msg(key, **kwargs):
    """Return a localized message string."""
    ja, en = _MESSAGES[key]
    text = ja if _LANG_JA else en
    return text.format(**kwargs) if kwargs else text


def _find_config(name, cli_path=None):
    """Search for a configuration file in standard locations.

    Lookup order:
        1. Path specified via CLI (``--config``)
        2. Current working directory
        3. ``~/.config/cryosynth/`` (XDG_CONFIG_HOME)
    """
    if cli_path:
        if os.path.isfile(cli_path):
            return cli_path
        logger.warning(_msg("config_not_found_cli", path=cli_path))
        return None

    if os.path.isfile(name):
        return name

    xdg = os.environ.get("XDG_CONFIG_HOME", os.path.expanduser("~/.config"))
    xdg_path = os.path.join(xdg, "cryosynth", name)
    if os.path.isfile(xdg_path):
        return xdg_path

    return None


def _setup_logging(debug=False):
    """Initialize logging configuration."""
    logging_ini = _find_config("logging.ini")
    if logging_ini:
        logging.config.fileConfig(logging_ini, disable_existing_loggers=False)
        if debug:
            logging.getLogger().setLevel(logging.DEBUG)
    else:
        logging.basicConfig(
            level=logging.DEBUG if debug else logging.INFO,
            format="%(asctime)s [%(levelname)s] %(message)s",
            handlers=[logging.StreamHandler(sys.stdout)],
        )


def _handle_sigterm(signum, frame):
    raise KeyboardInterrupt


def _load_config(args, required=True):
    path = _find_config(CONFIG_NAME, args.config)
    if path is None:
        if required:
            raise ConfigError(_msg("config_not_found"))
        return None
    config = load_scene_config(path)
    logger.info(_msg("config_loaded", path=path))
    return config


def _seed(args, config=None):
    if args.seed is not None:
        return args.seed
    return config.seed if config is not None else 0


def _out(args, name):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out / name


def _save_micrograph(path, m):
    save_volume(path, m.header(), m.pixels)
    logger.info(_msg("wrote", path=path))


def _load_micrograph(path, provenance="clean"):
    header, grid = load_volume(path)
    return Micrograph.from_mrc(header, grid, provenance)


def _write_report(args, name, report):
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    path = _out(args, name)
    path.write_text(text, encoding="utf-8")
    logger.info(_msg("wrote", path=path))
    print(text, end="")


def _read_placements(path):
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise InputError(f"cannot read placements {path}: {e}") from None
    return scene_from_manifest(doc)


# --- Subcommand handlers ---


def cmd_library_build(args):
    config = _load_config(args)
    models = load_models(config)
    library = build_library(config, scene_scale(config, models), models)
    for entry in library.values():
        path = _out(args, f"{entry.id}.mrc")
        save_volume(path, entry.volume.header(), entry.volume.grid)
        write_obj(entry.mesh, _out(args, f"{entry.id}.obj"))
        logger.info(_msg("wrote", path=path))


def cmd_scene_place(args):
    config = _load_config(args)
    ctx = prepare_run(config, _seed(args, config))
    scene = compose_scene(ctx, args.scene)
    path = _out(args, "placements.json")
    path.write_text(json.dumps(scene_to_manifest(scene), indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    logger.info(_msg("wrote", path=path))


def cmd_volume_assemble(args):
    config = _load_config(args)
    ctx = prepare_run(config, _seed(args, config))
    scene = _read_placements(args.placements) if args.placements else compose_scene(ctx, args.scene)
    ice = scene_ice(ctx, scene.index)
    volumes = {k: v.volume for k, v in ctx.library.items()}
    vol = assemble_potential(
        scene,
        volumes,
        ice,
        config.pixel_size,
        shape=config.volume_shape,
        ice_contrast=config.ice.contrast,
    )
    path = _out(args, "potential.mrc")
    save_volume(path, vol.header(), vol.grid)
    logger.info(_msg("wrote", path=path))


def cmd_micrograph_project(args):
    header, grid = load_volume(args.volume)
    vol = DensityVolume.from_mrc(header, grid)
    _save_micrograph(_out(args, "clean.mrc"), project(vol, args.z_range))


def cmd_ctf_apply(args):
    config = _load_config(args, required=False)
    ctf = config.ctf if config is not None else CtfParams()
    _save_micrograph(_out(args, "ctf.mrc"), ctf_filter(_load_micrograph(args.input), ctf))


def cmd_noise_apply(args):
    config = _load_config(args, required=False)
    spec = config.noise if config is not None else NoiseSpec()
    overrides = {k: getattr(args, k) for k in ("model", "snr", "dose") if getattr(args, k) is not None}
    if overrides:
        spec = replace(spec, **overrides)
    rng = derive_rng(_seed(args, config), "noise", spec.seed)
    m = _load_micrograph(args.input, "ctf")
    _save_micrograph(_out(args, "noisy.mrc"), apply_noise(m, spec, rng))


def cmd_mask_render(args):
    config = _load_config(args)
    scene = _read_placements(args.placements)
    mask = render_mask(scene, config.micrograph.size, config.pixel_size)
    _save_micrograph(_out(args, "mask.mrc"), mask)


def cmd_metrics_fsc(args):
    volumes = []
    for path in args.volumes:
        header, grid = load_volume(path)
        volumes.append(DensityVolume.from_mrc(header, grid))
    curve = fsc(*volumes)
    report = {"curve": curve.as_dict(), "resolution": {}}
    for threshold in args.threshold:
        res = resolution_at(curve, threshold)
        report["resolution"][f"{threshold:g}"] = {
            "frequency": res.frequency,
            "angstrom": res.angstrom if res.crossed else None,
            "crossed": res.crossed,
        }
    _write_report(args, "fsc.json", report)


def _d_match(args):
    if args.d_match is not None:
        return args.d_match
    config = _load_config(args)
    models = load_models(config)
    size = max(m.particle_size for m in models.values())
    return size / config.pixel_size


def cmd_metrics_pr(args):
    picks = parse_pick_table(read_input(args.picks))
    truth = parse_pick_table(read_input(args.truth))
    matches = match_picks(picks, [(t.x, t.y) for t in truth], _d_match(args))
    curve = pr_curve(matches, args.levels, args.top_n)
    report = {
        "auprc": auprc(curve),
        "no_positives": curve.no_positives,
        "true_positives": matches.true_positives,
        "false_negatives": matches.false_negatives,
        "points": [
            {"threshold": t, "precision": p, "recall": r} for t, p, r, *_ in curve.rows()
        ],
    }
    if args.csv:
        lines = ["threshold,precision,recall,tp,fp,fn"]
        lines.extend(",".join(f"{v:g}" for v in row) for row in curve.rows())
        Path(args.csv).write_text("\n".join(lines) + "\n", encoding="utf-8")
        logger.info(_msg("wrote", path=args.csv))
    _write_report(args, "pr.json", report)


def cmd_metrics_pose(args):
    try:
        doc = json.loads(Path(args.poses).read_text(encoding="utf-8"))
        batch = PoseBatch(
            np.asarray(doc["r_gt"]), np.asarray(doc["r_pred"]),
            np.asarray(doc["t_gt"]), np.asarray(doc["t_pred"]),
        )
    except (OSError, json.JSONDecodeError, KeyError) as e:
        raise InputError(f"cannot read poses {args.poses}: {e}") from None
    error = angular_error(batch)
    _write_report(args, "pose.json", {
        "angular_error_radians": error.radians,
        "angular_error_literal": error.literal,
        "pose_loss": pose_loss(batch),
        "batch_size": len(batch),
    })


def cmd_pipeline_run(args):
    config = _load_config(args)
    manifest = run_pipeline(config, args.out, threads=args.threads, seed=_seed(args, config))
    logger.info(_msg("wrote", path=Path(args.out) / "manifest.json"))
    return manifest


def _show_manual():
    """Display the manual (README) using a pager."""
    from importlib.resources import files
    import pydoc

    # ロケールに応じて日本語版/英語版を選択
    readme = "README.ja.md" if _LANG_JA else "README.md"

    text = None

    # 1. importlib.resources でパッケージ内から読み込み (pip install 時)
    try:
        text = files("cryosynth").joinpath(readme).read_text(encoding="utf-8")
    except (FileNotFoundError, TypeError):
        pass

    # 2. フォールバック: リポジトリルートの README (開発時)
    if not text:
        dev_path = os.path.normpath(
            os.path.join(os.path.dirname(__file__), os.pardir, readme)
        )
        if os.path.isfile(dev_path):
            with open(dev_path, encoding="utf-8") as f:
                text = f.read()

    if not text:
        print(_msg("manual_not_found"), file=sys.stderr)
        sys.exit(1)

    pydoc.pager(text)


def _u64(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed: {text!r}") from None
    if not 0 <= value <= SEED_MAX:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer: {text}")
    return value


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid integer: {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1: {text}")
    return value


def _shared_options():
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument(
        "-c",
        "--config",
        metavar="PATH",
        help="scene config (default: ./cryosynth.json or ~/.config/cryosynth/cryosynth.json)",
    )
    shared.add_argument("--seed", type=_u64, metavar="U64", help="root seed (default: config seed)")
    shared.add_argument("-o", "--out", default=".", metavar="DIR", help="output directory")
    shared.add_argument(
        "--threads", type=_positive_int, default=1, metavar="N", help="worker threads (scenes)"
    )
    shared.add_argument(
        "-d", "--verbose", "--debug", dest="debug", action="store_true", help="enable debug output"
    )
    return shared


def _build_parser():
    """Build the argparse parser."""
    parser = argparse.ArgumentParser(
        prog="cryosynth",
        description="Synthetic cryo-EM micrograph generator",
    )
    parser.add_argument(
        "-V", "--version", action="version", version=f"%(prog)s {__version__}"
    )
    parser.add_argument(
        "-m", "--man", action="store_true", help="show manual and exit"
    )
    shared = _shared_options()
    groups = parser.add_subparsers(dest="group", metavar="command")
    actions = {}

    def action(group_name, group_help, name, handler, help_text):
        if group_name not in actions:
            group = groups.add_parser(group_name, help=group_help)
            actions[group_name] = group.add_subparsers(
                dest="action", metavar="action", required=True
            )
        sub = actions[group_name].add_parser(name, parents=[shared], help=help_text)
        sub.set_defaults(handler=handler)
        return sub

    action("library", "structure library", "build", cmd_library_build,
           "voxelize and mesh every configured structure")

    p = action("scene", "particle placement", "place", cmd_scene_place,
               "place particles and write placements.json")
    p.add_argument("--scene", type=int, default=0, help="scene index (default: 0)")

    p = action("volume", "scene potential", "assemble", cmd_volume_assemble,
               "assemble the scene potential into potential.mrc")
    p.add_argument("--placements", metavar="JSON", help="placement manifest from 'scene place'")
    p.add_argument("--scene", type=int, default=0, help="scene index when placing afresh")

    p = action("micrograph", "projection", "project", cmd_micrograph_project,
               "project a volume along z into clean.mrc")
    p.add_argument("--volume", required=True, metavar="MRC", help="input potential")
    p.add_argument("--z-range", nargs=2, type=float, metavar=("LO", "HI"),
                   help="slab in Angstrom (default: whole volume)")

    p = action("ctf", "contrast transfer", "apply", cmd_ctf_apply,
               "apply the CTF to a micrograph")
    p.add_argument("--input", required=True, metavar="MRC", help="input micrograph")

    p = action("noise", "detector noise", "apply", cmd_noise_apply,
               "add noise to a micrograph")
    p.add_argument("--input", required=True, metavar="MRC", help="input micrograph")
    p.add_argument("--model", choices=("gaussian", "poisson", "poisson_gaussian"))
    p.add_argument("--snr", type=float, help="target var(signal)/var(noise); 0 = pure noise")
    p.add_argument("--dose", type=float, help="electrons per pixel (poisson models)")

    p = action("mask", "ground-truth masks", "render", cmd_mask_render,
               "render the particle occupancy mask")
    p.add_argument("--placements", required=True, metavar="JSON", help="placement manifest")

    p = action("metrics", "evaluation metrics", "fsc", cmd_metrics_fsc,
               "Fourier shell correlation of two volumes")
    p.add_argument("--volumes", nargs=2, required=True, metavar="MRC")
    p.add_argument("--threshold", nargs="+", type=float, default=list(FSC_THRESHOLDS))

    p = action("metrics", None, "pr", cmd_metrics_pr, "precision/recall of particle picks")
    p.add_argument("--picks", required=True, metavar="STAR", help="predicted picks")
    p.add_argument("--truth", required=True, metavar="STAR", help="ground-truth centers")
    p.add_argument("--d-match", type=float, metavar="PX",
                   help="match radius in pixels (default: particle radius from config)")
    p.add_argument("--levels", type=_positive_int, default=100, help="threshold levels")
    p.add_argument("--top-n", type=_positive_int, help="keep only the N most confident picks")
    p.add_argument("--csv", metavar="PATH", help="also write the curve as CSV")

    p = action("metrics", None, "pose", cmd_metrics_pose, "angular error and pose loss")
    p.add_argument("--poses", required=True, metavar="JSON",
                   help="JSON with r_gt, r_pred (B,3,3) and t_gt, t_pred (B,2)")

    action("pipeline", "end-to-end generation", "run", cmd_pipeline_run,
           "run every stage and write a reproducibility manifest")
    return parser


def main(argv=None):
    """CLI entry point."""
    parser = _build_parser()

    # Tab completion (requires: pip install cryosynth[completion])
    try:
        import argcomplete
        argcomplete.autocomplete(parser)
    except ImportError:
        pass

    args = parser.parse_args(argv)

    if args.man:
        _show_manual()
        return

    if getattr(args, "handler", None) is None:
        parser.print_help()
        sys.exit(2)

    _setup_logging(debug=args.debug)
    signal.signal(signal.SIGTERM, _handle_sigterm)

    logger.info(f"cryosynth {args.group} {args.action}: START")
    try:
        args.handler(args)
    except KeyboardInterrupt:
        logger.info(_msg("interrupted"))
        sys.exit(130)
    except CryosynthError as e:
        logger.error(_msg("failed", error=e))
        sys.exit(e.exit_code)
    except Exception as e:
        logger.error(f"Fatal Error: {e}")
        sys.exit(4)

    logger.info(f"cryosynth {args.group} {args.action}: FINISH")


if __name__ == "__main__":
    main()
