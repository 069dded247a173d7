"""Command line entry point: ``morphsdf <command> [flags]``.

Numeric hyperparameters come from defaults, then an optional JSON config
file (``--config``), then explicit flags.  Errors exit non-zero with one
line on stderr of the form ``morphsdf: error[<CODE>]: <message>``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import assets, fileio, inversion, losses, metrics, synthdata, trainer
from .camera import Camera
from .networks import AvatarCodes, CheckpointError, ModelConfig
from .renderer import render_image

log = logging.getLogger("morphsdf")

# exit codes
EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_CHECKPOINT = 3
EXIT_CONFIG = 4
EXIT_MISSING = 5
EXIT_NUMERIC = 6


class CliError(Exception):
    def __init__(self, code: str, status: int, message: str):
        super().__init__(message)
        self.code, self.status = code, status


# ---- config plumbing ------------------------------------------------------------

# config file sections and the dataclass each one fills
SECTIONS = {
    "train": trainer.TrainConfig,
    "weights": losses.LossWeights,
    "model": ModelConfig,
    "invert": inversion.InversionOptions,
}
# fields owned by the CLI itself (set from other flags, never from the file)
_SKIP = {"train": {"weights", "stage", "threads"}, "invert": {"weights"},
         "model": {"num_subjects", "num_expressions"}, "weights": set()}


def _flag(section: str, name: str) -> str:
    prefix = {"train": "", "weights": "w-", "model": "model-", "invert": ""}[section]
    return "--" + prefix + name.replace("_", "-")


def _dest(section: str, name: str) -> str:
    return f"{section}__{name}"


def _add_section(parser: argparse.ArgumentParser, section: str, defaults=None):
    """One flag per dataclass field; ``defaults`` (an instance) overrides the help-text defaults."""
    group = parser.add_argument_group(f"{section} settings")
    for f in dataclasses.fields(SECTIONS[section]):
        if f.name in _SKIP[section]:
            continue
        default = f.default if f.default is not dataclasses.MISSING else None
        if defaults is not None:
            default = getattr(defaults, f.name)
        kind = type(default) if default is not None else str
        if kind is bool:
            group.add_argument(_flag(section, f.name), dest=_dest(section, f.name), type=_parse_bool,
                               default=None, metavar="BOOL", help=f"(default {default})")
        else:
            group.add_argument(_flag(section, f.name), dest=_dest(section, f.name), type=kind,
                               default=None, metavar=f.name.upper(), help=f"(default {default})")


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def load_config_file(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise CliError("E_MISSING", EXIT_MISSING, f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise CliError("E_CONFIG", EXIT_CONFIG, f"{p}: invalid JSON ({e.msg} at line {e.lineno})") from e
    if not isinstance(data, dict):
        raise CliError("E_CONFIG", EXIT_CONFIG, f"{p}: top level must be an object")
    unknown = set(data) - set(SECTIONS)
    if unknown:
        raise CliError("E_CONFIG", EXIT_CONFIG, f"{p}: unknown sections {sorted(unknown)}")
    for section, values in data.items():
        if not isinstance(values, dict):
            raise CliError("E_CONFIG", EXIT_CONFIG, f"{p}: section {section!r} must be an object")
        allowed = {f.name for f in dataclasses.fields(SECTIONS[section])} - _SKIP[section]
        bad = set(values) - allowed
        if bad:
            raise CliError("E_CONFIG", EXIT_CONFIG, f"{p}: unknown keys in {section!r}: {sorted(bad)}")
    return data


def resolve_section(args, section: str, file_cfg: dict) -> dict:
    """Merged overrides for one section: flags beat the config file; defaults fill the rest."""
    out = dict(file_cfg.get(section, {}))
    for f in dataclasses.fields(SECTIONS[section]):
        v = getattr(args, _dest(section, f.name), None)
        if v is not None:
            out[f.name] = v
    return out


def _build(cls, values: dict, what: str):
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise CliError("E_CONFIG", EXIT_CONFIG, f"invalid {what} settings: {e}") from e


# ---- shared helpers ------------------------------------------------------------

def _need_file(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError("E_MISSING", EXIT_MISSING, f"{what} not found: {p}")
    return p


def _load_dataset(path):
    p = _need_file(path, "dataset")
    if not (p / "manifest.json").is_file():
        raise CliError("E_MISSING", EXIT_MISSING, f"dataset manifest not found in {p}")
    return synthdata.load_dataset(p)


def _load_ckpt(path) -> trainer.Checkpoint:
    _need_file(path, "checkpoint")
    return trainer.Checkpoint.load(path)


def _codes(args, model) -> AvatarCodes:
    if getattr(args, "codes", None):
        return assets.codes_from_file(_need_file(args.codes, "codes file"))
    cfg = model.config
    if not (0 <= args.subject < cfg.num_subjects and 0 <= args.expression < cfg.num_expressions):
        raise CliError("E_CONFIG", EXIT_CONFIG,
                       f"sample ({args.subject}, {args.expression}) outside the trained "
                       f"{cfg.num_subjects}x{cfg.num_expressions} tables")
    return model.codes_for(args.subject, args.expression)


def _camera(args) -> Camera:
    return Camera.orbit(args.yaw, args.pitch, args.distance, width=args.size, height=args.size)


def _add_code_flags(p):
    p.add_argument("--subject", type=int, default=0, help="training subject whose codes to use")
    p.add_argument("--expression", type=int, default=0, help="training expression whose codes to use")
    p.add_argument("--codes", help="codes .npz (geom, color, expr) instead of a training sample")


def _add_camera_flags(p):
    p.add_argument("--yaw", type=float, default=0.0, help="camera yaw in degrees")
    p.add_argument("--pitch", type=float, default=0.0, help="camera pitch in degrees")
    p.add_argument("--distance", type=float, default=3.0, help="camera distance from the origin")
    p.add_argument("--size", type=int, default=128, help="image width and height in pixels")
    p.add_argument("--texture", help="override texture PNG used instead of the color network")


def _write_json(path, data):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


# ---- commands -------------------------------------------------------------------

def cmd_gen(args) -> None:
    if args.sphere:
        ds = synthdata.sphere_dataset(views_per_sample=args.views, num_points=args.points,
                                      image_size=args.image_size, seed=args.seed,
                                      texture_resolution=args.texture_res)
    else:
        ds = synthdata.make_dataset(args.subjects, args.expressions, args.views, args.seed,
                                    image_size=args.image_size, num_points=args.points,
                                    texture_resolution=args.texture_res)
    synthdata.save_dataset(ds, args.out)
    log.info("wrote %d samples to %s", len(ds), args.out)


def cmd_train(args) -> None:
    file_cfg = load_config_file(args.config)
    ds = _load_dataset(args.data)
    tvals = resolve_section(args, "train", file_cfg)
    tvals["weights"] = _build(losses.LossWeights, resolve_section(args, "weights", file_cfg), "loss weight")
    tvals["threads"] = args.threads
    cfg = _build(trainer.TrainConfig, tvals, "training")
    log_stream = open(args.log, "w") if args.log else sys.stderr
    try:
        if args.stage == 1:
            if args.init:
                raise CliError("E_CONFIG", EXIT_CONFIG, "--init is only used for stage 2")
            mvals = resolve_section(args, "model", file_cfg)
            mc = _build(ModelConfig, {**mvals, "num_subjects": len(ds.subjects),
                                      "num_expressions": ds.config.num_expressions}, "model")
            trainer.train_stage1(ds, cfg, mc, log_stream, args.out, model_seed=args.model_seed)
        else:
            if not args.init:
                raise CliError("E_CONFIG", EXIT_CONFIG, "stage 2 needs --init <stage-1 checkpoint>")
            stage1 = _load_ckpt(args.init)
            if stage1.model.config.num_samples != len(ds):
                raise CliError("E_CONFIG", EXIT_CONFIG, "checkpoint latent tables do not match the dataset")
            trainer.train_stage2(stage1, ds, cfg, log_stream, args.out)
    finally:
        if args.log:
            log_stream.close()


def cmd_render(args) -> None:
    ckpt = _load_ckpt(args.ckpt)
    codes = _codes(args, ckpt.model)
    tex = assets.import_texture(_need_file(args.texture, "texture")) if args.texture else None
    r = render_image(ckpt.model, codes, _camera(args), tex)
    fileio.write_png(args.out, r.image)
    if args.depth_out:
        fileio.write_depth(args.depth_out, r.depth)


def cmd_invert(args) -> None:
    file_cfg = load_config_file(args.config)
    ckpt = _load_ckpt(args.ckpt)
    inp = inversion.InversionInput.load(_need_file(args.input, "inversion input"))
    ivals = resolve_section(args, "invert", file_cfg)
    weights = inversion.default_weights().to_dict()
    weights.update(resolve_section(args, "weights", file_cfg))
    ivals["weights"] = _build(losses.LossWeights, weights, "loss weight")
    opts = _build(inversion.InversionOptions, ivals, "inversion")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "loss_log.txt", "w") as fh:
        res = inversion.invert(ckpt.model, inp, opts, log_stream=fh)
    res.save_codes(out / "codes.npz")
    fileio.write_png(out / "render.png", res.render.image)
    fileio.write_depth(out / "depth.bin", res.render.depth)
    res.camera.save(out / "camera.json")
    tuned = trainer.Checkpoint(res.model, ckpt.config, ckpt.stage, ckpt.step, ckpt.optimizer)
    tuned.save(out / "tuned.ckpt")
    report = {"options": opts.to_dict(),
              "landmark_error": inversion.landmark_error(res.model, res.codes, inp, res.camera)}
    if inp.mask.any():
        report["masked_image_l2"] = metrics.masked_image_l2(res.render.image, inp.image, inp.mask)
        report["ssim"] = metrics.ssim(res.render.image, inp.image)
    _write_json(out / "report.json", report)


def cmd_animate(args) -> None:
    ckpt = _load_ckpt(args.ckpt)
    codes = _codes(args, ckpt.model)
    if args.target_codes:
        target = assets.codes_from_file(_need_file(args.target_codes, "target codes")).expr
    else:
        if not 0 <= args.target_expression < ckpt.model.config.num_expressions:
            raise CliError("E_CONFIG", EXIT_CONFIG, f"target expression {args.target_expression} out of range")
        target = ckpt.model.codes_for(args.subject, args.target_expression).expr
    tex = assets.import_texture(_need_file(args.texture, "texture")) if args.texture else None
    cam = _camera(args)
    times = args.t if args.t else list(np.linspace(0, 1, args.frames))
    out = Path(args.out)
    single = len(times) == 1 and out.suffix == ".png"
    if not single:
        out.mkdir(parents=True, exist_ok=True)
    for k, t in enumerate(times):
        frame = assets.animate_codes(codes, target, float(t))
        r = render_image(ckpt.model, frame, cam, tex)
        fileio.write_png(out if single else out / f"frame_{k:03d}.png", r.image)


def cmd_export(args) -> None:
    ckpt = _load_ckpt(args.ckpt)
    codes = _codes(args, ckpt.model)
    mesh = assets.extract_mesh(ckpt.model, codes, args.resolution, args.bounds)
    if mesh.empty:
        raise CliError("E_EMPTY", EXIT_NUMERIC, "the field has no zero crossing inside the bounds")
    mesh = assets.assign_uvs(mesh, ckpt.model, codes)
    tex = assets.bake_texture(ckpt.model, codes, args.texture_res)
    paths = assets.export_asset(mesh, tex, args.out)
    log.info("wrote %s (%d vertices, %d faces, %d seam faces)", paths["obj"], len(mesh.vertices),
             len(mesh.faces), mesh.seam_faces)


def cmd_eval(args) -> None:
    report = {}
    if args.ckpt:
        ckpt = _load_ckpt(args.ckpt)
        if args.data:
            ds = _load_dataset(args.data)
            if ckpt.model.config.num_samples != len(ds):
                raise CliError("E_CONFIG", EXIT_CONFIG, "checkpoint latent tables do not match the dataset")
            report["correspondence"] = metrics.evaluate_correspondence(ckpt.model, ds)
        if args.cycle_map:
            codes = _codes(args, ckpt.model)
            cmap = metrics.uv_cycle_error_map(ckpt.model, codes, args.cycle_res)
            metrics.write_heatmap(args.cycle_map, cmap)
            report["uv_cycle_map_mean"] = float(cmap.mean())
    if args.pred_image or args.gt_image:
        if not (args.pred_image and args.gt_image):
            raise CliError("E_CONFIG", EXIT_CONFIG, "--pred-image and --gt-image go together")
        a = fileio.read_png(_need_file(args.pred_image, "image"))[:, :, :3]
        b = fileio.read_png(_need_file(args.gt_image, "image"))[:, :, :3]
        report["ssim"] = metrics.ssim(a, b)
        if args.mask:
            m = fileio.read_mask(_need_file(args.mask, "mask"))
            report["masked_image_l2"] = metrics.masked_image_l2(a, b, m)
    if args.pred_depth or args.gt_depth:
        if not (args.pred_depth and args.gt_depth):
            raise CliError("E_CONFIG", EXIT_CONFIG, "--pred-depth and --gt-depth go together")
        a = fileio.read_depth(_need_file(args.pred_depth, "depth"))
        b = fileio.read_depth(_need_file(args.gt_depth, "depth"))
        m = fileio.read_mask(_need_file(args.mask, "mask")) if args.mask else (b > 0)
        report["depth_l1"] = metrics.depth_l1(a, b, m)
        report["depth_rmse"] = metrics.depth_rmse(a, b, m)
    if not report:
        raise CliError("E_CONFIG", EXIT_CONFIG, "nothing to evaluate; see --help")
    text = json.dumps(report, indent=1, sort_keys=True)
    if args.out:
        _write_json(args.out, report)
    print(text)


# ---- parser ------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    """Usage errors are reported on one line like every other failure."""

    def error(self, message):
        self.exit(EXIT_USAGE, f"morphsdf: error[E_USAGE]: {' '.join(message.split())}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="morphsdf", description="Implicit morphable head models.")
    common = _Parser(add_help=False)
    common.add_argument("--verbose", "-v", action="store_true", help="debug logging on stderr")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker threads (default: logical cores); 1 is bit-reproducible")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic head dataset")
    p.add_argument("--subjects", type=int, default=32, help="number of identities")
    p.add_argument("--expressions", type=int, default=8, help="expressions per identity")
    p.add_argument("--views", type=int, default=6, help="rendered views per sample")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--image-size", type=int, default=128, help="view width and height")
    p.add_argument("--points", type=int, default=4096, help="surface samples per sample")
    p.add_argument("--texture-res", type=int, default=256, help="ground-truth texture resolution")
    p.add_argument("--sphere", action="store_true", help="single constant-color sphere instead of heads")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", parents=[common], help="train stage 1 (geometry, uv) or stage 2 (images)")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.add_argument("--stage", type=int, choices=(1, 2), default=1, help="training stage")
    p.add_argument("--init", help="stage-1 checkpoint to continue from (stage 2)")
    p.add_argument("--config", help="JSON config with train/weights/model sections")
    p.add_argument("--model-seed", type=int, help="network init seed (default: --seed)")
    p.add_argument("--log", help="write loss lines here instead of stderr")
    _add_section(p, "train")
    _add_section(p, "weights")
    _add_section(p, "model")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", parents=[common], help="render a sample from a checkpoint")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--out", required=True, help="output PNG")
    p.add_argument("--depth-out", help="also write the depth map (binary float array)")
    _add_code_flags(p)
    _add_camera_flags(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("invert", parents=[common], help="fit codes (and fine-tune weights) to one image")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--input", required=True, help="input folder (image.png, mask.png, camera.json, landmarks.json)")
    p.add_argument("--out", required=True, help="output folder")
    p.add_argument("--config", help="JSON config with invert/weights sections")
    _add_section(p, "invert")
    _add_section(p, "weights", inversion.default_weights())
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("animate", parents=[common], help="blend expression codes and render frames")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--out", required=True, help="output PNG (one --t) or frame directory")
    p.add_argument("--target-expression", type=int, default=0, help="training expression to blend toward")
    p.add_argument("--target-codes", help="codes .npz whose expression code is the blend target")
    p.add_argument("--t", type=float, action="append", help="blend weight; repeatable")
    p.add_argument("--frames", type=int, default=5, help="evenly spaced frames when no --t is given")
    _add_code_flags(p)
    _add_camera_flags(p)
    p.set_defaults(func=cmd_animate)

    p = sub.add_parser("export", parents=[common], help="extract a textured mesh (OBJ + MTL + PNG)")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--out", required=True, help="output path prefix")
    p.add_argument("--resolution", type=int, default=128, help="marching cubes grid resolution")
    p.add_argument("--bounds", type=float, default=1.5, help="half extent of the grid cube")
    p.add_argument("--texture-res", type=int, default=512, help="baked texture resolution")
    _add_code_flags(p)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("eval", parents=[common], help="metrics for checkpoints, images and depth maps")
    p.add_argument("--ckpt", help="checkpoint path")
    p.add_argument("--data", help="dataset for correspondence metrics")
    p.add_argument("--cycle-map", help="write the uv cycle error heatmap PNG here")
    p.add_argument("--cycle-res", type=int, default=128, help="cycle heatmap resolution")
    p.add_argument("--pred-image", help="predicted image PNG")
    p.add_argument("--gt-image", help="reference image PNG")
    p.add_argument("--mask", help="mask PNG for masked metrics")
    p.add_argument("--pred-depth", help="predicted depth map (binary float array)")
    p.add_argument("--gt-depth", help="reference depth map (binary float array)")
    p.add_argument("--out", help="also write the JSON report here")
    _add_code_flags(p)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        args.func(args)
    except CliError as e:
        return _fail(e.code, e.status, str(e))
    except CheckpointError as e:
        return _fail("E_CHECKPOINT", EXIT_CHECKPOINT, str(e))
    except losses.NonFiniteLoss as e:
        return _fail("E_NUMERIC", EXIT_NUMERIC, str(e))
    except FileNotFoundError as e:
        return _fail("E_MISSING", EXIT_MISSING, str(e))
    except (ValueError, KeyError, json.JSONDecodeError) as e:
        return _fail("E_INPUT", EXIT_CONFIG, str(e))
    except Exception as e:  # noqa: BLE001 - last-resort single-line report
        log.debug("internal error", exc_info=True)
        return _fail("E_INTERNAL", EXIT_INTERNAL, f"{type(e).__name__}: {e}")
    return EXIT_OK


def _fail(code: str, status: int, message: str) -> int:
    msg = " ".join(message.split())
    print(f"morphsdf: error[{code}]: {msg}", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
