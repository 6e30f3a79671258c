"""Command-line front end.

Subcommands: render, prefilter, decompose, recover, bake-uv, metrics,
scheduler-dump. Every subcommand takes --config pointing at a JSON file
whose keys are argument names; explicit command-line flags win over
config values, config values win over builtin defaults. Commands that
write artifacts emit a manifest.json with role-tagged, hashed entries
plus an invocation.json recording the seed and thread count.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .envlight import EnvMap, EnvError, build_prefiltered, load_prefiltered, save_prefiltered
from .image import ImageError, ImageF, read_pfm, read_png, write_pfm, write_png
from .losses import LossError, l1_loss, psnr, ssi_loss, ssim
from .mesh import MeshError, load_mesh
from .pipeline import (
    PipelineError,
    RecoverConfig,
    _sha256,
    decompose_object,
    gradient_decomposer,
    oracle_decomposer,
    sample_uv_texture,
    six_view_cameras,
)
from .raster import rasterize_gbuffer
from .scheduler import NoiseSchedule, SchedulerError, SpacingMode, make_timesteps
from .shading import render_view
from .uvspace import UvError, bake_uv_geometry

_ERRORS = (PipelineError, SchedulerError, UvError, EnvError, ImageError,
           MeshError, LossError, OSError, ValueError)


def _read_texture(path, srgb: bool) -> np.ndarray:
    p = Path(path)
    if p.suffix.lower() == ".pfm":
        img = read_pfm(p)
    elif p.suffix.lower() == ".png":
        img = read_png(p, apply_srgb=srgb)
    else:
        raise ValueError(f"unsupported texture format {p.suffix!r} (want .pfm or .png)")
    if img.channels == 1:
        img = img.expand3()
    data = img.data
    if data.shape[0] != data.shape[1]:
        raise ValueError(f"texture must be square, got {data.shape[:2]}")
    return data


def _read_image(path) -> np.ndarray:
    p = Path(path)
    if p.suffix.lower() == ".pfm":
        return read_pfm(p).data
    if p.suffix.lower() == ".png":
        # raw stored values; metrics compare what is in the file
        return read_png(p, apply_srgb=False).data
    raise ValueError(f"unsupported image format {p.suffix!r} (want .pfm or .png)")


def _load_env(path):
    p = Path(path)
    if p.is_dir():
        return load_prefiltered(p)
    return build_prefiltered(EnvMap(read_pfm(p)))


def _write_manifest(out_dir: Path, entries: list) -> None:
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as f:
        json.dump({"artifacts": entries}, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_invocation(out_dir: Path, args) -> None:
    meta = {"command": args.command, "seed": args.seed,
            "threads": getattr(args, "threads", 1)}
    with open(out_dir / "invocation.json", "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")


def _emit(payload: dict, out) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    print(text)
    if out is not None:
        d = Path(out)
        d.mkdir(parents=True, exist_ok=True)
        (d / "output.json").write_text(text + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommand bodies

def _cmd_scheduler_dump(args) -> int:
    schedule = NoiseSchedule(t_train=args.t_train, beta_start=args.beta_start,
                             beta_end=args.beta_end, kind=args.beta_kind)
    spacing = SpacingMode(kind=args.spacing, n_steps=args.n_steps,
                          steps_offset=args.offset)
    steps = make_timesteps(args.t_train, spacing)
    payload = {
        "t_train": args.t_train,
        "spacing": args.spacing,
        "n_steps": args.n_steps,
        "steps_offset": args.offset,
        "timesteps": [int(t) for t in steps],
        "alpha_bars": [float(schedule.alpha_bar(int(t))) for t in steps],
    }
    _emit(payload, args.out)
    return 0


def _metric_block(a: np.ndarray, b: np.ndarray) -> dict:
    block = {"psnr": psnr(a, b), "ssim": ssim(a, b), "l1": l1_loss(a, b)}
    try:
        block["ssi"] = ssi_loss(a, b)
    except LossError:
        block["ssi"] = None
    return block


def _cmd_metrics(args) -> int:
    pa, pb = Path(args.a), Path(args.b)
    if pa.is_dir() != pb.is_dir():
        raise ValueError("metrics needs two files or two directories")
    if pa.is_dir():
        names = sorted(
            {f.name for f in pa.iterdir() if f.suffix.lower() in (".pfm", ".png")}
            & {f.name for f in pb.iterdir()})
        if not names:
            raise ValueError("no common image names between the two directories")
        pairs = {n: _metric_block(_read_image(pa / n), _read_image(pb / n))
                 for n in names}
        keys = ("psnr", "ssim", "l1")
        payload = {"pairs": pairs,
                   "mean": {k: float(np.mean([p[k] for p in pairs.values()]))
                            for k in keys}}
    else:
        payload = _metric_block(_read_image(pa), _read_image(pb))
    _emit(payload, args.out)
    return 0


def _cmd_prefilter(args) -> int:
    env = EnvMap(read_pfm(args.env))
    pre = build_prefiltered(env, n_mips=args.mips,
                            samples_per_texel=args.samples,
                            base_height=args.base_height,
                            irradiance_height=args.irradiance_height,
                            lut_resolution=args.lut_resolution,
                            lut_samples=args.lut_samples)
    out = Path(args.out)
    save_prefiltered(out, pre)
    _write_invocation(out, args)
    print(f"prefiltered environment written to {out}")
    return 0


def _cmd_render(args) -> int:
    mesh = load_mesh(args.mesh)
    albedo = _read_texture(args.albedo, srgb=True)
    rm = _read_texture(args.rm, srgb=False)
    pre = _load_env(args.env)
    cams = six_view_cameras(mesh, mode=args.mode, resolution=args.resolution)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, cam in enumerate(cams):
        gbuf = rasterize_gbuffer(mesh, cam, threads=args.threads)
        img = render_view(gbuf, ImageF(sample_uv_texture(albedo, gbuf)),
                          ImageF(sample_uv_texture(rm, gbuf)), pre, cam,
                          threads=args.threads)
        for name, writer in ((f"view_{i}.pfm", write_pfm),
                             (f"view_{i}.png",
                              lambda p, im: write_png(p, np.clip(im.data, 0.0, 1.0)))):
            writer(out / name, img)
            entries.append({"path": name, "role": "render",
                            "sha256": _sha256(out / name)})
    _write_manifest(out, entries)
    _write_invocation(out, args)
    print(f"6 views rendered to {out}")
    return 0


def _cmd_bake_uv(args) -> int:
    mesh = load_mesh(args.mesh)
    atlas = bake_uv_geometry(mesh, args.atlas_res)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_pfm(out / "position.pfm", atlas.position)
    write_png(out / "validity.png", atlas.validity, apply_srgb=False)
    entries = [
        {"path": "position.pfm", "role": "position",
         "sha256": _sha256(out / "position.pfm")},
        {"path": "validity.png", "role": "mask",
         "sha256": _sha256(out / "validity.png")},
    ]
    _write_manifest(out, entries)
    _write_invocation(out, args)
    print(f"atlas geometry baked to {out}"
          f" (valid texels: {int(atlas.validity.sum())}, overlaps: {atlas.n_overlap})")
    return 0


def _run_decompose(args, decomposer, envs=None, albedo=None, rm=None) -> int:
    out = Path(args.out)
    result = decompose_object(
        args.mesh, decomposer, albedo_tex=albedo, rm_tex=rm, envs=envs,
        atlas_res=args.atlas_res, view_res=args.view_res, mode=args.mode,
        threads=args.threads, debias=args.debias, min_cos=args.min_cos,
        out_dir=out)
    _write_invocation(out, args)
    rep = result.report
    print(f"decomposition written to {out}")
    print(f"coverage {rep.coverage:.3f}, flags {rep.flags or 'none'}")
    return 0


def _cmd_decompose(args) -> int:
    albedo = _read_texture(args.albedo, srgb=True)
    rm = _read_texture(args.rm, srgb=False)
    return _run_decompose(args, oracle_decomposer(albedo, rm),
                          albedo=albedo, rm=rm)


def _cmd_recover(args) -> int:
    albedo = _read_texture(args.albedo, srgb=True)
    rm = _read_texture(args.rm, srgb=False)
    envs = [_load_env(p) for p in args.env]
    config = RecoverConfig(max_iters=args.iters, step=args.step,
                           loss_kind=args.loss, tol=args.tol)
    return _run_decompose(args, gradient_decomposer(envs, config),
                          envs=envs, albedo=albedo, rm=rm)


# ---------------------------------------------------------------------------
# parser

def _add_common(sub, with_threads=True, out_required=False):
    sub.add_argument("--config", help="JSON file of argument defaults")
    sub.add_argument("--out", required=out_required, help="output directory")
    sub.add_argument("--seed", type=int, default=0,
                     help="run seed, recorded in output metadata")
    if with_threads:
        sub.add_argument("--threads", type=int, default=1)


def _add_scene_args(sub):
    sub.add_argument("--mesh", required=True, help="OBJ mesh with UVs")
    sub.add_argument("--albedo", required=True, help="ground-truth albedo texture")
    sub.add_argument("--rm", required=True, help="ground-truth RM texture")


def _add_pipeline_args(sub):
    sub.add_argument("--atlas-res", type=int, default=256)
    sub.add_argument("--view-res", type=int, default=256)
    sub.add_argument("--mode", choices=("ortho", "persp"), default="ortho")
    sub.add_argument("--debias", action="store_true",
                     help="replace the eps-biased blend with the exact average")
    sub.add_argument("--min-cos", type=float, default=None,
                     help="drop grazing samples below this view cosine")


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(
        prog="matforge",
        description="Material decomposition toolkit: split-sum rendering, "
                    "multi-view UV baking, and inverse material recovery.")
    subs = parser.add_subparsers(dest="command", required=True)
    registry = {}

    p = subs.add_parser("render", help="render six axis views of a textured mesh")
    _add_scene_args(p)
    p.add_argument("--env", required=True,
                   help="prefiltered environment directory or equirect .pfm")
    p.add_argument("--resolution", type=int, default=256)
    p.add_argument("--mode", choices=("ortho", "persp"), default="ortho")
    _add_common(p, out_required=True)
    p.set_defaults(func=_cmd_render)
    registry["render"] = p

    p = subs.add_parser("prefilter", help="precompute split-sum environment products")
    p.add_argument("--env", required=True, help="equirect radiance .pfm")
    p.add_argument("--mips", type=int, default=6)
    p.add_argument("--samples", type=int, default=128)
    p.add_argument("--base-height", type=int, default=128)
    p.add_argument("--irradiance-height", type=int, default=16)
    p.add_argument("--lut-resolution", type=int, default=64)
    p.add_argument("--lut-samples", type=int, default=1024)
    _add_common(p, with_threads=False, out_required=True)
    p.set_defaults(func=_cmd_prefilter)
    registry["prefilter"] = p

    p = subs.add_parser("decompose",
                        help="run the six-view pipeline with the oracle decomposer")
    _add_scene_args(p)
    _add_pipeline_args(p)
    _add_common(p, out_required=True)
    p.set_defaults(func=_cmd_decompose)
    registry["decompose"] = p

    p = subs.add_parser("recover",
                        help="run the pipeline with gradient-descent material recovery")
    _add_scene_args(p)
    _add_pipeline_args(p)
    p.add_argument("--env", required=True, action="append",
                   help="prefiltered environment directory or .pfm (repeatable)")
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--step", type=float, default=0.1)
    p.add_argument("--loss", choices=("l1", "perceptual", "rerender-composite"),
                   default="l1")
    p.add_argument("--tol", type=float, default=0.0)
    _add_common(p, out_required=True)
    p.set_defaults(func=_cmd_recover)
    registry["recover"] = p

    p = subs.add_parser("bake-uv", help="bake UV atlas positions and validity")
    p.add_argument("--mesh", required=True)
    p.add_argument("--atlas-res", type=int, default=256)
    _add_common(p, with_threads=False, out_required=True)
    p.set_defaults(func=_cmd_bake_uv)
    registry["bake-uv"] = p

    p = subs.add_parser("metrics", help="PSNR/SSIM/L1/SSI between images or directories")
    p.add_argument("a")
    p.add_argument("b")
    _add_common(p, with_threads=False)
    p.set_defaults(func=_cmd_metrics)
    registry["metrics"] = p

    p = subs.add_parser("scheduler-dump",
                        help="print inference timesteps and their alpha-bar values")
    p.add_argument("--t-train", type=int, default=1000)
    p.add_argument("--n-steps", type=int, default=1)
    p.add_argument("--spacing", choices=("leading", "trailing"), default="trailing")
    p.add_argument("--offset", type=int, default=0)
    p.add_argument("--beta-start", type=float, default=0.00085)
    p.add_argument("--beta-end", type=float, default=0.012)
    p.add_argument("--beta-kind", choices=("linear", "scaled_linear"),
                   default="scaled_linear")
    _add_common(p, with_threads=False)
    p.set_defaults(func=_cmd_scheduler_dump)
    registry["scheduler-dump"] = p

    return parser, registry


def main(argv=None) -> int:
    parser, registry = build_parser()
    args = parser.parse_args(argv)
    if args.config is not None:
        with open(args.config, "r", encoding="utf-8") as f:
            cfg = json.load(f)
        if not isinstance(cfg, dict):
            print("error: config file must hold a JSON object", file=sys.stderr)
            return 1
        sub = registry[args.command]
        known = {a.dest for a in sub._actions}
        bad = sorted(set(cfg) - known)
        if bad:
            print(f"error: unknown config keys {bad}", file=sys.stderr)
            return 1
        sub.set_defaults(**cfg)
        args = parser.parse_args(argv)  # explicit flags still win
    try:
        return args.func(args)
    except _ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
