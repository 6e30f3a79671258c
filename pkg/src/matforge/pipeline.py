"""Six-view material decomposition pipeline.

decompose_object runs the fixed stage ladder

    bake -> render -> decompose -> backproject -> blend -> refine -> write

with exactly one decomposer batch call and exactly two refinement calls
(albedo, then RM). Decomposers are pluggable: an oracle that rasterizes
known ground-truth textures, a per-pixel gradient-descent recoverer that
inverts the shading model under known lighting, and an adapter for
one-shot latent models following the zero-latent call convention.
"""

from __future__ import annotations

import hashlib
import json
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import Camera
from .envlight import PrefilteredEnv
from .features import FeatureStack, identity_stack
from .image import ImageF, bilinear_sample, write_pfm, write_png
from .losses import perceptual_loss, perceptual_loss_grad, psnr, ssim
from .mesh import TriMesh, load_mesh
from .raster import GBuffer, rasterize_gbuffer
from .scheduler import NoiseSchedule, single_step_infer
from .shading import MaterialSample, render_view, shade, shade_grad
from .uvspace import (
    RefineRequest,
    backproject_view,
    bake_uv_geometry,
    blend_views,
    missing_fraction,
    refine_uv,
)

MISSING_AREA_FLAG = "uv-missing-area-over-50pct"
ROUGHNESS_FLAG = "roughness-non-identifiable"


class PipelineError(RuntimeError):
    """Stage-tagged failure; the original exception rides along as __cause__."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class RecoverConfig:
    """Gradient-descent recovery settings.

    loss_kind "l1" minimizes the mean absolute error per pixel (each
    pixel is an independent problem); "perceptual" pushes the feature-loss
    gradient through the shading derivatives; "rerender-composite" adds
    both. Updates use the Adam per-parameter rule with the learning rate
    decaying as step/sqrt(1 + t/4); the adaptive scaling is what lets the
    weakly-scaled roughness/metallic channels keep pace with albedo.
    """

    max_iters: int = 500
    step: float = 0.1
    loss_kind: str = "l1"
    n_lights: int | None = None
    tol: float = 0.0
    stack: FeatureStack | None = None

    def __post_init__(self):
        if self.max_iters < 0:
            raise PipelineError("config", f"max_iters must be >= 0, got {self.max_iters}")
        if self.step <= 0:
            raise PipelineError("config", f"step must be positive, got {self.step}")
        if self.loss_kind not in ("l1", "perceptual", "rerender-composite"):
            raise PipelineError("config", f"unknown loss kind {self.loss_kind!r}")
        if self.tol < 0:
            raise PipelineError("config", "tol must be >= 0")


@dataclass
class RecoveryInfo:
    n_iters: int
    final_loss: float
    converged: bool
    flags: list[str] = field(default_factory=list)


@dataclass
class PipelineReport:
    stage_times: dict = field(default_factory=dict)
    coverage: float = 0.0
    per_view: list = field(default_factory=list)
    n_decompose_calls: int = 0
    n_refine_calls: int = 0
    flags: list = field(default_factory=list)
    metrics: dict | None = None

    def validate(self):
        if any(t < 0 for t in self.stage_times.values()):
            raise PipelineError("report", "negative stage time")
        if not 0.0 <= self.coverage <= 1.0:
            raise PipelineError("report", f"coverage {self.coverage} outside [0, 1]")

    def to_dict(self) -> dict:
        return {
            "stage_times": {k: float(v) for k, v in self.stage_times.items()},
            "coverage": float(self.coverage),
            "per_view": self.per_view,
            "n_decompose_calls": self.n_decompose_calls,
            "n_refine_calls": self.n_refine_calls,
            "flags": list(self.flags),
            "metrics": self.metrics,
        }


@dataclass
class DecomposeResult:
    albedo: np.ndarray  # (R, R, 3) completed UV albedo
    rm: np.ndarray      # (R, R, 3) completed UV roughness/metallic
    atlas: object       # UvAtlas with c_d/c_rm/m attached
    report: PipelineReport
    files: list = field(default_factory=list)  # manifest entries when written


# ---------------------------------------------------------------------------
# Cameras

_AXES = [
    ((1, 0, 0), (0, 1, 0)),
    ((-1, 0, 0), (0, 1, 0)),
    ((0, 1, 0), (0, 0, 1)),   # looking along +-Y, world up is degenerate
    ((0, -1, 0), (0, 0, 1)),
    ((0, 0, 1), (0, 1, 0)),
    ((0, 0, -1), (0, 1, 0)),
]


def six_view_cameras(mesh: TriMesh, mode: str = "ortho", resolution: int = 512) -> list[Camera]:
    """Axis-aligned cameras on the bounding sphere: +X -X +Y -Y +Z -Z.

    Each view frames the sphere with a 5% margin (ortho extent 1.05 * r);
    up is world +Y except for the +-Y views, which use +Z.
    """
    center, radius = mesh.bounding_sphere()
    if radius <= 0:
        raise PipelineError("cameras", "mesh bounding sphere is degenerate (radius 0)")
    cams = []
    for axis, up in _AXES:
        axis = np.asarray(axis, dtype=np.float64)
        if mode == "ortho":
            cams.append(Camera(
                mode="ortho", position=center + 2.0 * radius * axis,
                target=center, up=up, width=resolution, height=resolution,
                extent=1.05 * radius,
            ))
        elif mode == "persp":
            dist = 3.0 * radius
            fov = 2.0 * np.degrees(np.arctan(1.05 * radius / dist))
            cams.append(Camera(
                mode="persp", position=center + dist * axis,
                target=center, up=up, width=resolution, height=resolution,
                fov_y=fov,
            ))
        else:
            raise PipelineError("cameras", f"unknown camera mode {mode!r}")
    return cams


# ---------------------------------------------------------------------------
# Decomposers. Call convention (the batch interface):
#     decomposer(cond, gbufs, cameras) -> list of (albedo, rm) per view
# cond is one image stack per view: the conditioning RGB renders,
# channel-concatenated when there are several lighting conditions.

def sample_uv_texture(texture: np.ndarray, gbuf: GBuffer) -> np.ndarray:
    """Texture lookup at the g-buffer's uv coordinates (zero off-mask)."""
    r = texture.shape[0]
    x = gbuf.uv[..., 0] * r - 0.5
    y = (1.0 - gbuf.uv[..., 1]) * r - 0.5
    vals = bilinear_sample(texture, x, y)
    return vals * (gbuf.mask > 0)[..., None]


def oracle_decomposer(albedo_tex: np.ndarray, rm_tex: np.ndarray):
    """Perfect decomposer: rasterizes the known ground-truth UV textures."""

    def decompose(cond, gbufs, cameras):
        return [
            (sample_uv_texture(albedo_tex, g), sample_uv_texture(rm_tex, g))
            for g in gbufs
        ]

    return decompose


def single_step_decomposer(model, schedule: NoiseSchedule | None = None, kind: str = "v"):
    """Adapter for one-shot latent models.

    Each view's conditioning stack goes through the zero-latent final-
    timestep call; the 6-channel prediction splits into albedo + RM and is
    clamped to [0, 1].
    """
    sched = schedule if schedule is not None else NoiseSchedule()

    def decompose(cond, gbufs, cameras):
        outs = []
        for view_cond in cond:
            x0 = single_step_infer(model, view_cond, sched, kind=kind, out_channels=6)
            outs.append((np.clip(x0[..., :3], 0.0, 1.0),
                         np.clip(x0[..., 3:], 0.0, 1.0)))
        return outs

    return decompose


def recover_materials(
    observations: list[np.ndarray],
    gbuf: GBuffer,
    camera: Camera,
    pre_list: list[PrefilteredEnv],
    config: RecoverConfig | None = None,
) -> tuple[np.ndarray, np.ndarray, RecoveryInfo]:
    """Invert the shading model per pixel by projected gradient descent.

    observations[i] is the view rendered (or photographed) under
    pre_list[i]. Starts every covered pixel at albedo 0.5, metallic 0.2,
    roughness 0.5 and descends the configured loss with Adam-scaled
    analytic gradients, clamping to [0, 1] after each step. Roughness is
    reported non-identifiable when the lighting carries no angular
    variation: the prefiltered-chain part of the roughness derivative is
    then zero everywhere, so the data cannot pin r (only the
    Fresnel-table slope remains, which is light-independent).
    """
    cfg = config if config is not None else RecoverConfig()
    if not pre_list:
        raise PipelineError("recover", "need at least one lighting environment")
    if len(observations) != len(pre_list):
        raise PipelineError(
            "recover",
            f"{len(observations)} observations for {len(pre_list)} environments",
        )
    if cfg.n_lights is not None and cfg.n_lights != len(pre_list):
        raise PipelineError(
            "recover", f"config expects {cfg.n_lights} lights, got {len(pre_list)}")
    h, w = gbuf.mask.shape
    for ob in observations:
        if ob.shape != (h, w, 3):
            raise PipelineError("recover", f"observation shape {ob.shape} != ({h}, {w}, 3)")

    albedo = np.zeros((h, w, 3))
    rm = np.zeros((h, w, 3))
    sel = gbuf.mask > 0
    n_px = int(sel.sum())
    if n_px == 0:
        return albedo, rm, RecoveryInfo(0, 0.0, True)

    nrm = gbuf.normal[sel]
    pos = gbuf.position[sel]
    cpos = np.asarray(camera.position, dtype=np.float64)
    obs = [ob[sel] for ob in observations]
    stack = cfg.stack if cfg.stack is not None else identity_stack(3)

    a = np.full((n_px, 3), 0.5)
    m = np.full(n_px, 0.2)
    r = np.full(n_px, 0.5)
    eye = np.arange(3)

    # identifiability probe at the starting point
    chain_mag = 0.0
    total_mag = 0.0
    for pre in pre_list:
        g0 = shade_grad(MaterialSample(a, m, r), nrm, pos, cpos, pre)
        chain_mag = max(chain_mag, float(np.abs(g0.dr_chain).max()))
        total_mag = max(total_mag, float(np.abs(g0.dr).max()))
    flags = []
    if chain_mag < 1e-6 * max(total_mag, 1e-12):
        flags.append(ROUGHNESS_FLAG)

    use_l1 = cfg.loss_kind in ("l1", "rerender-composite")
    use_perc = cfg.loss_kind in ("perceptual", "rerender-composite")
    denom = n_px * 3 * len(pre_list)

    b1, b2, adam_eps = 0.9, 0.999, 1e-8
    mom = [np.zeros((n_px, 3)), np.zeros(n_px), np.zeros(n_px)]
    vel = [np.zeros((n_px, 3)), np.zeros(n_px), np.zeros(n_px)]

    loss_prev = None
    loss_val = 0.0
    it = 0
    converged = False
    for it in range(cfg.max_iters):
        loss = 0.0
        ga = np.zeros((n_px, 3))
        gm = np.zeros(n_px)
        gr = np.zeros(n_px)
        for pre, ob, ob_img in zip(pre_list, obs, observations):
            sample = MaterialSample(a, m, r)
            val = shade(sample, nrm, pos, cpos, pre)
            g = shade_grad(sample, nrm, pos, cpos, pre)
            dout = np.zeros((n_px, 3))
            if use_l1:
                diff = val - ob
                loss += float(np.abs(diff).sum()) / denom
                dout += np.sign(diff) / denom
            if use_perc:
                pred_img = np.zeros((h, w, 3))
                pred_img[sel] = val
                loss += perceptual_loss(pred_img, ob_img, stack) / len(pre_list)
                dimg = perceptual_loss_grad(pred_img, ob_img, stack)
                dout += dimg[sel] / len(pre_list)
            ga += dout * g.da[:, eye, eye]
            gm += np.sum(dout * g.dm, axis=-1)
            gr += np.sum(dout * g.dr, axis=-1)
        if not np.isfinite(loss):
            raise PipelineError(
                "recover", f"non-finite loss at iteration {it}; check inputs")
        loss_val = loss
        if loss_prev is not None and abs(loss_prev - loss) < cfg.tol:
            converged = True
            break
        loss_prev = loss
        lr = cfg.step / np.sqrt(1.0 + it / 4.0)
        new = []
        for k, (grad, x) in enumerate(zip((ga, gm, gr), (a, m, r))):
            mom[k] = b1 * mom[k] + (1 - b1) * grad
            vel[k] = b2 * vel[k] + (1 - b2) * grad * grad
            mhat = mom[k] / (1.0 - b1 ** (it + 1))
            vhat = vel[k] / (1.0 - b2 ** (it + 1))
            new.append(np.clip(x - lr * mhat / (np.sqrt(vhat) + adam_eps), 0.0, 1.0))
        a, m, r = new

    albedo[sel] = a
    rm[..., 0][sel] = r
    rm[..., 1][sel] = m
    n_done = 0 if cfg.max_iters == 0 else it + 1
    return albedo, rm, RecoveryInfo(n_done, loss_val, converged, flags)


class GradientDecomposer:
    """Decomposer that recovers materials by inverse rendering.

    Expects each view's conditioning stack to hold the observations under
    every configured environment, channel-concatenated in order. Geometry
    arrives through the batch call's g-buffers.
    """

    def __init__(self, pre_list: list[PrefilteredEnv], config: RecoverConfig | None = None):
        if not pre_list:
            raise PipelineError("recover", "need at least one lighting environment")
        self.pre_list = list(pre_list)
        self.config = config if config is not None else RecoverConfig()
        self.last_infos: list[RecoveryInfo] = []

    def __call__(self, cond, gbufs, cameras):
        k = len(self.pre_list)
        outs = []
        self.last_infos = []
        for view_cond, gbuf, cam in zip(cond, gbufs, cameras):
            if view_cond.shape[-1] != 3 * k:
                raise PipelineError(
                    "recover",
                    f"conditioning stack has {view_cond.shape[-1]} channels, "
                    f"expected {3 * k} for {k} environments",
                )
            observations = [view_cond[..., 3 * i: 3 * i + 3] for i in range(k)]
            albedo, rm, info = recover_materials(
                observations, gbuf, cam, self.pre_list, self.config)
            self.last_infos.append(info)
            outs.append((albedo, rm))
        return outs


def gradient_decomposer(pre_list, config: RecoverConfig | None = None) -> GradientDecomposer:
    return GradientDecomposer(pre_list, config)


# ---------------------------------------------------------------------------
# Orchestration

@contextmanager
def _stage(report: PipelineReport, name: str):
    t0 = time.perf_counter()
    try:
        yield
    except PipelineError:
        raise
    except Exception as e:
        raise PipelineError(name, f"{type(e).__name__}: {e}") from e
    finally:
        report.stage_times[name] = report.stage_times.get(name, 0.0) \
            + time.perf_counter() - t0


def _render_conditioning(gbufs, cameras, albedo_tex, rm_tex, envs, threads):
    cond = []
    for gbuf, cam in zip(gbufs, cameras):
        alb = ImageF(sample_uv_texture(albedo_tex, gbuf))
        rmm = ImageF(sample_uv_texture(rm_tex, gbuf))
        layers = [render_view(gbuf, alb, rmm, pre, cam, threads=threads).data
                  for pre in envs]
        cond.append(np.concatenate(layers, axis=-1))
    return cond


def decompose_object(
    mesh,
    decomposer,
    *,
    albedo_tex: np.ndarray | None = None,
    rm_tex: np.ndarray | None = None,
    views: list[np.ndarray] | None = None,
    envs=None,
    atlas_res: int = 256,
    view_res: int = 256,
    mode: str = "ortho",
    threads: int = 1,
    debias: bool = False,
    min_cos: float | None = None,
    out_dir=None,
) -> DecomposeResult:
    """Run the six-view decomposition ladder over one object.

    Conditioning views come from `views` when given; otherwise they are
    rendered from the ground-truth textures under `envs` (one RGB layer
    per environment, channel-concatenated); with neither, decomposers
    that ignore conditioning receive zero stacks. Pass a path as `mesh`
    to load inside the pipeline (a mesh without UVs then fails at the
    bake stage). `min_cos` drops grazing and backfacing samples during
    backprojection; image-space material estimates are unreliable at
    grazing incidence, so ~0.2-0.5 helps view-dependent decomposers.
    When `out_dir` is set the completed maps, report, and a role-tagged
    manifest are written there.
    """
    report = PipelineReport()

    with _stage(report, "bake"):
        if not isinstance(mesh, TriMesh):
            mesh = load_mesh(mesh)
        atlas = bake_uv_geometry(mesh, atlas_res)

    with _stage(report, "render"):
        cameras = six_view_cameras(mesh, mode=mode, resolution=view_res)
        gbufs = [rasterize_gbuffer(mesh, cam, threads=threads) for cam in cameras]
        if views is not None:
            if len(views) != len(cameras):
                raise PipelineError(
                    "render", f"got {len(views)} views for {len(cameras)} cameras")
            cond = [np.asarray(v, dtype=np.float64) for v in views]
            for v in cond:
                if v.shape[:2] != (view_res, view_res):
                    raise PipelineError(
                        "render", f"view resolution {v.shape[:2]} != {(view_res, view_res)}")
        elif envs is not None:
            if albedo_tex is None or rm_tex is None:
                raise PipelineError(
                    "render", "rendering conditioning views needs ground-truth textures")
            env_list = envs if isinstance(envs, (list, tuple)) else [envs]
            cond = _render_conditioning(gbufs, cameras, albedo_tex, rm_tex,
                                        env_list, threads)
        else:
            cond = [np.zeros((view_res, view_res, 3)) for _ in cameras]

    with _stage(report, "decompose"):
        outputs = decomposer(cond, gbufs, cameras)
        report.n_decompose_calls += 1
        if len(outputs) != len(cameras):
            raise PipelineError(
                "decompose", f"decomposer returned {len(outputs)} views, expected {len(cameras)}")
        for i, (alb, rmm) in enumerate(outputs):
            if alb.shape != (view_res, view_res, 3) or rmm.shape != (view_res, view_res, 3):
                raise PipelineError("decompose", f"view {i} maps have wrong resolution")
            if alb.min() < -1e-9 or alb.max() > 1 + 1e-9 \
                    or rmm.min() < -1e-9 or rmm.max() > 1 + 1e-9:
                raise PipelineError("decompose", f"view {i} maps leave [0, 1]")
            mask = gbufs[i].mask > 0
            report.per_view.append({
                "view": i,
                "visible_px": int(mask.sum()),
                "mean_albedo": float(alb[mask].mean()) if mask.any() else 0.0,
                "mean_rm": float(rmm[mask].mean()) if mask.any() else 0.0,
            })
        for info in getattr(decomposer, "last_infos", []):
            for flag in info.flags:
                if flag not in report.flags:
                    report.flags.append(flag)

    with _stage(report, "backproject"):
        partials = [
            backproject_view(atlas, gbuf, cam, alb, rmm, min_cos=min_cos)
            for gbuf, cam, (alb, rmm) in zip(gbufs, cameras, outputs)
        ]

    with _stage(report, "blend"):
        c_d, c_rm, m = blend_views(partials, debias=debias)
        atlas.c_d, atlas.c_rm, atlas.m = c_d, c_rm, m
        atlas.partials = partials
        missing = missing_fraction(m, atlas.validity)
        report.coverage = 1.0 - missing
        if missing > 0.5:
            report.flags.append(MISSING_AREA_FLAG)

    with _stage(report, "refine"):
        covered = ((m > 0) & (atlas.validity > 0)).astype(np.float64)
        albedo_uv = refine_uv(RefineRequest(c_d, covered, atlas.position))
        report.n_refine_calls += 1
        rm_uv = refine_uv(RefineRequest(c_rm, covered, atlas.position))
        report.n_refine_calls += 1

    report.validate()
    result = DecomposeResult(albedo=albedo_uv, rm=rm_uv, atlas=atlas, report=report)
    if out_dir is not None:
        with _stage(report, "write"):
            result.files = _write_outputs(out_dir, result, covered)
    return result


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_outputs(out_dir, result: DecomposeResult, covered: np.ndarray) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data_files = [
        ("albedo.pfm", "albedo", lambda p: write_pfm(p, result.albedo)),
        ("albedo.png", "albedo",
         lambda p: write_png(p, np.clip(result.albedo, 0.0, 1.0))),
        ("rm.pfm", "rm", lambda p: write_pfm(p, result.rm)),
        ("rm.png", "rm",
         lambda p: write_png(p, np.clip(result.rm, 0.0, 1.0), apply_srgb=False)),
        ("mask.png", "mask", lambda p: write_png(p, covered, apply_srgb=False)),
        ("position.pfm", "position", lambda p: write_pfm(p, result.atlas.position)),
    ]
    entries = []
    for name, role, writer in data_files:
        path = out / name
        writer(path)
        entries.append({"path": name, "role": role, "sha256": _sha256(path)})
    report_path = out / "report.json"
    with open(report_path, "w", encoding="utf-8") as f:
        json.dump(result.report.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    # wall times vary run to run, so the report is listed without a hash
    entries.append({"path": "report.json", "role": "report"})
    with open(out / "manifest.json", "w", encoding="utf-8") as f:
        json.dump({"artifacts": entries}, f, indent=2, sort_keys=True)
        f.write("\n")
    return entries


# ---------------------------------------------------------------------------
# Evaluation

def evaluate(
    pred_albedo: np.ndarray,
    pred_rm: np.ndarray,
    gt_albedo: np.ndarray,
    gt_rm: np.ndarray,
    envs: list[PrefilteredEnv],
    gbufs: list[GBuffer],
    cameras: list[Camera],
    threads: int = 1,
) -> dict:
    """Metric table: per-material PSNR/SSIM/L1 plus relighting rows.

    Relighting renders predicted vs. ground-truth materials with the true
    geometry under every supplied environment and scores the images.
    """
    if pred_albedo.shape != gt_albedo.shape or pred_rm.shape != gt_rm.shape:
        raise PipelineError("evaluate", "prediction/ground-truth shapes disagree")
    if not envs:
        raise PipelineError("evaluate", "relighting rows need at least one environment")
    if len(gbufs) != len(cameras):
        raise PipelineError("evaluate", "g-buffer and camera counts disagree")

    def _row(pred, gt):
        return {
            "psnr": psnr(pred, gt),
            "ssim": ssim(pred, gt),
            "l1": float(np.abs(pred - gt).mean()),
        }

    table = {
        "albedo": _row(pred_albedo, gt_albedo),
        "roughness": _row(pred_rm[..., 0], gt_rm[..., 0]),
        "metallic": _row(pred_rm[..., 1], gt_rm[..., 1]),
    }
    per_env = []
    for pre in envs:
        vals = {"psnr": [], "ssim": []}
        for gbuf, cam in zip(gbufs, cameras):
            pa = ImageF(sample_uv_texture(pred_albedo, gbuf))
            pr = ImageF(sample_uv_texture(pred_rm, gbuf))
            ga = ImageF(sample_uv_texture(gt_albedo, gbuf))
            gr = ImageF(sample_uv_texture(gt_rm, gbuf))
            img_p = render_view(gbuf, pa, pr, pre, cam, threads=threads).data
            img_g = render_view(gbuf, ga, gr, pre, cam, threads=threads).data
            vals["psnr"].append(psnr(img_p, img_g))
            vals["ssim"].append(ssim(img_p, img_g))
        per_env.append({k: float(np.mean(v)) for k, v in vals.items()})
    table["relighting"] = {
        "psnr": float(np.mean([e["psnr"] for e in per_env])),
        "ssim": float(np.mean([e["ssim"] for e in per_env])),
        "per_env": per_env,
    }
    return table
