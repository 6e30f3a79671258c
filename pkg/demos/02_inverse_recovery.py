"""
Recovering materials from rendered observations
===============================================

The renderer is differentiable in its material inputs, so given images
of a surface under known lights and geometry, per-pixel albedo,
roughness, and metallic can be optimized directly. This walks the
well-posed case (three directionally diverse lights) and the degenerate
one (a single constant light, where roughness has no gradient at all).
"""
import numpy as np

from matforge.camera import Camera
from matforge.envlight import EnvMap, build_prefiltered, integrate_brdf_lut
from matforge.mesh import make_quad
from matforge.pipeline import RecoverConfig, recover_materials
from matforge.raster import rasterize_gbuffer
from matforge.shading import MaterialSample, shade


def key_light(d):
    lobe = np.maximum(d[..., 2], 0.0) ** 4
    return np.stack([0.1 + 2.0 * lobe, 0.12 + 1.2 * lobe,
                     0.15 + 0.5 * lobe], axis=-1)


def rim_light(d):
    lobe = np.maximum(d[..., 0], 0.0) ** 4
    back = np.maximum(-d[..., 0], 0.0) ** 2
    return np.stack([0.2 + 0.3 * back, 0.1 + 1.5 * lobe,
                     0.08 + 2.5 * lobe], axis=-1)


def sky_light(d):
    g = (d[..., 1] + 1.0) * 0.5
    lobe = np.maximum(d[..., 1], 0.0) ** 8
    return np.stack([0.05 + 0.9 * g + 1.0 * lobe, 0.3 + 0.4 * (1.0 - g),
                     0.1 + 0.8 * g * g], axis=-1)


lut = integrate_brdf_lut(32, 256)
pres = [build_prefiltered(EnvMap.from_function(fn, 32), n_mips=6,
                          samples_per_texel=64, base_height=32,
                          irradiance_height=16, lut=lut)
        for fn in (key_light, rim_light, sky_light)]

# a face-on quad so every pixel is a clean, well-conditioned sample
cam = Camera(mode="ortho", position=(0, 0, 3), target=(0, 0, 0),
             up=(0, 1, 0), width=32, height=32, extent=1.05)
gbuf = rasterize_gbuffer(make_quad(size=2.0), cam)
sel = gbuf.mask > 0
n_px = int(sel.sum())

# ground truth: independent random materials per pixel
rng = np.random.default_rng(3)
gt = MaterialSample(rng.uniform(0.1, 0.9, (n_px, 3)),
                    rng.uniform(0.1, 0.9, n_px),
                    rng.uniform(0.1, 0.9, n_px))

# observations: one rendered image per light
obs = []
for pre in pres:
    img = np.zeros((32, 32, 3))
    img[sel] = shade(gt, gbuf.normal[sel], gbuf.position[sel],
                     np.asarray(cam.position), pre)
    obs.append(img)

print(f"{n_px} pixels, 3 lights; optimizing from a flat initial guess")
for iters in (100, 400, 1200):
    albedo, rm, info = recover_materials(
        obs, gbuf, cam, pres, RecoverConfig(max_iters=iters, step=0.1))
    mae_a = np.abs(albedo[sel] - gt.a).mean()
    mae_r = np.abs(rm[..., 0][sel] - gt.r).mean()
    mae_m = np.abs(rm[..., 1][sel] - gt.m).mean()
    print(f"  {info.n_iters:5d} iters: MAE albedo {mae_a:.4f} "
          f"roughness {mae_r:.4f} metallic {mae_m:.4f} "
          f"(loss {info.final_loss:.2e})")

# the degenerate case: under a constant light the prefiltered chain is
# flat, the roughness derivative vanishes identically, and the recovery
# reports it rather than silently returning the initial value
flat = build_prefiltered(EnvMap.constant(0.3, 16), n_mips=4,
                         samples_per_texel=32, base_height=16,
                         irradiance_height=16, lut=lut)
img = np.zeros((32, 32, 3))
img[sel] = shade(gt, gbuf.normal[sel], gbuf.position[sel],
                 np.asarray(cam.position), flat)
_, _, info = recover_materials([img], gbuf, cam, [flat],
                               RecoverConfig(max_iters=50, step=0.1))
print(f"constant light flags: {info.flags}")
