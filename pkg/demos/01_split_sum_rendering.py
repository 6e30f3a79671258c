"""
Split-sum environment shading, start to finish
==============================================

Build an environment light, precompute its lookup products, and render a
sphere under it at several material settings. Writes PNGs next to this
script and prints two sanity numbers worth knowing about the renderer:
the diffuse convention and the white-furnace bound.
"""
from pathlib import Path

import numpy as np

from matforge.camera import Camera
from matforge.envlight import EnvMap, build_prefiltered, integrate_brdf_lut
from matforge.image import ImageF, write_png
from matforge.mesh import make_uv_sphere
from matforge.raster import rasterize_gbuffer
from matforge.shading import render_view

out_dir = Path(__file__).parent / "out" / "01_split_sum_rendering"
out_dir.mkdir(parents=True, exist_ok=True)


# an equirectangular radiance map given as a function of direction:
# warm light from above, cool fill from the side
def studio(d):
    top = np.maximum(d[..., 2], 0.0) ** 2
    side = np.maximum(d[..., 0], 0.0)
    return np.stack([0.25 + 1.1 * top + 0.15 * side,
                     0.25 + 0.9 * top + 0.25 * side,
                     0.30 + 0.5 * top + 0.45 * side], axis=-1)


env = EnvMap.from_function(studio, 64)

# the three precomputed products: irradiance map (diffuse), roughness
# mip chain (specular), and the 2D BRDF table shared by all environments
lut = integrate_brdf_lut(64, 1024)
pre = build_prefiltered(env, n_mips=6, samples_per_texel=128,
                        base_height=64, irradiance_height=16, lut=lut)

# radiometric convention check: for a constant environment L0 and a
# dielectric, the diffuse term is a * pi * L0 (no 1/pi on the albedo)
flat = build_prefiltered(EnvMap.constant(0.5, 16), n_mips=4,
                         samples_per_texel=64, base_height=16,
                         irradiance_height=16, lut=lut)
e = flat.sample_irradiance(np.array([[0.0, 0.0, 1.0]]))[0, 0]
print(f"constant env L0=0.5: irradiance = {e:.4f}, pi*L0 = {np.pi * 0.5:.4f}")

# white-furnace bound: no prefiltered texel may exceed the source max
src_max = float(env.image.data.max())
chain_max = max(float(lv.data.max()) for lv in pre.levels)
print(f"source max {src_max:.4f}, prefiltered chain max {chain_max:.4f} "
      f"(bounded)")

# render the sphere from a fixed camera at a few material settings
cam = Camera(mode="ortho", position=(1.2, -2.0, 1.4), target=(0, 0, 0),
             up=(0, 0, 1), width=256, height=256, extent=1.15)
gbuf = rasterize_gbuffer(make_uv_sphere(radius=1.0, rings=48, segments=96),
                         cam)

settings = [
    ("dielectric_rough", [0.6, 0.25, 0.2], 0.0, 0.7),
    ("dielectric_glossy", [0.2, 0.35, 0.6], 0.0, 0.15),
    ("metal_brushed", [0.9, 0.7, 0.3], 1.0, 0.4),
]
for name, albedo, metallic, roughness in settings:
    a = ImageF(np.broadcast_to(np.asarray(albedo), (256, 256, 3)).copy())
    rm = ImageF(np.broadcast_to(np.asarray([roughness, metallic, 0.0]),
                                (256, 256, 3)).copy())
    img = render_view(gbuf, a, rm, pre, cam)
    write_png(out_dir / f"{name}.png", ImageF(np.clip(img.data, 0.0, 1.0)))
    lit = img.data[gbuf.mask > 0]
    print(f"{name}: mean radiance {lit.mean(axis=0).round(3)}")

print(f"wrote {len(settings)} renders to {out_dir}")
