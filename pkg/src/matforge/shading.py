"""Split-sum PBR shading and its analytic material derivatives.

Outgoing radiance per pixel:

    L = a*(1-m)*E(n) + Lpref(R, r) * (F0*A + B)

with E the un-normalized cosine irradiance (constant environment L0
yields pi*L0; the albedo absorbs the 1/pi convention), Lpref the
roughness-indexed prefiltered chain at the reflection direction, (A, B)
the environment-BRDF table at (cos_view, r), and F0 = 0.04*(1-m) + a*m.
cos_view is clamped at 1e-4 to sidestep the grazing singularity.

Material maps travel as an albedo image plus a packed RM image with
channels (roughness, metallic, 0).

All derivative formulas treat the interpolated lookups as what they
are, piecewise-linear functions of r: slopes are exact between knots
and right-sided at them.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .envlight import PrefilteredEnv
from .image import ImageF


class ShadingError(ValueError):
    pass


@dataclass
class MaterialSample:
    """Per-sample material parameters, broadcastable arrays.

    a: albedo (..., 3); m: metallic (...); r: roughness (...).
    """

    a: np.ndarray
    m: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.m = np.asarray(self.m, dtype=np.float64)
        self.r = np.asarray(self.r, dtype=np.float64)

    def clamped(self) -> "MaterialSample":
        return MaterialSample(np.clip(self.a, 0.0, 1.0),
                              np.clip(self.m, 0.0, 1.0),
                              np.clip(self.r, 0.0, 1.0))


@dataclass
class ShadeGrad:
    """Analytic partials of outgoing radiance.

    da: (..., 3, 3) Jacobian d L_out[i] / d albedo[j] (diagonal: each
        albedo channel feeds only its own output channel);
    dm: (..., 3); dr: (..., 3).
    dr_chain is the prefiltered-chain part of dr (it vanishes for a
    constant environment; the LUT-slope part of dr does not).
    """

    da: np.ndarray
    dm: np.ndarray
    dr: np.ndarray
    dr_chain: np.ndarray


def _view_terms(n: np.ndarray, p: np.ndarray, c: np.ndarray):
    n = np.asarray(n, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    omega = c - p
    omega = omega / np.linalg.norm(omega, axis=-1, keepdims=True)
    ndv = np.einsum("...k,...k->...", omega, n)
    cos_v = np.maximum(ndv, 1e-4)
    refl = 2.0 * ndv[..., None] * n - omega
    return cos_v, refl


def _split_sum(sample: MaterialSample, n, p, c, pre: PrefilteredEnv):
    s = sample.clamped()
    cos_v, refl = _view_terms(n, p, c)
    e_irr = pre.sample_irradiance(n)
    lpref = pre.sample_specular(refl, s.r)
    ab = pre.sample_lut(cos_v, s.r)
    f0 = 0.04 * (1.0 - s.m)[..., None] + s.a * s.m[..., None]
    return s, cos_v, refl, e_irr, lpref, ab, f0


def shade(sample: MaterialSample, n: np.ndarray, p: np.ndarray, c: np.ndarray,
          pre: PrefilteredEnv) -> np.ndarray:
    """Radiance (..., 3) for unit normals n, positions p, camera c."""
    s, _, _, e_irr, lpref, ab, f0 = _split_sum(sample, n, p, c, pre)
    diffuse = s.a * (1.0 - s.m)[..., None] * e_irr
    return diffuse + lpref * (f0 * ab[..., 0:1] + ab[..., 1:2])


def shade_grad(sample: MaterialSample, n: np.ndarray, p: np.ndarray,
               c: np.ndarray, pre: PrefilteredEnv) -> ShadeGrad:
    """Exact partials of shade() w.r.t. albedo, metallic, roughness."""
    s, cos_v, refl, e_irr, lpref, ab, f0 = _split_sum(sample, n, p, c, pre)
    a_scale, b_bias = ab[..., 0:1], ab[..., 1:2]

    # albedo enters the diffuse term and F0, both per channel: diagonal
    ddiag = (1.0 - s.m)[..., None] * e_irr + s.m[..., None] * lpref * a_scale
    da = np.zeros(ddiag.shape + (3,))
    idx = np.arange(3)
    da[..., idx, idx] = ddiag

    dm = -s.a * e_irr + (s.a - 0.04) * lpref * a_scale

    dlp = pre.specular_dr(refl, s.r)
    dab = pre.lut_dr(cos_v, s.r)
    dr_chain = dlp * (f0 * a_scale + b_bias)
    dr = dr_chain + lpref * (f0 * dab[..., 0:1] + dab[..., 1:2])
    return ShadeGrad(da=da, dm=dm, dr=dr, dr_chain=dr_chain)


def _band_rows(height: int, n_bands: int):
    edges = np.linspace(0, height, n_bands + 1).astype(int)
    return [(edges[i], edges[i + 1]) for i in range(len(edges) - 1)
            if edges[i + 1] > edges[i]]


def render_view(gbuf, albedo: ImageF, rm: ImageF, pre: PrefilteredEnv,
                camera, threads: int = 1) -> ImageF:
    """Shade every covered G-buffer pixel; background stays 0.

    rm is the packed (roughness, metallic, 0) map. Per-pixel math is
    elementwise, so results are bit-identical for any thread count.
    """
    h, w = gbuf.height, gbuf.width
    for img, name in ((albedo, "albedo"), (rm, "rm")):
        if img.height != h or img.width != w:
            raise ShadingError(f"{name} map is {img.height}x{img.width}, "
                               f"g-buffer is {h}x{w}")
    out = np.zeros((h, w, 3))
    cam_pos = np.asarray(camera.position, dtype=np.float64)

    def shade_band(y0, y1):
        sel = gbuf.mask[y0:y1] > 0
        if not sel.any():
            return
        sample = MaterialSample(a=albedo.data[y0:y1][sel],
                                m=rm.data[y0:y1, :, 1][sel],
                                r=rm.data[y0:y1, :, 0][sel])
        vals = shade(sample, gbuf.normal[y0:y1][sel],
                     gbuf.position[y0:y1][sel], cam_pos, pre)
        band = out[y0:y1]
        band[sel] = vals

    bands = _band_rows(h, max(1, int(threads)))
    if len(bands) == 1:
        shade_band(*bands[0])
    else:
        with ThreadPoolExecutor(max_workers=len(bands)) as pool:
            list(pool.map(lambda b: shade_band(*b), bands))
    return ImageF(out)
