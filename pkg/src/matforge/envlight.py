"""Environment-light precomputation for split-sum image-based lighting.

Pieces: a cosine-weighted irradiance map for the diffuse term, a
roughness-indexed prefiltered specular chain, and the 2D scale/bias BRDF
lookup table. Microfacet model: GGX distribution with alpha = roughness^2,
Smith height-correlated visibility, Schlick Fresnel.

Equirect convention (shared by every map here):
    u in [0,1) -> azimuth   phi   in [-pi, pi), measured from +X toward +Y
    v in [0,1] -> polar     theta in [0, pi],  measured from the +Z pole
    direction = (sin t cos p, sin t sin p, cos t); texel centers at
    (i + 0.5) / W. The diffuse term follows the rendering equation with NO
    1/pi normalization: a constant environment L0 yields irradiance pi*L0.

All sampling uses the Hammersley low-discrepancy sequence, so every
product here is a pure function of its inputs (bit-identical across runs).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .image import ImageF, bilinear_sample, read_pfm, write_pfm


class EnvError(ValueError):
    pass


# ---------------------------------------------------------------------------
# direction <-> equirect coordinates

def uv_to_dir(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    phi = u * (2.0 * np.pi) - np.pi
    theta = v * np.pi
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


def dir_to_uv(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = np.asarray(d, dtype=np.float64)
    theta = np.arccos(np.clip(d[..., 2], -1.0, 1.0))
    phi = np.arctan2(d[..., 1], d[..., 0])
    return (phi + np.pi) / (2.0 * np.pi), theta / np.pi


def equirect_dirs(height: int) -> np.ndarray:
    """(H, 2H, 3) unit directions at texel centers."""
    width = 2 * height
    u = (np.arange(width) + 0.5) / width
    v = (np.arange(height) + 0.5) / height
    uu, vv = np.meshgrid(u, v)
    return uv_to_dir(uu, vv)


def equirect_solid_angles(height: int) -> np.ndarray:
    """(H, 2H) per-texel solid angles: sin(theta) * dtheta * dphi."""
    width = 2 * height
    theta = (np.arange(height) + 0.5) / height * np.pi
    w = np.sin(theta) * (np.pi / height) * (2.0 * np.pi / width)
    return np.broadcast_to(w[:, None], (height, width)).copy()


# ---------------------------------------------------------------------------
# deterministic sampling helpers

def hammersley(n: int) -> np.ndarray:
    """(n, 2) Hammersley points: (k/n, radical-inverse-base-2(k))."""
    k = np.arange(n, dtype=np.uint32)
    bits = k.copy()
    bits = ((bits << np.uint32(16)) | (bits >> np.uint32(16))) & np.uint32(0xFFFFFFFF)
    bits = ((bits & np.uint32(0x55555555)) << np.uint32(1)) | ((bits & np.uint32(0xAAAAAAAA)) >> np.uint32(1))
    bits = ((bits & np.uint32(0x33333333)) << np.uint32(2)) | ((bits & np.uint32(0xCCCCCCCC)) >> np.uint32(2))
    bits = ((bits & np.uint32(0x0F0F0F0F)) << np.uint32(4)) | ((bits & np.uint32(0xF0F0F0F0)) >> np.uint32(4))
    bits = ((bits & np.uint32(0x00FF00FF)) << np.uint32(8)) | ((bits & np.uint32(0xFF00FF00)) >> np.uint32(8))
    y = bits.astype(np.float64) * 2.3283064365386963e-10  # / 2^32
    return np.stack([k.astype(np.float64) / n, y], axis=1)


def make_onb(n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Tangent/bitangent for unit vectors n (..., 3); branch choice is a
    hard threshold so results are deterministic."""
    n = np.asarray(n, dtype=np.float64)
    helper = np.where(
        (np.abs(n[..., 2]) < 0.999)[..., None],
        np.broadcast_to([0.0, 0.0, 1.0], n.shape),
        np.broadcast_to([1.0, 0.0, 0.0], n.shape),
    )
    t = np.cross(helper, n)
    t = t / np.linalg.norm(t, axis=-1, keepdims=True)
    b = np.cross(n, t)
    return t, b


def ggx_half_local(xi: np.ndarray, alpha: float) -> np.ndarray:
    """GGX-importance-sampled half vectors around +Z for xi in [0,1)^2."""
    phi = 2.0 * np.pi * xi[:, 0]
    ct = np.sqrt((1.0 - xi[:, 1]) / (1.0 + (alpha * alpha - 1.0) * xi[:, 1]))
    st = np.sqrt(np.maximum(0.0, 1.0 - ct * ct))
    return np.stack([st * np.cos(phi), st * np.sin(phi), ct], axis=1)


def smith_g2(nv: np.ndarray, nl: np.ndarray, alpha: float) -> np.ndarray:
    """Height-correlated Smith masking-shadowing for GGX."""
    a2 = alpha * alpha
    gv = nl * np.sqrt(nv * nv * (1.0 - a2) + a2)
    gl = nv * np.sqrt(nl * nl * (1.0 - a2) + a2)
    return 2.0 * nl * nv / np.maximum(gv + gl, 1e-18)


# ---------------------------------------------------------------------------

@dataclass
class EnvMap:
    """Equirectangular HDR radiance map."""

    image: ImageF

    def __post_init__(self):
        if isinstance(self.image, np.ndarray):
            self.image = ImageF(self.image)
        if self.image.channels != 3:
            raise EnvError("environment map must be 3-channel")
        if self.image.width != 2 * self.image.height:
            raise EnvError(
                f"equirect map needs width = 2*height, got "
                f"{self.image.width}x{self.image.height}")
        if not np.all(np.isfinite(self.image.data)):
            raise EnvError("environment radiance must be finite")
        if self.image.data.min() < 0:
            raise EnvError("environment radiance must be non-negative")

    @property
    def height(self) -> int:
        return self.image.height

    @property
    def width(self) -> int:
        return self.image.width

    @classmethod
    def constant(cls, value, height: int = 16) -> "EnvMap":
        return cls(ImageF.constant(height, 2 * height, value, 3))

    @classmethod
    def from_function(cls, fn, height: int = 64) -> "EnvMap":
        """Build from a callable mapping unit directions (..., 3) -> RGB."""
        dirs = equirect_dirs(height)
        data = np.asarray(fn(dirs), dtype=np.float64)
        return cls(ImageF(data.reshape(height, 2 * height, 3)))

    def sample(self, dirs: np.ndarray) -> np.ndarray:
        """Bilinear radiance lookup for unit directions (..., 3)."""
        u, v = dir_to_uv(dirs)
        x = u * self.width - 0.5
        y = v * self.height - 0.5
        return bilinear_sample(self.image.data, x, y, wrap_x=True)

    def scaled(self, c: float) -> "EnvMap":
        return EnvMap(ImageF(self.image.data * c))


def resample_equirect(env: EnvMap, height: int) -> ImageF:
    dirs = equirect_dirs(height)
    return ImageF(env.sample(dirs))


# ---------------------------------------------------------------------------
# the three split-sum precomputations

def compute_irradiance(env: EnvMap, out_height: int = 16) -> ImageF:
    """Cosine-weighted hemisphere integral of radiance per output texel.

    Direct quadrature over every source texel: E(n) = sum L * dw * max(0,
    d.n). No 1/pi. A constant map L0 integrates to pi*L0.
    """
    if out_height < 8:
        raise EnvError("irradiance height must be at least 8")
    src_dirs = equirect_dirs(env.height).reshape(-1, 3)
    src_w = equirect_solid_angles(env.height).reshape(-1)
    radiance_w = env.image.data.reshape(-1, 3) * src_w[:, None]

    out_dirs = equirect_dirs(out_height)
    out = np.empty((out_height, 2 * out_height, 3))
    for row in range(out_height):  # row chunks keep the cosine matrix small
        cosm = out_dirs[row] @ src_dirs.T
        np.maximum(cosm, 0.0, out=cosm)
        out[row] = cosm @ radiance_w
    return ImageF(out)


def prefilter_specular(env: EnvMap, n_mips: int = 6, samples_per_texel: int = 128,
                       base_height: int = 128) -> list[ImageF]:
    """GGX-prefiltered equirect chain; level l at roughness l/(n_mips-1).

    Level 0 is the bilinear-resampled source (zero roughness = delta lobe).
    Filtering uses the split-sum N=V=R convention with ratio-normalized
    cosine weights, so each texel is a convex combination of source
    radiance (hence bounded by the source maximum, and exactly linear in
    the source).
    """
    if n_mips < 2:
        raise EnvError("need at least 2 mip levels")
    if samples_per_texel < 32:
        raise EnvError("need at least 32 samples per texel")
    levels = [resample_equirect(env, base_height)]
    xi = hammersley(samples_per_texel)
    for lvl in range(1, n_mips):
        r = lvl / (n_mips - 1)
        alpha = r * r
        h = max(base_height >> lvl, 4)
        dirs = equirect_dirs(h).reshape(-1, 3)
        hloc = ggx_half_local(xi, alpha)  # (S, 3)
        out = np.empty((len(dirs), 3))
        chunk = max(1, 2_000_000 // samples_per_texel)
        for s in range(0, len(dirs), chunk):
            refl = dirs[s : s + chunk]  # N = V = R
            t, b = make_onb(refl)
            hw = (hloc[None, :, 0, None] * t[:, None]
                  + hloc[None, :, 1, None] * b[:, None]
                  + hloc[None, :, 2, None] * refl[:, None])  # (n, S, 3)
            vdh = np.einsum("nsk,nk->ns", hw, refl)
            ldir = 2.0 * vdh[..., None] * hw - refl[:, None]
            w = np.maximum(np.einsum("nsk,nk->ns", ldir, refl), 0.0)
            radiance = env.sample(ldir)
            num = np.einsum("ns,nsk->nk", w, radiance)
            den = np.maximum(w.sum(axis=1), 1e-12)
            out[s : s + chunk] = num / den[:, None]
        levels.append(ImageF(out.reshape(h, 2 * h, 3)))
    return levels


def integrate_brdf_lut(resolution: int = 64, samples: int = 1024) -> ImageF:
    """Split-sum environment-BRDF table over (cos_view, roughness).

    Entry (i, j): rows index cos_theta_v = (i+1)/N so the last row sits
    at cos_theta_v = 1 exactly (where the head-on invariants hold);
    columns index roughness r = (j+0.5)/N. Channels are the Schlick
    split (A, B): specular ~= Prefiltered(R, r) * (F0*A + B).
    """
    if resolution < 16:
        raise EnvError("LUT resolution must be at least 16")
    n = resolution
    xi = hammersley(samples)
    cosv = (np.arange(n) + 1.0) / n
    rough = (np.arange(n) + 0.5) / n
    lut = np.empty((n, n, 2))
    for j, r in enumerate(rough):
        alpha = r * r
        hloc = ggx_half_local(xi, alpha)  # (S, 3), around n = +Z
        sinv = np.sqrt(1.0 - cosv * cosv)
        view = np.stack([sinv, np.zeros_like(cosv), cosv], axis=1)  # (n, 3)
        vdh = view @ hloc.T  # (n, S)
        nl = 2.0 * vdh * hloc[:, 2][None, :] - view[:, 2:3]  # l_z
        nh = np.maximum(hloc[:, 2][None, :], 0.0)
        nv = view[:, 2:3]
        valid = nl > 0
        g = smith_g2(np.broadcast_to(nv, nl.shape), np.maximum(nl, 1e-12), alpha)
        g_vis = np.where(valid, g * np.maximum(vdh, 0.0) / np.maximum(nh * nv, 1e-12), 0.0)
        fc = np.where(valid, (1.0 - np.clip(vdh, 0.0, 1.0)) ** 5, 0.0)
        lut[:, j, 0] = ((1.0 - fc) * g_vis).mean(axis=1)
        lut[:, j, 1] = (fc * g_vis).mean(axis=1)
    return ImageF(lut)


# ---------------------------------------------------------------------------

@dataclass
class PrefilteredEnv:
    """Bundled split-sum products with the lookup math used at shade time.

    Roughness indexes the specular chain linearly: level l sits at
    r = l/(n_mips-1); lookups are trilinear (bilinear in the level,
    linear across levels). The LUT is bilinear over (cos_view, r).
    Derivative lookups return the exact piecewise slope of those
    interpolants (right-sided at knots).
    """

    irradiance: ImageF
    levels: list[ImageF] = field(default_factory=list)
    lut: ImageF = None

    def __post_init__(self):
        if len(self.levels) < 2:
            raise EnvError("prefiltered chain needs at least 2 levels")
        if self.lut is None or self.lut.channels != 2:
            raise EnvError("brdf lut must be a 2-channel image")

    @property
    def n_mips(self) -> int:
        return len(self.levels)

    @property
    def roughness_ladder(self) -> np.ndarray:
        return np.arange(self.n_mips) / (self.n_mips - 1)

    def sample_irradiance(self, n: np.ndarray) -> np.ndarray:
        u, v = dir_to_uv(n)
        img = self.irradiance
        return bilinear_sample(img.data, u * img.width - 0.5, v * img.height - 0.5,
                               wrap_x=True)

    def _sample_level(self, lvl: int, dirs: np.ndarray) -> np.ndarray:
        img = self.levels[lvl]
        u, v = dir_to_uv(dirs)
        return bilinear_sample(img.data, u * img.width - 0.5, v * img.height - 0.5,
                               wrap_x=True)

    def _level_blend(self, r: np.ndarray):
        t = np.clip(np.asarray(r, dtype=np.float64), 0.0, 1.0) * (self.n_mips - 1)
        lo = np.minimum(np.floor(t).astype(np.int64), self.n_mips - 2)
        return lo, t - lo

    def sample_specular(self, dirs: np.ndarray, r) -> np.ndarray:
        """Trilinear prefiltered radiance at reflection dirs (..., 3) and
        roughness r (scalar or matching shape)."""
        dirs = np.asarray(dirs, dtype=np.float64)
        r = np.broadcast_to(np.asarray(r, dtype=np.float64), dirs.shape[:-1])
        lo, f = self._level_blend(r)
        out = np.zeros(dirs.shape[:-1] + (3,))
        for lvl in range(self.n_mips - 1):
            sel = lo == lvl
            if not sel.any():
                continue
            va = self._sample_level(lvl, dirs[sel])
            vb = self._sample_level(lvl + 1, dirs[sel])
            out[sel] = va + (vb - va) * f[sel][..., None]
        return out

    def specular_dr(self, dirs: np.ndarray, r) -> np.ndarray:
        """d/dr of sample_specular: the chain slope on the active segment."""
        dirs = np.asarray(dirs, dtype=np.float64)
        r = np.broadcast_to(np.asarray(r, dtype=np.float64), dirs.shape[:-1])
        lo, _ = self._level_blend(r)
        out = np.zeros(dirs.shape[:-1] + (3,))
        for lvl in range(self.n_mips - 1):
            sel = lo == lvl
            if not sel.any():
                continue
            va = self._sample_level(lvl, dirs[sel])
            vb = self._sample_level(lvl + 1, dirs[sel])
            out[sel] = (vb - va) * (self.n_mips - 1)
        return out

    def sample_lut(self, cos_v: np.ndarray, r) -> np.ndarray:
        """(A, B) pair, bilinear over the (cos_view, roughness) grid.
        Row i holds cos_view = (i+1)/N, column j roughness (j+0.5)/N."""
        cos_v = np.asarray(cos_v, dtype=np.float64)
        n = self.lut.height
        r = np.broadcast_to(np.asarray(r, dtype=np.float64), cos_v.shape)
        return bilinear_sample(self.lut.data, r * n - 0.5, cos_v * n - 1.0)

    def lut_dr(self, cos_v: np.ndarray, r) -> np.ndarray:
        """d/dr of sample_lut; zero in the clamped half-texel borders."""
        cos_v = np.asarray(cos_v, dtype=np.float64)
        n = self.lut.height
        r = np.broadcast_to(np.asarray(r, dtype=np.float64), cos_v.shape)
        x = r * n - 0.5
        y = np.clip(cos_v * n - 1.0, 0.0, n - 1.0)
        x0 = np.clip(np.floor(x).astype(np.int64), 0, n - 1)
        x1 = np.clip(x0 + 1, 0, n - 1)
        y0 = np.floor(y).astype(np.int64)
        y1 = np.clip(y0 + 1, 0, n - 1)
        fy = (y - y0)[..., None]
        data = self.lut.data
        left = data[y0, x0] * (1 - fy) + data[y1, x0] * fy
        right = data[y0, x1] * (1 - fy) + data[y1, x1] * fy
        slope = (right - left) * n
        inside = ((x >= 0.0) & (x <= n - 1.0))[..., None]
        return np.where(inside, slope, 0.0)

    def r_knots(self) -> np.ndarray:
        """Roughness values where the r-interpolation changes slope (mip
        ladder plus LUT texel centers plus LUT clamp borders); finite
        difference checks must keep clear of these."""
        n = self.lut.height
        return np.unique(np.concatenate([
            self.roughness_ladder,
            (np.arange(n) + 0.5) / n,
        ]))


def build_prefiltered(env: EnvMap, n_mips: int = 6, samples_per_texel: int = 128,
                      base_height: int = 128, irradiance_height: int = 16,
                      lut_resolution: int = 64, lut_samples: int = 1024,
                      lut: ImageF | None = None) -> PrefilteredEnv:
    """One-stop precomputation. Pass a shared ``lut`` to skip rebuilding
    it (the table does not depend on the environment)."""
    return PrefilteredEnv(
        irradiance=compute_irradiance(env, irradiance_height),
        levels=prefilter_specular(env, n_mips, samples_per_texel, base_height),
        lut=lut if lut is not None else integrate_brdf_lut(lut_resolution, lut_samples),
    )


# ---------------------------------------------------------------------------
# cache directory: PFMs plus a JSON manifest

def save_prefiltered(dirpath, pre: PrefilteredEnv) -> None:
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    write_pfm(d / "irradiance.pfm", pre.irradiance)
    for i, lv in enumerate(pre.levels):
        write_pfm(d / f"specular_{i}.pfm", lv)
    write_pfm(d / "brdf_lut.pfm", pre.lut)  # 2ch rides in a 3ch file
    manifest = {
        "irradiance": {"file": "irradiance.pfm",
                       "height": pre.irradiance.height},
        "specular": [{"file": f"specular_{i}.pfm", "height": lv.height,
                      "roughness": float(i / (pre.n_mips - 1))}
                     for i, lv in enumerate(pre.levels)],
        "brdf_lut": {"file": "brdf_lut.pfm", "resolution": pre.lut.height,
                     "channels": ["scale_A", "bias_B"]},
    }
    with open(d / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")


def load_prefiltered(dirpath) -> PrefilteredEnv:
    d = Path(dirpath)
    with open(d / "manifest.json", "r", encoding="utf-8") as f:
        manifest = json.load(f)
    irr = read_pfm(d / manifest["irradiance"]["file"])
    levels = [read_pfm(d / entry["file"]) for entry in manifest["specular"]]
    lut3 = read_pfm(d / manifest["brdf_lut"]["file"])
    lut = ImageF(lut3.data[:, :, :2])
    return PrefilteredEnv(irradiance=irr, levels=levels, lut=lut)
