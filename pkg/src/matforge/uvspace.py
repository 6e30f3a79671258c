"""UV-space material transfer: bake mesh geometry into a UV atlas,
backproject per-view material images with visibility tests, blend views by
count-normalized averaging, and fill uncovered texels with pull-push.

Texel convention: atlas row j, column i covers uv center
((i + 0.5) / R, 1 - (j + 0.5) / R), i.e. v points up while rows grow down,
so saved maps display upright.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .camera import ORTHO, Camera
from .image import bilinear_sample, read_pfm, read_png, write_pfm, write_png
from .mesh import TriMesh
from .raster import SUBPIX, GBuffer

BLEND_EPS = 1e-4  # literal denominator bias of the blending formula


class UvError(ValueError):
    pass


@dataclass
class UvAtlas:
    """Square UV-space maps for one mesh.

    position/validity come from baking; the accumulated material maps and
    view-count map are filled in by blending when the caller keeps them.
    """

    position: np.ndarray            # (R, R, 3) world units
    validity: np.ndarray            # (R, R) {0, 1} float
    n_overlap: int = 0              # texels written by 2+ UV islands
    c_d: np.ndarray | None = None   # (R, R, 3) blended albedo
    c_rm: np.ndarray | None = None  # (R, R, 3) blended roughness/metallic
    m: np.ndarray | None = None     # (R, R) int view counts
    partials: list | None = field(default=None, repr=False)

    @property
    def resolution(self) -> int:
        return self.validity.shape[0]

    def texel_uv(self) -> np.ndarray:
        """(R, R, 2) uv coordinates of every texel center."""
        r = self.resolution
        i = (np.arange(r) + 0.5) / r
        u, vrow = np.meshgrid(i, 1.0 - i)
        return np.stack([u, vrow], axis=-1)


@dataclass
class ViewPartial:
    """One view's contribution to the atlas: materials where visible."""

    c_d: np.ndarray   # (R, R, 3), zero where m = 0
    c_rm: np.ndarray  # (R, R, 3)
    m: np.ndarray     # (R, R) int64 {0, 1}


def bake_uv_geometry(mesh: TriMesh, resolution: int) -> UvAtlas:
    """Rasterize the mesh's triangles in UV space.

    Every covered texel stores the barycentric world position and
    validity 1. Coverage uses the same fixed-point top-left rule as the
    image rasterizer, so texels on shared UV edges are written exactly
    once; writes from genuinely overlapping islands are counted and
    reported (last write wins).
    """
    if resolution < 1:
        raise UvError(f"resolution must be positive, got {resolution}")
    r = resolution
    uv = mesh.corner_uvs()           # (F, 3, 2)
    world = mesh.corner_positions()  # (F, 3, 3)

    # uv -> pixel coords, y flipped so v=1 is row 0
    px = uv[..., 0] * r
    py = (1.0 - uv[..., 1]) * r
    xi = np.round(px * SUBPIX).astype(np.int64)
    yi = np.round(py * SUBPIX).astype(np.int64)

    area2 = ((xi[:, 1] - xi[:, 0]) * (yi[:, 2] - yi[:, 0])
             - (yi[:, 1] - yi[:, 0]) * (xi[:, 2] - xi[:, 0]))
    flip = area2 < 0
    perm = [0, 2, 1]
    xi[flip] = xi[flip][:, perm]
    yi[flip] = yi[flip][:, perm]
    world = world.copy()
    world[flip] = world[flip][:, perm, :]

    position = np.zeros((r, r, 3))
    validity = np.zeros((r, r))
    writes = np.zeros((r, r), dtype=np.int64)

    for f in np.nonzero(area2 != 0)[0]:
        tx, ty = xi[f], yi[f]
        min_x = max(int(np.floor(tx.min() / SUBPIX - 0.5)), 0)
        max_x = min(int(np.ceil(tx.max() / SUBPIX - 0.5)), r - 1)
        min_y = max(int(np.floor(ty.min() / SUBPIX - 0.5)), 0)
        max_y = min(int(np.ceil(ty.max() / SUBPIX - 0.5)), r - 1)
        if min_x > max_x or min_y > max_y:
            continue
        sx = np.arange(min_x, max_x + 1, dtype=np.int64) * SUBPIX + SUBPIX // 2
        sy = np.arange(min_y, max_y + 1, dtype=np.int64) * SUBPIX + SUBPIX // 2
        gx, gy = np.meshgrid(sx, sy)

        edge = np.empty((3,) + gx.shape, dtype=np.int64)
        inside = np.ones(gx.shape, dtype=bool)
        for k in range(3):
            dx = tx[(k + 1) % 3] - tx[k]
            dy = ty[(k + 1) % 3] - ty[k]
            ek = dx * (gy - ty[k]) - dy * (gx - tx[k])
            edge[k] = ek
            if (dy == 0 and dx > 0) or dy < 0:
                inside &= ek >= 0
            else:
                inside &= ek > 0
        if not inside.any():
            continue

        tot = (float(tx[1] - tx[0]) * float(ty[2] - ty[0])
               - float(ty[1] - ty[0]) * float(tx[2] - tx[0]))
        l0 = edge[1] / tot
        l1 = edge[2] / tot
        l2 = edge[0] / tot
        ys, xs = np.nonzero(inside)
        pos = (l0[ys, xs, None] * world[f, 0] + l1[ys, xs, None] * world[f, 1]
               + l2[ys, xs, None] * world[f, 2])
        position[min_y + ys, min_x + xs] = pos
        validity[min_y + ys, min_x + xs] = 1.0
        writes[min_y + ys, min_x + xs] += 1

    n_overlap = int((writes > 1).sum())
    if n_overlap:
        warnings.warn(
            f"UV islands overlap on {n_overlap} texel(s); last write wins",
            stacklevel=2,
        )
    return UvAtlas(position=position, validity=validity, n_overlap=n_overlap)


def _masked_bilinear(data: np.ndarray, mask: np.ndarray, x: np.ndarray,
                     y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear sample that ignores unmasked pixels.

    Returns (value, weight): value is the mask-weight-normalized sample
    (zero where no masked pixel contributes), weight is the sampled mask
    in [0, 1]. Premultiplying keeps background pixels (which hold zeros)
    out of the average entirely.
    """
    if data.ndim == 2:
        data = data[..., None]
    pre = bilinear_sample(data * mask[..., None], x, y)
    w = bilinear_sample(mask[..., None], x, y)[..., 0]
    safe = np.maximum(w, 1e-12)[..., None]
    return pre / safe, w


def backproject_view(
    atlas: UvAtlas,
    gbuf: GBuffer,
    camera: Camera,
    albedo: np.ndarray,
    rm: np.ndarray,
    delta: float | None = None,
    min_cos: float | None = None,
) -> ViewPartial:
    """Pull one view's material images into UV space.

    Each valid texel's world position is projected into the camera; it
    contributes iff the projection lands inside the image, the bilinear
    footprint overlaps rendered pixels (sampled mask > 0.25), and the
    texel depth passes the view's depth buffer within bias delta
    (default 1e-3 x bounding radius of the baked surface). min_cos, when
    given, additionally drops grazing texels by the sampled shading
    normal. Sampling is mask-normalized so background pixels never bleed
    into the averages.
    """
    h, w = gbuf.mask.shape
    if albedo.shape != (h, w, 3) or rm.shape != (h, w, 3):
        raise UvError(
            f"material images must be ({h}, {w}, 3); got albedo "
            f"{albedo.shape}, rm {rm.shape}"
        )
    if camera.height != h or camera.width != w:
        raise UvError("camera resolution disagrees with the g-buffer")

    r = atlas.resolution
    valid = atlas.validity > 0
    out = ViewPartial(
        c_d=np.zeros((r, r, 3)),
        c_rm=np.zeros((r, r, 3)),
        m=np.zeros((r, r), dtype=np.int64),
    )
    if not valid.any():
        return out
    pos = atlas.position[valid]

    if delta is None:
        center = 0.5 * (pos.min(axis=0) + pos.max(axis=0))
        radius = float(np.linalg.norm(pos - center, axis=1).max())
        delta = 1e-3 * max(radius, 1e-12)

    pix, depth, _ = camera.project_points(pos)
    x = pix[:, 0] - 0.5
    y = pix[:, 1] - 0.5
    with np.errstate(invalid="ignore"):
        inside = np.isfinite(x) & np.isfinite(y) \
            & (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    x = np.where(inside, x, 0.0)
    y = np.where(inside, y, 0.0)

    dsamp, mw = _masked_bilinear(gbuf.depth, gbuf.mask, x, y)
    visible = inside & (mw > 0.25) & (depth <= dsamp[..., 0] + delta)

    if min_cos is not None:
        nsamp, _ = _masked_bilinear(gbuf.normal, gbuf.mask, x, y)
        norm = np.linalg.norm(nsamp, axis=-1, keepdims=True)
        nsamp = nsamp / np.maximum(norm, 1e-12)
        if camera.mode == ORTHO:
            wdir = -camera.basis()[2]
            cos = np.sum(nsamp * wdir, axis=-1)
        else:
            to_cam = camera.position - pos
            to_cam = to_cam / np.maximum(
                np.linalg.norm(to_cam, axis=-1, keepdims=True), 1e-12)
            cos = np.sum(nsamp * to_cam, axis=-1)
        visible &= cos >= min_cos

    alb, _ = _masked_bilinear(albedo, gbuf.mask, x, y)
    rms, _ = _masked_bilinear(rm, gbuf.mask, x, y)
    vis3 = visible[:, None]
    out.c_d[valid] = np.where(vis3, alb, 0.0)
    out.c_rm[valid] = np.where(vis3, rms, 0.0)
    out.m[valid] = visible.astype(np.int64)
    return out


def _canonical_sum(stack: np.ndarray) -> np.ndarray:
    # value-sorted accumulation: the sum is bit-identical under any
    # permutation of the views
    return np.sort(stack, axis=0).sum(axis=0)


def blend_views(
    partials: list[ViewPartial],
    eps: float = BLEND_EPS,
    debias: bool = False,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Average the per-view partial maps: C = (sum C^i) / (M + eps).

    M = sum M^i counts covering views per texel; uncovered texels come out
    exactly 0. The literal eps bias understates a k-view average by
    eps / (k + eps); debias=True divides by max(M, 1) instead, which the
    consistency checks rely on. View order never matters, bit for bit.
    """
    if not partials:
        raise UvError("no view partials to blend")
    shape = partials[0].m.shape
    for p in partials:
        if p.m.shape != shape or p.c_d.shape != shape + (3,) \
                or p.c_rm.shape != shape + (3,):
            raise UvError("view partials disagree in resolution")
    m = _canonical_sum(np.stack([p.m for p in partials]).astype(np.int64))
    c_d = _canonical_sum(np.stack([p.c_d for p in partials]))
    c_rm = _canonical_sum(np.stack([p.c_rm for p in partials]))
    if debias:
        den = np.maximum(m, 1)[..., None].astype(np.float64)
    else:
        den = m[..., None] + eps
    return c_d / den, c_rm / den, m


def missing_fraction(m: np.ndarray, validity: np.ndarray) -> float:
    """Fraction of valid texels no view covered (1.0 when nothing is valid)."""
    n_valid = int((validity > 0).sum())
    if n_valid == 0:
        return 1.0
    n_missing = int(((validity > 0) & (m == 0)).sum())
    return n_missing / n_valid


# ---------------------------------------------------------------------------
# Refinement: fill texels no view covered.

@dataclass
class RefineRequest:
    """Inputs to UV refinement: a partial material map, its coverage mask,
    and the baked position map (carried for external tools that want
    geometry context)."""

    material: np.ndarray  # (R, R, 3)
    mask: np.ndarray      # (R, R) {0, 1}
    position: np.ndarray  # (R, R, 3)

    def __post_init__(self):
        self.material = np.asarray(self.material, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        self.position = np.asarray(self.position, dtype=np.float64)
        if self.material.ndim != 3 or self.material.shape[2] != 3:
            raise UvError(f"material must be (R, R, 3), got {self.material.shape}")
        hw = self.material.shape[:2]
        if self.mask.shape != hw or self.position.shape[:2] != hw:
            raise UvError("material, mask and position shapes disagree")
        if not np.isin(self.mask, (0.0, 1.0)).all():
            raise UvError("mask must be binary")
        if not np.isfinite(self.material).all():
            raise UvError("material map contains non-finite values")


def _upsample2(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    ys = (np.arange(out_h) + 0.5) / 2.0 - 0.5
    xs = (np.arange(out_w) + 0.5) / 2.0 - 0.5
    gx, gy = np.meshgrid(xs, ys)
    return bilinear_sample(img, gx, gy)


def _pull_push(material: np.ndarray, mask: np.ndarray) -> np.ndarray:
    h, w = mask.shape
    size = 1
    while size < max(h, w):
        size *= 2
    pre = np.zeros((size, size, material.shape[2]))
    wt = np.zeros((size, size))
    pre[:h, :w] = material * mask[..., None]
    wt[:h, :w] = mask

    # pull: average masked texels into ever-coarser levels
    levels = [(pre, wt)]
    while levels[-1][1].shape[0] > 1:
        p, q = levels[-1]
        p2 = 0.25 * (p[0::2, 0::2] + p[1::2, 0::2] + p[0::2, 1::2] + p[1::2, 1::2])
        q2 = 0.25 * (q[0::2, 0::2] + q[1::2, 0::2] + q[0::2, 1::2] + q[1::2, 1::2])
        levels.append((p2, q2))

    # push: resolve covered texels to their own average, fill the rest
    # from the coarser level
    p, q = levels[-1]
    filled = p / np.maximum(q, 1e-12)[..., None]
    for p, q in reversed(levels[:-1]):
        up = _upsample2(filled, q.shape[0], q.shape[1])
        own = p / np.maximum(q, 1e-12)[..., None]
        filled = np.where((q > 0)[..., None], own, up)
    return filled[:h, :w]


def refine_uv(req: RefineRequest, method: str = "pullpush", stem=None) -> np.ndarray:
    """Complete a partial UV material map.

    pullpush fills unmasked texels from a mip pyramid built over masked
    texels only; masked texels are returned bit-identical and filled
    values never leave the per-channel [min, max] of the masked inputs.
    external writes the request file triple next to `stem` and reads back
    `<stem>.refined.pfm`, which some out-of-process tool must produce.
    """
    if not req.mask.any():
        raise UvError("refinement needs at least one masked texel")
    if method == "pullpush":
        filled = _pull_push(req.material, req.mask)
        covered = req.material[req.mask > 0]
        lo = covered.min(axis=0)
        hi = covered.max(axis=0)
        filled = np.clip(filled, lo, hi)
        return np.where(req.mask[..., None] > 0, req.material, filled)
    if method == "external":
        if stem is None:
            raise UvError("external refinement needs a file stem")
        write_refine_request(stem, req)
        refined_path = f"{stem}.refined.pfm"
        try:
            refined = read_pfm(refined_path).data
        except FileNotFoundError:
            raise UvError(
                f"external refinement output {refined_path} not found; run "
                f"the external tool on the written request files"
            ) from None
        if refined.shape != req.material.shape:
            raise UvError(
                f"refined map shape {refined.shape} != request "
                f"{req.material.shape}"
            )
        return refined
    raise UvError(f"unknown refinement method {method!r}")


def write_refine_request(stem, req: RefineRequest) -> None:
    """Write the request as `<stem>.material.pfm` + `.mask.png` + `.position.pfm`."""
    write_pfm(f"{stem}.material.pfm", req.material)
    write_png(f"{stem}.mask.png", req.mask, apply_srgb=False)
    write_pfm(f"{stem}.position.pfm", req.position)


def read_refine_request(stem) -> RefineRequest:
    material = read_pfm(f"{stem}.material.pfm").data
    mask = read_png(f"{stem}.mask.png", apply_srgb=False).data[..., 0]
    position = read_pfm(f"{stem}.position.pfm").data
    return RefineRequest(material=material, mask=np.round(mask), position=position)
