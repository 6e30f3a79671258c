"""Software rasterization of G-buffers.

Coverage is decided with 64x-subpixel fixed-point edge functions and the
top-left fill rule, so the set of covered pixels is integer-exact and
identical across platforms and thread counts. Attribute interpolation is
perspective-correct (plain affine falls out for orthographic cameras where
the divisor is 1). Back-face culling is off: decomposition targets may
have inconsistent winding.

Threading splits the image into scanline bands; every band walks the full
triangle list in order and writes only its own rows, so the result is
bit-identical for any band partition.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .camera import PERSP, Camera
from .mesh import TriMesh

SUBPIX = 256  # subpixel resolution of the fixed-point coverage test
_NEAR = 1e-6  # perspective near plane; crossing triangles are skipped
# int64 edge functions stay exact while |coords| < 2^23 subpixel units;
# triangles projecting beyond that (essentially touching the near plane)
# are skipped and counted
_COORD_LIMIT = 1 << 23


@dataclass
class GBuffer:
    """Per-pixel geometry maps. Where mask=0 the other maps are zero and
    carry no meaning."""

    position: np.ndarray  # (H, W, 3) world units
    normal: np.ndarray    # (H, W, 3) unit vectors under the mask
    uv: np.ndarray        # (H, W, 2)
    depth: np.ndarray     # (H, W) forward-axis camera units
    mask: np.ndarray      # (H, W) {0, 1} float
    n_degenerate: int = 0     # zero-area triangles skipped
    n_near_clipped: int = 0   # triangles crossing the perspective near plane

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def width(self) -> int:
        return self.mask.shape[1]


def _band_rows(height: int, n_bands: int) -> list[tuple[int, int]]:
    edges = np.linspace(0, height, n_bands + 1).astype(int)
    return [(int(edges[i]), int(edges[i + 1])) for i in range(n_bands)
            if edges[i + 1] > edges[i]]


def rasterize_gbuffer(mesh: TriMesh, camera: Camera, threads: int = 1) -> GBuffer:
    h, w = camera.height, camera.width
    gbuf = GBuffer(
        position=np.zeros((h, w, 3)),
        normal=np.zeros((h, w, 3)),
        uv=np.zeros((h, w, 2)),
        depth=np.full((h, w), np.inf),
        mask=np.zeros((h, w)),
    )

    corners = mesh.corner_positions()  # (F, 3, 3)
    pix, depth, div = camera.project_points(corners.reshape(-1, 3))
    pix = pix.reshape(-1, 3, 2)
    depth = depth.reshape(-1, 3).copy()  # mutated by the winding flip below
    div = div.reshape(-1, 3).copy()

    keep = np.ones(len(pix), dtype=bool)
    n_near = 0
    if camera.mode == PERSP:
        ok = (depth > _NEAR).all(axis=1)
        n_near = int((~ok).sum())
        keep &= ok
        pix = np.where(keep[:, None, None], pix, 0.0)

    # fixed-point vertex coordinates; rounding here is the only coverage
    # approximation
    fx = np.round(pix[..., 0] * SUBPIX)
    fy = np.round(pix[..., 1] * SUBPIX)
    sane = (np.abs(fx) < _COORD_LIMIT).all(axis=1) & (np.abs(fy) < _COORD_LIMIT).all(axis=1)
    n_near += int((keep & ~sane).sum())
    keep &= sane
    fx = np.where(keep[:, None], fx, 0.0)
    fy = np.where(keep[:, None], fy, 0.0)
    xi = fx.astype(np.int64)
    yi = fy.astype(np.int64)

    area2 = ((xi[:, 1] - xi[:, 0]) * (yi[:, 2] - yi[:, 0])
             - (yi[:, 1] - yi[:, 0]) * (xi[:, 2] - xi[:, 0]))
    n_degen = int((keep & (area2 == 0)).sum())
    keep &= area2 != 0

    # orient every triangle clockwise-on-screen (area2 > 0 with y down) so
    # a single inside test covers both windings
    attrs = np.concatenate(
        [corners, mesh.corner_normals(), mesh.corner_uvs()], axis=-1).copy()  # (F, 3, 8)
    flip = keep & (area2 < 0)
    perm = [0, 2, 1]
    xi[flip] = xi[flip][:, perm]
    yi[flip] = yi[flip][:, perm]
    attrs[flip] = attrs[flip][:, perm, :]
    depth[flip] = depth[flip][:, perm]
    div[flip] = div[flip][:, perm]

    faces = np.nonzero(keep)[0]  # source order; z-ties keep the first writer

    def raster_band(rows: tuple[int, int]) -> None:
        band_y0, band_y1 = rows
        zband = gbuf.depth[band_y0:band_y1]
        mband = gbuf.mask[band_y0:band_y1]
        pband = gbuf.position[band_y0:band_y1]
        nband = gbuf.normal[band_y0:band_y1]
        uband = gbuf.uv[band_y0:band_y1]
        for f in faces:
            tx, ty = xi[f], yi[f]
            min_x = max(int(np.floor(tx.min() / SUBPIX - 0.5)), 0)
            max_x = min(int(np.ceil(tx.max() / SUBPIX - 0.5)), w - 1)
            min_y = max(int(np.floor(ty.min() / SUBPIX - 0.5)), band_y0)
            max_y = min(int(np.ceil(ty.max() / SUBPIX - 0.5)), band_y1 - 1)
            if min_x > max_x or min_y > max_y:
                continue

            # sample points at pixel centers, integer subpixel units
            sx = np.arange(min_x, max_x + 1, dtype=np.int64) * SUBPIX + SUBPIX // 2
            sy = np.arange(min_y, max_y + 1, dtype=np.int64) * SUBPIX + SUBPIX // 2
            gx, gy = np.meshgrid(sx, sy)

            edge = np.empty((3,) + gx.shape, dtype=np.int64)
            inside = np.ones(gx.shape, dtype=bool)
            for k in range(3):
                ex0, ey0 = tx[k], ty[k]
                dx = tx[(k + 1) % 3] - ex0
                dy = ty[(k + 1) % 3] - ey0
                ek = dx * (gy - ey0) - dy * (gx - ex0)
                edge[k] = ek
                # top-left rule: boundary samples belong to top edges
                # (dy==0, dx>0) and left edges (dy<0)
                if (dy == 0 and dx > 0) or dy < 0:
                    inside &= ek >= 0
                else:
                    inside &= ek > 0
            if not inside.any():
                continue

            tot = (float(tx[1] - tx[0]) * float(ty[2] - ty[0])
                   - float(ty[1] - ty[0]) * float(tx[2] - tx[0]))
            # barycentric weight of vertex k comes from the opposite edge
            l0 = edge[1] / tot
            l1 = edge[2] / tot
            l2 = edge[0] / tot

            with np.errstate(divide="ignore", invalid="ignore"):
                iw0, iw1, iw2 = 1.0 / div[f, 0], 1.0 / div[f, 1], 1.0 / div[f, 2]
                inv_w = l0 * iw0 + l1 * iw1 + l2 * iw2
                pdepth = (l0 * depth[f, 0] * iw0 + l1 * depth[f, 1] * iw1
                          + l2 * depth[f, 2] * iw2) / inv_w

            zview = zband[min_y - band_y0:max_y + 1 - band_y0, min_x:max_x + 1]
            with np.errstate(invalid="ignore"):
                win = inside & (pdepth < zview)
            if not win.any():
                continue

            ys, xs = np.nonzero(win)
            # fixed-order elementwise blend (a BLAS matmul would round
            # differently depending on the row count, breaking bit-level
            # determinism across band partitions)
            lw0 = l0[ys, xs] * iw0
            lw1 = l1[ys, xs] * iw1
            lw2 = l2[ys, xs] * iw2
            wsum = lw0 + lw1 + lw2
            lw0, lw1, lw2 = lw0 / wsum, lw1 / wsum, lw2 / wsum
            pa = (lw0[:, None] * attrs[f, 0] + lw1[:, None] * attrs[f, 1]
                  + lw2[:, None] * attrs[f, 2])  # (n, 8)

            ry = min_y - band_y0 + ys
            rx = min_x + xs
            zview[ys, xs] = pdepth[ys, xs]
            pband[ry, rx] = pa[:, 0:3]
            nvec = pa[:, 3:6]
            nl = np.linalg.norm(nvec, axis=1, keepdims=True)
            nl[nl == 0] = 1.0
            nband[ry, rx] = nvec / nl
            uband[ry, rx] = pa[:, 6:8]
            mband[ry, rx] = 1.0

    bands = _band_rows(h, max(1, int(threads)))
    if len(bands) <= 1:
        for b in bands:
            raster_band(b)
    else:
        with ThreadPoolExecutor(max_workers=len(bands)) as ex:
            list(ex.map(raster_band, bands))

    gbuf.depth[gbuf.mask == 0] = 0.0
    gbuf.n_degenerate = n_degen
    gbuf.n_near_clipped = n_near
    return gbuf
