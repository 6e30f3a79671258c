"""Loss family and image metrics for material decomposition.

Perceptual loss: sum over tapped feature layers of mean-absolute
difference, each tap normalized by its own C*H*W. With the identity
stack this collapses to plain mean L1. Material loss adds the albedo
and packed-RM perceptual terms. Re-render loss compares two renders of
the same geometry under the same light and can chain its gradient back
to the predicted material maps through the analytic shading partials.

SSI loss aligns scale and shift by closed-form least squares over all
channels jointly before taking L1. PSNR assumes peak 1 and caps at
99 dB; SSIM uses the standard 11x11 Gaussian window, sigma 1.5,
K1=0.01, K2=0.03.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .envlight import EnvMap, PrefilteredEnv
from .features import FeatureStack
from .image import ImageF, read_pfm
from .shading import MaterialSample, render_view, shade_grad


class LossError(ValueError):
    pass


def _data(img) -> np.ndarray:
    return img.data if isinstance(img, ImageF) else np.asarray(img, dtype=np.float64)


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise LossError(f"shape mismatch: {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# perceptual family

def perceptual_loss(y_hat, y, stack: FeatureStack) -> float:
    a, b = _data(y_hat), _data(y)
    _check_same_shape(a, b)
    total = 0.0
    for fa, fb in zip(stack.forward(a), stack.forward(b)):
        # reduce in channel-last order so the identity stack reproduces
        # l1_loss bit for bit (same summation sequence)
        diff = np.ascontiguousarray(np.moveaxis(np.abs(fa - fb), 0, -1))
        total += float(diff.mean())
    return total


def perceptual_loss_grad(y_hat, y, stack: FeatureStack,
                         fd_step: float = 1e-4) -> np.ndarray:
    """d perceptual_loss / d y_hat, shape (H, W, C).

    Exact conv-transpose chain for linear stacks; ReLU stacks fall back
    to per-texel central differences (tiny images only).
    """
    a, b = _data(y_hat), _data(y)
    _check_same_shape(a, b)
    if stack.is_linear:
        feats_a = stack.forward(a)
        feats_b = stack.forward(b)
        tap_grads = [np.sign(fa - fb) / fa.size
                     for fa, fb in zip(feats_a, feats_b)]
        return stack.input_grad(tap_grads, a.shape)
    grad = np.zeros_like(a)
    flat = grad.reshape(-1)
    work = a.copy().reshape(-1)
    for i in range(work.size):
        keep = work[i]
        work[i] = keep + fd_step
        up = perceptual_loss(work.reshape(a.shape), b, stack)
        work[i] = keep - fd_step
        dn = perceptual_loss(work.reshape(a.shape), b, stack)
        work[i] = keep
        flat[i] = (up - dn) / (2 * fd_step)
    return grad


def material_loss(k_d, k_d_hat, k_rm, k_rm_hat, stack: FeatureStack) -> float:
    """Albedo + packed-RM perceptual terms (RM channels: R, M, 0)."""
    return perceptual_loss(k_d_hat, k_d, stack) + perceptual_loss(k_rm_hat, k_rm, stack)


def rerender_loss(pred_albedo, pred_rm, gt_albedo, gt_rm, gbuf, camera,
                  pre: PrefilteredEnv, stack: FeatureStack,
                  with_grad: bool = False):
    """Perceptual distance between renders of two material sets.

    Both renders share the G-buffer geometry and the light. With
    with_grad=True also returns d loss / d pred maps as a pair of
    (H, W, 3) arrays: albedo gradient and packed (dR, dM, 0) gradient,
    zero off-mask.
    """
    img_pred = render_view(gbuf, _as_image(pred_albedo), _as_image(pred_rm),
                           pre, camera)
    img_gt = render_view(gbuf, _as_image(gt_albedo), _as_image(gt_rm),
                         pre, camera)
    loss = perceptual_loss(img_pred, img_gt, stack)
    if not with_grad:
        return loss
    dimg = perceptual_loss_grad(img_pred, img_gt, stack)
    sel = gbuf.mask > 0
    albedo = _data(pred_albedo)
    rm = _data(pred_rm)
    sample = MaterialSample(a=albedo[sel], m=rm[..., 1][sel], r=rm[..., 0][sel])
    g = shade_grad(sample, gbuf.normal[sel], gbuf.position[sel],
                   np.asarray(camera.position, dtype=np.float64), pre)
    d_albedo = np.zeros_like(albedo)
    d_rm = np.zeros_like(rm)
    dout = dimg[sel]  # (n, 3) upstream gradient per covered pixel
    d_albedo[sel] = np.einsum("no,noc->nc", dout, g.da)
    d_rm[..., 0][sel] = np.einsum("no,no->n", dout, g.dr)
    d_rm[..., 1][sel] = np.einsum("no,no->n", dout, g.dm)
    return loss, d_albedo, d_rm


def _as_image(x) -> ImageF:
    return x if isinstance(x, ImageF) else ImageF(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# plain and scale-shift-invariant L1

def l1_loss(y_hat, y) -> float:
    a, b = _data(y_hat), _data(y)
    _check_same_shape(a, b)
    return float(np.abs(a - b).mean())


def ssi_fit(y_hat, y) -> tuple[float, float]:
    """Least-squares (scale, shift) aligning y_hat to y, all channels
    jointly: argmin sum (s*y_hat + t - y)^2."""
    a, b = _data(y_hat).reshape(-1), _data(y).reshape(-1)
    _check_same_shape(a, b)
    var = a.var()
    if var < 1e-12:
        raise LossError("SSI alignment degenerate: prediction variance < 1e-12")
    s = ((a - a.mean()) * (b - b.mean())).mean() / var
    t = b.mean() - s * a.mean()
    return float(s), float(t)


def ssi_loss(y_hat, y) -> float:
    s, t = ssi_fit(y_hat, y)
    a, b = _data(y_hat), _data(y)
    return float(np.abs(s * a + t - b).mean())


# ---------------------------------------------------------------------------
# LDR metrics

def psnr(y_hat, y) -> float:
    a, b = _data(y_hat), _data(y)
    _check_same_shape(a, b)
    mse = float(((a - b) ** 2).mean())
    if mse < 1e-10:
        return 99.0
    return min(99.0, 10.0 * np.log10(1.0 / mse))


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filter_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation of a (H, W) map with kernel k x k."""
    rows = np.lib.stride_tricks.sliding_window_view(img, len(k), axis=1) @ k
    cols = np.lib.stride_tricks.sliding_window_view(rows, len(k), axis=0)
    return cols @ k


def ssim(y_hat, y) -> float:
    a, b = _data(y_hat), _data(y)
    _check_same_shape(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    size, sigma = 11, 1.5
    if a.shape[0] < size or a.shape[1] < size:
        raise LossError("images smaller than the 11x11 SSIM window")
    k = _gaussian_kernel(size, sigma)
    c1, c2 = 0.01 ** 2, 0.03 ** 2  # peak 1
    vals = []
    for ch in range(a.shape[2]):
        x, z = a[..., ch], b[..., ch]
        mx = _filter_valid(x, k)
        mz = _filter_valid(z, k)
        sxx = _filter_valid(x * x, k) - mx * mx
        szz = _filter_valid(z * z, k) - mz * mz
        sxz = _filter_valid(x * z, k) - mx * mz
        num = (2 * mx * mz + c1) * (2 * sxz + c2)
        den = (mx * mx + mz * mz + c1) * (sxx + szz + c2)
        vals.append((num / den).mean())
    return float(np.mean(vals))


# ---------------------------------------------------------------------------

class RelightSampler:
    """Deterministic environment-map draws from a directory of PFMs.

    Same seed -> same sequence, independent of filesystem listing order
    (names are sorted before drawing).
    """

    def __init__(self, env_dir, seed: int = 0):
        self.env_dir = Path(env_dir)
        self.paths = sorted(self.env_dir.glob("*.pfm"))
        if not self.paths:
            raise LossError(f"no .pfm environment maps in {self.env_dir}")
        self.seed = seed
        self._rng = np.random.default_rng(seed)
        self.draw_index = 0

    def draw(self) -> tuple[EnvMap, str]:
        pick = int(self._rng.integers(len(self.paths)))
        self.draw_index += 1
        path = self.paths[pick]
        return EnvMap(read_pfm(path)), path.name
