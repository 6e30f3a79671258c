"""Pluggable convolutional feature stacks for perceptual losses.

A stack is an ordered list of conv layers (optionally ReLU-terminated)
plus the tap indices whose outputs feed the loss. Ships with an identity
stack (perceptual loss collapses to mean L1), a seeded random-filter
stack (random features as a deterministic perceptual proxy), and a
binary weight-file loader for externally trained stacks.

Taps are 1-based layer indices and are taken post-activation.

Gradient support is deliberately limited to stacks with no
nonlinearities (exact conv-transpose chain); callers fall back to
finite differences otherwise rather than growing an autodiff engine.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np


class FeatureStackError(ValueError):
    pass


FSTK_MAGIC = b"FSTK"


@dataclass
class ConvLayer:
    """2D correlation: weight (C_out, C_in, kH, kW), zero padding."""

    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1
    pad: int = 0
    nonlin: bool = False  # ReLU after the affine map

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 4:
            raise FeatureStackError("conv weight must be 4D")
        if self.bias.shape != (self.weight.shape[0],):
            raise FeatureStackError("bias length must match output channels")
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise FeatureStackError("weights must be finite")
        if self.stride < 1 or self.pad < 0:
            raise FeatureStackError("bad stride or padding")

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    def forward(self, x: np.ndarray) -> np.ndarray:
        """(C_in, H, W) -> (C_out, H', W')."""
        co, ci, kh, kw = self.weight.shape
        if x.shape[0] != ci:
            raise FeatureStackError(
                f"layer expects {ci} channels, got {x.shape[0]}")
        p = self.pad
        if p:
            x = np.pad(x, ((0, 0), (p, p), (p, p)))
        if x.shape[1] < kh or x.shape[2] < kw:
            raise FeatureStackError("input smaller than kernel")
        win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
        win = win[:, :: self.stride, :: self.stride]
        out = np.einsum("cyxhw,ochw->oyx", win, self.weight, optimize=True)
        out += self.bias[:, None, None]
        if self.nonlin:
            np.maximum(out, 0.0, out=out)
        return out

    def input_grad(self, gout: np.ndarray, in_hw: tuple[int, int]) -> np.ndarray:
        """Adjoint of forward for the linear part (no ReLU)."""
        co, ci, kh, kw = self.weight.shape
        h, w = in_hw
        p, s = self.pad, self.stride
        ho, wo = gout.shape[1], gout.shape[2]
        gpad = np.zeros((ci, h + 2 * p, w + 2 * p))
        for ky in range(kh):
            for kx in range(kw):
                patch = np.einsum("oc,oyx->cyx", self.weight[:, :, ky, kx], gout)
                gpad[:, ky : ky + s * ho : s, kx : kx + s * wo : s] += patch
        return gpad[:, p : p + h, p : p + w]


@dataclass
class FeatureStack:
    layers: list[ConvLayer]
    taps: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise FeatureStackError("stack needs at least one layer")
        for j in self.taps:
            if not 1 <= j <= len(self.layers):
                raise FeatureStackError(f"tap {j} out of range "
                                        f"(1..{len(self.layers)})")
        if not self.taps:
            raise FeatureStackError("stack needs at least one tap")

    @property
    def is_linear(self) -> bool:
        return not any(layer.nonlin for layer in self.layers)

    def forward(self, image: np.ndarray) -> list[np.ndarray]:
        """Image (H, W, C) -> tapped features, each (C_j, H_j, W_j)."""
        x = np.asarray(image, dtype=np.float64).transpose(2, 0, 1)
        feats = {}
        for j, layer in enumerate(self.layers, start=1):
            x = layer.forward(x)
            if j in self.taps:
                feats[j] = x
            if j >= max(self.taps):
                break
        return [feats[j] for j in self.taps]

    def input_grad(self, tap_grads: list[np.ndarray],
                   image_shape: tuple[int, int, int]) -> np.ndarray:
        """Chain tap-space gradients back to image space (H, W, C).

        Exact for linear stacks only; ReLU stacks are rejected here.
        """
        if not self.is_linear:
            raise FeatureStackError(
                "analytic backprop supports only stacks without nonlinearities")
        h, w, c = image_shape
        # per-layer input sizes, replaying the forward shape arithmetic
        sizes = [(h, w)]
        for layer in self.layers:
            ph, pw = sizes[-1]
            kh, kw = layer.weight.shape[2], layer.weight.shape[3]
            ho = (ph + 2 * layer.pad - kh) // layer.stride + 1
            wo = (pw + 2 * layer.pad - kw) // layer.stride + 1
            sizes.append((ho, wo))
        total = np.zeros((c, h, w))
        for tap, g in zip(self.taps, tap_grads):
            g = np.asarray(g, dtype=np.float64)
            for j in range(tap, 0, -1):
                g = self.layers[j - 1].input_grad(g, sizes[j - 1])
            total += g
        return total.transpose(1, 2, 0)


def identity_stack(channels: int = 3) -> FeatureStack:
    """Single 1x1 identity layer; perceptual loss becomes mean L1."""
    w = np.eye(channels).reshape(channels, channels, 1, 1)
    return FeatureStack([ConvLayer(w, np.zeros(channels))], taps=[1])


def random_stack(seed: int = 0, channels_in: int = 3) -> FeatureStack:
    """Fixed seeded 8-layer random-filter stack, taps at 4 and 8.

    3x3 kernels, stride 2 every other layer, ReLU throughout; weights
    scaled by sqrt(2 / fan_in) to keep feature magnitudes stable.
    """
    rng = np.random.default_rng(seed)
    widths = [8, 8, 16, 16, 32, 32, 64, 64]
    layers = []
    c_prev = channels_in
    for i, c_out in enumerate(widths):
        scale = np.sqrt(2.0 / (c_prev * 9))
        w = rng.normal(0.0, scale, (c_out, c_prev, 3, 3))
        layers.append(ConvLayer(w, np.zeros(c_out), stride=1 + (i % 2),
                                pad=1, nonlin=True))
        c_prev = c_out
    return FeatureStack(layers, taps=[4, 8])


def default_taps(n_layers: int) -> list[int]:
    """Multiples of 4 up to the layer count (the deep-stack tap
    convention), or just the last layer for short stacks."""
    taps = list(range(4, n_layers + 1, 4))
    return taps if taps else [n_layers]


def write_feature_stack(path, stack: FeatureStack) -> None:
    """Binary layer dump: magic, layer count, then per layer the shape
    ints (C_out, C_in, kH, kW, stride, pad, nonlin as u32 little-endian)
    followed by float32 weights and bias. Taps are a usage convention,
    not part of the file."""
    with open(path, "wb") as f:
        f.write(FSTK_MAGIC)
        f.write(struct.pack("<I", len(stack.layers)))
        for layer in stack.layers:
            co, ci, kh, kw = layer.weight.shape
            f.write(struct.pack("<7I", co, ci, kh, kw, layer.stride,
                                layer.pad, 1 if layer.nonlin else 0))
            f.write(layer.weight.astype("<f4").tobytes())
            f.write(layer.bias.astype("<f4").tobytes())


def read_feature_stack(path, taps: list[int] | None = None) -> FeatureStack:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != FSTK_MAGIC:
        raise FeatureStackError("not a feature-stack file (bad magic)")
    off = 4
    (n_layers,) = struct.unpack_from("<I", blob, off)
    off += 4
    layers = []
    for _ in range(n_layers):
        if off + 28 > len(blob):
            raise FeatureStackError("truncated layer header")
        co, ci, kh, kw, stride, pad, nonlin = struct.unpack_from("<7I", blob, off)
        off += 28
        nw, nb = co * ci * kh * kw, co
        end = off + 4 * (nw + nb)
        if end > len(blob):
            raise FeatureStackError("truncated layer data")
        w = np.frombuffer(blob, dtype="<f4", count=nw, offset=off)
        b = np.frombuffer(blob, dtype="<f4", count=nb, offset=off + 4 * nw)
        off = end
        layers.append(ConvLayer(w.astype(np.float64).reshape(co, ci, kh, kw),
                                b.astype(np.float64), stride=stride, pad=pad,
                                nonlin=bool(nonlin)))
    if off != len(blob):
        raise FeatureStackError("trailing bytes after last layer")
    return FeatureStack(layers, taps=taps or default_taps(len(layers)))
