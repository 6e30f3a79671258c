"""Float image container plus PFM/PNG file I/O.

All in-memory image data is linear radiometric float64 unless the ``srgb``
flag says otherwise. PFM is the HDR interchange format (raw float32,
bit-exact); PNG is the LDR format, with the exact IEC 61966-2-1 sRGB
transfer applied on write and inverted on read.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ImageError(ValueError):
    """Malformed image file or unsupported encoding."""


@dataclass
class ImageF:
    """Row-major float image, shape (height, width, channels).

    channels is 1, 2 or 3. Data is linear unless ``srgb`` is set. LDR
    images (anything headed for PNG) are expected to lie in [0, 1].
    """

    data: np.ndarray
    srgb: bool = field(default=False)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 2, 3):
            raise ImageError(f"expected (H, W, 1|2|3) data, got shape {arr.shape}")
        self.data = arr

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @classmethod
    def constant(cls, height: int, width: int, value, channels: int | None = None) -> "ImageF":
        value = np.atleast_1d(np.asarray(value, dtype=np.float64))
        if channels is None:
            channels = value.shape[0]
        data = np.broadcast_to(value, (height, width, channels)).copy()
        return cls(data)

    @classmethod
    def zeros(cls, height: int, width: int, channels: int = 3) -> "ImageF":
        return cls(np.zeros((height, width, channels)))

    def clamped(self, lo: float = 0.0, hi: float = 1.0) -> "ImageF":
        return ImageF(np.clip(self.data, lo, hi), srgb=self.srgb)

    def expand3(self) -> np.ndarray:
        """Data broadcast to 3 channels (grayscale replicated)."""
        if self.channels == 3:
            return self.data
        if self.channels == 1:
            return np.repeat(self.data, 3, axis=2)
        raise ImageError("cannot expand 2-channel image to RGB")


# ---------------------------------------------------------------------------
# sRGB transfer (IEC 61966-2-1 piecewise, not the gamma-2.2 approximation)

def srgb_encode(linear: np.ndarray) -> np.ndarray:
    l = np.clip(linear, 0.0, 1.0)
    return np.where(l <= 0.0031308, 12.92 * l, 1.055 * np.power(l, 1.0 / 2.4) - 0.055)


def srgb_decode(encoded: np.ndarray) -> np.ndarray:
    s = np.asarray(encoded, dtype=np.float64)
    return np.where(s <= 0.04045, s / 12.92, np.power((s + 0.055) / 1.055, 2.4))


def tonemap_reinhard(hdr: np.ndarray) -> np.ndarray:
    """Simple x/(1+x) operator for previewing HDR renders as PNG."""
    x = np.maximum(hdr, 0.0)
    return x / (1.0 + x)


# ---------------------------------------------------------------------------
# PFM: "PF" (3ch) / "Pf" (1ch) header, dims, scale line (sign = endianness),
# then raw float32 scanlines stored bottom-to-top.

def write_pfm(path, image: ImageF | np.ndarray) -> None:
    data = image.data if isinstance(image, ImageF) else np.asarray(image, dtype=np.float64)
    if data.ndim == 2:
        data = data[:, :, None]
    if not np.all(np.isfinite(data)):
        raise ImageError("NaN or Inf in PFM write input")
    ch = data.shape[2]
    if ch == 2:
        # 2-channel payloads (e.g. lookup tables) ride in a 3-channel file
        data = np.concatenate([data, np.zeros_like(data[:, :, :1])], axis=2)
        ch = 3
    if ch not in (1, 3):
        raise ImageError(f"PFM supports 1 or 3 channels, got {ch}")
    header = b"PF\n" if ch == 3 else b"Pf\n"
    h, w = data.shape[:2]
    payload = np.flipud(data.astype("<f4"))  # bottom-to-top scanlines
    with open(path, "wb") as f:
        f.write(header)
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")  # negative scale = little-endian
        f.write(payload.tobytes())


def read_pfm(path) -> ImageF:
    with open(path, "rb") as f:
        raw = f.read()

    def next_token(pos):
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageError(f"{path}: truncated PFM header")
        return raw[start:pos], pos

    magic, pos = next_token(0)
    if magic == b"PF":
        ch = 3
    elif magic == b"Pf":
        ch = 1
    else:
        raise ImageError(f"{path}: not a PFM file (magic {magic!r})")
    wtok, pos = next_token(pos)
    htok, pos = next_token(pos)
    stok, pos = next_token(pos)
    try:
        w, h, scale = int(wtok), int(htok), float(stok)
    except ValueError as e:
        raise ImageError(f"{path}: bad PFM header") from e
    if w <= 0 or h <= 0 or w * h * ch * 4 > 1 << 31:
        raise ImageError(f"{path}: bad PFM dimensions {w}x{h}")
    pos += 1  # single whitespace after the scale line
    need = w * h * ch * 4
    body = raw[pos : pos + need]
    if len(body) != need:
        raise ImageError(f"{path}: PFM payload truncated")
    dt = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(body, dtype=dt).reshape(h, w, ch)
    arr = np.flipud(arr).astype(np.float64)
    if abs(scale) not in (0.0, 1.0):
        arr = arr * abs(scale)
    return ImageF(arr)


# ---------------------------------------------------------------------------
# PNG: minimal codec over zlib. Grayscale / RGB, 8 or 16 bit, no interlace.
# Values pass through the sRGB transfer in both directions so that in-memory
# data stays linear.

_PNG_SIG = b"\x89PNG\r\n\x1a\n"


def _png_chunk(tag: bytes, body: bytes) -> bytes:
    return (
        struct.pack(">I", len(body))
        + tag
        + body
        + struct.pack(">I", zlib.crc32(tag + body) & 0xFFFFFFFF)
    )


def write_png(path, image: ImageF | np.ndarray, bitdepth: int = 8, apply_srgb: bool = True) -> None:
    data = image.data if isinstance(image, ImageF) else np.asarray(image, dtype=np.float64)
    if data.ndim == 2:
        data = data[:, :, None]
    if not np.all(np.isfinite(data)):
        raise ImageError("NaN or Inf in PNG write input")
    if bitdepth not in (8, 16):
        raise ImageError(f"unsupported PNG bit depth {bitdepth}")
    ch = data.shape[2]
    if ch not in (1, 3):
        raise ImageError(f"PNG supports 1 or 3 channels, got {ch}")
    encoded = srgb_encode(data) if apply_srgb else np.clip(data, 0.0, 1.0)
    maxval = (1 << bitdepth) - 1
    quant = np.rint(encoded * maxval)
    h, w = data.shape[:2]
    if bitdepth == 8:
        rows = quant.astype(np.uint8)
    else:
        rows = quant.astype(">u2")
    scan = rows.reshape(h, -1).view(np.uint8).reshape(h, -1)
    filtered = np.concatenate([np.zeros((h, 1), np.uint8), scan], axis=1)  # filter type 0
    colortype = 2 if ch == 3 else 0
    ihdr = struct.pack(">IIBBBBB", w, h, bitdepth, colortype, 0, 0, 0)
    with open(path, "wb") as f:
        f.write(_PNG_SIG)
        f.write(_png_chunk(b"IHDR", ihdr))
        f.write(_png_chunk(b"IDAT", zlib.compress(filtered.tobytes(), 6)))
        f.write(_png_chunk(b"IEND", b""))


def _png_unfilter(raw: np.ndarray, h: int, stride: int, bpp: int) -> np.ndarray:
    out = np.zeros((h, stride), dtype=np.uint8)
    pos = 0
    for y in range(h):
        ftype = raw[pos]
        line = raw[pos + 1 : pos + 1 + stride].astype(np.int32)
        pos += 1 + stride
        prev = out[y - 1].astype(np.int32) if y > 0 else np.zeros(stride, np.int32)
        if ftype == 0:
            cur = line
        elif ftype == 2:  # Up
            cur = (line + prev) & 0xFF
        elif ftype in (1, 3, 4):  # Sub / Average / Paeth need a scalar scan
            cur = np.zeros(stride, np.int32)
            for x in range(stride):
                a = cur[x - bpp] if x >= bpp else 0
                b = prev[x]
                c = prev[x - bpp] if x >= bpp else 0
                if ftype == 1:
                    pred = a
                elif ftype == 3:
                    pred = (a + b) >> 1
                else:
                    p = a + b - c
                    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
                    pred = a if (pa <= pb and pa <= pc) else (b if pb <= pc else c)
                cur[x] = (line[x] + pred) & 0xFF
        else:
            raise ImageError(f"unsupported PNG filter type {ftype}")
        out[y] = cur.astype(np.uint8)
    return out


def read_png(path, apply_srgb: bool = True) -> ImageF:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != _PNG_SIG:
        raise ImageError(f"{path}: not a PNG file")
    pos = 8
    ihdr = None
    idat = []
    while pos + 8 <= len(raw):
        (length,) = struct.unpack(">I", raw[pos : pos + 4])
        tag = raw[pos + 4 : pos + 8]
        body = raw[pos + 8 : pos + 8 + length]
        pos += 12 + length
        if tag == b"IHDR":
            ihdr = body
        elif tag == b"IDAT":
            idat.append(body)
        elif tag == b"IEND":
            break
    if ihdr is None or not idat:
        raise ImageError(f"{path}: missing IHDR/IDAT")
    w, h, bitdepth, colortype, comp, filt, interlace = struct.unpack(">IIBBBBB", ihdr)
    if bitdepth not in (8, 16):
        raise ImageError(f"{path}: unsupported PNG bit depth {bitdepth}")
    if colortype not in (0, 2):
        raise ImageError(f"{path}: unsupported PNG color type {colortype}")
    if interlace != 0:
        raise ImageError(f"{path}: interlaced PNG not supported")
    ch = 3 if colortype == 2 else 1
    bpp = ch * (bitdepth // 8)
    stride = w * bpp
    plain = np.frombuffer(zlib.decompress(b"".join(idat)), dtype=np.uint8)
    if plain.size != h * (stride + 1):
        raise ImageError(f"{path}: PNG payload size mismatch")
    rows = _png_unfilter(plain, h, stride, bpp)
    if bitdepth == 8:
        arr = rows.reshape(h, w, ch).astype(np.float64) / 255.0
    else:
        arr = rows.reshape(h, -1).view(">u2").reshape(h, w, ch).astype(np.float64) / 65535.0
    if apply_srgb:
        arr = srgb_decode(arr)
    return ImageF(arr, srgb=not apply_srgb)


# ---------------------------------------------------------------------------

def read_image(path) -> ImageF:
    """Dispatch on extension: .pfm is HDR float, .png is LDR sRGB."""
    suffix = Path(path).suffix.lower()
    if suffix == ".pfm":
        return read_pfm(path)
    if suffix == ".png":
        return read_png(path)
    raise ImageError(f"unsupported image format {suffix!r} (use .pfm or .png)")


def write_image(path, image: ImageF | np.ndarray, **kwargs) -> None:
    suffix = Path(path).suffix.lower()
    if suffix == ".pfm":
        write_pfm(path, image)
    elif suffix == ".png":
        write_png(path, image, **kwargs)
    else:
        raise ImageError(f"unsupported image format {suffix!r} (use .pfm or .png)")


def bilinear_sample(data: np.ndarray, x: np.ndarray, y: np.ndarray, wrap_x: bool = False) -> np.ndarray:
    """Bilinear lookup at continuous pixel coordinates.

    (x, y) are in pixel units with texel centers at integer coordinates.
    y is always clamped; x wraps when ``wrap_x`` (equirect azimuth seam).
    Returns samples of shape x.shape + (channels,).
    """
    h, w = data.shape[:2]
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    x1 = x0 + 1
    y1 = y0 + 1
    if wrap_x:
        x0 %= w
        x1 %= w
    else:
        x0 = np.clip(x0, 0, w - 1)
        x1 = np.clip(x1, 0, w - 1)
    y0 = np.clip(y0, 0, h - 1)
    y1 = np.clip(y1, 0, h - 1)
    top = data[y0, x0] * (1.0 - fx) + data[y0, x1] * fx
    bot = data[y1, x0] * (1.0 - fx) + data[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy
