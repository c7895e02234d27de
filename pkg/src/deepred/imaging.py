"""Image containers, file formats, noise synthesis and quality metrics.

All pixel math happens on the [0, 1] scale.  Noise levels quoted on the
0-255 scale (``sigma_255``) are converted at this boundary.
"""

import math
import struct
import zlib
from dataclasses import dataclass

import numpy as np

# ITU-R BT.601 luma weights (standard-definition television).
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

# psnr() returns this for identical inputs.
PSNR_IDENTICAL = math.inf

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class ImageFormatError(ValueError):
    """Malformed or unsupported image file; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class Image:
    """A C x H x W image with values clamped to [0, 1]; C is 1 (gray) or 3 (rgb)."""

    planes: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.planes, dtype=np.float64)
        if p.ndim == 2:
            p = p[None]
        if p.ndim != 3 or p.shape[0] not in (1, 3):
            raise ValueError(f"image planes must be 1 x H x W or 3 x H x W, got {p.shape}")
        self.planes = np.clip(p, 0.0, 1.0)

    @property
    def mode(self):
        return "gray" if self.planes.shape[0] == 1 else "rgb"

    @property
    def shape(self):
        return self.planes.shape

    def crop(self, top, left, height, width):
        return Image(self.planes[:, top:top + height, left:left + width])


def _planes(img):
    return img.planes if isinstance(img, Image) else np.asarray(img, dtype=np.float64)


# PNG ------------------------------------------------------------------------

_CHANNELS = {0: 1, 2: 3, 3: 1, 4: 2, 6: 4}


def _chunk(kind, data):
    return struct.pack(">I", len(data)) + kind + data + struct.pack(">I", zlib.crc32(kind + data) & 0xFFFFFFFF)


def _paeth(a, b, c):
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    return b if pb <= pc else c


def _unfilter(raw, height, stride, bpp, base):
    rows = np.zeros((height, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.uint8)
    pos = 0
    for r in range(height):
        if pos + 1 + stride > len(raw):
            raise ImageFormatError("image data shorter than declared size", base)
        ftype = raw[pos]
        line = np.frombuffer(raw, dtype=np.uint8, count=stride, offset=pos + 1)
        if ftype == 0:
            cur = line.copy()
        elif ftype == 1:
            cur = (np.cumsum(line.reshape(-1, bpp).astype(np.int64), axis=0) & 0xFF).astype(np.uint8).ravel()
        elif ftype == 2:
            cur = line + prev
        elif ftype in (3, 4):
            ln, up, out = line.tolist(), prev.tolist(), [0] * stride
            for i in range(stride):
                left = out[i - bpp] if i >= bpp else 0
                if ftype == 3:
                    out[i] = (ln[i] + ((left + up[i]) >> 1)) & 0xFF
                else:
                    ul = up[i - bpp] if i >= bpp else 0
                    out[i] = (ln[i] + _paeth(left, up[i], ul)) & 0xFF
            cur = np.array(out, dtype=np.uint8)
        else:
            raise ImageFormatError(f"unknown PNG filter type {ftype} in row {r}", base)
        rows[r] = cur
        prev = cur
        pos += 1 + stride
    return rows


def decode_png(buf):
    """Decode PNG bytes into a float array C x H x W on [0, 1] (alpha is dropped)."""
    if buf[:8] != PNG_SIGNATURE:
        raise ImageFormatError("not a PNG file (bad signature)", 0)
    pos = 8
    header = None
    palette = None
    idat = []
    idat_offset = None
    while True:
        if pos + 8 > len(buf):
            raise ImageFormatError("truncated chunk header", pos)
        length, kind = struct.unpack_from(">I4s", buf, pos)
        data_start = pos + 8
        if data_start + length + 4 > len(buf):
            raise ImageFormatError(f"truncated {kind!r} chunk", pos)
        data = buf[data_start:data_start + length]
        (crc,) = struct.unpack_from(">I", buf, data_start + length)
        if zlib.crc32(kind + data) & 0xFFFFFFFF != crc:
            raise ImageFormatError(f"CRC mismatch in {kind!r} chunk", pos)
        if kind == b"IHDR":
            if length != 13:
                raise ImageFormatError("IHDR must be 13 bytes", pos)
            header = struct.unpack(">IIBBBBB", data)
        elif kind == b"PLTE":
            palette = np.frombuffer(data, dtype=np.uint8).reshape(-1, 3)
        elif kind == b"IDAT":
            if idat_offset is None:
                idat_offset = pos
            idat.append(data)
        elif kind == b"IEND":
            break
        elif header is None:
            raise ImageFormatError(f"chunk {kind!r} before IHDR", pos)
        pos = data_start + length + 4

    if header is None:
        raise ImageFormatError("missing IHDR chunk", 8)
    width, height, depth, ctype, comp, filt, interlace = header
    if ctype not in _CHANNELS or comp != 0 or filt != 0:
        raise ImageFormatError(f"unsupported color type {ctype} / method {comp}/{filt}", 16)
    if interlace != 0:
        raise ImageFormatError("interlaced PNG is not supported", 28)
    if depth not in (8, 16) or (ctype == 3 and depth != 8):
        raise ImageFormatError(f"unsupported bit depth {depth} for color type {ctype}", 24)
    if width == 0 or height == 0:
        raise ImageFormatError("zero image dimension", 16)
    if not idat:
        raise ImageFormatError("missing IDAT chunk", pos)
    try:
        raw = zlib.decompress(b"".join(idat))
    except zlib.error as exc:
        raise ImageFormatError(f"corrupt compressed data: {exc}", idat_offset) from None

    nch = _CHANNELS[ctype]
    bpp = nch * depth // 8
    rows = _unfilter(raw, height, width * bpp, bpp, idat_offset)
    if depth == 16:
        px = rows.view(">u2").astype(np.float64) / 65535.0
    else:
        px = rows.astype(np.float64) / 255.0
    px = px.reshape(height, width, nch)
    if ctype == 3:
        if palette is None:
            raise ImageFormatError("palette image without PLTE chunk", 8)
        idx = rows.reshape(height, width)
        if idx.max() >= len(palette):
            raise ImageFormatError("palette index out of range", idat_offset)
        px = palette[idx].astype(np.float64) / 255.0
    elif ctype in (4, 6):
        px = px[..., :-1]
    return np.ascontiguousarray(px.transpose(2, 0, 1))


def encode_png(planes, bit_depth=8):
    planes = np.asarray(planes, dtype=np.float64)
    if planes.ndim == 2:
        planes = planes[None]
    c, h, w = planes.shape
    if c not in (1, 3):
        raise ValueError(f"PNG export needs 1 or 3 channels, got {c}")
    if bit_depth not in (8, 16):
        raise ValueError("bit_depth must be 8 or 16")
    top = 255 if bit_depth == 8 else 65535
    q = np.round(np.clip(planes, 0.0, 1.0) * top).transpose(1, 2, 0)
    q = q.astype(np.uint8) if bit_depth == 8 else q.astype(">u2")
    rows = q.reshape(h, -1).view(np.uint8)
    raw = np.concatenate([np.zeros((h, 1), np.uint8), rows], axis=1).tobytes()
    ihdr = struct.pack(">IIBBBBB", w, h, bit_depth, 0 if c == 1 else 2, 0, 0, 0)
    return PNG_SIGNATURE + _chunk(b"IHDR", ihdr) + _chunk(b"IDAT", zlib.compress(raw, 6)) + _chunk(b"IEND", b"")


def load_png(path):
    with open(path, "rb") as fh:
        return Image(decode_png(fh.read()))


def save_png(image, path, bit_depth=8):
    with open(path, "wb") as fh:
        fh.write(encode_png(_planes(image), bit_depth))


# portable float map -----------------------------------------------------------

def encode_pfm(planes):
    """Portable float map: ``PF`` (rgb) or ``Pf`` (gray), ``W H``, scale -1.0 (little-endian),
    then float32 rows from the bottom row up, channels interleaved."""
    planes = np.asarray(planes, dtype=np.float64)
    if planes.ndim == 2:
        planes = planes[None]
    c, h, w = planes.shape
    if c not in (1, 3):
        raise ValueError(f"PFM needs 1 or 3 channels, got {c}")
    head = f"{'PF' if c == 3 else 'Pf'}\n{w} {h}\n-1.0\n".encode("ascii")
    body = np.ascontiguousarray(planes.transpose(1, 2, 0)[::-1], dtype="<f4").tobytes()
    return head + body


def decode_pfm(buf):
    parts = []
    pos = 0
    for _ in range(3):
        end = buf.find(b"\n", pos)
        if end < 0:
            raise ImageFormatError("truncated PFM header", pos)
        parts.append(buf[pos:end].decode("ascii", "replace").strip())
        pos = end + 1
    kind, dims, scale = parts
    if kind not in ("PF", "Pf"):
        raise ImageFormatError(f"bad PFM magic {kind!r}", 0)
    try:
        w, h = (int(v) for v in dims.split())
        scale = float(scale)
    except ValueError:
        raise ImageFormatError("bad PFM header values", 3) from None
    c = 3 if kind == "PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    need = w * h * c * 4
    if len(buf) - pos < need:
        raise ImageFormatError(f"PFM payload has {len(buf) - pos} bytes, expected {need}", pos)
    arr = np.frombuffer(buf, dtype=dtype, count=w * h * c, offset=pos).reshape(h, w, c)[::-1]
    return np.ascontiguousarray(arr.transpose(2, 0, 1), dtype=np.float64)


# noise, metrics, degradation ---------------------------------------------------

def add_awgn(image, sigma_255, seed, clip=True):
    """Add i.i.d. Gaussian noise with std ``sigma_255 / 255``, reproducible from ``seed``."""
    if sigma_255 < 0:
        raise ValueError("noise level must be non-negative")
    x = _planes(image)
    if sigma_255 == 0:
        out = x.copy()
    else:
        rng = np.random.default_rng(seed)
        out = x + rng.normal(0.0, sigma_255 / 255.0, size=x.shape)
    if clip:
        out = np.clip(out, 0.0, 1.0)
    return Image(out) if isinstance(image, Image) else out


def rgb_to_luminance(image):
    """Weighted channel sum with ``LUMA_WEIGHTS``; gray input passes through."""
    x = _planes(image)
    if x.shape[0] == 1:
        out = x.copy()
    else:
        r, g, b = LUMA_WEIGHTS
        out = (r * x[0] + g * x[1] + b * x[2])[None]
    return Image(out) if isinstance(image, Image) else out


def psnr(a, b, channel_mode="rgb"):
    """PSNR in dB on the [0, 1] scale; identical inputs give ``PSNR_IDENTICAL`` (+inf).

    ``channel_mode="luminance"`` compares the luma plane only.
    """
    x, y = _planes(a), _planes(b)
    if x.shape != y.shape:
        raise ValueError(f"psnr: shapes {x.shape} and {y.shape} differ")
    if channel_mode == "luminance":
        x, y = rgb_to_luminance(x), rgb_to_luminance(y)
    elif channel_mode != "rgb":
        raise ValueError(f"channel_mode must be rgb or luminance, got {channel_mode!r}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(1.0 / mse)


def degrade(image, operator, sigma_255, seed, clip=True):
    """Synthesize a measurement ``y = H x + v`` with v white Gaussian (std ``sigma_255 / 255``).

    The result is clipped to [0, 1] unless ``clip`` is False.
    """
    return add_awgn(operator.forward(_planes(image)), sigma_255, seed, clip=clip)
