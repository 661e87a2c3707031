"""Minimal PNG codec for depth and colour frames.

Only what RGB-D frames need: 16-bit grayscale (depth, millimetres) and
8-bit RGB (colour), non-interlaced.  Chunk CRCs are verified and the zlib
stream is inflated with a hard output cap, so corrupt or hostile files end
in a :class:`~spinecomplete.errors.PngDecodeError` or
:class:`~spinecomplete.errors.PngFormatError` rather than a crash.

Row unfiltering is the only loop-heavy step; it runs as a compiled kernel
when numba is enabled and falls back to numpy otherwise.
"""
from __future__ import annotations

import os
import struct
import zlib

import numpy as np

from .. import _accel
from ..errors import PngDecodeError, PngFormatError
from ..geometry import ColorImage, DepthImage
from .atomic import atomic_write_bytes

SIGNATURE = b"\x89PNG\r\n\x1a\n"
_MAX_PIXELS = 1 << 26
_CHANNELS = {0: 1, 2: 3, 4: 2, 6: 4}
_COLOR_NAMES = {0: "grayscale", 2: "RGB", 3: "palette", 4: "grayscale+alpha", 6: "RGBA"}


@_accel.njit
def _unfilter_kernel(raw, height, stride, bpp, out):
    pos = 0
    for y in range(height):
        ftype = raw[pos]
        pos += 1
        if ftype > 4:
            return y
        for x in range(stride):
            cur = np.int64(raw[pos + x])
            a = np.int64(out[y, x - bpp]) if x >= bpp else 0
            b = np.int64(out[y - 1, x]) if y > 0 else 0
            c = np.int64(out[y - 1, x - bpp]) if (x >= bpp and y > 0) else 0
            if ftype == 1:
                cur += a
            elif ftype == 2:
                cur += b
            elif ftype == 3:
                cur += (a + b) // 2
            elif ftype == 4:
                p = a + b - c
                pa = abs(p - a)
                pb = abs(p - b)
                pc = abs(p - c)
                if pa <= pb and pa <= pc:
                    cur += a
                elif pb <= pc:
                    cur += b
                else:
                    cur += c
            out[y, x] = cur & 255
        pos += stride
    return -1


def _unfilter_numpy(raw, height, stride, bpp, out):
    rows = raw.reshape(height, stride + 1)
    prev = np.zeros(stride, dtype=np.int64)
    for y in range(height):
        ftype = int(rows[y, 0])
        line = rows[y, 1:].astype(np.int64)
        if ftype == 0:
            cur = line
        elif ftype == 1:
            # Sub is a running sum within each byte lane
            pad = (-stride) % bpp
            lanes = np.concatenate([line, np.zeros(pad, np.int64)]).reshape(-1, bpp)
            cur = (np.cumsum(lanes, axis=0) & 255).reshape(-1)[:stride]
        elif ftype == 2:
            cur = (line + prev) & 255
        elif ftype in (3, 4):
            cur = np.zeros(stride, dtype=np.int64)
            for x in range(0, stride, bpp):
                sl = slice(x, min(x + bpp, stride))
                a = cur[x - bpp:x - bpp + (sl.stop - sl.start)] if x >= bpp else 0
                b = prev[sl]
                if ftype == 3:
                    cur[sl] = (line[sl] + (a + b) // 2) & 255
                else:
                    c = prev[x - bpp:x - bpp + (sl.stop - sl.start)] if x >= bpp else 0
                    p = a + b - c
                    pa, pb, pc = np.abs(p - a), np.abs(p - b), np.abs(p - c)
                    pred = np.where((pa <= pb) & (pa <= pc), a, np.where(pb <= pc, b, c))
                    cur[sl] = (line[sl] + pred) & 255
        else:
            return y
        out[y] = cur
        prev = cur
    return -1


def _chunks(blob: bytes):
    if not blob.startswith(SIGNATURE):
        raise PngDecodeError("bad PNG signature", 0)
    pos = len(SIGNATURE)
    while True:
        if pos + 8 > len(blob):
            raise PngDecodeError("truncated chunk header", pos)
        length, ctype = struct.unpack_from(">I4s", blob, pos)
        if length > len(blob) - pos - 12:
            raise PngDecodeError(f"chunk {ctype!r} runs past end of file", pos)
        data = blob[pos + 8:pos + 8 + length]
        (crc,) = struct.unpack_from(">I", blob, pos + 8 + length)
        if zlib.crc32(ctype + data) & 0xFFFFFFFF != crc:
            raise PngDecodeError(f"CRC mismatch in chunk {ctype!r}", pos)
        yield pos, ctype, data
        pos += 12 + length
        if ctype == b"IEND":
            return


def decode_png(blob: bytes) -> tuple[np.ndarray, int, int]:
    """Decode to ``(array, bit_depth, color_type)``; array is (H, W) or (H, W, C)."""
    header = None
    idat = []
    for pos, ctype, data in _chunks(bytes(blob)):
        if ctype == b"IHDR":
            if len(data) != 13:
                raise PngDecodeError("IHDR must be 13 bytes", pos)
            header = struct.unpack(">IIBBBBB", data)
        elif ctype == b"IDAT":
            if header is None:
                raise PngDecodeError("IDAT before IHDR", pos)
            idat.append(data)
    if header is None:
        raise PngDecodeError("missing IHDR", len(SIGNATURE))
    width, height, depth, ctype, comp, filt, interlace = header
    if width == 0 or height == 0 or width * height > _MAX_PIXELS:
        raise PngFormatError(f"unsupported image size {width}x{height}")
    if comp != 0 or filt != 0:
        raise PngDecodeError("unknown compression or filter method")
    if interlace != 0:
        raise PngFormatError("interlaced PNG is not supported; expected non-interlaced")
    if ctype not in _CHANNELS or depth not in (8, 16):
        raise PngFormatError(
            f"unsupported PNG layout ({_COLOR_NAMES.get(ctype, ctype)}, {depth}-bit); "
            "expected 8/16-bit grayscale or RGB"
        )
    channels = _CHANNELS[ctype]
    bpp = channels * depth // 8
    stride = width * bpp
    expected = height * (stride + 1)
    inflater = zlib.decompressobj()
    try:
        raw = inflater.decompress(b"".join(idat), expected)
    except zlib.error as exc:
        raise PngDecodeError(f"corrupt image data: {exc}") from None
    if len(raw) != expected:
        raise PngDecodeError(f"image data holds {len(raw)} bytes, expected {expected}")
    buf = np.frombuffer(raw, dtype=np.uint8)
    out = np.empty((height, stride), dtype=np.uint8)
    if _accel.numba_enabled():
        bad = _unfilter_kernel(buf, height, stride, bpp, out)
    else:
        bad = _unfilter_numpy(buf, height, stride, bpp, out)
    if bad >= 0:
        raise PngDecodeError(f"invalid filter type on row {bad}")
    if depth == 16:
        img = out.view(">u2").astype(np.uint16).reshape(height, width, channels)
    else:
        img = out.reshape(height, width, channels)
    if channels == 1:
        img = img[..., 0]
    return img, depth, ctype


def encode_png(img: np.ndarray) -> bytes:
    """Encode (H, W) uint8/uint16 grayscale or (H, W, 3) uint8/uint16 RGB; filter type 0."""
    img = np.asarray(img)
    if img.dtype not in (np.uint8, np.uint16):
        raise PngFormatError(f"can only write uint8/uint16 images, got {img.dtype}")
    if img.ndim == 2:
        ctype, channels = 0, 1
    elif img.ndim == 3 and img.shape[2] == 3:
        ctype, channels = 2, 3
    else:
        raise PngFormatError(f"expected (H, W) or (H, W, 3) image, got {img.shape}")
    height, width = img.shape[:2]
    if width == 0 or height == 0:
        raise PngFormatError("cannot write an empty image")
    depth = 8 * img.dtype.itemsize
    rows = img.astype(">u2" if depth == 16 else np.uint8).reshape(height, width * channels)
    raw = np.zeros((height, 1 + rows.dtype.itemsize * width * channels), dtype=np.uint8)
    raw[:, 1:] = rows.view(np.uint8).reshape(height, -1)

    def chunk(kind, data):
        return struct.pack(">I", len(data)) + kind + data + struct.pack(">I", zlib.crc32(kind + data) & 0xFFFFFFFF)

    ihdr = struct.pack(">IIBBBBB", width, height, depth, ctype, 0, 0, 0)
    return SIGNATURE + chunk(b"IHDR", ihdr) + chunk(b"IDAT", zlib.compress(raw.tobytes(), 6)) + chunk(b"IEND", b"")


def _read(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def read_depth_png(path) -> DepthImage:
    """16-bit grayscale PNG, one unit per millimetre (0 = invalid)."""
    img, depth, ctype = decode_png(_read(path))
    if ctype != 0 or depth != 16:
        raise PngFormatError(
            f"depth PNG must be 16-bit grayscale, got {depth}-bit {_COLOR_NAMES.get(ctype, ctype)}"
        )
    return DepthImage(img.astype(np.float64))


def read_color_png(path) -> ColorImage:
    """8-bit RGB PNG, scaled to [0, 1]."""
    img, depth, ctype = decode_png(_read(path))
    if ctype != 2 or depth != 8:
        raise PngFormatError(f"colour PNG must be 8-bit RGB, got {depth}-bit {_COLOR_NAMES.get(ctype, ctype)}")
    return ColorImage(img.astype(np.float64) / 255.0)


def read_label_png(path) -> np.ndarray:
    """8- or 16-bit grayscale PNG of integer labels (external masks)."""
    img, depth, ctype = decode_png(_read(path))
    if ctype != 0:
        raise PngFormatError(f"mask PNG must be grayscale, got {_COLOR_NAMES.get(ctype, ctype)}")
    return img.astype(np.int64)


def write_depth_png(path, depth: DepthImage | np.ndarray) -> None:
    values = depth.values if isinstance(depth, DepthImage) else np.asarray(depth)
    if np.any(values < 0) or np.any(values > 65535) or np.any(values != np.round(values)):
        raise PngFormatError("depth must hold integer millimetres in [0, 65535] for 16-bit PNG")
    atomic_write_bytes(os.fspath(path), encode_png(values.astype(np.uint16)))


def write_color_png(path, color: ColorImage | np.ndarray) -> None:
    values = color.values if isinstance(color, ColorImage) else np.asarray(color)
    atomic_write_bytes(os.fspath(path), encode_png(np.round(np.clip(values, 0, 1) * 255).astype(np.uint8)))


def write_label_png(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise PngFormatError("labels must lie in [0, 255] for an 8-bit mask PNG")
    atomic_write_bytes(os.fspath(path), encode_png(labels.astype(np.uint8)))
