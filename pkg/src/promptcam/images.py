"""Netpbm image I/O (P6 colour, P5 grey), optional PNG, and patch (de)composition.

Pixel grids are numpy ``uint8`` arrays: ``(H, W, 3)`` for colour and ``(H, W)`` for
grey masks. Patch order is row-major over the patch grid everywhere in the package;
positional encodings depend on it.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    """Malformed image header or payload; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def _read_token(raw: bytes, pos: int) -> tuple[bytes, int, int]:
    n = len(raw)
    while pos < n:
        ch = raw[pos : pos + 1]
        if ch == b"#":
            while pos < n and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not raw[pos : pos + 1].isspace() and raw[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ImageFormatError("unexpected end of header", start)
    return raw[start:pos], start, pos


def decode_pnm(raw: bytes) -> np.ndarray:
    """Parse a binary P6 or P5 file with maxval <= 255."""
    magic, off, pos = _read_token(raw, 0)
    if magic not in (b"P6", b"P5"):
        raise ImageFormatError(f"unsupported magic {magic!r}", off)
    fields = []
    for what in ("width", "height", "maxval"):
        tok, off, pos = _read_token(raw, pos)
        if not tok.isdigit():
            raise ImageFormatError(f"bad {what} {tok!r}", off)
        fields.append(int(tok))
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise ImageFormatError("non-positive dimensions", off)
    if not 0 < maxval < 256:
        raise ImageFormatError(f"maxval {maxval} not in 1..255", off)
    if pos >= len(raw) or not raw[pos : pos + 1].isspace():
        raise ImageFormatError("missing whitespace after maxval", pos)
    pos += 1
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    payload = raw[pos : pos + need]
    if len(payload) != need:
        raise ImageFormatError(f"expected {need} pixel bytes, found {len(payload)}", pos + len(payload))
    arr = np.frombuffer(payload, dtype=np.uint8).copy()
    if channels == 3:
        return arr.reshape(height, width, 3)
    return arr.reshape(height, width)


def encode_pnm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise TypeError(f"expected uint8 pixels, got {img.dtype}")
    if img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    elif img.ndim == 2:
        magic = b"P5"
    else:
        raise ValueError(f"cannot encode array of shape {img.shape}")
    h, w = img.shape[:2]
    return magic + b"\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(img).tobytes()


def load_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        with Image.open(path) as im:
            return np.array(im.convert("RGB" if im.mode not in ("L",) else "L"))
    return decode_pnm(path.read_bytes())


def save_image(path, img: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        Image.fromarray(np.asarray(img, dtype=np.uint8)).save(path)
        return
    path.write_bytes(encode_pnm(img))


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Split ``(..., H, W, ch)`` into ``(..., M, p*p*ch)`` patches, row-major.

    Within a patch, pixels are row-major and channels innermost.
    """
    image = np.asarray(image)
    if image.ndim < 3:
        raise ValueError(f"expected (..., H, W, channels), got {image.shape}")
    *lead, h, w, ch = image.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"image {h}x{w} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = image.reshape(*lead, gh, patch_size, gw, patch_size, ch)
    nl = len(lead)
    x = np.moveaxis(x, nl + 2, nl + 1)  # (..., gh, gw, p, p, ch)
    return x.reshape(*lead, gh * gw, patch_size * patch_size * ch)


def unpatchify(patches: np.ndarray, patch_size: int, grid: tuple[int, int], channels: int) -> np.ndarray:
    patches = np.asarray(patches)
    *lead, m, _ = patches.shape
    gh, gw = grid
    if m != gh * gw:
        raise ValueError(f"{m} patches do not fill a {gh}x{gw} grid")
    nl = len(lead)
    x = patches.reshape(*lead, gh, gw, patch_size, patch_size, channels)
    x = np.moveaxis(x, nl + 1, nl + 2)  # (..., gh, p, gw, p, ch)
    return x.reshape(*lead, gh * patch_size, gw * patch_size, channels)


def upsample_nearest(grid_map: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(np.asarray(grid_map), factor, axis=-2), factor, axis=-1)


def to_float(image: np.ndarray) -> np.ndarray:
    """uint8 pixels -> f64 in [0, 1]; float inputs pass through."""
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image.astype(np.float64) / 255.0
    return image.astype(np.float64, copy=False)
