"""Raster containers, decoding, color conversion, resampling and cropping."""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import ContractError, DecodeError, EmptyMaskError

log = logging.getLogger(__name__)

COLORSPACES = {"RGB": 3, "HSV": 3, "RGBHSV6": 6, "GRAY": 1}


@dataclass(frozen=True)
class ImageTensor:
    """Floating-point raster stored as an ``(height, width, channels)`` array."""

    values: np.ndarray
    colorspace: str = "RGB"

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 2:
            values = values[:, :, None]
        if values.ndim != 3:
            raise ContractError(f"image array must be 2-D or 3-D, got shape {values.shape}")
        if self.colorspace not in COLORSPACES:
            raise ContractError(f"unknown colorspace {self.colorspace!r}")
        if values.shape[2] != COLORSPACES[self.colorspace]:
            raise ContractError(
                f"{self.colorspace} needs {COLORSPACES[self.colorspace]} channels, got {values.shape[2]}"
            )
        object.__setattr__(self, "values", values)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class MaskImage:
    """8-bit single-channel mask; 255 marks lesion, 0 background."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise ContractError(f"mask must be 2-D, got shape {values.shape}")
        if values.dtype != np.uint8:
            if np.any(values < 0) or np.any(values > 255):
                raise ContractError("mask values must lie in [0, 255]")
            values = np.rint(values).astype(np.uint8)
        object.__setattr__(self, "values", values)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def is_binary(self) -> bool:
        return bool(np.all((self.values == 0) | (self.values == 255)))


@dataclass(frozen=True)
class BoundingBox:
    """Half-open pixel box: columns ``[x0, x1)``, rows ``[y0, y1)``."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1 and self.x0 >= 0 and self.y0 >= 0):
            raise ContractError(f"degenerate bounding box {self}")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0


# -- decoding -----------------------------------------------------------------

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def _ppm_token(data: bytes, pos: int) -> tuple[bytes, int]:
    """Read one whitespace-delimited header token, skipping ``#`` comments."""
    n = len(data)
    while pos < n:
        c = data[pos : pos + 1]
        if c == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise DecodeError("truncated PPM header", start)
    return data[start:pos], pos


def _decode_ppm(data: bytes) -> np.ndarray:
    if data[:2] != b"P6":
        raise DecodeError("not a binary PPM (expected magic 'P6')", 0)
    pos = 2
    fields = []
    for name in ("width", "height", "maxval"):
        start = pos
        token, pos = _ppm_token(data, pos)
        if not token.isdigit():
            raise DecodeError(f"invalid PPM {name} {token!r}", start)
        fields.append(int(token))
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise DecodeError("PPM dimensions must be positive", 2)
    if maxval != 255:
        raise DecodeError(f"only 8-bit PPM supported, maxval={maxval}", pos)
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise DecodeError("missing whitespace after PPM header", pos)
    pos += 1
    expected = width * height * 3
    payload = data[pos : pos + expected]
    if len(payload) < expected:
        raise DecodeError(
            f"truncated PPM payload: expected {expected} bytes, got {len(payload)}", pos + len(payload)
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)


def _decode_png(data: bytes) -> np.ndarray:
    try:
        with Image.open(io.BytesIO(data)) as im:
            im.load()
            if im.mode in ("I;16", "I;16B", "I", "F"):
                raise DecodeError(f"unsupported PNG mode {im.mode}", 0)
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except DecodeError:
        raise
    except Exception as exc:  # Pillow raises a zoo of types on corrupt input
        raise DecodeError(f"malformed PNG: {exc}", 0) from exc


def decode_image(data: bytes) -> ImageTensor:
    """Decode PNG or binary PPM (P6) bytes into an RGB tensor scaled to [0, 1]."""
    if data.startswith(PNG_SIGNATURE):
        raw = _decode_png(data)
    elif data.startswith(b"P6"):
        raw = _decode_ppm(data)
    else:
        raise DecodeError("unrecognized image format", 0)
    return ImageTensor(raw.astype(np.float64) / 255.0, "RGB")


def decode_mask(data: bytes) -> MaskImage:
    """Decode a mask file; color masks are reduced to their first channel."""
    if data.startswith(b"P6"):
        return MaskImage(_decode_ppm(data)[:, :, 0])
    try:
        with Image.open(io.BytesIO(data)) as im:
            im.load()
            if im.mode not in ("L", "1", "P", "RGB", "RGBA", "LA"):
                raise DecodeError(f"unsupported mask mode {im.mode}", 0)
            return MaskImage(np.asarray(im.convert("L"), dtype=np.uint8))
    except DecodeError:
        raise
    except Exception as exc:
        raise DecodeError(f"malformed mask image: {exc}", 0) from exc


def read_image(path) -> ImageTensor:
    with open(path, "rb") as fh:
        return decode_image(fh.read())


def read_mask(path) -> MaskImage:
    with open(path, "rb") as fh:
        return decode_mask(fh.read())


def encode_png(img: ImageTensor | MaskImage) -> bytes:
    """Encode a mask as 8-bit grayscale PNG, or an RGB/GRAY tensor as 8-bit PNG."""
    if isinstance(img, MaskImage):
        im = Image.fromarray(img.values, mode="L")
    else:
        if img.colorspace not in ("RGB", "GRAY"):
            raise ContractError("only RGB or GRAY tensors can be written as PNG")
        arr = np.clip(np.rint(img.values * 255.0), 0, 255).astype(np.uint8)
        im = Image.fromarray(arr[:, :, 0] if img.channels == 1 else arr)
    buf = io.BytesIO()
    im.save(buf, format="PNG")
    return buf.getvalue()


def write_png(path, img: ImageTensor | MaskImage) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_png(img))


# -- color --------------------------------------------------------------------


def rgb_to_hsv(img: ImageTensor) -> ImageTensor:
    """Hexcone HSV with hue scaled to [0, 1); achromatic pixels get hue 0."""
    if img.colorspace != "RGB":
        raise ContractError(f"rgb_to_hsv needs an RGB image, got {img.colorspace}")
    r, g, b = (img.values[:, :, i] for i in range(3))
    v = np.max(img.values, axis=2)
    c = v - np.min(img.values, axis=2)
    s = np.divide(c, v, out=np.zeros_like(v), where=v > 0)

    h = np.zeros_like(v)
    chroma = c > 0
    safe_c = np.where(chroma, c, 1.0)
    red_max = chroma & (v == r)
    green_max = chroma & ~red_max & (v == g)
    blue_max = chroma & ~red_max & ~green_max
    h = np.where(red_max, np.mod((g - b) / safe_c, 6.0), h)
    h = np.where(green_max, (b - r) / safe_c + 2.0, h)
    h = np.where(blue_max, (r - g) / safe_c + 4.0, h)
    h = h / 6.0
    h = np.where(h >= 1.0, 0.0, h)
    return ImageTensor(np.stack([h, s, v], axis=2), "HSV")


def six_channel(img: ImageTensor) -> ImageTensor:
    if img.colorspace != "RGB":
        raise ContractError(f"six_channel needs an RGB image, got {img.colorspace}")
    hsv = rgb_to_hsv(img)
    return ImageTensor(np.concatenate([img.values, hsv.values], axis=2), "RGBHSV6")


def to_gray(img: ImageTensor) -> ImageTensor:
    """ITU-R 601 luma."""
    if img.colorspace == "GRAY":
        return img
    if img.colorspace != "RGB":
        raise ContractError(f"to_gray needs an RGB image, got {img.colorspace}")
    luma = img.values @ np.array([0.299, 0.587, 0.114])
    return ImageTensor(luma, "GRAY")


# -- resampling ---------------------------------------------------------------


def snap(coords: np.ndarray, eps: float = 1e-9) -> np.ndarray:
    """Round coordinates that sit within ``eps`` of an integer."""
    r = np.rint(coords)
    return np.where(np.abs(coords - r) < eps, r, coords)


def sample_bilinear(values: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    """Sample an ``(H, W, C)`` array at real coordinates with edge clamping.

    ``sx`` and ``sy`` share a shape ``S``; the result has shape ``S + (C,)``.
    Pixel ``(i, j)`` is centered at coordinate ``(j, i)``.
    """
    h, w = values.shape[:2]
    sx = np.clip(snap(sx), 0.0, w - 1)
    sy = np.clip(snap(sy), 0.0, h - 1)
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (sx - x0)[..., None]
    fy = (sy - y0)[..., None]
    top = values[y0, x0] * (1.0 - fx) + values[y0, x1] * fx
    bottom = values[y1, x0] * (1.0 - fx) + values[y1, x1] * fx
    out = top * (1.0 - fy) + bottom * fy
    # exact pass-through at integer positions keeps identity maps bit-exact
    exact = ((fx == 0) & (fy == 0))[..., 0]
    out[exact] = values[y0[exact], x0[exact]]
    return out


def sample_nearest(values: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    h, w = values.shape[:2]
    xi = np.clip(np.floor(snap(sx) + 0.5), 0, w - 1).astype(np.intp)
    yi = np.clip(np.floor(snap(sy) + 0.5), 0, h - 1).astype(np.intp)
    return values[yi, xi]


def resize_bilinear(img: ImageTensor, w: int, h: int) -> ImageTensor:
    """Bilinear resize using half-pixel centers and edge clamping."""
    if w < 1 or h < 1:
        raise ContractError(f"target size must be positive, got {w}x{h}")
    if (w, h) == (img.width, img.height):
        return ImageTensor(img.values.copy(), img.colorspace)
    xs = (np.arange(w) + 0.5) * (img.width / w) - 0.5
    ys = (np.arange(h) + 0.5) * (img.height / h) - 0.5
    sx, sy = np.meshgrid(xs, ys)
    return ImageTensor(sample_bilinear(img.values, sx, sy), img.colorspace)


def resize_long_side(img: ImageTensor, long_side: int) -> ImageTensor:
    scale = long_side / max(img.width, img.height)
    w = max(1, int(round(img.width * scale)))
    h = max(1, int(round(img.height * scale)))
    return resize_bilinear(img, w, h)


def standardize(img: ImageTensor) -> ImageTensor:
    """Zero mean, unit population std per channel; constant channels become 0."""
    if img.width * img.height < 2:
        raise ContractError("standardize needs at least 2 pixels per channel")
    v = img.values
    mean = v.mean(axis=(0, 1))
    std = v.std(axis=(0, 1))
    std = np.where(std < 1e-12, 1.0, std)
    return ImageTensor((v - mean) / std, img.colorspace)


# -- masks and contexts -------------------------------------------------------


def mask_bbox(mask: MaskImage, threshold: int = 128) -> BoundingBox:
    fg = mask.values >= threshold
    if not fg.any():
        raise EmptyMaskError(f"empty mask: no pixel >= {threshold}")
    rows = np.flatnonzero(fg.any(axis=1))
    cols = np.flatnonzero(fg.any(axis=0))
    return BoundingBox(int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


def crop(img: ImageTensor, box: BoundingBox) -> ImageTensor:
    if box.x1 > img.width or box.y1 > img.height:
        raise ContractError(f"box {box} exceeds image {img.width}x{img.height}")
    return ImageTensor(img.values[box.y0 : box.y1, box.x0 : box.x1].copy(), img.colorspace)


def crop_mask(mask: MaskImage, box: BoundingBox) -> MaskImage:
    if box.x1 > mask.width or box.y1 > mask.height:
        raise ContractError(f"box {box} exceeds mask {mask.width}x{mask.height}")
    return MaskImage(mask.values[box.y0 : box.y1, box.x0 : box.x1].copy())


def crop_to_mask(img: ImageTensor, mask: MaskImage, threshold: int = 128) -> ImageTensor:
    """Tight lesion crop; falls back to the whole image when the mask is empty."""
    if (mask.width, mask.height) != (img.width, img.height):
        raise ContractError("mask and image dimensions differ")
    try:
        box = mask_bbox(mask, threshold)
    except EmptyMaskError:
        log.warning("empty mask, using whole image as crop context")
        return img
    return crop(img, box)


def normalize_mask(mask: MaskImage) -> np.ndarray:
    return (mask.values.astype(np.float64) / 255.0 - 0.5) * 1.9


def denormalize_mask(grid: np.ndarray) -> MaskImage:
    v = (np.asarray(grid, dtype=np.float64) / 1.9 + 0.5) * 255.0
    return MaskImage(np.clip(np.rint(v), 0, 255).astype(np.uint8))
