"""Hand-coded descriptors: HSV color histogram, Sobel edge histogram and
multiscale color LBP."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .imaging import ImageTensor, resize_bilinear, rgb_to_hsv, to_gray

FEATURE_DIMS = {"color_hist": 166, "edge_hist": 64, "mslbp": 236}

HUE_BINS, SAT_BINS, VAL_BINS, GRAY_BINS = 18, 3, 3, 4
ACHROMATIC_CUTOFF = 0.1
SOBEL_MAX = 4.0 * np.sqrt(2.0)
LBP_SCALES = (1.0, 0.5, 0.25, 0.125)
LBP_BINS = 59


@dataclass(frozen=True)
class FeatureVector:
    name: str
    values: np.ndarray

    @property
    def dims(self) -> int:
        return self.values.shape[0]


def _l1(h: np.ndarray) -> np.ndarray:
    total = h.sum()
    return h / total if total > 0 else h


def _require_rgb(img: ImageTensor, op: str):
    if img.colorspace != "RGB":
        raise ContractError(f"{op} needs an RGB image, got {img.colorspace}")


def color_bin_index(hsv: np.ndarray) -> np.ndarray:
    """Bin index in [0, 166) for each HSV pixel of an ``(..., 3)`` array.

    Bins 0..161 are chromatic (hue-major, then saturation, then value);
    162..165 are gray levels by value quartile.
    """
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    hi = np.minimum((h * HUE_BINS).astype(np.intp), HUE_BINS - 1)
    si = np.minimum((s * SAT_BINS).astype(np.intp), SAT_BINS - 1)
    vi = np.minimum((v * VAL_BINS).astype(np.intp), VAL_BINS - 1)
    chromatic = hi * (SAT_BINS * VAL_BINS) + si * VAL_BINS + vi
    gray = HUE_BINS * SAT_BINS * VAL_BINS + np.minimum((v * GRAY_BINS).astype(np.intp), GRAY_BINS - 1)
    achromatic = (s < ACHROMATIC_CUTOFF) | (v < ACHROMATIC_CUTOFF)
    return np.where(achromatic, gray, chromatic)


def color_histogram_166(img: ImageTensor) -> FeatureVector:
    _require_rgb(img, "color_histogram_166")
    if img.width * img.height == 0:
        raise ContractError("empty image")
    idx = color_bin_index(rgb_to_hsv(img).values)
    hist = np.bincount(idx.ravel(), minlength=166).astype(np.float64)
    return FeatureVector("color_hist", _l1(hist))


def sobel(plane: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sobel responses on the interior (valid) region of a 2-D plane."""
    p = plane
    gx = (
        (p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:])
        - (p[:-2, :-2] + 2 * p[1:-1, :-2] + p[2:, :-2])
    )
    gy = (
        (p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:])
        - (p[:-2, :-2] + 2 * p[:-2, 1:-1] + p[:-2, 2:])
    )
    return gx, gy


def edge_histogram_64(img: ImageTensor) -> FeatureVector:
    """Joint 8 direction x 8 magnitude Sobel histogram of the luminance plane."""
    if img.width < 3 or img.height < 3:
        raise ContractError(f"edge histogram needs at least 3x3 pixels, got {img.width}x{img.height}")
    lum = to_gray(img).values[:, :, 0] if img.colorspace != "GRAY" else img.values[:, :, 0]
    gx, gy = sobel(lum)
    mag = np.hypot(gx, gy)
    angle = np.mod(np.arctan2(gy, gx), np.pi)
    di = np.minimum((angle / np.pi * 8).astype(np.intp), 7)
    di = np.where(mag == 0, 0, di)
    mi = np.minimum((mag / SOBEL_MAX * 8).astype(np.intp), 7)
    hist = np.bincount((di * 8 + mi).ravel(), minlength=64).astype(np.float64)
    return FeatureVector("edge_hist", _l1(hist))


def _transitions(code: int) -> int:
    bits = [(code >> i) & 1 for i in range(8)]
    return sum(bits[i] != bits[(i + 1) % 8] for i in range(8))


def _uniform_table() -> np.ndarray:
    table = np.full(256, LBP_BINS - 1, dtype=np.intp)
    next_bin = 0
    for code in range(256):
        if _transitions(code) <= 2:
            table[code] = next_bin
            next_bin += 1
    assert next_bin == LBP_BINS - 1
    return table


UNIFORM_LBP = _uniform_table()

# circular neighbour order starting east, going counterclockwise as displayed
_NEIGHBOURS = ((0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1))


def lbp_codes(plane: np.ndarray) -> np.ndarray:
    """8-neighbour radius-1 LBP codes for interior pixels; ties set the bit."""
    h, w = plane.shape
    center = plane[1:-1, 1:-1]
    codes = np.zeros(center.shape, dtype=np.intp)
    for bit, (dy, dx) in enumerate(_NEIGHBOURS):
        nb = plane[1 + dy : h - 1 + dy, 1 + dx : w - 1 + dx]
        codes |= (nb >= center).astype(np.intp) << bit
    return codes


def lbp_histogram(plane: np.ndarray) -> np.ndarray:
    """Normalized 59-bin uniform LBP histogram of a 2-D plane."""
    codes = lbp_codes(plane)
    hist = np.bincount(UNIFORM_LBP[codes].ravel(), minlength=LBP_BINS).astype(np.float64)
    return _l1(hist)


def mslbp_236(img: ImageTensor) -> FeatureVector:
    _require_rgb(img, "mslbp_236")
    if img.width < 3 or img.height < 3:
        raise ContractError(f"MSLBP needs at least 3x3 pixels, got {img.width}x{img.height}")
    hue = rgb_to_hsv(img).values[:, :, 0]
    source = np.concatenate([img.values, hue[:, :, None]], axis=2)

    per_channel = [np.zeros(LBP_BINS) for _ in range(4)]
    for s in LBP_SCALES:
        w = max(1, int(round(img.width * s)))
        h = max(1, int(round(img.height * s)))
        if w < 3 or h < 3:
            continue
        scaled = _resize_planes(source, w, h)
        # per-scale histograms are normalized first so the weight alone sets the mix
        for c in range(4):
            per_channel[c] += s * lbp_histogram(scaled[:, :, c])
    return FeatureVector("mslbp", np.concatenate([_l1(h) for h in per_channel]))


def _resize_planes(values: np.ndarray, w: int, h: int) -> np.ndarray:
    if (w, h) == values.shape[1::-1]:
        return values
    planes = [resize_bilinear(ImageTensor(values[:, :, c], "GRAY"), w, h).values[:, :, 0]
              for c in range(values.shape[2])]
    return np.stack(planes, axis=2)


EXTRACTORS = {
    "color_hist": color_histogram_166,
    "edge_hist": edge_histogram_64,
    "mslbp": mslbp_236,
}
