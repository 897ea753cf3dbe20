"""Seeded geometric augmentation with a sinusoidal nonlinear warp.

Every transform is expressed as an inverse map from output pixel coordinates
to source coordinates, so the image (bilinear) and its mask (nearest
neighbour) are resampled on exactly the same grid.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import ContractError
from .imaging import ImageTensor, MaskImage, sample_bilinear, sample_nearest


@dataclass(frozen=True)
class WarpSpec:
    amp_x: float = 0.0
    amp_y: float = 0.0
    freq_x: float = 0.0
    freq_y: float = 0.0
    phase_x: float = 0.0
    phase_y: float = 0.0

    def __post_init__(self):
        if self.amp_x < 0 or self.amp_y < 0:
            raise ContractError("warp amplitudes must be nonnegative")
        if self.freq_x < 0 or self.freq_y < 0:
            raise ContractError("warp frequencies must be nonnegative")


@dataclass(frozen=True)
class AugmentParams:
    rotation: float = 0.0  # degrees, counterclockwise as displayed
    flip_h: bool = False
    flip_v: bool = False
    scale: float = 1.0
    shift_x: float = 0.0  # pixels
    shift_y: float = 0.0
    crop_fraction: float = 1.0
    warp: WarpSpec = field(default_factory=WarpSpec)

    def __post_init__(self):
        if not self.scale > 0:
            raise ContractError("scale must be positive")
        if not 0 < self.crop_fraction <= 1:
            raise ContractError("crop_fraction must lie in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


Range = tuple[float, float]


@dataclass(frozen=True)
class AugmentRanges:
    """Inclusive ``(lo, hi)`` bounds for every sampled field.

    Flip bounds are booleans: ``(False, True)`` flips with probability 1/2.
    """

    rotation: Range = (-180.0, 180.0)
    flip_h: tuple[bool, bool] = (False, True)
    flip_v: tuple[bool, bool] = (False, True)
    scale: Range = (0.8, 1.2)
    shift_x: Range = (-12.8, 12.8)
    shift_y: Range = (-12.8, 12.8)
    crop_fraction: Range = (0.8, 1.0)
    amp_x: Range = (0.0, 5.0)
    amp_y: Range = (0.0, 5.0)
    freq_x: Range = (0.0, 3.0)
    freq_y: Range = (0.0, 3.0)
    phase_x: Range = (0.0, 2 * math.pi)
    phase_y: Range = (0.0, 2 * math.pi)

    def __post_init__(self):
        for f in fields(self):
            lo, hi = getattr(self, f.name)
            if lo > hi:
                raise ContractError(f"inverted range for {f.name}: ({lo}, {hi})")

    @classmethod
    def for_size(cls, width: int, height: int, **overrides) -> AugmentRanges:
        """Defaults with shifts bounded by 10% of the image dimensions."""
        base = {"shift_x": (-0.1 * width, 0.1 * width), "shift_y": (-0.1 * height, 0.1 * height)}
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> AugmentRanges:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown augmentation range keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) for k, v in d.items()})

    @classmethod
    def identity(cls) -> AugmentRanges:
        z = (0.0, 0.0)
        return cls(
            rotation=z, flip_h=(False, False), flip_v=(False, False), scale=(1.0, 1.0),
            shift_x=z, shift_y=z, crop_fraction=(1.0, 1.0), amp_x=z, amp_y=z,
            freq_x=z, freq_y=z, phase_x=z, phase_y=z,
        )


def sample_params(seed: int, ranges: AugmentRanges | None = None) -> AugmentParams:
    ranges = ranges or AugmentRanges()
    rng = np.random.default_rng(seed)

    def draw(name):
        lo, hi = getattr(ranges, name)
        if lo == hi:
            rng.random()  # keep the stream aligned whatever the ranges are
            return lo
        return float(rng.uniform(lo, hi))

    def flip(name):
        lo, hi = getattr(ranges, name)
        u = rng.random()
        return bool(lo) if lo == hi else bool(u < 0.5)

    rotation = draw("rotation")
    flip_h = flip("flip_h")
    flip_v = flip("flip_v")
    scale = draw("scale")
    shift_x = draw("shift_x")
    shift_y = draw("shift_y")
    crop_fraction = draw("crop_fraction")
    warp = WarpSpec(
        amp_x=draw("amp_x"), amp_y=draw("amp_y"), freq_x=draw("freq_x"),
        freq_y=draw("freq_y"), phase_x=draw("phase_x"), phase_y=draw("phase_y"),
    )
    return AugmentParams(rotation, flip_h, flip_v, scale, shift_x, shift_y, crop_fraction, warp)


def _warp_coords(xs, ys, width, height, w: WarpSpec):
    sx = xs + w.amp_x * np.sin(2 * np.pi * w.freq_x * ys / height + w.phase_x)
    sy = ys + w.amp_y * np.sin(2 * np.pi * w.freq_y * xs / width + w.phase_y)
    return sx, sy


def _affine_inverse(xs, ys, width, height, p: AugmentParams):
    """Map output coordinates back through crop, shift, rotation, scale, flip."""
    cx = (width - 1) / 2.0
    cy = (height - 1) / 2.0
    dx = (xs - cx) * p.crop_fraction - p.shift_x
    dy = (ys - cy) * p.crop_fraction - p.shift_y
    theta = math.radians(p.rotation)
    c, s = math.cos(theta), math.sin(theta)
    rx = (c * dx - s * dy) / p.scale
    ry = (s * dx + c * dy) / p.scale
    if p.flip_h:
        rx = -rx
    if p.flip_v:
        ry = -ry
    return rx + cx, ry + cy


def _check_pair(img: ImageTensor, mask: MaskImage | None):
    if mask is not None and (mask.width, mask.height) != (img.width, img.height):
        raise ContractError(
            f"mask {mask.width}x{mask.height} does not match image {img.width}x{img.height}"
        )


def _resample(img, mask, sx, sy):
    out = ImageTensor(sample_bilinear(img.values, sx, sy), img.colorspace)
    out_mask = None if mask is None else MaskImage(sample_nearest(mask.values, sx, sy))
    return out, out_mask


def sinusoidal_warp(img: ImageTensor, mask: MaskImage | None, w: WarpSpec):
    _check_pair(img, mask)
    ys, xs = np.mgrid[0 : img.height, 0 : img.width].astype(np.float64)
    sx, sy = _warp_coords(xs, ys, img.width, img.height, w)
    return _resample(img, mask, sx, sy)


def apply(img: ImageTensor, mask: MaskImage | None, p: AugmentParams):
    """Apply the affine part, then the warp, in a single resampling pass."""
    _check_pair(img, mask)
    ys, xs = np.mgrid[0 : img.height, 0 : img.width].astype(np.float64)
    wx, wy = _warp_coords(xs, ys, img.width, img.height, p.warp)
    sx, sy = _affine_inverse(wx, wy, img.width, img.height, p)
    return _resample(img, mask, sx, sy)
