"""Low-strength augmentation: flip, colour jitter, rotation and crop-resize."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

HUE_RANGE = (-0.08, 0.08)
SATURATION_RANGE = (0.6, 1.6)
BRIGHTNESS_RANGE = (-0.05, 0.05)
CONTRAST_RANGE = (0.7, 1.3)
ROTATION_RANGE = (-np.pi / 4, np.pi / 4)
CROP_AREA_RANGE = (0.01, 0.20)
BACKGROUND = 1.0


@dataclass(frozen=True)
class AugmentParams:
    """One concrete draw of the augmentation pipeline; defaults are the identity."""

    flip: bool = False
    hue: float = 0.0
    saturation: float = 1.0
    brightness: float = 0.0
    contrast: float = 1.0
    angle: float = 0.0
    crop_area: float = 0.0
    crop_offset: tuple = (0.5, 0.5)


def draw_params(rng, apply_prob=0.5):
    """Random composition: flip with p=0.5, every other op independently with ``apply_prob``."""

    def maybe(lo_hi, neutral):
        return float(rng.uniform(*lo_hi)) if rng.random() < apply_prob else neutral

    return AugmentParams(
        flip=bool(rng.random() < 0.5),
        hue=maybe(HUE_RANGE, 0.0),
        saturation=maybe(SATURATION_RANGE, 1.0),
        brightness=maybe(BRIGHTNESS_RANGE, 0.0),
        contrast=maybe(CONTRAST_RANGE, 1.0),
        angle=maybe(ROTATION_RANGE, 0.0),
        crop_area=maybe(CROP_AREA_RANGE, 0.0),
        crop_offset=(float(rng.random()), float(rng.random())),
    )


def _color(img, p):
    out = img
    if img.shape[0] == 3 and (p.hue or p.saturation != 1.0):
        from skimage.color import hsv2rgb, rgb2hsv

        hsv = rgb2hsv(img.transpose(1, 2, 0))
        hsv[..., 0] = (hsv[..., 0] + p.hue) % 1.0
        hsv[..., 1] = np.clip(hsv[..., 1] * p.saturation, 0.0, 1.0)
        out = hsv2rgb(hsv).transpose(2, 0, 1).astype(img.dtype)
    if p.brightness:
        out = out + p.brightness
    if p.contrast != 1.0:
        m = out.mean()
        out = m + p.contrast * (out - m)
    return out


def _rotate(img, angle):
    return np.stack([
        ndimage.rotate(ch, np.degrees(angle), reshape=False, order=1, mode="constant", cval=BACKGROUND)
        for ch in img
    ])


def _crop_resize(img, area, offset):
    _, H, W = img.shape
    side = np.sqrt(1.0 - area)
    ch, cw = H * side, W * side
    top = offset[0] * (H - ch)
    left = offset[1] * (W - cw)
    # bilinear resample of the crop window back onto the full grid
    rows = top + (np.arange(H) + 0.5) * ch / H - 0.5
    cols = left + (np.arange(W) + 0.5) * cw / W - 0.5
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return np.stack([ndimage.map_coordinates(c, [rr, cc], order=1, mode="nearest") for c in img])


def apply(image, params):
    """Apply a concrete parameter draw to a [C, H, W] image in [0, 1]."""
    out = np.asarray(image, dtype=np.float32)
    if params.flip:
        out = out[:, :, ::-1]
    out = _color(out, params)
    if params.angle:
        out = _rotate(out, params.angle)
    if params.crop_area:
        out = _crop_resize(out, params.crop_area, params.crop_offset)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def augment(image, rng):
    return apply(image, draw_params(rng))
