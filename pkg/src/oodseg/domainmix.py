"""DomainMix crop pasting and the hard-paste Cutmix baseline.

A recipe is sampled once from an rng and then replayed: it fixes the
background kind, every crop's source kind/pool index/geometry and the seed
used for the final colour jitter. Labels are always pasted hard over the
whole destination rectangle; blending, HSV matching and jitter only touch
appearance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from scipy import ndimage
from scipy.optimize import brentq

from .data import ImageSample

SOURCES = ("in_dist", "ood")
LUMA = np.array([0.299, 0.587, 0.114])
HUE_SATURATION_FLOOR = 0.05


@dataclass(frozen=True)
class Rect:
    y: int
    x: int
    h: int
    w: int

    @property
    def slices(self) -> tuple[slice, slice]:
        return slice(self.y, self.y + self.h), slice(self.x, self.x + self.w)

    @property
    def area(self) -> int:
        return self.h * self.w

    def within(self, shape: tuple[int, int]) -> bool:
        return self.y >= 0 and self.x >= 0 and self.h > 0 and self.w > 0 \
            and self.y + self.h <= shape[0] and self.x + self.w <= shape[1]


@dataclass(frozen=True)
class CropOp:
    crop_source: str
    src_rect: Rect
    dst_rect: Rect
    blend_sigma: float = 0.0
    hsv_match: bool = True
    pool_index: int = 0

    def __post_init__(self):
        if self.crop_source not in SOURCES:
            raise ValueError(f"crop_source must be one of {SOURCES}")
        if (self.src_rect.h, self.src_rect.w) != (self.dst_rect.h, self.dst_rect.w):
            raise ValueError("src_rect and dst_rect must have identical size")
        if self.blend_sigma < 0:
            raise ValueError("blend_sigma must be >= 0")


@dataclass(frozen=True)
class ColorJitterParams:
    """Sampling ranges; each must contain the identity transform."""

    brightness: tuple[float, float] = (0.7, 1.3)
    contrast: tuple[float, float] = (0.7, 1.3)
    saturation: tuple[float, float] = (0.7, 1.3)
    hue: tuple[float, float] = (-0.05, 0.05)

    def __post_init__(self):
        for name in ("brightness", "contrast", "saturation"):
            lo, hi = getattr(self, name)
            if not (0 <= lo <= 1 <= hi):
                raise ValueError(f"{name} range {lo, hi} must contain 1")
        lo, hi = self.hue
        if not lo <= 0 <= hi:
            raise ValueError(f"hue range {lo, hi} must contain 0")

    @classmethod
    def identity(cls) -> "ColorJitterParams":
        return cls((1.0, 1.0), (1.0, 1.0), (1.0, 1.0), (0.0, 0.0))


@dataclass(frozen=True)
class AugmentationConfig:
    image_size: tuple[int, int] = (64, 64)
    num_crops: tuple[int, int] = (1, 3)
    area_range: tuple[float, float] = (0.05, 0.30)
    aspect_range: tuple[float, float] = (0.5, 2.0)
    same_dataset_prob: float = 0.5
    in_dist_background_prob: float = 0.5
    blend_sigma_scale: float = 0.05
    blend_sigma_floor: float = 1.0
    hsv_match: bool = True
    jitter: ColorJitterParams = field(default_factory=ColorJitterParams)


@dataclass(frozen=True)
class AugmentationRecipe:
    background_source: str
    crops: tuple[CropOp, ...]
    jitter: ColorJitterParams
    seed: int

    def __post_init__(self):
        if self.background_source not in SOURCES:
            raise ValueError(f"background_source must be one of {SOURCES}")


class CropPool:
    """Indexable source of crop images for both source kinds."""

    def __init__(self, in_dist: Sequence[ImageSample], ood: Sequence[ImageSample]):
        if not in_dist or not ood:
            raise ValueError("crop pool needs at least one in-dist and one OoD image")
        self._pools = {"in_dist": in_dist, "ood": ood}

    def get(self, kind: str, index: int) -> ImageSample:
        pool = self._pools[kind]
        return pool[index % len(pool)]


def _other(kind: str) -> str:
    return "ood" if kind == "in_dist" else "in_dist"


def sample_recipe(
    rng: np.random.Generator,
    cfg: AugmentationConfig,
    background_source: str | None = None,
) -> AugmentationRecipe:
    """Draw one recipe. ``background_source`` pins the background kind."""
    h, w = cfg.image_size
    a_lo, a_hi = cfg.area_range
    r_lo, r_hi = cfg.aspect_range
    if not (0 < a_lo <= a_hi <= 1):
        raise ValueError(f"area range {cfg.area_range} infeasible for a {h}x{w} image")
    if not (0 < r_lo <= r_hi):
        raise ValueError(f"invalid aspect range {cfg.aspect_range}")
    if not (1 <= round(math.sqrt(a_lo * h * w / r_hi)) and 1 <= round(math.sqrt(a_lo * h * w * r_lo))):
        raise ValueError("minimum crop area rounds to an empty rectangle")
    n_lo, n_hi = cfg.num_crops
    if not 0 <= n_lo <= n_hi:
        raise ValueError(f"invalid crop count range {cfg.num_crops}")

    if background_source is None:
        background_source = "in_dist" if rng.random() < cfg.in_dist_background_prob else "ood"
    crops = []
    for _ in range(int(rng.integers(n_lo, n_hi + 1))):
        same = rng.random() < cfg.same_dataset_prob
        source = background_source if same else _other(background_source)
        area = rng.uniform(a_lo, a_hi) * h * w
        aspect = math.exp(rng.uniform(math.log(r_lo), math.log(r_hi)))  # width / height
        ch = min(h, max(1, int(round(math.sqrt(area / aspect)))))
        cw = min(w, max(1, int(round(math.sqrt(area * aspect)))))
        src = Rect(int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1)), ch, cw)
        dst = Rect(int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1)), ch, cw)
        sigma = max(cfg.blend_sigma_floor, cfg.blend_sigma_scale * min(ch, cw))
        crops.append(
            CropOp(source, src, dst, sigma, cfg.hsv_match, int(rng.integers(0, 2**31 - 1)))
        )
    return AugmentationRecipe(
        background_source, tuple(crops), cfg.jitter, int(rng.integers(0, 2**31 - 1))
    )


# ---------------------------------------------------------------------------
# HSV mean matching


def circular_mean_hue(hue: np.ndarray, weights: np.ndarray) -> tuple[float, float]:
    """Weighted circular mean of hues in [0, 1) and its resultant length."""
    z = np.sum(weights * np.exp(2j * np.pi * hue))
    total = np.sum(weights)
    if total <= 0:
        return 0.0, 0.0
    return float(np.angle(z) / (2 * np.pi) % 1.0), float(abs(z) / total)


def mean_hue_value(rgb: np.ndarray) -> tuple[float | None, float]:
    """Saturation-weighted circular mean hue (None when grey) and mean value."""
    hsv = rgb_to_hsv(np.clip(rgb, 0, 1))
    hue, strength = circular_mean_hue(hsv[..., 0], hsv[..., 1])
    if strength < 1e-9 or hsv[..., 1].mean() < HUE_SATURATION_FLOOR:
        return None, float(hsv[..., 2].mean())
    return hue, float(hsv[..., 2].mean())


def _value_offset(v: np.ndarray, target: float) -> float:
    """Offset d with mean(clip(v + d, 0, 1)) == target."""
    if target <= 0.0:
        return -1.0
    if target >= 1.0:
        return 1.0
    d = target - v.mean()
    if v.min() + d >= 0.0 and v.max() + d <= 1.0:
        return d
    f = lambda d: np.clip(v + d, 0.0, 1.0).mean() - target  # noqa: E731
    return brentq(f, -1.0, 1.0, xtol=1e-14, rtol=4 * np.finfo(float).eps)


def hsv_match(crop: np.ndarray, background_region: np.ndarray) -> np.ndarray:
    """Match the crop's mean hue and value to the region it will replace.

    Hue is rotated by the difference of saturation-weighted circular means
    (skipped when the background is nearly grey); value is offset so the
    clipped mean hits the background mean. Saturation is left alone.
    """
    crop = np.asarray(crop, dtype=np.float64)
    background_region = np.asarray(background_region, dtype=np.float64)
    if crop.shape != background_region.shape:
        raise ValueError("crop and background_region must have the same shape")
    hsv = rgb_to_hsv(np.clip(crop, 0, 1))
    bg_hue, bg_val = mean_hue_value(background_region)
    # value first: pixels clipped to black lose their hue, so hue stats are
    # taken on the value-adjusted patch
    hsv[..., 2] = np.clip(hsv[..., 2] + _value_offset(hsv[..., 2], bg_val), 0.0, 1.0)
    hsv[hsv[..., 2] == 0.0, 1] = 0.0
    crop_hue, crop_strength = circular_mean_hue(hsv[..., 0], hsv[..., 1])
    if bg_hue is not None and crop_strength >= 1e-9:
        hsv[..., 0] = (hsv[..., 0] + bg_hue - crop_hue) % 1.0
    return hsv_to_rgb(hsv)


# ---------------------------------------------------------------------------
# Pasting


def blend_alpha(h: int, w: int, sigma: float) -> np.ndarray:
    """Opacity for an h×w crop: eroded interior indicator blurred by ``sigma``.

    The support never leaves the crop rectangle, so pixels outside every
    destination rectangle keep their original values.
    """
    if sigma <= 0:
        return np.ones((h, w))
    margin = min(int(math.ceil(2 * sigma)), (min(h, w) - 1) // 2)
    interior = np.zeros((h, w))
    interior[margin:h - margin, margin:w - margin] = 1.0
    alpha = ndimage.gaussian_filter(interior, sigma, mode="constant", cval=0.0)
    return np.clip(alpha, 0.0, 1.0)


def gaussian_blend_paste(
    dst: ImageSample,
    crop_rgb: np.ndarray,
    crop_seg: np.ndarray,
    crop_ood: np.ndarray,
    op: CropOp,
) -> ImageSample:
    r = op.dst_rect
    if not r.within(dst.shape):
        raise ValueError(f"dst_rect {r} outside destination image {dst.shape}")
    if crop_rgb.shape[:2] != (r.h, r.w) or crop_seg.shape != (r.h, r.w) or crop_ood.shape != (r.h, r.w):
        raise ValueError("crop arrays must match dst_rect size")
    out = dst.copy()
    ys, xs = r.slices
    alpha = blend_alpha(r.h, r.w, op.blend_sigma)[..., None]
    if op.blend_sigma <= 0:
        out.rgb[ys, xs] = crop_rgb
    else:
        out.rgb[ys, xs] = alpha * crop_rgb + (1.0 - alpha) * dst.rgb[ys, xs]
    out.seg_labels[ys, xs] = crop_seg
    out.ood_labels[ys, xs] = crop_ood
    return out


# ---------------------------------------------------------------------------
# Colour jitter


def _grayscale(img: np.ndarray) -> np.ndarray:
    return img @ LUMA


def adjust_colour(
    img: np.ndarray,
    brightness: float = 1.0,
    contrast: float = 1.0,
    saturation: float = 1.0,
    hue: float = 0.0,
) -> np.ndarray:
    """Apply explicit jitter factors in the order brightness, contrast, saturation, hue."""
    out = np.asarray(img, dtype=np.float64)
    if brightness != 1.0:
        out = np.clip(out * brightness, 0, 1)
    if contrast != 1.0:
        m = _grayscale(out).mean()
        out = np.clip((out - m) * contrast + m, 0, 1)
    if saturation != 1.0:
        g = _grayscale(out)[..., None]
        out = np.clip(g + saturation * (out - g), 0, 1)
    if hue != 0.0:
        hsv = rgb_to_hsv(np.clip(out, 0, 1))
        hsv[..., 0] = (hsv[..., 0] + hue) % 1.0
        out = hsv_to_rgb(hsv)
    return out.copy() if out is img else np.clip(out, 0, 1)


def color_jitter(img: np.ndarray, params: ColorJitterParams, rng: np.random.Generator) -> np.ndarray:
    b = rng.uniform(*params.brightness)
    c = rng.uniform(*params.contrast)
    s = rng.uniform(*params.saturation)
    h = rng.uniform(*params.hue)
    return adjust_colour(img, b, c, s, h)


# ---------------------------------------------------------------------------
# Composition


def _compose(background, crop_pool, recipe, blend: bool, match: bool, jitter: bool) -> ImageSample:
    out = background.copy()
    for op in recipe.crops:
        src = crop_pool.get(op.crop_source, op.pool_index)
        if not op.src_rect.within(src.shape):
            raise ValueError(f"src_rect {op.src_rect} outside source image {src.shape}")
        ys, xs = op.src_rect.slices
        crop_rgb = src.rgb[ys, xs]
        if match and op.hsv_match:
            dys, dxs = op.dst_rect.slices
            crop_rgb = hsv_match(crop_rgb, out.rgb[dys, dxs])
        paste_op = op if blend else replace(op, blend_sigma=0.0)
        out = gaussian_blend_paste(out, crop_rgb, src.seg_labels[ys, xs], src.ood_labels[ys, xs], paste_op)
    if jitter:
        out.rgb = color_jitter(out.rgb, recipe.jitter, np.random.default_rng(recipe.seed))
    out.source_id = f"{background.source_id}+mix{recipe.seed}"
    return out


def apply_domainmix(background: ImageSample, crop_pool: CropPool, recipe: AugmentationRecipe) -> ImageSample:
    """Paste each crop (HSV-matched, Gaussian-blended) then jitter the whole image."""
    return _compose(background, crop_pool, recipe, blend=True, match=True, jitter=True)


def apply_cutmix(background: ImageSample, crop_pool: CropPool, recipe: AugmentationRecipe) -> ImageSample:
    """Hard rectangular paste with pixel-wise labels; no blending, matching or jitter."""
    return _compose(background, crop_pool, recipe, blend=False, match=False, jitter=False)


AUGMENTERS = {"domainmix": apply_domainmix, "cutmix": apply_cutmix}
