"""Fixtures shared by the augmentation tests and the acceptance suite."""

from __future__ import annotations

import numpy as np

from oodseg.data import IGNORE, ImageSample
from oodseg.domainmix import (
    AugmentationConfig,
    ColorJitterParams,
    CropOp,
    CropPool,
    Rect,
    apply_cutmix,
    apply_domainmix,
    gaussian_blend_paste,
    sample_recipe,
)

SIZE = (32, 32)


def random_in_dist(rng, size=SIZE, k=4) -> ImageSample:
    h, w = size
    seg = rng.integers(0, k, (h, w)).astype(np.uint8)
    return ImageSample(rng.random((h, w, 3)), seg, np.zeros((h, w), np.uint8), "id")


def random_ood(rng, size=SIZE) -> ImageSample:
    h, w = size
    return ImageSample(rng.random((h, w, 3)), np.full((h, w), IGNORE, np.uint8), np.ones((h, w), np.uint8), "ood")


def small_pool(seed: int, n: int = 3) -> CropPool:
    rng = np.random.default_rng(seed)
    return CropPool([random_in_dist(rng) for _ in range(n)], [random_ood(rng) for _ in range(n)])


def geometric_labels(background: ImageSample, pool: CropPool, recipe) -> tuple[np.ndarray, np.ndarray]:
    """Expected labels computed from rectangles alone (later crops overwrite)."""
    seg = background.seg_labels.copy()
    ood = background.ood_labels.copy()
    for op in recipe.crops:
        src = pool.get(op.crop_source, op.pool_index)
        sy, sx = op.src_rect.y, op.src_rect.x
        dy, dx = op.dst_rect.y, op.dst_rect.x
        for i in range(op.dst_rect.h):
            for j in range(op.dst_rect.w):
                seg[dy + i, dx + j] = src.seg_labels[sy + i, sx + j]
                ood[dy + i, dx + j] = src.ood_labels[sy + i, sx + j]
    return seg, ood


def label_mismatches(num_recipes: int, seed: int = 0) -> int:
    """Count recipes whose DomainMix/Cutmix labels differ from the geometric oracle."""
    rng = np.random.default_rng(seed)
    pool = small_pool(seed)
    cfg = AugmentationConfig(image_size=SIZE)
    bad = 0
    for i in range(num_recipes):
        recipe = sample_recipe(rng, cfg)
        background = pool.get(recipe.background_source, i)
        seg, ood = geometric_labels(background, pool, recipe)
        for fn in (apply_domainmix, apply_cutmix):
            out = fn(background, pool, recipe)
            if not (np.array_equal(out.seg_labels, seg) and np.array_equal(out.ood_labels, ood)):
                bad += 1
    return bad


def constant_fixture(sigma: float, size=(32, 32), rect=Rect(8, 8, 16, 16)) -> np.ndarray:
    """Paste a constant-colour crop onto a constant background; return rgb."""
    h, w = size
    bg = ImageSample(np.full((h, w, 3), 0.2), np.zeros((h, w)), np.zeros((h, w)))
    crop = np.full((rect.h, rect.w, 3), 0.9)
    op = CropOp("ood", Rect(0, 0, rect.h, rect.w), rect, blend_sigma=sigma, hsv_match=False)
    labels = np.full((rect.h, rect.w), IGNORE, np.uint8)
    return gaussian_blend_paste(bg, crop, labels, np.ones((rect.h, rect.w), np.uint8), op).rgb


def max_gradient(rgb: np.ndarray) -> float:
    gy = np.abs(np.diff(rgb, axis=0)).max()
    gx = np.abs(np.diff(rgb, axis=1)).max()
    return float(max(gx, gy))


IDENTITY_JITTER = ColorJitterParams.identity()
