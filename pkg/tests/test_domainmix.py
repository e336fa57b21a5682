import colorsys
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from matplotlib.colors import rgb_to_hsv

from oodseg.data import IGNORE, ImageSample
from oodseg.domainmix import (
    AugmentationConfig,
    AugmentationRecipe,
    ColorJitterParams,
    CropOp,
    CropPool,
    Rect,
    adjust_colour,
    apply_cutmix,
    apply_domainmix,
    blend_alpha,
    circular_mean_hue,
    color_jitter,
    gaussian_blend_paste,
    hsv_match,
    mean_hue_value,
    sample_recipe,
)

from augment_cases import (
    IDENTITY_JITTER,
    SIZE,
    constant_fixture,
    geometric_labels,
    label_mismatches,
    max_gradient,
    random_in_dist,
    small_pool,
)

CFG = AugmentationConfig(image_size=SIZE)


# ---------------------------------------------------------------------------
# Types and recipes


def test_crop_op_validation():
    with pytest.raises(ValueError):
        CropOp("ood", Rect(0, 0, 4, 4), Rect(0, 0, 4, 5))
    with pytest.raises(ValueError):
        CropOp("ood", Rect(0, 0, 4, 4), Rect(0, 0, 4, 4), blend_sigma=-1)


def test_jitter_ranges_must_contain_identity():
    with pytest.raises(ValueError):
        ColorJitterParams(brightness=(1.1, 1.3))
    with pytest.raises(ValueError):
        ColorJitterParams(hue=(0.01, 0.05))


def test_recipe_determinism():
    a = sample_recipe(np.random.default_rng(5), CFG)
    b = sample_recipe(np.random.default_rng(5), CFG)
    assert a == b


def test_recipe_geometry_in_bounds():
    rng = np.random.default_rng(0)
    for _ in range(300):
        r = sample_recipe(rng, CFG)
        assert 1 <= len(r.crops) <= 3
        for op in r.crops:
            assert op.src_rect.within(SIZE) and op.dst_rect.within(SIZE)


def test_same_dataset_prob_zero():
    rng = np.random.default_rng(1)
    cfg = AugmentationConfig(image_size=SIZE, same_dataset_prob=0.0)
    for _ in range(200):
        r = sample_recipe(rng, cfg)
        assert all(op.crop_source != r.background_source for op in r.crops)


def test_same_dataset_rate_monte_carlo():
    rng = np.random.default_rng(2)
    same = total = 0
    for _ in range(10_000):
        r = sample_recipe(rng, CFG)
        for op in r.crops:
            same += op.crop_source == r.background_source
            total += 1
    assert abs(same / total - 0.5) <= 0.02


def test_infeasible_geometry():
    with pytest.raises(ValueError):
        sample_recipe(np.random.default_rng(0), AugmentationConfig(image_size=SIZE, area_range=(0.5, 1.5)))


# ---------------------------------------------------------------------------
# HSV matching


def test_hsv_match_fixed_point():
    rng = np.random.default_rng(3)
    patch = rng.uniform(0.2, 0.8, (6, 7, 3))
    np.testing.assert_allclose(hsv_match(patch, patch), patch, atol=1e-6)


def test_hsv_match_red_to_blue():
    red = np.zeros((5, 5, 3))
    red[..., 0] = 0.8
    blue = np.zeros((5, 5, 3))
    blue[..., 2] = 0.8
    out = hsv_match(red, blue)
    hue, _ = mean_hue_value(out)
    blue_hue = colorsys.rgb_to_hsv(0, 0, 0.8)[0]
    assert abs((hue - blue_hue + 0.5) % 1.0 - 0.5) <= 1e-3


def test_hsv_match_grey_background_skips_hue():
    rng = np.random.default_rng(4)
    crop = rng.uniform(0.2, 0.8, (6, 6, 3))
    grey = np.full((6, 6, 3), 0.5)
    out = rgb_to_hsv(hsv_match(crop, grey))
    np.testing.assert_allclose(out[..., 0], rgb_to_hsv(crop)[..., 0], atol=1e-9)
    assert out[..., 2].mean() == pytest.approx(0.5, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_hsv_match_properties(seed):
    rng = np.random.default_rng(seed)
    crop = rng.random((5, 6, 3)) * rng.uniform(0.2, 1.0)
    bg = rng.random((5, 6, 3)) * rng.uniform(0.2, 1.0)
    once = hsv_match(crop, bg)
    np.testing.assert_allclose(hsv_match(once, bg), once, atol=1e-6)
    v_in = rgb_to_hsv(crop)[..., 2].ravel()
    v_out = rgb_to_hsv(once)[..., 2].ravel()
    # mean shift never reverses the value ordering
    i, j = np.triu_indices(v_in.size, 1)
    assert not np.any((v_in[i] < v_in[j]) & (v_out[i] > v_out[j] + 1e-12))
    assert rgb_to_hsv(once)[..., 2].mean() == pytest.approx(rgb_to_hsv(bg)[..., 2].mean(), abs=1e-9)


def test_circular_mean_wraps():
    hue, strength = circular_mean_hue(np.array([0.95, 0.05]), np.ones(2))
    assert min(hue, 1 - hue) < 1e-12 and strength > 0.9


# ---------------------------------------------------------------------------
# Pasting


def test_hard_paste_copies_crop():
    rng = np.random.default_rng(5)
    bg = random_in_dist(rng)
    crop = rng.random((6, 9, 3))
    op = CropOp("ood", Rect(0, 0, 6, 9), Rect(3, 4, 6, 9), blend_sigma=0.0)
    out = gaussian_blend_paste(bg, crop, np.full((6, 9), IGNORE), np.ones((6, 9)), op)
    np.testing.assert_array_equal(out.rgb[3:9, 4:13], crop)


def test_ood_crop_labels_on_dst_rect():
    rng = np.random.default_rng(6)
    bg = random_in_dist(rng)
    op = CropOp("ood", Rect(0, 0, 6, 9), Rect(3, 4, 6, 9), blend_sigma=2.0)
    out = gaussian_blend_paste(bg, rng.random((6, 9, 3)), np.full((6, 9), IGNORE), np.ones((6, 9)), op)
    inside = np.zeros(SIZE, bool)
    inside[3:9, 4:13] = True
    assert (out.ood_labels[inside] == 1).all() and (out.seg_labels[inside] == IGNORE).all()
    assert (out.ood_labels[~inside] == 0).all()
    np.testing.assert_array_equal(out.seg_labels[~inside], bg.seg_labels[~inside])
    np.testing.assert_array_equal(out.rgb[~inside], bg.rgb[~inside])


def test_paste_outside_image_fails():
    bg = random_in_dist(np.random.default_rng(0))
    op = CropOp("ood", Rect(0, 0, 6, 6), Rect(30, 30, 6, 6))
    with pytest.raises(ValueError):
        gaussian_blend_paste(bg, np.zeros((6, 6, 3)), np.zeros((6, 6)), np.zeros((6, 6)), op)


def test_blend_softens_boundary():
    assert max_gradient(constant_fixture(2.0)) < max_gradient(constant_fixture(0.0))


def test_blend_alpha_support_inside_rect():
    a = blend_alpha(30, 40, 2.0)
    assert a.shape == (30, 40) and a.min() >= 0 and a.max() <= 1
    assert a[15, 20] > 0.99 and a[0, 0] < 0.1


# ---------------------------------------------------------------------------
# Colour jitter


def test_identity_jitter():
    img = np.random.default_rng(7).random((8, 8, 3))
    np.testing.assert_array_equal(color_jitter(img, IDENTITY_JITTER, np.random.default_rng(0)), img)


def test_brightness_doubles_grey():
    np.testing.assert_allclose(adjust_colour(np.full((4, 4, 3), 0.25), brightness=2.0), 0.5, atol=1e-12)


def test_full_hue_turn_is_identity():
    img = np.random.default_rng(8).random((8, 8, 3))
    assert np.abs(adjust_colour(img, hue=1.0) - img).max() <= 1 / 255


def test_jitter_stays_in_range():
    img = np.random.default_rng(9).random((8, 8, 3))
    out = color_jitter(img, ColorJitterParams(), np.random.default_rng(1))
    assert out.min() >= 0 and out.max() <= 1 and out.shape == img.shape


# ---------------------------------------------------------------------------
# Composition


def _one_crop_recipe(source, src, dst, sigma=2.0, jitter=IDENTITY_JITTER, background="in_dist"):
    return AugmentationRecipe(background, (CropOp(source, src, dst, sigma),), jitter, 0)


def test_zero_crops_identity():
    pool = small_pool(0)
    bg = pool.get("in_dist", 0)
    recipe = AugmentationRecipe("in_dist", (), IDENTITY_JITTER, 0)
    for fn in (apply_domainmix, apply_cutmix):
        out = fn(bg, pool, recipe)
        np.testing.assert_array_equal(out.rgb, bg.rgb)
        np.testing.assert_array_equal(out.seg_labels, bg.seg_labels)


def test_ood_crop_area_accounting():
    pool = small_pool(1)
    rect = Rect(2, 3, 7, 11)
    out = apply_domainmix(pool.get("in_dist", 0), pool, _one_crop_recipe("ood", Rect(0, 0, 7, 11), rect))
    assert out.ood_labels.sum() == rect.area


def test_in_dist_crop_into_ood_background():
    pool = small_pool(2)
    rect = Rect(10, 5, 8, 6)
    recipe = _one_crop_recipe("in_dist", Rect(1, 1, 8, 6), rect, background="ood")
    out = apply_domainmix(pool.get("ood", 0), pool, recipe)
    expected = np.ones(SIZE, np.uint8)
    expected[rect.slices] = 0
    np.testing.assert_array_equal(out.ood_labels, expected)
    np.testing.assert_array_equal(out.seg_labels[rect.slices], pool.get("in_dist", 0).seg_labels[1:9, 1:7])


def test_cutmix_shares_labels_and_is_sharper():
    h, w = SIZE
    grey = ImageSample(np.full((h, w, 3), 0.3), np.zeros((h, w)), np.zeros((h, w)))
    bright = ImageSample(np.full((h, w, 3), [0.9, 0.6, 0.1]), np.full((h, w), IGNORE), np.ones((h, w)))
    pool = CropPool([grey], [bright])
    recipe = _one_crop_recipe("ood", Rect(0, 0, 12, 12), Rect(10, 10, 12, 12), jitter=ColorJitterParams())
    dm, cm = apply_domainmix(grey, pool, recipe), apply_cutmix(grey, pool, recipe)
    np.testing.assert_array_equal(dm.seg_labels, cm.seg_labels)
    np.testing.assert_array_equal(dm.ood_labels, cm.ood_labels)
    assert max_gradient(cm.rgb) >= max_gradient(dm.rgb)


def test_conservation_before_jitter():
    pool = small_pool(3)
    rng = np.random.default_rng(3)
    cfg = AugmentationConfig(image_size=SIZE, jitter=IDENTITY_JITTER)
    for i in range(50):
        recipe = sample_recipe(rng, cfg)
        bg = pool.get(recipe.background_source, i)
        out = apply_domainmix(bg, pool, recipe)
        outside = np.ones(SIZE, bool)
        for op in recipe.crops:
            outside[op.dst_rect.slices] = False
        np.testing.assert_array_equal(out.rgb[outside], bg.rgb[outside])


def test_replay_is_bitwise_deterministic():
    pool = small_pool(4)
    recipe = sample_recipe(np.random.default_rng(4), CFG)
    bg = pool.get(recipe.background_source, 0)
    a, b = apply_domainmix(bg, pool, recipe), apply_domainmix(bg, pool, recipe)
    assert np.array_equal(a.rgb, b.rgb) and np.array_equal(a.ood_labels, b.ood_labels)


def test_labels_match_geometry():
    assert label_mismatches(200, seed=11) == 0


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_labels_hard_and_partitioned(seed):
    rng = np.random.default_rng(seed)
    pool = small_pool(seed % 7)
    recipe = sample_recipe(rng, CFG)
    out = apply_domainmix(pool.get(recipe.background_source, seed), pool, recipe)
    assert set(np.unique(out.ood_labels)) <= {0, 1}
    out.check_invariants(4)
    seg, ood = geometric_labels(pool.get(recipe.background_source, seed), pool, recipe)
    np.testing.assert_array_equal(out.ood_labels, ood)
    assert out.rgb.min() >= 0 and out.rgb.max() <= 1
    assert not math.isnan(out.rgb.sum())
