"""Image/label containers, on-disk ingestion and the procedural toy datasets.

ToyDrive is a four-class driving-like scene generator (road, sky, vehicle,
sign). ToyClutter produces textures that never contain those classes, except
for a configurable fraction of deliberately contaminated images which model
label noise in an uncurated OoD source.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

logger = logging.getLogger(__name__)

IGNORE = 255
MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1

TOYDRIVE_CLASSES = ("road", "sky", "vehicle", "sign")
ROAD, SKY, VEHICLE, SIGN = range(4)

DATASET_KINDS = ("in_distribution", "ood_uncurated", "ood_eval_pasted")


@dataclass
class ImageSample:
    """One RGB image with per-pixel class and OoD labels.

    ``rgb`` is float64 H×W×3 in [0, 1]; ``seg_labels`` holds class indices or
    ``IGNORE``; ``ood_labels`` is 1 where the pixel is out-of-distribution.
    """

    rgb: np.ndarray
    seg_labels: np.ndarray
    ood_labels: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        self.seg_labels = np.asarray(self.seg_labels, dtype=np.uint8)
        self.ood_labels = np.asarray(self.ood_labels, dtype=np.uint8)
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise ValueError(f"rgb must be H×W×3, got {self.rgb.shape}")
        hw = self.rgb.shape[:2]
        if self.seg_labels.shape != hw or self.ood_labels.shape != hw:
            raise ValueError(
                f"dimension mismatch: rgb {hw}, seg_labels {self.seg_labels.shape}, "
                f"ood_labels {self.ood_labels.shape}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.rgb.shape[:2]

    def copy(self) -> "ImageSample":
        return ImageSample(
            self.rgb.copy(), self.seg_labels.copy(), self.ood_labels.copy(), self.source_id
        )

    def check_invariants(self, num_classes: int) -> None:
        """Raise ``ValueError`` if the label partition is violated."""
        ood = self.ood_labels == 1
        if not np.isin(self.ood_labels, (0, 1)).all():
            raise ValueError("ood_labels must be binary")
        if (self.seg_labels[ood] != IGNORE).any():
            raise ValueError("OoD pixels must carry seg_labels=IGNORE")
        known = self.seg_labels != IGNORE
        if (self.seg_labels[known] >= num_classes).any():
            raise ValueError("seg_labels outside {0..K-1} ∪ {IGNORE}")
        if (self.ood_labels[known] != 0).any():
            raise ValueError("labelled pixels must have ood_labels=0")


@dataclass(frozen=True)
class GeneratorRecipe:
    name: str  # "toydrive" | "toyclutter"
    n: int
    seed: int
    size: tuple[int, int] = (64, 64)
    options: dict = field(default_factory=dict)


@dataclass
class DatasetSpec:
    kind: str
    root_or_generator: Path | str | GeneratorRecipe
    num_classes: int = len(TOYDRIVE_CLASSES)
    class_names: Sequence[str] = TOYDRIVE_CLASSES
    void_policy: str = "void_is_ood"
    split: str | None = None

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "in_distribution" and self.num_classes < 2:
            raise ValueError("in-distribution datasets need num_classes >= 2")
        if len(self.class_names) != self.num_classes:
            raise ValueError("class_names must have num_classes entries")
        if self.void_policy != "void_is_ood":
            raise ValueError(f"unsupported void_policy {self.void_policy!r}")


@dataclass(frozen=True)
class ClassFrequency:
    per_class_pixel_fraction: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.per_class_pixel_fraction, dtype=np.float64)
        if (p < 0).any() or (p > 1).any() or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("class fractions must lie in [0, 1] and sum to 1")
        object.__setattr__(self, "per_class_pixel_fraction", p)


# ---------------------------------------------------------------------------
# ToyDrive


def _check_size(size: tuple[int, int]) -> tuple[int, int]:
    h, w = int(size[0]), int(size[1])
    if h < 32 or w < 32:
        raise ValueError(f"size {h}x{w} too small to place all classes (need >= 32x32)")
    return h, w


def _smooth_noise(rng: np.random.Generator, h: int, w: int, sigma: float) -> np.ndarray:
    noise = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma, mode="wrap")
    return noise / (noise.std() + 1e-12)


def _hsv_color(hue: float, sat: float, val: float) -> np.ndarray:
    from matplotlib.colors import hsv_to_rgb

    return hsv_to_rgb(np.array([hue % 1.0, sat, val]))


def _toydrive_scene(rng: np.random.Generator, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    rgb = np.zeros((h, w, 3))
    seg = np.zeros((h, w), dtype=np.uint8)

    horizon = int(round(h * rng.uniform(0.35, 0.55)))
    horizon += (np.round(rng.uniform(-0.06, 0.06) * (cols - w / 2))).astype(int)
    sky = rows < horizon
    seg[sky] = SKY
    seg[~sky] = ROAD

    sky_top = _hsv_color(rng.uniform(0.55, 0.65), rng.uniform(0.4, 0.7), rng.uniform(0.75, 0.95))
    sky_bottom = _hsv_color(rng.uniform(0.55, 0.62), rng.uniform(0.15, 0.35), rng.uniform(0.85, 1.0))
    t = np.clip(rows / max(h * 0.6, 1), 0, 1)[..., None]
    sky_rgb = (1 - t) * sky_top + t * sky_bottom
    road_gray = rng.uniform(0.25, 0.45)
    road_rgb = np.full(3, road_gray) + rng.uniform(-0.03, 0.03, 3)
    grain = 0.05 * _smooth_noise(rng, h, w, 0.8)[..., None]
    rgb[:] = np.where(sky[..., None], sky_rgb + 0.3 * grain, road_rgb + grain)

    # lane marking: painted road stays class "road"
    lane_c = w // 2 + int(rng.integers(-w // 8, w // 8 + 1))
    lane = (~sky) & (np.abs(cols - lane_c) <= 0) & ((rows // 4) % 2 == 0)
    rgb[lane] = 0.9

    min_horizon = int(horizon.min())
    n_vehicles = int(rng.integers(1, 3))
    for _ in range(n_vehicles):
        vh = int(rng.integers(max(4, h // 8), max(6, h // 4)))
        vw = int(rng.integers(max(6, w // 6), max(8, w // 3)))
        x0 = int(rng.integers(0, w - vw))
        base = int(rng.integers(min(h - 1, int(horizon.max()) + vh // 2), h))
        y0 = max(0, base - vh)
        body = _hsv_color(rng.uniform(0, 1), rng.uniform(0.6, 1.0), rng.uniform(0.5, 0.95))
        rgb[y0:base, x0:x0 + vw] = body + 0.02 * rng.standard_normal((base - y0, vw, 1))
        # dark window strip
        wy = y0 + max(1, (base - y0) // 5)
        rgb[wy:wy + max(1, (base - y0) // 4), x0 + 1:x0 + vw - 1] *= 0.35
        seg[y0:base, x0:x0 + vw] = VEHICLE

    pole_w = int(rng.integers(2, 4))
    px = int(rng.integers(1, w - pole_w - 1))
    top = int(rng.integers(max(1, min_horizon - h // 4), max(2, min_horizon)))
    bottom = int(rng.integers(min(h - 1, int(horizon.max()) + 2), h))
    pole_col = _hsv_color(rng.uniform(0.1, 0.17), rng.uniform(0.7, 1.0), rng.uniform(0.8, 1.0))
    rgb[top:bottom, px:px + pole_w] = pole_col
    seg[top:bottom, px:px + pole_w] = SIGN
    plate = max(3, pole_w + 2)
    py = max(0, top - plate // 2)
    pl = max(0, px - 1)
    rgb[py:py + plate, pl:pl + plate] = pole_col
    seg[py:py + plate, pl:pl + plate] = SIGN

    return np.clip(rgb, 0.0, 1.0), seg


def generate_toydrive(n: int, seed: int, size: tuple[int, int] = (64, 64)) -> list[ImageSample]:
    """Generate ``n`` ToyDrive scenes; a pure function of its arguments."""
    if n < 1:
        raise ValueError("n must be >= 1")
    h, w = _check_size(size)
    out = []
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(n)):
        rng = np.random.default_rng(child)
        rgb, seg = _toydrive_scene(rng, h, w)
        out.append(ImageSample(rgb, seg, np.zeros((h, w), np.uint8), f"toydrive/{seed}/{i}"))
    return out


# ---------------------------------------------------------------------------
# ToyClutter

CLUTTER_FAMILIES = ("ellipses", "stripes", "noise")


def _clutter_texture(rng: np.random.Generator, h: int, w: int, family: str) -> np.ndarray:
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    if family == "ellipses":
        rgb = np.broadcast_to(_hsv_color(rng.uniform(), rng.uniform(0.3, 1), rng.uniform(0.3, 1)), (h, w, 3)).copy()
        for _ in range(int(rng.integers(4, 10))):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            ry, rx = rng.uniform(3, h / 3), rng.uniform(3, w / 3)
            theta = rng.uniform(0, np.pi)
            dy, dx = rows - cy, cols - cx
            u = dx * np.cos(theta) + dy * np.sin(theta)
            v = -dx * np.sin(theta) + dy * np.cos(theta)
            inside = (u / rx) ** 2 + (v / ry) ** 2 <= 1
            rgb[inside] = _hsv_color(rng.uniform(), rng.uniform(0.3, 1), rng.uniform(0.3, 1))
    elif family == "stripes":
        theta = rng.uniform(0, np.pi)
        period = rng.uniform(4, 14)
        phase = (cols * np.cos(theta) + rows * np.sin(theta)) * 2 * np.pi / period
        t = (0.5 + 0.5 * np.sin(phase))[..., None]
        c1 = _hsv_color(rng.uniform(), rng.uniform(0.3, 1), rng.uniform(0.3, 1))
        c2 = _hsv_color(rng.uniform(), rng.uniform(0.3, 1), rng.uniform(0.3, 1))
        rgb = t * c1 + (1 - t) * c2
    elif family == "noise":
        sigma = rng.uniform(1.0, 4.0)
        rgb = np.stack([_smooth_noise(rng, h, w, sigma) for _ in range(3)], axis=-1)
        rgb = 0.5 + 0.18 * rgb + rng.uniform(-0.2, 0.2, 3)
    else:
        raise ValueError(f"unknown clutter family {family!r}")
    rgb = rgb + 0.03 * rng.standard_normal((h, w, 1))
    return np.clip(rgb, 0.0, 1.0)


def generate_toyclutter(
    n: int,
    seed: int,
    size: tuple[int, int] = (64, 64),
    noise_fraction: float = 0.2,
) -> list[ImageSample]:
    """Generate ``n`` uncurated OoD texture images.

    ``round(noise_fraction * n)`` of them are contaminated with a ToyDrive
    road band and vehicle, while still labelled entirely OoD. The
    contamination flag is only recorded in ``source_id``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 <= noise_fraction <= 1.0:
        raise ValueError("noise_fraction must lie in [0, 1]")
    h, w = _check_size(size)
    pick_rng = np.random.default_rng([seed, 0xC1])
    n_noisy = int(round(noise_fraction * n))
    contaminated = set(pick_rng.permutation(n)[:n_noisy].tolist())

    out = []
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(n)):
        rng = np.random.default_rng(child)
        family = CLUTTER_FAMILIES[int(rng.integers(len(CLUTTER_FAMILIES)))]
        rgb = _clutter_texture(rng, h, w, family)
        noisy = i in contaminated
        if noisy:
            scene, seg = _toydrive_scene(rng, h, w)
            keep = (seg == ROAD) | (seg == VEHICLE)
            rgb[keep] = scene[keep]
        out.append(
            ImageSample(
                rgb,
                np.full((h, w), IGNORE, np.uint8),
                np.ones((h, w), np.uint8),
                f"toyclutter/{seed}/{i}/{family}/contaminated={int(noisy)}",
            )
        )
    return out


def is_contaminated(sample: ImageSample) -> bool:
    return sample.source_id.endswith("contaminated=1")


def _driving_recolour(rgb: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Keep a texture's value pattern but move it into road/sky/vehicle colours."""
    from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

    hsv = rgb_to_hsv(np.clip(rgb, 0, 1))
    v = hsv[..., 2]
    detail = (v - v.mean()) / (v.std() + 1e-6)
    kind = rng.choice(["road", "sky", "vehicle"], p=[0.45, 0.3, 0.25])
    if kind == "road":
        hue, sat, val = rng.uniform(0, 1), rng.uniform(0.0, 0.1), rng.uniform(0.25, 0.45)
    elif kind == "sky":
        hue, sat, val = rng.uniform(0.55, 0.65), rng.uniform(0.2, 0.6), rng.uniform(0.75, 0.95)
    else:
        hue, sat, val = rng.uniform(0, 1), rng.uniform(0.6, 1.0), rng.uniform(0.5, 0.95)
    hsv[..., 0] = (hue + 0.03 * (hsv[..., 0] - 0.5)) % 1.0
    hsv[..., 1] = np.clip(sat + 0.05 * detail, 0, 1)
    hsv[..., 2] = np.clip(val + 0.12 * detail, 0, 1)
    return hsv_to_rgb(hsv)


def generate_clutter_objects(
    n: int,
    seed: int,
    size: tuple[int, int] = (64, 64),
    area_range=(0.04, 0.15),
    palette: str = "natural",
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Clutter textures cut out by random ellipse/star masks.

    Returns ``(rgb_patch, mask)`` pairs with exact boolean object masks, used
    to build the pasted OoD evaluation set. ``palette="driving"`` recolours
    each texture into ToyDrive's colour range so that colour alone cannot
    separate the object from the scene.
    """
    if palette not in ("natural", "driving"):
        raise ValueError(f"unknown palette {palette!r}")
    h, w = _check_size(size)
    textures = generate_toyclutter(n, seed + 7919, (h, w), noise_fraction=0.0)
    objects = []
    for i, (tex, child) in enumerate(zip(textures, np.random.SeedSequence([seed, 1]).spawn(n))):
        rng = np.random.default_rng(child)
        area = rng.uniform(*area_range) * h * w
        aspect = rng.uniform(0.6, 1.6)
        ry = np.sqrt(area / np.pi * aspect)
        rx = np.sqrt(area / np.pi / aspect)
        ph, pw = min(int(np.ceil(2 * ry)) + 1, h), min(int(np.ceil(2 * rx)) + 1, w)
        rows, cols = np.mgrid[0:ph, 0:pw].astype(np.float64)
        cy, cx = (ph - 1) / 2, (pw - 1) / 2
        if i % 2 == 0:
            mask = ((rows - cy) / ry) ** 2 + ((cols - cx) / rx) ** 2 <= 1
        else:
            # star-like outline via radius modulation
            ang = np.arctan2((rows - cy) / ry, (cols - cx) / rx)
            rad = np.hypot((rows - cy) / ry, (cols - cx) / rx)
            k = int(rng.integers(3, 7))
            mask = rad <= 0.75 + 0.25 * np.cos(k * ang + rng.uniform(0, 2 * np.pi))
        y0 = int(rng.integers(0, h - ph + 1))
        x0 = int(rng.integers(0, w - pw + 1))
        patch = tex.rgb[y0:y0 + ph, x0:x0 + pw].copy()
        if palette == "driving":
            patch = _driving_recolour(patch, rng)
        objects.append((patch, mask))
    return objects


def generate_toywild(
    n: int,
    seed: int,
    size: tuple[int, int] = (64, 64),
    edits: tuple[int, int] = (1, 2),
) -> list[ImageSample]:
    """ToyDrive scenes where known-class regions have an unusual appearance.

    Each scene gets a few rectangles in which road, sky or vehicle pixels are
    re-textured with clutter patterns in driving colours. Labels keep the
    true class, so the set measures how well unusual-looking pixels of known
    classes can be rejected (there are no OoD labels).
    """
    h, w = _check_size(size)
    scenes = generate_toydrive(n, seed, (h, w))
    textures = generate_toyclutter(n, seed + 104729, (h, w), noise_fraction=0.0)
    out = []
    for sample, tex, child in zip(scenes, textures, np.random.SeedSequence([seed, 2]).spawn(n)):
        rng = np.random.default_rng(child)
        s = sample.copy()
        for _ in range(int(rng.integers(edits[0], edits[1] + 1))):
            rh = int(rng.integers(h // 5, h // 2))
            rw = int(rng.integers(w // 5, w // 2))
            y, x = int(rng.integers(0, h - rh + 1)), int(rng.integers(0, w - rw + 1))
            region = (slice(y, y + rh), slice(x, x + rw))
            target = s.seg_labels[region]
            cls = int(rng.choice(np.unique(target)))
            recoloured = _driving_recolour(tex.rgb[region], rng)
            hit = target == cls
            s.rgb[region][hit] = recoloured[hit]
        s.source_id = sample.source_id.replace("toydrive", "toywild")
        out.append(s)
    return out


# ---------------------------------------------------------------------------
# Frequencies


def class_frequencies(samples: Iterable[ImageSample], K: int) -> ClassFrequency:
    counts = np.zeros(K, dtype=np.int64)
    for s in samples:
        lab = s.seg_labels[s.seg_labels != IGNORE]
        if lab.size and lab.max() >= K:
            raise ValueError(f"label {lab.max()} outside 0..{K - 1}")
        counts += np.bincount(lab.ravel(), minlength=K)[:K]
    total = counts.sum()
    if total == 0:
        raise ValueError("no labelled (non-IGNORE) pixels to compute class frequencies")
    return ClassFrequency(counts / total)


# ---------------------------------------------------------------------------
# Disk format


def write_sample(sample: ImageSample, root: Path | str, stem: str, with_labels: bool = True) -> None:
    """Write ``images/<stem>.png`` and (optionally) ``labels/<stem>.png``.

    In the index map IGNORE (255) encodes void, which reloads as OoD.
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rgb8 = np.clip(np.round(sample.rgb * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(rgb8, mode="RGB").save(root / "images" / f"{stem}.png")
    if with_labels:
        (root / "labels").mkdir(parents=True, exist_ok=True)
        lab = sample.seg_labels.copy()
        lab[sample.ood_labels == 1] = IGNORE
        Image.fromarray(lab, mode="L").save(root / "labels" / f"{stem}.png")


def write_dataset(
    samples_by_split: dict[str, Sequence[ImageSample]],
    root: Path | str,
    kind: str,
    num_classes: int = len(TOYDRIVE_CLASSES),
    class_names: Sequence[str] = TOYDRIVE_CLASSES,
) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    splits = {}
    for split, samples in samples_by_split.items():
        stems = []
        for i, s in enumerate(samples):
            stem = f"{split}_{i:05d}"
            write_sample(s, root, stem, with_labels=kind != "ood_uncurated")
            stems.append(stem)
        splits[split] = stems
    manifest = {
        "version": MANIFEST_VERSION,
        "kind": kind,
        "num_classes": num_classes,
        "class_names": list(class_names),
        "splits": splits,
    }
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def _read_png(path: Path, mode: str) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != mode:
            im = im.convert(mode)
        return np.asarray(im)


def _iter_disk(spec: DatasetSpec) -> Iterator[ImageSample]:
    root = Path(spec.root_or_generator)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    manifest_path = root / MANIFEST_NAME
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        if spec.split is not None:
            stems = list(manifest["splits"].get(spec.split, []))
        else:
            stems = [s for split in sorted(manifest["splits"]) for s in manifest["splits"][split]]
    else:
        stems = sorted(p.stem for p in (root / "images").glob("*.png"))

    for stem in stems:
        img_path = root / "images" / f"{stem}.png"
        try:
            rgb = _read_png(img_path, "RGB").astype(np.float64) / 255.0
        except (OSError, ValueError) as exc:
            logger.warning("skipping %s: %s", img_path, exc)
            continue
        h, w = rgb.shape[:2]
        if spec.kind == "ood_uncurated":
            seg = np.full((h, w), IGNORE, np.uint8)
            ood = np.ones((h, w), np.uint8)
        else:
            lab_path = root / "labels" / f"{stem}.png"
            try:
                seg = _read_png(lab_path, "L").astype(np.uint8)
            except (OSError, ValueError) as exc:
                logger.warning("skipping %s: %s", lab_path, exc)
                continue
            if seg.shape != (h, w):
                raise ValueError(
                    f"dimension mismatch for {stem}: image {(h, w)} vs labels {seg.shape}"
                )
            ood = (seg == IGNORE).astype(np.uint8)
            bad = (seg != IGNORE) & (seg >= spec.num_classes)
            if bad.any():
                raise ValueError(f"{lab_path}: label values outside 0..{spec.num_classes - 1}")
        yield ImageSample(rgb, seg, ood, f"{root.name}/{stem}")


def load_dataset(spec: DatasetSpec) -> Iterator[ImageSample]:
    """Stream samples for ``spec`` from disk or from a procedural recipe."""
    src = spec.root_or_generator
    if isinstance(src, GeneratorRecipe):
        if src.name == "toydrive":
            yield from generate_toydrive(src.n, src.seed, src.size)
        elif src.name == "toyclutter":
            yield from generate_toyclutter(src.n, src.seed, src.size, **src.options)
        else:
            raise ValueError(f"unknown generator {src.name!r}")
        return
    yield from _iter_disk(spec)
