"""The desk-scale toy benchmark: ToyDrive/ToyClutter training data plus two test sets.

``pasted`` is the OoD-detection set (driving-palette clutter objects hard
pasted into held-out ToyDrive scenes). ``wild`` is the selective
segmentation set (held-out scenes with unusually textured known-class
regions). Every dataset seed is derived from one root seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .data import (
    ImageSample,
    generate_clutter_objects,
    generate_toyclutter,
    generate_toydrive,
    generate_toywild,
)
from .evaluator import build_pasted_eval_set
from .trainer import TrainingData


@dataclass(frozen=True)
class ToyBenchmarkConfig:
    size: tuple[int, int] = (64, 64)
    train_in_dist: int = 128
    train_ood: int = 128
    noise_fraction: float = 0.2
    test_in_dist: int = 48
    eval_objects: int = 48
    eval_palette: str = "driving"
    pastes_per_image: int = 1
    wild: int = 48


@dataclass
class ToyBenchmark:
    train: TrainingData
    pasted: list[ImageSample]
    wild: list[ImageSample]
    config: ToyBenchmarkConfig = field(default_factory=ToyBenchmarkConfig)


def derived_seeds(root: int) -> dict[str, int]:
    base = 1000 * int(root)
    return {
        "train_in_dist": base + 1,
        "train_ood": base + 2,
        "test_in_dist": base + 3,
        "eval_objects": base + 4,
        "paste": base + 5,
        "wild": base + 6,
    }


def make_toy_benchmark(seed: int, cfg: ToyBenchmarkConfig | None = None) -> ToyBenchmark:
    cfg = cfg or ToyBenchmarkConfig()
    s = derived_seeds(seed)
    train = TrainingData(
        generate_toydrive(cfg.train_in_dist, s["train_in_dist"], cfg.size),
        generate_toyclutter(cfg.train_ood, s["train_ood"], cfg.size, cfg.noise_fraction),
    )
    objects = generate_clutter_objects(cfg.eval_objects, s["eval_objects"], cfg.size, palette=cfg.eval_palette)
    pasted = build_pasted_eval_set(
        generate_toydrive(cfg.test_in_dist, s["test_in_dist"], cfg.size), objects, s["paste"], cfg.pastes_per_image
    )
    wild = generate_toywild(cfg.wild, s["wild"], cfg.size)
    return ToyBenchmark(train, pasted, wild, cfg)
