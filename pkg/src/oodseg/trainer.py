"""Two-stage training plus the single-stage baseline variants.

Stage 1 trains encoder, segmentation decoder and projection head with
class-weighted cross-entropy plus the one-class contrastive loss. Stage 2
freezes all of that and fits only the OoD decoder with BCE. Baselines train
a single stage: plain cross-entropy (in-distribution data only), cross-entropy
with the KL flattening term, or cross-entropy with a jointly trained OoD
decoder.
"""

from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import ImageSample, class_frequencies
from .domainmix import AUGMENTERS, AugmentationConfig, ColorJitterParams, CropPool, sample_recipe
from .losses import (
    ContrastiveConfig,
    bce_ood_loss,
    enet_class_weights,
    kl_flat_loss,
    oodcon_loss,
    weighted_cross_entropy,
)
from .model import (
    ModelBundle,
    ModelConfig,
    build_feature_batch,
    forward_features,
    forward_ood,
    forward_segmentation,
    load_checkpoint,
    project,
    save_checkpoint,
)

logger = logging.getLogger(__name__)

STAGES = ("stage1", "stage2", "baseline_bce", "baseline_kl", "baseline_plain")
AUGMENTATIONS = ("domainmix", "cutmix", "none")
SCORE_SOURCES = ("ood_decoder", "max_softmax")
DEFAULT_LOSS_WEIGHTS = {"seg": 1.0, "oodcon": 1.0, "bce": 1.0, "kl": 1.0}


@dataclass
class TrainConfig:
    stage: str
    epochs: int = 30
    batch_images: int = 16
    learning_rate: float = 1e-3
    seed: int = 0
    augmentation: str = "domainmix"
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    loss_weights: dict = field(default_factory=lambda: dict(DEFAULT_LOSS_WEIGHTS))
    max_per_image: int = 64
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    stage1_checkpoint: str | None = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if self.augmentation not in AUGMENTATIONS:
            raise ValueError(f"unknown augmentation {self.augmentation!r}")
        if self.stage == "baseline_plain" and self.augmentation != "none":
            raise ValueError("baseline_plain trains on in-distribution data only (augmentation = 'none')")
        self.loss_weights = {**DEFAULT_LOSS_WEIGHTS, **self.loss_weights}
        if any(v < 0 for v in self.loss_weights.values()):
            raise ValueError("loss weights must be >= 0")
        if self.epochs < 1 or self.batch_images < 2:
            raise ValueError("need epochs >= 1 and batch_images >= 2")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        if "contrastive" in d:
            d["contrastive"] = ContrastiveConfig(**d["contrastive"])
        if "model" in d:
            d["model"] = ModelConfig(**d["model"])
        if "augment" in d:
            aug = dict(d["augment"])
            if "jitter" in aug:
                aug["jitter"] = ColorJitterParams(**{k: tuple(v) for k, v in aug["jitter"].items()})
            for k in ("image_size", "num_crops", "area_range", "aspect_range"):
                if k in aug:
                    aug[k] = tuple(aug[k])
            d["augment"] = AugmentationConfig(**aug)
        return cls(**d)


def score_source_for(stage: str) -> str:
    return "ood_decoder" if stage in ("stage2", "baseline_bce") else "max_softmax"


@dataclass
class RunRecord:
    stage: str
    config: dict
    seeds: dict
    score_source: str
    epochs: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)

    def __post_init__(self):
        # tuples become lists so a record equals its reloaded copy
        self.config = json.loads(json.dumps(self.config))
        self.seeds = json.loads(json.dumps(self.seeds))

    def final(self, term: str = "total") -> float:
        return self.epochs[-1][term]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        return cls(**json.loads(text))

    def write(self, directory: Path | str) -> Path:
        """Line-delimited per-epoch metrics plus a config snapshot."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "metrics.jsonl", "w") as fh:
            for row in self.epochs:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        meta = {k: v for k, v in asdict(self).items() if k != "epochs"}
        (directory / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return directory

    @classmethod
    def read(cls, directory: Path | str) -> "RunRecord":
        directory = Path(directory)
        meta = json.loads((directory / "run.json").read_text())
        lines = (directory / "metrics.jsonl").read_text().splitlines()
        return cls(**meta, epochs=[json.loads(line) for line in lines if line])


class AuditedSequence(Sequence):
    """Sequence wrapper counting item reads (used to audit OoD data access)."""

    def __init__(self, items: Sequence):
        self._items = list(items)
        self.reads = 0

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        self.reads += 1
        return self._items[i]


class TrainingData:
    def __init__(self, in_dist: Sequence[ImageSample], ood: Sequence[ImageSample]):
        if not in_dist:
            raise ValueError("training needs in-distribution samples")
        self.in_dist = list(in_dist)
        self.ood = AuditedSequence(ood)
        self.num_classes: int | None = None

    def class_weights(self, num_classes: int):
        return enet_class_weights(class_frequencies(self.in_dist, num_classes))


def build_model(cfg: TrainConfig) -> ModelBundle:
    torch.manual_seed(cfg.seed)
    return ModelBundle(cfg.model)


# ---------------------------------------------------------------------------
# Batches


def _to_tensors(samples: Sequence[ImageSample]):
    rgb = np.ascontiguousarray(np.stack([s.rgb for s in samples]).transpose(0, 3, 1, 2), dtype=np.float32)
    rgb = torch.from_numpy(rgb)
    seg = torch.as_tensor(np.stack([s.seg_labels for s in samples]).astype(np.int64))
    ood = np.stack([s.ood_labels for s in samples])
    return rgb, seg, ood


def iterate_batches(data: TrainingData, cfg: TrainConfig, rng: np.random.Generator):
    """Yield one epoch of (images, seg_labels, ood_labels).

    With augmentation, half of each batch has an in-dist background and half
    an OoD background; without it only in-dist images are read.
    """
    n = len(data.in_dist)
    order = rng.permutation(n)
    if cfg.augmentation == "none":
        for start in range(0, n, cfg.batch_images):
            yield _to_tensors([data.in_dist[i] for i in order[start:start + cfg.batch_images]])
        return
    augment = AUGMENTERS[cfg.augmentation]
    pool = CropPool(data.in_dist, data.ood)
    half = cfg.batch_images // 2
    for start in range(0, n, half):
        samples = []
        for i in order[start:start + half]:
            recipe = sample_recipe(rng, cfg.augment, background_source="in_dist")
            samples.append(augment(data.in_dist[i], pool, recipe))
        for j in rng.integers(0, len(data.ood), size=len(samples)):
            recipe = sample_recipe(rng, cfg.augment, background_source="ood")
            samples.append(augment(data.ood[int(j)], pool, recipe))
        yield _to_tensors(samples)


# ---------------------------------------------------------------------------
# Training loops


def _seeds(cfg: TrainConfig, stage: str) -> dict:
    return {"root": cfg.seed, "torch": cfg.seed, "numpy": [cfg.seed, STAGES.index(stage)]}


def _run_epochs(cfg, data, bundle, stage, params, step_fn, set_modes) -> RunRecord:
    seeds = _seeds(cfg, stage)
    torch.manual_seed(seeds["torch"])
    rng = np.random.default_rng(seeds["numpy"])
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate)
    record = RunRecord(stage, cfg.to_dict(), seeds, score_source_for(stage))
    for epoch in range(1, cfg.epochs + 1):
        set_modes()
        sums: dict = defaultdict(float)
        steps = skipped = 0
        for images, seg, ood in iterate_batches(data, cfg, rng):
            terms = step_fn(images, seg, ood, rng)
            if terms is None:
                skipped += 1
                continue
            optimizer.zero_grad(set_to_none=True)
            terms["total"].backward()
            optimizer.step()
            for k, v in terms.items():
                sums[k] += float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
            steps += 1
        row = {"epoch": epoch, "steps": steps, "skipped_steps": skipped}
        row.update({k: (v / steps if steps else math.nan) for k, v in sorted(sums.items())})
        record.epochs.append(row)
        logger.info("%s epoch %d: %s", stage, epoch, row)
    bundle.stages_completed.append(stage)
    return record


def _finish(record: RunRecord, bundle: ModelBundle, output_dir, stage: str) -> RunRecord:
    if output_dir is not None:
        ckpt = save_checkpoint(bundle, Path(output_dir) / f"{stage}.ckpt", stage)
        record.checkpoints.append(str(ckpt))
        record.write(output_dir)
    return record


def train_stage1(cfg: TrainConfig, data: TrainingData, bundle: ModelBundle, output_dir=None) -> RunRecord:
    """Encoder + segmentation decoder + projection head; OoD decoder untouched."""
    if cfg.stage != "stage1":
        raise ValueError(f"train_stage1 called with stage={cfg.stage!r}")
    weights = data.class_weights(cfg.model.num_classes)
    w = cfg.loss_weights

    def set_modes():
        bundle.train()
        bundle.ood_decoder.eval()

    def step(images, seg, ood, rng):
        feats = forward_features(bundle, images)
        ce = weighted_cross_entropy(forward_segmentation(bundle, feats), seg, weights)
        fb = build_feature_batch(feats, ood, cfg.max_per_image, rng)
        if fb.num_in_dist < 2:
            logger.warning("skipping step: %d in-distribution feature vectors", fb.num_in_dist)
            return None
        z = project(bundle, fb.vectors, normalize=cfg.contrastive.normalize_projections)
        con = oodcon_loss(z, fb.labels, cfg.contrastive)
        return {
            "total": w["seg"] * ce.value + w["oodcon"] * con.value,
            "seg": ce.value,
            "oodcon": con.value,
            "num_ood_cells": con.diagnostics["num_ood"],
            "num_masked_ood": con.diagnostics["num_masked_ood"],
        }

    params = [p for m in (bundle.encoder, bundle.seg_decoder, bundle.proj_head) for p in m.parameters()]
    record = _run_epochs(cfg, data, bundle, "stage1", params, step, set_modes)
    bundle.eval()
    return _finish(record, bundle, output_dir, "stage1")


def train_stage2(cfg: TrainConfig, data: TrainingData, bundle: ModelBundle | str | Path | None = None,
                 output_dir=None) -> RunRecord:
    """Fit only the OoD decoder with BCE on top of a frozen stage-1 model.

    ``bundle`` may be a stage-1 bundle or a checkpoint path; when omitted
    ``cfg.stage1_checkpoint`` is loaded.
    """
    if cfg.stage != "stage2":
        raise ValueError(f"train_stage2 called with stage={cfg.stage!r}")
    if bundle is None:
        if not cfg.stage1_checkpoint:
            raise FileNotFoundError("stage2 requires a stage1 checkpoint (stage1_checkpoint is unset)")
        bundle = cfg.stage1_checkpoint
    if not isinstance(bundle, ModelBundle):
        path = Path(bundle)
        if not path.exists():
            raise FileNotFoundError(f"stage2 requires a stage1 checkpoint; {path} does not exist")
        bundle, _ = load_checkpoint(path)
    if "stage1" not in bundle.stages_completed:
        raise ValueError("stage2 requires a model that has completed stage1")

    def set_modes():
        bundle.eval()
        bundle.ood_decoder.train()

    def step(images, seg, ood, rng):
        with torch.no_grad():
            feats = forward_features(bundle, images)
        bce = bce_ood_loss(forward_ood(bundle, feats), ood)
        return {"total": cfg.loss_weights["bce"] * bce.value, "bce": bce.value}

    record = _run_epochs(cfg, data, bundle, "stage2", list(bundle.ood_decoder.parameters()), step, set_modes)
    bundle.ood_decoder_trained = True
    bundle.eval()
    return _finish(record, bundle, output_dir, "stage2")


def train_baseline(cfg: TrainConfig, data: TrainingData, bundle: ModelBundle, output_dir=None) -> RunRecord:
    """Single-stage variants: plain CE, CE + KL flattening, CE + joint OoD-decoder BCE."""
    if cfg.stage not in ("baseline_plain", "baseline_kl", "baseline_bce"):
        raise ValueError(f"train_baseline called with stage={cfg.stage!r}")
    weights = data.class_weights(cfg.model.num_classes)
    w = cfg.loss_weights
    joint_ood = cfg.stage == "baseline_bce"

    def set_modes():
        bundle.train()
        bundle.proj_head.eval()
        if not joint_ood:
            bundle.ood_decoder.eval()

    def step(images, seg, ood, rng):
        feats = forward_features(bundle, images)
        logits = forward_segmentation(bundle, feats)
        ce = weighted_cross_entropy(logits, seg, weights)
        terms = {"seg": ce.value}
        total = w["seg"] * ce.value
        if cfg.stage == "baseline_kl":
            kl = kl_flat_loss(logits, ood)
            terms["kl"] = kl.value
            total = total + w["kl"] * kl.value
        elif joint_ood:
            bce = bce_ood_loss(forward_ood(bundle, feats), ood)
            terms["bce"] = bce.value
            total = total + w["bce"] * bce.value
        terms["total"] = total
        return terms

    modules = [bundle.encoder, bundle.seg_decoder] + ([bundle.ood_decoder] if joint_ood else [])
    params = [p for m in modules for p in m.parameters()]
    record = _run_epochs(cfg, data, bundle, cfg.stage, params, step, set_modes)
    if joint_ood:
        bundle.ood_decoder_trained = True
    bundle.eval()
    return _finish(record, bundle, output_dir, cfg.stage)


def train(cfg: TrainConfig, data: TrainingData, bundle: ModelBundle | None = None, output_dir=None) -> RunRecord:
    """Dispatch on ``cfg.stage``."""
    if cfg.stage == "stage2":
        return train_stage2(cfg, data, bundle, output_dir)
    bundle = bundle if bundle is not None else build_model(cfg)
    if cfg.stage == "stage1":
        return train_stage1(cfg, data, bundle, output_dir)
    return train_baseline(cfg, data, bundle, output_dir)
