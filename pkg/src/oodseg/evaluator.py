"""OoD-detection IoU, selective-segmentation curves and the comparison grid."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import IGNORE, ImageSample
from .losses import max_softmax_uncertainty
from .model import ModelBundle, forward_features, forward_ood, forward_segmentation
from .trainer import (
    TrainConfig,
    TrainingData,
    build_model,
    score_source_for,
    train_baseline,
    train_stage1,
    train_stage2,
)

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = 512


@dataclass
class PixelScores:
    ood_score: np.ndarray
    pred_class: np.ndarray
    provenance: str

    def __post_init__(self):
        if self.ood_score.shape != self.pred_class.shape:
            raise ValueError("ood_score and pred_class shapes differ")
        if self.ood_score.min() < 0 or self.ood_score.max() > 1:
            raise ValueError("ood scores must lie in [0, 1]")


@dataclass
class OoDEvalResult:
    best_threshold: float
    best_mean_iou: float
    thresholds: np.ndarray
    mean_iou: np.ndarray  # per-threshold table

    def to_csv(self, path: Path | str) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "mean_iou"])
            for t, v in zip(self.thresholds, self.mean_iou):
                w.writerow([f"{t:.10g}", f"{v:.10g}"])
        return path


@dataclass
class CoverageCurve:
    thresholds: np.ndarray
    coverage: np.ndarray
    miou: np.ndarray
    num_thresholds: int

    @property
    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.thresholds.tolist(), self.coverage.tolist(), self.miou.tolist()))

    def miou_at_coverage(self, target: float) -> float:
        """mIoU linearly interpolated in coverage."""
        cov, idx = np.unique(self.coverage, return_index=True)
        return float(np.interp(target, cov, self.miou[idx]))

    def to_csv(self, path: Path | str) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "coverage", "miou"])
            for t, c, m in self.points:
                w.writerow([f"{t:.10g}", f"{c:.10g}", f"{m:.10g}"])
        return path


# ---------------------------------------------------------------------------
# Evaluation set


def build_pasted_eval_set(
    test_in_dist: Sequence[ImageSample],
    ood_objects: Sequence[tuple[np.ndarray, np.ndarray]],
    seed: int,
    pastes_per_image: int = 1,
) -> list[ImageSample]:
    """Hard-paste masked OoD objects into in-distribution test images.

    The pasted mask becomes the exact OoD ground truth (seg label IGNORE).
    No blending is applied.
    """
    if not test_in_dist:
        raise ValueError("build_pasted_eval_set needs in-distribution test images")
    if pastes_per_image > 0 and not ood_objects:
        raise ValueError("build_pasted_eval_set needs OoD objects to paste")
    rng = np.random.default_rng([seed, 0xE7A1])
    out = []
    for sample in test_in_dist:
        s = sample.copy()
        h, w = s.shape
        for _ in range(pastes_per_image):
            rgb, mask = ood_objects[int(rng.integers(len(ood_objects)))]
            ph, pw = mask.shape
            if ph > h or pw > w:
                raise ValueError("OoD object larger than the target image")
            y = int(rng.integers(0, h - ph + 1))
            x = int(rng.integers(0, w - pw + 1))
            region = (slice(y, y + ph), slice(x, x + pw))
            s.rgb[region][mask] = rgb[mask]
            s.seg_labels[region][mask] = IGNORE
            s.ood_labels[region][mask] = 1
        s.source_id = f"{sample.source_id}+pasted{seed}"
        out.append(s)
    return out


# ---------------------------------------------------------------------------
# Metrics


def binary_iou(pred: np.ndarray, truth: np.ndarray) -> float:
    pred, truth = pred.astype(bool), truth.astype(bool)
    union = np.logical_or(pred, truth).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, truth).sum() / union)


def _iou_per_threshold(score: np.ndarray, truth: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """IoU of (score >= t) against truth for every t, via sorted counts."""
    s = score.ravel()
    t = truth.ravel().astype(bool)
    all_sorted = np.sort(s)
    pos_sorted = np.sort(s[t])
    n_pred = s.size - np.searchsorted(all_sorted, thresholds, side="left")
    tp = pos_sorted.size - np.searchsorted(pos_sorted, thresholds, side="left")
    union = n_pred + pos_sorted.size - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union == 0, 1.0, tp / np.maximum(union, 1))


def ood_detection_iou(
    scores: Sequence[PixelScores],
    truth: Sequence[ImageSample],
    num_thresholds: int = DEFAULT_THRESHOLDS,
    per_image: bool = False,
) -> OoDEvalResult:
    """Best mean per-image IoU of the thresholded OoD mask over a uniform sweep.

    By default one global threshold is shared by all images. With
    ``per_image=True`` each image picks its own best threshold and the
    reported threshold is NaN.
    """
    if len(scores) != len(truth):
        raise ValueError("scores and truth must have equal length")
    if not scores:
        raise ValueError("nothing to evaluate")
    if num_thresholds < 2:
        raise ValueError("num_thresholds must be >= 2")
    thresholds = np.linspace(0.0, 1.0, num_thresholds)
    table = np.stack([
        _iou_per_threshold(ps.ood_score, sample.ood_labels, thresholds)
        for ps, sample in zip(scores, truth)
    ])
    mean = table.mean(axis=0)
    if per_image:
        return OoDEvalResult(float("nan"), float(table.max(axis=1).mean()), thresholds, mean)
    best = int(np.argmax(mean))
    return OoDEvalResult(float(thresholds[best]), float(mean[best]), thresholds, mean)


def miou_from_confusion(conf: np.ndarray) -> float:
    """Mean IoU over classes present in prediction or truth; NaN if none."""
    tp = np.diag(conf).astype(np.float64)
    denom = conf.sum(axis=0) + conf.sum(axis=1) - tp
    present = denom > 0
    if not present.any():
        return float("nan")
    return float((tp[present] / denom[present]).mean())


def coverage_miou_curve(
    scores: Sequence[PixelScores],
    truth: Sequence[ImageSample],
    num_thresholds: int = DEFAULT_THRESHOLDS,
    num_classes: int | None = None,
) -> CoverageCurve:
    """Coverage and pooled mIoU when accepting pixels with ood_score <= t.

    IGNORE pixels are excluded from both quantities. Thresholds that accept no
    pixel are omitted.
    """
    if len(scores) != len(truth):
        raise ValueError("scores and truth must have equal length")
    s_all, y_all, p_all = [], [], []
    for ps, sample in zip(scores, truth):
        valid = sample.seg_labels != IGNORE
        s_all.append(ps.ood_score[valid])
        y_all.append(sample.seg_labels[valid].astype(np.int64))
        p_all.append(ps.pred_class[valid].astype(np.int64))
    s = np.concatenate(s_all)
    y = np.concatenate(y_all)
    p = np.concatenate(p_all)
    if s.size == 0:
        raise ValueError("no labelled pixels to evaluate")
    k = num_classes or int(max(y.max(), p.max())) + 1

    order = np.argsort(s, kind="stable")
    s_sorted = s[order]
    pair = y[order] * k + p[order]
    onehot = np.zeros((s.size, k * k), dtype=np.int64)
    onehot[np.arange(s.size), pair] = 1
    cum = np.cumsum(onehot, axis=0)

    thresholds = np.linspace(0.0, 1.0, num_thresholds)
    accepted = np.searchsorted(s_sorted, thresholds, side="right")
    keep = accepted > 0
    ts, covs, mious = [], [], []
    for t, n_acc in zip(thresholds[keep], accepted[keep]):
        conf = cum[n_acc - 1].reshape(k, k)
        ts.append(t)
        covs.append(n_acc / s.size)
        mious.append(miou_from_confusion(conf))
    return CoverageCurve(np.array(ts), np.array(covs), np.array(mious), num_thresholds)


# ---------------------------------------------------------------------------
# Model scoring


@torch.no_grad()
def evaluate_model(
    bundle: ModelBundle,
    dataset: Sequence[ImageSample],
    score_source: str,
    batch_size: int = 32,
) -> list[PixelScores]:
    """Forward passes only: class map plus the requested OoD score per image."""
    if score_source not in ("ood_decoder", "max_softmax"):
        raise ValueError(f"unknown score source {score_source!r}")
    if score_source == "ood_decoder" and not bundle.ood_decoder_trained:
        raise ValueError("score_source='ood_decoder' but this model's OoD decoder was never trained")
    bundle.eval()
    out = []
    for start in range(0, len(dataset), batch_size):
        chunk = dataset[start:start + batch_size]
        images = torch.from_numpy(
            np.ascontiguousarray(np.stack([s.rgb for s in chunk]).transpose(0, 3, 1, 2), dtype=np.float32)
        )
        feats = forward_features(bundle, images)
        logits = forward_segmentation(bundle, feats)
        if score_source == "ood_decoder":
            score = forward_ood(bundle, feats)
        else:
            score = max_softmax_uncertainty(logits)
        pred = logits.argmax(dim=1).numpy()
        score = score[:, 0].double().clamp(0.0, 1.0).numpy()
        out.extend(PixelScores(score[i], pred[i], score_source) for i in range(len(chunk)))
    return out


# ---------------------------------------------------------------------------
# Comparison grid

OBJECTIVES = ("baseline", "bce", "kl", "oodcon")
OBJECTIVE_LABELS = {"baseline": "Baseline", "bce": "BCE", "kl": "KL", "oodcon": "OoDCon"}
AUG_LABELS = {"none": "-", "cutmix": "Cutmix", "domainmix": "DomainMix"}


@dataclass(frozen=True)
class GridVariant:
    objective: str
    augmentation: str

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if (self.objective == "baseline") != (self.augmentation == "none"):
            raise ValueError("only the baseline objective runs without augmentation")

    @property
    def name(self) -> str:
        return f"{self.objective}_{self.augmentation}"


def default_grid_variants() -> list[GridVariant]:
    return [GridVariant("baseline", "none")] + [
        GridVariant(obj, aug) for obj in ("bce", "kl", "oodcon") for aug in ("cutmix", "domainmix")
    ]


@dataclass
class GridRow:
    variant: GridVariant
    score_source: str
    ood: OoDEvalResult
    curve: CoverageCurve
    records: list = field(default_factory=list)

    @property
    def iou(self) -> float:
        return self.ood.best_mean_iou


@dataclass
class GridReport:
    rows: list[GridRow]

    def ranked(self) -> list[GridRow]:
        return sorted(self.rows, key=lambda r: -r.iou)

    def row(self, objective: str, augmentation: str) -> GridRow:
        for r in self.rows:
            if (r.variant.objective, r.variant.augmentation) == (objective, augmentation):
                return r
        raise KeyError((objective, augmentation))

    def metrics(self) -> dict[str, float]:
        """Flat name → value map of every reported number."""
        out = {}
        for r in self.rows:
            out[f"{r.variant.name}/best_mean_iou"] = r.iou
            out[f"{r.variant.name}/best_threshold"] = r.ood.best_threshold
            for c in (0.6, 1.0):
                out[f"{r.variant.name}/miou@{c:.1f}"] = r.curve.miou_at_coverage(c)
        return out

    def to_csv(self, path: Path | str) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["objective", "augmentation", "iou", "best_threshold",
                        "miou_at_coverage_1.0", "miou_at_coverage_0.6", "score_source"])
            for r in self.ranked():
                w.writerow([
                    OBJECTIVE_LABELS[r.variant.objective], AUG_LABELS[r.variant.augmentation],
                    f"{r.iou:.6f}", f"{r.ood.best_threshold:.6f}",
                    f"{r.curve.miou_at_coverage(1.0):.6f}", f"{r.curve.miou_at_coverage(0.6):.6f}",
                    r.score_source,
                ])
        return path

    def format_table(self) -> str:
        lines = [f"{'Objective':<10} {'Data Augmentation':<18} {'IoU':>6}  {'mIoU@1.0':>8}  {'mIoU@0.6':>8}"]
        for r in self.ranked():
            lines.append(
                f"{OBJECTIVE_LABELS[r.variant.objective]:<10} {AUG_LABELS[r.variant.augmentation]:<18} "
                f"{r.iou:>6.3f}  {r.curve.miou_at_coverage(1.0):>8.3f}  {r.curve.miou_at_coverage(0.6):>8.3f}"
            )
        return "\n".join(lines)


def variant_configs(variant: GridVariant, base: TrainConfig, stage2_epochs: int | None = None) -> list[TrainConfig]:
    """Training configs for one grid variant (two for OoDCon: stage 1 then 2)."""
    if variant.objective == "oodcon":
        s1 = replace(base, stage="stage1", augmentation=variant.augmentation)
        s2 = replace(s1, stage="stage2", epochs=stage2_epochs or base.epochs)
        return [s1, s2]
    stage = {"baseline": "baseline_plain", "bce": "baseline_bce", "kl": "baseline_kl"}[variant.objective]
    return [replace(base, stage=stage, augmentation=variant.augmentation)]


def train_variant(variant: GridVariant, base: TrainConfig, data: TrainingData,
                  stage2_epochs: int | None = None, output_dir=None):
    cfgs = variant_configs(variant, base, stage2_epochs)
    bundle = build_model(cfgs[0])
    records = []
    for cfg in cfgs:
        sub = None if output_dir is None else Path(output_dir) / cfg.stage
        if cfg.stage == "stage1":
            records.append(train_stage1(cfg, data, bundle, sub))
        elif cfg.stage == "stage2":
            records.append(train_stage2(cfg, data, bundle, sub))
        else:
            records.append(train_baseline(cfg, data, bundle, sub))
    return bundle, records


def run_comparison_grid(
    variants: Sequence[GridVariant],
    base: TrainConfig,
    data: TrainingData,
    ood_eval_set: Sequence[ImageSample],
    selective_eval_set: Sequence[ImageSample] | None = None,
    stage2_epochs: int | None = None,
    num_thresholds: int = DEFAULT_THRESHOLDS,
    output_dir: Path | str | None = None,
) -> GridReport:
    """Train and evaluate every variant; one OoD result and one curve each."""
    selective_eval_set = ood_eval_set if selective_eval_set is None else selective_eval_set
    rows = []
    for variant in variants:
        vdir = None if output_dir is None else Path(output_dir) / variant.name
        bundle, records = train_variant(variant, base, data, stage2_epochs, vdir)
        source = score_source_for(records[-1].stage)
        ood = ood_detection_iou(evaluate_model(bundle, ood_eval_set, source), ood_eval_set, num_thresholds)
        curve = coverage_miou_curve(
            evaluate_model(bundle, selective_eval_set, source), selective_eval_set,
            num_thresholds, base.model.num_classes,
        )
        row = GridRow(variant, source, ood, curve, records)
        logger.info("%s: iou=%.4f miou@1=%.4f miou@0.6=%.4f", variant.name, row.iou,
                    curve.miou_at_coverage(1.0), curve.miou_at_coverage(0.6))
        if vdir is not None:
            vdir.mkdir(parents=True, exist_ok=True)
            ood.to_csv(vdir / "ood_iou.csv")
            curve.to_csv(vdir / "coverage_miou.csv")
        rows.append(row)
    report = GridReport(rows)
    if output_dir is not None:
        report.to_csv(Path(output_dir) / "grid.csv")
        (Path(output_dir) / "grid.txt").write_text(report.format_table() + "\n")
    return report
