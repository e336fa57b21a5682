"""Joint semantic segmentation and pixel-wise OoD detection on a toy benchmark."""

from .benchmark import ToyBenchmark, ToyBenchmarkConfig, make_toy_benchmark
from .data import (
    IGNORE,
    ClassFrequency,
    DatasetSpec,
    GeneratorRecipe,
    ImageSample,
    class_frequencies,
    generate_clutter_objects,
    generate_toyclutter,
    generate_toydrive,
    generate_toywild,
    load_dataset,
    write_dataset,
)
from .domainmix import (
    AugmentationConfig,
    AugmentationRecipe,
    ColorJitterParams,
    CropOp,
    CropPool,
    Rect,
    apply_cutmix,
    apply_domainmix,
    sample_recipe,
)
from .evaluator import (
    CoverageCurve,
    GridReport,
    GridVariant,
    OoDEvalResult,
    PixelScores,
    coverage_miou_curve,
    default_grid_variants,
    evaluate_model,
    ood_detection_iou,
    run_comparison_grid,
)
from .losses import (
    ClassWeights,
    ContrastiveConfig,
    LossValue,
    bce_ood_loss,
    enet_class_weights,
    kl_flat_loss,
    label_noise_mask,
    max_softmax_uncertainty,
    oodcon_loss,
    supcon_loss,
    weighted_cross_entropy,
)
from .model import ModelBundle, ModelConfig, load_checkpoint, save_checkpoint
from .trainer import RunRecord, TrainConfig, TrainingData, train

__version__ = "0.1.0"
