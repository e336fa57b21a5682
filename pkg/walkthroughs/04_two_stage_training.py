"""Train both stages on a small benchmark and score the pasted set."""

import logging
import tempfile
from pathlib import Path

from oodseg import (
    ModelConfig,
    TrainConfig,
    evaluate_model,
    load_checkpoint,
    make_toy_benchmark,
    ood_detection_iou,
    train,
)
from oodseg.benchmark import ToyBenchmarkConfig

logging.basicConfig(level=logging.INFO, format="%(message)s")

bench = make_toy_benchmark(0, ToyBenchmarkConfig(train_in_dist=32, train_ood=32, test_in_dist=16, eval_objects=16))
out = Path(tempfile.mkdtemp())
model = ModelConfig(width=16)

# stage 1: encoder, segmentation decoder and projection head
stage1 = TrainConfig(stage="stage1", epochs=3, batch_images=8, model=model)
rec1 = train(stage1, bench.train, output_dir=out / "stage1")
print("stage 1 last epoch:", rec1.epochs[-1])

# stage 2: only the OoD decoder, on top of the frozen stage-1 features
stage2 = TrainConfig(stage="stage2", epochs=2, batch_images=8, model=model,
                     stage1_checkpoint=str(out / "stage1" / "stage1.ckpt"))
train(stage2, bench.train, output_dir=out / "stage2")

bundle, _ = load_checkpoint(out / "stage2" / "stage2.ckpt")
result = ood_detection_iou(evaluate_model(bundle, bench.pasted, "ood_decoder"), bench.pasted)
print(f"best mean OoD IoU {result.best_mean_iou:.3f} at t={result.best_threshold:.3f}")
