"""A scaled-down comparison grid: three variants, a few epochs each.

For the full seven-variant grid use `oodseg grid --config configs/toy_grid.toml`.
"""

import logging

from oodseg import GridVariant, ModelConfig, TrainConfig, make_toy_benchmark, run_comparison_grid
from oodseg.benchmark import ToyBenchmarkConfig

logging.basicConfig(level=logging.INFO, format="%(message)s")

bench = make_toy_benchmark(1, ToyBenchmarkConfig(train_in_dist=48, train_ood=48, test_in_dist=16,
                                                 eval_objects=16, wild=16))
base = TrainConfig(stage="stage1", epochs=4, batch_images=8, model=ModelConfig(width=16))
variants = [GridVariant("baseline", "none"), GridVariant("oodcon", "cutmix"), GridVariant("oodcon", "domainmix")]

report = run_comparison_grid(variants, base, bench.train, bench.pasted, bench.wild, stage2_epochs=2)
print(report.format_table())
for row in report.rows:
    c = row.curve
    print(f"{row.variant.name:18s} mIoU@1.0 {c.miou_at_coverage(1.0):.3f}  mIoU@0.6 {c.miou_at_coverage(0.6):.3f}")
