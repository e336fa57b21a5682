"""Generate the toy benchmark and look at what each split contains."""

import numpy as np

from oodseg import class_frequencies, enet_class_weights, make_toy_benchmark
from oodseg.benchmark import ToyBenchmarkConfig
from oodseg.data import is_contaminated

bench = make_toy_benchmark(0, ToyBenchmarkConfig(train_in_dist=32, train_ood=20))

# in-distribution scenes: 4 classes, every pixel labelled
scene = bench.train.in_dist[0]
print("scene", scene.shape, "classes present", np.unique(scene.seg_labels))

# uncurated OoD: 20% of the clutter images secretly contain road and vehicle
dirty = [is_contaminated(s) for s in bench.train.ood]
print(f"contaminated clutter images: {sum(dirty)} of {len(dirty)}")

# rare classes get larger cross-entropy weights
freq = class_frequencies(bench.train.in_dist, 4)
print("pixel fractions", np.round(freq.per_class_pixel_fraction, 3))
print("ENet weights   ", np.round(enet_class_weights(freq).w, 3))

# evaluation: pasted objects for OoD IoU, re-textured scenes for selective mIoU
ood_px = np.mean([s.ood_labels.mean() for s in bench.pasted])
print(f"pasted eval: {len(bench.pasted)} images, {ood_px:.1%} OoD pixels on average")
print(f"wild eval: {len(bench.wild)} images, all pixels keep their true class")
