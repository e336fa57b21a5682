"""Command-line entry point: ``oodseg <command> --config FILE --output DIR``.

Commands: gen-data, augment-preview, train, eval-ood, eval-selective, grid.
Configs are TOML files with ``schema_version = 1``. Every command writes into
a staging directory first and only moves finished artifacts into ``--output``,
so a failed run leaves nothing half-written behind. Failures print one JSON
line on stderr and exit nonzero (2 for usage/config errors, 1 otherwise).
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import pickle
import shutil
import sys
import tempfile
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import tomli

from .benchmark import ToyBenchmark, ToyBenchmarkConfig, derived_seeds, make_toy_benchmark
from .data import DatasetSpec, load_dataset, write_dataset
from .domainmix import AUGMENTERS, AugmentationConfig, CropPool, sample_recipe
from .evaluator import (
    DEFAULT_THRESHOLDS,
    GridVariant,
    coverage_miou_curve,
    default_grid_variants,
    evaluate_model,
    ood_detection_iou,
    run_comparison_grid,
)
from .model import load_checkpoint
from .trainer import TrainConfig, TrainingData, score_source_for, train

logger = logging.getLogger("oodseg")

SCHEMA_VERSION = 1
CACHE_ENV = "OODSEG_CACHE_DIR"
COMMANDS = ("gen-data", "augment-preview", "train", "eval-ood", "eval-selective", "grid")
TOP_LEVEL_KEYS = {"schema_version", "seed", "data", "train", "eval", "grid", "preview"}
EVAL_KEYS = {"checkpoint", "score_source", "num_thresholds", "dataset", "plot"}
GRID_KEYS = {"variants", "stage2_epochs", "num_thresholds"}
PREVIEW_KEYS = {"num_images"}
DATA_DIR_KEY = "dir"
GEN_DATA_LAYOUT = {
    # subdirectory: (dataset kind, split)
    "toydrive": ("in_distribution", "train"),
    "toyclutter": ("ood_uncurated", "train"),
    "pasted_eval": ("ood_eval_pasted", "test"),
    "toywild": ("in_distribution", "test"),
}


class ConfigError(ValueError):
    """Invalid command line or config file (exit status 2)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


# ---------------------------------------------------------------------------
# Config


def load_config(path: str | Path | None) -> dict:
    if path is None:
        return {"schema_version": SCHEMA_VERSION}
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            cfg = tomli.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid TOML: {exc}") from None
    version = cfg.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"config schema_version must be {SCHEMA_VERSION}, got {version!r}")
    _check_keys(cfg, TOP_LEVEL_KEYS, "top level")
    for table, keys in (("eval", EVAL_KEYS), ("grid", GRID_KEYS), ("preview", PREVIEW_KEYS)):
        _check_keys(cfg.get(table, {}), keys, f"[{table}]")
    return cfg


def _check_keys(table: dict, allowed: set, where: str) -> None:
    unknown = set(table) - allowed
    if unknown:
        raise ConfigError(f"unknown keys at {where}: {sorted(unknown)}")


def benchmark_config(cfg: dict) -> ToyBenchmarkConfig:
    data = {k: v for k, v in cfg.get("data", {}).items() if k != DATA_DIR_KEY}
    _check_keys(data, {f.name for f in fields(ToyBenchmarkConfig)}, "[data]")
    if "size" in data:
        data["size"] = tuple(data["size"])
    return ToyBenchmarkConfig(**data)


def train_config(cfg: dict, seed: int) -> TrainConfig:
    table = dict(cfg.get("train", {}))
    table["seed"] = seed
    if "stage" not in table:
        raise ConfigError("[train] needs a 'stage' key")
    size = benchmark_config(cfg).size
    aug = dict(table.get("augment", {}))
    aug.setdefault("image_size", list(size))
    table["augment"] = aug
    try:
        return TrainConfig.from_dict(table)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [train] table: {exc}") from None


def root_seed(cfg: dict, override: int | None) -> int:
    seed = override if override is not None else cfg.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    return seed


# ---------------------------------------------------------------------------
# Data


def _load_split(root: Path, sub: str) -> list:
    kind, split = GEN_DATA_LAYOUT[sub]
    return list(load_dataset(DatasetSpec(kind, root / sub, split=split)))


def get_benchmark(cfg: dict, seed: int) -> ToyBenchmark:
    """The toy benchmark from a gen-data directory, the cache or the generators."""
    bcfg = benchmark_config(cfg)
    data_dir = cfg.get("data", {}).get(DATA_DIR_KEY)
    if data_dir is not None:
        root = Path(data_dir)
        if not root.is_dir():
            raise FileNotFoundError(f"data directory {root} does not exist (run gen-data first)")
        train_data = TrainingData(_load_split(root, "toydrive"), _load_split(root, "toyclutter"))
        return ToyBenchmark(train_data, _load_split(root, "pasted_eval"), _load_split(root, "toywild"), bcfg)

    cache = os.environ.get(CACHE_ENV)
    if not cache:
        return make_toy_benchmark(seed, bcfg)
    key = hashlib.sha256(json.dumps([seed, asdict(bcfg)], sort_keys=True).encode()).hexdigest()[:16]
    path = Path(cache) / f"toybench-{key}.pkl"
    if path.exists():
        logger.info("loading cached benchmark %s", path)
        with open(path, "rb") as fh:
            return pickle.load(fh)
    bench = make_toy_benchmark(seed, bcfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    with open(tmp, "wb") as fh:
        pickle.dump(bench, fh)
    tmp.replace(path)
    return bench


# ---------------------------------------------------------------------------
# Output staging


@contextlib.contextmanager
def staged_output(output: Path):
    """Yield a scratch directory; on success move its contents into ``output``.

    Existing files with the same names are replaced; unrelated files in
    ``output`` are left alone. On failure the scratch directory is removed.
    """
    output = Path(output)
    output.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=f".{output.name}.partial-", dir=output.parent))
    try:
        yield stage
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    output.mkdir(parents=True, exist_ok=True)
    for item in sorted(stage.iterdir()):
        target = output / item.name
        if target.is_dir():
            shutil.rmtree(target)
        elif target.exists():
            target.unlink()
        shutil.move(str(item), str(target))
    stage.rmdir()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Commands


def cmd_gen_data(cfg, seed, out: Path, args) -> None:
    bench = make_toy_benchmark(seed, benchmark_config(cfg))
    sets = {
        "toydrive": bench.train.in_dist,
        "toyclutter": list(bench.train.ood),
        "pasted_eval": bench.pasted,
        "toywild": bench.wild,
    }
    for sub, samples in sets.items():
        kind, split = GEN_DATA_LAYOUT[sub]
        write_dataset({split: samples}, out / sub, kind)
    _write_json(out / "dataset.json", {
        "seed": seed, "derived_seeds": derived_seeds(seed), "config": asdict(bench.config),
    })


def cmd_augment_preview(cfg, seed, out: Path, args) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = int(cfg.get("preview", {}).get("num_images", 4))
    bench = make_toy_benchmark(seed, benchmark_config(cfg))
    aug_cfg = AugmentationConfig(image_size=bench.config.size)
    pool = CropPool(bench.train.in_dist, list(bench.train.ood))
    rng = np.random.default_rng([seed, 0xA06])

    cols = ["original", "DomainMix", "DomainMix OoD", "Cutmix", "Cutmix OoD"]
    fig, axes = plt.subplots(n, len(cols), figsize=(2.2 * len(cols), 2.2 * n), squeeze=False)
    for i in range(n):
        source = "in_dist" if i % 2 == 0 else "ood"
        background = pool.get(source, i)
        recipe = sample_recipe(rng, aug_cfg, background_source=source)
        panels = [background.rgb]
        for name in ("domainmix", "cutmix"):
            mixed = AUGMENTERS[name](background, pool, recipe)
            overlay = mixed.rgb.copy()
            overlay[mixed.ood_labels == 1] = 0.5 * overlay[mixed.ood_labels == 1] + 0.5 * np.array([1.0, 0.0, 1.0])
            panels += [mixed.rgb, overlay]
        for j, img in enumerate(panels):
            ax = axes[i, j]
            ax.imshow(np.clip(img, 0, 1), interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(cols[j], fontsize=9)
    fig.tight_layout()
    fig.savefig(out / "augment_preview.png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    _write_json(out / "preview.json", {"seed": seed, "num_images": n})


def cmd_train(cfg, seed, out: Path, args) -> None:
    tcfg = train_config(cfg, seed)
    if tcfg.stage == "stage2":
        ckpt = tcfg.stage1_checkpoint
        if not ckpt or not Path(ckpt).exists():
            raise FileNotFoundError(
                f"missing prerequisite: stage2 needs a stage1 checkpoint "
                f"(train.stage1_checkpoint = {ckpt!r} not found)"
            )
    bench = get_benchmark(cfg, seed)
    train(tcfg, bench.train, output_dir=out)


def _eval_inputs(cfg, seed, default_dataset: str):
    table = cfg.get("eval", {})
    ckpt = table.get("checkpoint")
    if not ckpt:
        raise ConfigError("[eval] needs a 'checkpoint' key")
    bundle, stage = load_checkpoint(ckpt)
    source = table.get("score_source", score_source_for(stage))
    which = table.get("dataset", default_dataset)
    if which not in ("pasted", "wild"):
        raise ConfigError(f"[eval] dataset must be 'pasted' or 'wild', got {which!r}")
    bench = get_benchmark(cfg, seed)
    dataset = bench.pasted if which == "pasted" else bench.wild
    n_thr = int(table.get("num_thresholds", DEFAULT_THRESHOLDS))
    meta = {"seed": seed, "checkpoint": str(ckpt), "stage": stage, "score_source": source,
            "dataset": which, "num_thresholds": n_thr}
    return bundle, source, dataset, n_thr, meta


def cmd_eval_ood(cfg, seed, out: Path, args) -> None:
    bundle, source, dataset, n_thr, meta = _eval_inputs(cfg, seed, "pasted")
    result = ood_detection_iou(evaluate_model(bundle, dataset, source), dataset, n_thr)
    result.to_csv(out / "ood_iou.csv")
    _write_json(out / "ood_summary.json", {
        **meta, "best_threshold": result.best_threshold, "best_mean_iou": result.best_mean_iou,
    })


def cmd_eval_selective(cfg, seed, out: Path, args) -> None:
    bundle, source, dataset, n_thr, meta = _eval_inputs(cfg, seed, "wild")
    curve = coverage_miou_curve(evaluate_model(bundle, dataset, source), dataset, n_thr,
                                bundle.config.num_classes)
    curve.to_csv(out / "coverage_miou.csv")
    _write_json(out / "selective_summary.json", {
        **meta, "miou_at_coverage_1.0": curve.miou_at_coverage(1.0),
        "miou_at_coverage_0.6": curve.miou_at_coverage(0.6),
    })
    if cfg.get("eval", {}).get("plot", False):
        plot_curves({source: curve}, out / "coverage_miou.png")


def plot_curves(curves: dict, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for name, curve in curves.items():
        ax.plot(curve.coverage, curve.miou, label=name)
    ax.set_xlabel("coverage")
    ax.set_ylabel("mIoU")
    ax.set_xlim(0, 1)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def _parse_variant(name: str) -> GridVariant:
    objective, _, augmentation = name.partition("_")
    try:
        return GridVariant(objective, augmentation)
    except ValueError as exc:
        raise ConfigError(f"bad variant {name!r}: {exc}") from None


def cmd_grid(cfg, seed, out: Path, args) -> None:
    table = cfg.get("grid", {})
    names = args.variant or table.get("variants")
    variants = [_parse_variant(v) for v in names] if names else default_grid_variants()
    base = train_config({**cfg, "train": {"stage": "stage1", **cfg.get("train", {})}}, seed)
    bench = get_benchmark(cfg, seed)
    report = run_comparison_grid(
        variants, base, bench.train, bench.pasted, bench.wild,
        stage2_epochs=table.get("stage2_epochs"),
        num_thresholds=int(table.get("num_thresholds", DEFAULT_THRESHOLDS)),
        output_dir=out,
    )
    _write_json(out / "grid_metrics.json", {"seed": seed, "metrics": report.metrics()})
    plot_curves({r.variant.name: r.curve for r in report.rows}, out / "coverage_miou.png")
    print(report.format_table())


HANDLERS = {
    "gen-data": cmd_gen_data,
    "augment-preview": cmd_augment_preview,
    "train": cmd_train,
    "eval-ood": cmd_eval_ood,
    "eval-selective": cmd_eval_selective,
    "grid": cmd_grid,
}


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="oodseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--output", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="root seed (overrides the config)")
        if name == "grid":
            p.add_argument("--variant", action="append",
                           help="run only this variant, e.g. oodcon_domainmix (repeatable)")
    return parser


def _error_line(command, exc: BaseException) -> str:
    return json.dumps({"error": type(exc).__name__, "command": command, "message": str(exc).replace("\n", " ")})


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config(args.config)
        seed = root_seed(cfg, args.seed)
        with staged_output(Path(args.output)) as out:
            HANDLERS[command](cfg, seed, out, args)
    except ConfigError as exc:
        print(_error_line(command, exc), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parsable line
        logger.debug("command failed", exc_info=True)
        print(_error_line(command, exc), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
