import logging
import math

import numpy as np
import pytest
import torch

from oodseg.data import IGNORE, ImageSample, generate_toyclutter, generate_toydrive
from oodseg.domainmix import AugmentationConfig
from oodseg.model import ModelConfig, component_checksum
from oodseg.trainer import (
    RunRecord,
    TrainConfig,
    TrainingData,
    build_model,
    train,
    train_baseline,
    train_stage1,
    train_stage2,
)

SIZE = (32, 32)
STAGE1_PARTS = ["encoder", "seg_decoder", "proj_head"]


def tiny(stage="stage1", **kw):
    kw.setdefault("epochs", 1)
    kw.setdefault("augmentation", "none" if stage == "baseline_plain" else "domainmix")
    return TrainConfig(stage=stage, batch_images=4, model=ModelConfig(width=16),
                       augment=AugmentationConfig(image_size=SIZE), **kw)


def tiny_data(n=8):
    return TrainingData(generate_toydrive(n, 1, SIZE), generate_toyclutter(n, 2, SIZE))


@pytest.fixture(scope="module")
def stage1_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("s1")
    cfg = tiny()
    bundle = build_model(cfg)
    before = component_checksum(bundle, "ood_decoder")
    others = component_checksum(bundle, STAGE1_PARTS)
    record = train_stage1(cfg, tiny_data(), bundle, out)
    return bundle, record, out, before, others


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(stage="stage3")
    with pytest.raises(ValueError):
        TrainConfig(stage="baseline_plain", augmentation="domainmix")
    with pytest.raises(ValueError):
        TrainConfig(stage="stage1", loss_weights={"seg": -1.0})
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"stage": "stage1", "colour": "red"})


def test_config_dict_round_trip():
    cfg = tiny(epochs=3, loss_weights={"oodcon": 0.5})
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_stage1_gating(stage1_run):
    bundle, record, _, before, others = stage1_run
    assert component_checksum(bundle, "ood_decoder") == before
    assert component_checksum(bundle, STAGE1_PARTS) != others
    assert bundle.stages_completed == ["stage1"] and not bundle.training
    assert record.epochs[0]["steps"] > 0 and math.isfinite(record.final())


def test_stage1_seeded_rerun_identical(stage1_run):
    _, record, _, _, _ = stage1_run
    again = train_stage1(tiny(), tiny_data(), build_model(tiny()))
    for a, b in zip(record.epochs, again.epochs):
        assert a.keys() == b.keys()
        for k in a:
            assert a[k] == pytest.approx(b[k], rel=1e-6, abs=1e-9)


def test_stage2_gating_and_determinism(stage1_run):
    _, _, out, _, _ = stage1_run
    cfg = tiny("stage2", stage1_checkpoint=str(out / "stage1.ckpt"))
    from oodseg.model import load_checkpoint

    start, _ = load_checkpoint(out / "stage1.ckpt")
    frozen = component_checksum(start, STAGE1_PARTS)
    ood_before = component_checksum(start, "ood_decoder")
    rec = train_stage2(cfg, tiny_data(), start)
    assert component_checksum(start, STAGE1_PARTS) == frozen
    assert component_checksum(start, "ood_decoder") != ood_before
    assert start.ood_decoder_trained
    rec2 = train_stage2(cfg, tiny_data())  # loads cfg.stage1_checkpoint
    assert [e["bce"] for e in rec.epochs] == pytest.approx([e["bce"] for e in rec2.epochs], rel=1e-6)


def test_stage2_requires_stage1(tmp_path):
    with pytest.raises(FileNotFoundError, match="stage1 checkpoint"):
        train_stage2(tiny("stage2"), tiny_data())
    with pytest.raises(FileNotFoundError, match="stage1 checkpoint"):
        train(tiny("stage2", stage1_checkpoint=str(tmp_path / "none.ckpt")), tiny_data())
    with pytest.raises(ValueError, match="stage1"):
        train_stage2(tiny("stage2"), tiny_data(), build_model(tiny()))


def test_baseline_plain_never_reads_ood():
    data = tiny_data()
    train(tiny("baseline_plain"), data)
    assert data.ood.reads == 0


def test_baseline_kl_leaves_ood_decoder():
    cfg = tiny("baseline_kl")
    bundle = build_model(cfg)
    before = component_checksum(bundle, "ood_decoder")
    proj = component_checksum(bundle, "proj_head")
    enc = component_checksum(bundle, "encoder")
    train_baseline(cfg, tiny_data(), bundle)
    assert component_checksum(bundle, "ood_decoder") == before
    assert component_checksum(bundle, "proj_head") == proj
    assert component_checksum(bundle, "encoder") != enc
    assert not bundle.ood_decoder_trained


def test_baseline_bce_trains_jointly():
    cfg = tiny("baseline_bce")
    bundle = build_model(cfg)
    enc, ood = component_checksum(bundle, "encoder"), component_checksum(bundle, "ood_decoder")
    rec = train_baseline(cfg, tiny_data(), bundle)
    assert component_checksum(bundle, "encoder") != enc
    assert component_checksum(bundle, "ood_decoder") != ood
    assert bundle.ood_decoder_trained and rec.score_source == "ood_decoder"


def test_steps_without_two_in_dist_cells_are_skipped(caplog):
    h, w = SIZE
    ood = np.ones((h, w), np.uint8)
    ood[0, 0] = 0
    seg = np.full((h, w), IGNORE, np.uint8)
    seg[0, 0] = 0
    mostly_ood = [ImageSample(np.random.default_rng(i).random((h, w, 3)), seg, ood) for i in range(4)]
    cfg = tiny(augmentation="none")
    with caplog.at_level(logging.WARNING):
        rec = train_stage1(cfg, TrainingData(mostly_ood, []), build_model(cfg))
    assert rec.epochs[0]["skipped_steps"] == 1 and rec.epochs[0]["steps"] == 0
    assert "skipping step" in caplog.text


def test_run_record_round_trip(stage1_run, tmp_path):
    _, record, out, _, _ = stage1_run
    assert RunRecord.from_json(record.to_json()) == record
    assert RunRecord.read(out) == record
    assert (out / "metrics.jsonl").read_text().count("\n") == len(record.epochs)


@pytest.mark.slow
def test_toy_training_makes_progress():
    data = TrainingData(generate_toydrive(32, 5, SIZE), generate_toyclutter(32, 6, SIZE))
    cfg = tiny(epochs=30)
    bundle = build_model(cfg)
    s1 = train_stage1(cfg, data, bundle)
    assert s1.epochs[-1]["total"] < s1.epochs[0]["total"]
    s2 = train_stage2(tiny("stage2", epochs=5), data, bundle)
    assert s2.final("bce") < math.log(2)
