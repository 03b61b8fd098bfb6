from __future__ import annotations

import numpy as np
import pytest

from geocsp import pipeline
from geocsp.checkpoint import from_bytes, to_bytes
from geocsp.config import TrainConfig
from geocsp.errors import DimensionMismatchError, UsageError

TINY = TrainConfig(
    n_classes=3, feature_dim=4, n_train=120, n_eval=60, n_scales=4, hidden_units=16, embed_dim=8,
    pretrain_epochs=2, pretrain_lr=1e-3, finetune_epochs=2, head_epochs=5, batch_size=16, seed=3,
)


def test_stage_seeds_are_independent_streams():
    a = pipeline.stage_rng(1, pipeline.STAGE_ENCODER).random()
    b = pipeline.stage_rng(1, pipeline.STAGE_LOCATION).random()
    c = pipeline.stage_rng(2, pipeline.STAGE_ENCODER).random()
    assert len({a, b, c}) == 3


def test_pretrain_is_reproducible_and_component_sensitive():
    train, _ = pipeline.make_datasets(TINY)
    a, _ = pipeline.pretrain(TINY, train.unlabeled())
    b, _ = pipeline.pretrain(TINY, train.unlabeled())
    c, _ = pipeline.pretrain(TINY.for_model("csp-mc-b"), train.unlabeled())
    assert to_bytes(a) == to_bytes(b)
    assert to_bytes(a) != to_bytes(c)


def test_mc_loss_falls_over_ten_epochs():
    from geocsp.data import SyntheticSpec, generate_synthetic
    from dataclasses import replace

    centers = [np.array([[0.0, 0.0]]), np.array([[-np.pi, 0.0]])]
    spec = SyntheticSpec(centers, [np.array([50.0])] * 2, [np.array([1.0])] * 2, np.array([[3.0, 0.0], [0.0, 3.0]]), 0.5)
    cfg = replace(TINY, pretrain_epochs=10)
    for seed in range(5):
        data = generate_synthetic(spec, 256, np.random.default_rng(seed))
        _, losses = pipeline.pretrain(replace(cfg, seed=seed), data.unlabeled())
        assert losses[9] < losses[0]


def test_checkpoint_round_trip_then_finetune_matches_in_memory():
    train, held_out = pipeline.make_datasets(TINY)
    pre, _ = pipeline.pretrain(TINY, train.unlabeled())
    labeled = pipeline.labeled_subset(TINY, train, 20)
    direct, _ = pipeline.finetune(TINY, pre, labeled, 20)
    via_disk, _ = pipeline.finetune(TINY, from_bytes(to_bytes(pre)), labeled, 20)
    assert to_bytes(direct) == to_bytes(via_disk)
    # the pre-trained checkpoint itself is not modified by fine-tuning
    assert to_bytes(pre) == to_bytes(pipeline.pretrain(TINY, train.unlabeled())[0])
    report = pipeline.evaluate(direct, held_out)
    assert set(report) == {"image_top1", "location_top1", "combined_top1"}
    assert report == pipeline.evaluate(direct, held_out)


def test_finetune_leaves_features_untouched():
    train, _ = pipeline.make_datasets(TINY)
    labeled = pipeline.labeled_subset(TINY, train, 50)
    before = labeled.features.copy()
    pipeline.finetune(TINY, None, labeled, 50)
    assert np.array_equal(labeled.features, before)
    with pytest.raises(UsageError):
        pipeline.finetune(TINY, None, labeled.subset(np.zeros(0, int)), 50)


def test_evaluate_rejects_mismatched_dimension():
    train, held_out = pipeline.make_datasets(TINY)
    tuned, _ = pipeline.finetune(TINY, None, pipeline.labeled_subset(TINY, train, 50), 50)
    other = pipeline.make_datasets(TrainConfig(**{**TINY.__dict__, "feature_dim": 5}))[1]
    with pytest.raises(DimensionMismatchError):
        pipeline.evaluate(tuned, other)


def test_full_labels_on_easy_data_reach_high_accuracy():
    easy = TrainConfig(**{**TINY.__dict__, "n_classes": 4, "kappa": 50.0, "centers_per_class": 1,
                          "feature_noise": 0.3, "prototype_scale": 2.0, "n_train": 400, "n_eval": 400,
                          "finetune_epochs": 20, "finetune_lr": 5e-3, "head_epochs": 100, "head_lr": 1e-2})
    train, held_out = pipeline.make_datasets(easy)
    tuned, _ = pipeline.finetune(easy, None, pipeline.labeled_subset(easy, train, 100), 100)
    assert pipeline.evaluate(tuned, held_out)["combined_top1"] >= 0.95


def test_combined_beats_each_signal_when_both_are_informative():
    cfg = TrainConfig(**{**TINY.__dict__, "n_classes": 6, "kappa": 8.0, "centers_per_class": 1,
                         "feature_noise": 1.5, "n_train": 1200, "n_eval": 1500, "finetune_epochs": 20,
                         "finetune_lr": 2e-3, "head_epochs": 100, "head_lr": 5e-3})
    train, held_out = pipeline.make_datasets(cfg)
    tuned, _ = pipeline.finetune(cfg, None, pipeline.labeled_subset(cfg, train, 100), 100)
    acc = pipeline.evaluate(tuned, held_out)
    assert acc["combined_top1"] >= max(acc["image_top1"], acc["location_top1"])


def test_grid_points():
    pts = pipeline.grid_points(1.0)
    assert pts.shape == (64800, 2)
    # latitude-major: longitude varies fastest
    assert pts[0, 1] == pts[359, 1] and pts[360, 1] > pts[0, 1]
    assert np.all(np.diff(pts[:360, 0]) > 0)
    with pytest.raises(UsageError):
        pipeline.grid_points(0)
    with pytest.raises(UsageError):
        pipeline.grid_points(7.0)


def test_export_is_deterministic(tmp_path):
    ckpt = pipeline.pretrain(TINY, pipeline.make_datasets(TINY)[0].unlabeled())[0]
    pipeline.export_grid_embeddings(ckpt, 10.0, tmp_path / "a.txt")
    pipeline.export_grid_embeddings(ckpt, 10.0, tmp_path / "b.txt")
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
    lonlat, emb = pipeline.read_table(tmp_path / "a.txt")
    assert lonlat.shape == (648, 2) and emb.shape == (648, 8)


def test_ward_clusters():
    rng = np.random.default_rng(0)
    blobs = np.vstack([rng.normal(0, 0.1, (30, 3)), rng.normal(10, 0.1, (20, 3))])
    order = rng.permutation(50)
    labels = pipeline.ward_clusters(blobs[order], 2)
    truth = (order >= 30).astype(int)
    assert np.array_equal(labels, truth) or np.array_equal(labels, 1 - truth)
    assert labels[0] == 0
    assert np.all(pipeline.ward_clusters(blobs, 1) == 0)
    assert sorted(pipeline.ward_clusters(blobs[:12], 12)) == list(range(12))
    with pytest.raises(UsageError):
        pipeline.ward_clusters(blobs, 51)


def test_run_experiment_reports_are_identical(tmp_path):
    cfg = TrainConfig(**{**TINY.__dict__, "ratios": (10.0, 50.0), "models": ("sup-only-grid", "csp-nce-bld")})
    a = pipeline.run_experiment(cfg, tmp_path / "a")
    b = pipeline.run_experiment(cfg, tmp_path / "b")
    assert [r.to_text() for r in a] == [r.to_text() for r in b]
    assert len(a) == 4
    for report in (tmp_path / "a").glob("*.report"):
        assert report.read_bytes() == (tmp_path / "b" / report.name).read_bytes()
