import math

import numpy as np
import pytest

from svbench import schedule as sc
from svbench.errors import DivergenceError, ParamError


# ---------------------------------------------------------------------------
# stage defaults


def test_stage1_defaults():
    s1 = sc.default_stage1()
    assert s1.segment_s == 2.0
    assert s1.margin == 0.2
    assert s1.scale == 32.0
    assert s1.epochs == 150
    assert s1.lr_start == 0.1
    assert s1.lr_end == 1e-5
    assert s1.use_speed_perturb is True
    assert s1.use_intertopk is True
    assert s1.frame_count == 200


def test_stage2_defaults():
    s2 = sc.default_stage2()
    assert s2.segment_s == 6.0
    assert s2.margin == 0.5
    assert s2.scale == 32.0
    assert s2.epochs == 5
    assert s2.lr_start == 1e-4
    assert s2.lr_end == 2.5e-5
    assert s2.use_speed_perturb is False
    assert s2.use_intertopk is False
    assert s2.frame_count == 600


def test_stage_config_validation():
    good = dict(segment_s=1.0, margin=0.1, scale=32.0, epochs=1,
                lr_start=0.1, lr_end=0.01, use_speed_perturb=False, use_intertopk=False)
    with pytest.raises(ParamError):
        sc.StageConfig(**{**good, "lr_end": 0.2})
    with pytest.raises(ParamError):
        sc.StageConfig(**{**good, "lr_start": -1.0, "lr_end": -2.0})
    with pytest.raises(ParamError):
        sc.StageConfig(**{**good, "epochs": -1})


# ---------------------------------------------------------------------------
# learning-rate schedule


def test_lr_endpoints():
    s1 = sc.default_stage1()
    assert sc.lr_at(s1, 0, 150) == pytest.approx(0.1, rel=1e-15)
    assert sc.lr_at(s1, 150, 150) == pytest.approx(1e-5, rel=1e-12)


def test_lr_geometric_midpoint():
    s1 = sc.default_stage1()
    mid = sc.lr_at(s1, 75, 150)
    assert mid == pytest.approx(math.sqrt(0.1 * 1e-5), rel=1e-12)


def test_lr_monotone_decreasing():
    s1 = sc.default_stage1()
    values = [sc.lr_at(s1, k, 150) for k in range(151)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_lr_constant_when_endpoints_equal():
    cfg = sc.StageConfig(1.0, 0.1, 32.0, 10, 1e-3, 1e-3, False, False)
    for k in range(11):
        assert sc.lr_at(cfg, k, 10) == 1e-3


def test_lr_step_out_of_range():
    s1 = sc.default_stage1()
    with pytest.raises(ParamError):
        sc.lr_at(s1, -1, 10)
    with pytest.raises(ParamError):
        sc.lr_at(s1, 11, 10)
    with pytest.raises(ParamError):
        sc.lr_at(s1, 0, 0)


# ---------------------------------------------------------------------------
# toy dataset


def test_toy_dataset_shapes_and_determinism():
    spec = sc.ToyDatasetSpec()
    X, y = sc.make_toy_dataset(spec)
    assert X.shape == (64, 8)
    assert y.shape == (64,)
    assert np.bincount(y).tolist() == [16, 16, 16, 16]
    X2, y2 = sc.make_toy_dataset(sc.ToyDatasetSpec())
    assert np.array_equal(X, X2) and np.array_equal(y, y2)


def test_toy_dataset_clustered():
    X, y = sc.make_toy_dataset(sc.ToyDatasetSpec())
    Xn = X / np.linalg.norm(X, axis=1, keepdims=True)
    cos = Xn @ Xn.T
    same = cos[y[:, None] == y[None, :]]
    diff = cos[y[:, None] != y[None, :]]
    assert same.mean() > diff.mean() + 0.3


# ---------------------------------------------------------------------------
# toy trainer


def short_stages(kind1="intertopk"):
    s1 = sc.StageConfig(2.0, 0.2, 32.0, 60, 0.1, 1e-4, True, True, loss_kind=kind1)
    s2 = sc.StageConfig(6.0, 0.5, 32.0, 5, 1e-4, 2.5e-5, False, False, loss_kind="aam")
    return s1, s2


def test_train_toy_converges():
    report = sc.train_toy(sc.ToyDatasetSpec(), *short_stages(), seed=0)
    losses = report.losses(stage=1)
    assert losses[-1] < 0.05
    assert losses[-1] < losses[0]


@pytest.mark.parametrize("kind", ["am", "aam", "subcenter_aam", "intertopk", "hem"])
def test_train_toy_all_kinds(kind):
    sub = 3 if kind == "subcenter_aam" else 1
    s1, s2 = short_stages(kind)
    report = sc.train_toy(sc.ToyDatasetSpec(), s1, s2, seed=0, sub_centers=sub)
    assert report.losses(stage=1)[-1] < 0.2
    assert np.isfinite(report.margin_after_stage2)


def test_train_toy_deterministic_bit_identical():
    a = sc.train_toy(sc.ToyDatasetSpec(), *short_stages(), seed=3)
    b = sc.train_toy(sc.ToyDatasetSpec(), *short_stages(), seed=3)
    assert np.array_equal(a.weight, b.weight)
    assert np.array_equal(a.centers, b.centers)
    assert a.losses() == b.losses()


def test_train_toy_seed_changes_result():
    a = sc.train_toy(sc.ToyDatasetSpec(), *short_stages(), seed=0)
    b = sc.train_toy(sc.ToyDatasetSpec(), *short_stages(), seed=1)
    assert not np.array_equal(a.weight, b.weight)


def test_train_toy_stage2_grows_margin():
    for seed in range(5):
        report = sc.train_toy(sc.ToyDatasetSpec(), *short_stages(), seed=seed)
        assert report.margin_after_stage2 >= report.margin_after_stage1 - 1e-6


def test_train_toy_zero_epoch_stage_echoes():
    s1, _ = short_stages()
    frozen = sc.StageConfig(6.0, 0.5, 32.0, 0, 1e-4, 2.5e-5, False, False)
    report = sc.train_toy(sc.ToyDatasetSpec(), s1, frozen, seed=0)
    assert report.losses(stage=2) == []
    assert report.margin_after_stage2 == report.margin_after_stage1


def test_run_stage_reports_divergence():
    # a non-finite activation must stop training, not propagate silently
    cfg = sc.StageConfig(2.0, 0.2, 32.0, 3, 1e-2, 1e-3, False, False)
    X = np.full((4, 2), np.nan)
    y = np.array([0, 0, 1, 1])
    W = np.eye(2, sc.EMBED_DIM)
    centers = np.random.default_rng(0).standard_normal((2, sc.EMBED_DIM))
    with pytest.raises(DivergenceError):
        sc._run_stage(X, y, W, centers, cfg, 1, sc.TrainingReport())


def test_epoch_records_lr_follows_schedule():
    s1, s2 = short_stages()
    report = sc.train_toy(sc.ToyDatasetSpec(), s1, s2, seed=0)
    stage1 = [e for e in report.epochs if e.stage == 1]
    assert len(stage1) == s1.epochs
    for e in stage1:
        assert e.lr == sc.lr_at(s1, e.epoch, s1.epochs)


def test_report_csv_roundtrip(tmp_path):
    report = sc.train_toy(sc.ToyDatasetSpec(), *short_stages(), seed=0)
    path = tmp_path / "log.csv"
    report.write_csv(path)
    import csv

    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["epoch", "loss", "lr", "margin_stat"]
    assert len(rows) == 1 + len(report.epochs)
    assert float(rows[1][1]) == report.epochs[0].loss


def test_report_table_renders():
    report = sc.train_toy(sc.ToyDatasetSpec(), *short_stages(), seed=0)
    table = report.format_table()
    assert "stage" in table.splitlines()[0]
    assert len(table.splitlines()) == 1 + len(report.epochs)
