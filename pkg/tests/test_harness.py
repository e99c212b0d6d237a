import math
from dataclasses import replace

import numpy as np
import pytest

from wconv.data import NoiseConfig, add_gaussian_noise, extract_patches, synthetic_image
from wconv.harness.config import (
    ConfigError, DataConfig, ExperimentConfig, OptimizerConfig, alpha_label, load_config, parse_config, parse_grid,
)
from wconv.harness.report import (
    COLUMNS, MetricReport, confusion_image, emit_report, read_report, render_confusion, report_to_csv,
    strip_wall_clock,
)
from wconv.harness.training import Dataset, TrainingError, prepare_data, run_training, sweep_alpha, train_steps
from wconv.data import load_ppm
from wconv.metrics import ConfusionMatrix
from wconv.tensor import make_rng

BASE = """
[experiment]
format = 1
task = denoising
"""


# -- config -------------------------------------------------------------------


def test_minimal_config_defaults():
    cfg = parse_config(BASE)
    assert cfg.task == "denoising" and cfg.recipe == "mini-dncnn"
    assert cfg.optimizer.kind == "adam" and cfg.loss == "mse"
    assert cfg.conv_variant == "standard" and cfg.grid is None


def test_classification_defaults():
    cfg = parse_config(BASE.replace("denoising", "classification"))
    assert cfg.optimizer == OptimizerConfig(kind="sgd", lr=0.1, momentum=0.9, weight_decay=5e-5)
    assert cfg.loss == "cross_entropy" and cfg.hflip and cfg.epochs == 30


@pytest.mark.parametrize("text,match", [
    ("[experiment]\ntask = denoising\n", "format"),
    ("[experiment]\nformat = 2\n", "format"),
    (BASE.replace("denoising", "segmentation"), "task"),
    (BASE + "[density]\nfree_coeffs = 0.8\n[sweep]\nalpha1 = 1.0\n", "not both"),
    (BASE + "[sweep]\nalpha1 = 0.5, 0.8\n", "uniform point"),
    (BASE + "[sweep]\nalpha1 = 0.2, 1.0\n", "outside"),
    (BASE + "[model]\nkernel = 5\n[sweep]\nalpha1 = 1.0\nalpha2 = 1.0, 1.6\n", "outside"),
    (BASE + "[model]\nkernel = 5\n[sweep]\nalpha1 = 1.0\n", "alpha2"),
    (BASE + "[model]\nkernel = 4\n", "odd"),
    (BASE + "[density]\nfree_coeffs = 0.8, 0.9\n", "free_coeffs"),
    (BASE + "[model]\nconv_variant = weighted\n", "density"),
    (BASE + "[optimizer]\nkind = rmsprop\n", "optimizer"),
    (BASE + "[schedule]\nepochs = -1\n", "epochs"),
    (BASE + "[noise]\nsigma = -1\n", "sigma"),
    (BASE + "[data]\nsource = http\n", "source"),
    ("not an ini file", "section"),
])
def test_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_grid_parsing():
    assert parse_grid("0.5:1.5:0.25") == (0.5, 0.75, 1.0, 1.25, 1.5)
    assert parse_grid("0.05:1.0:0.05")[-1] == 1.0
    assert len(parse_grid("0.05:1.0:0.05")) == 20
    assert parse_grid("0.1, 0.9,1.0") == (0.1, 0.9, 1.0)
    with pytest.raises(ConfigError):
        parse_grid("1:0:0.1")


def test_5x5_grid_points_and_labels():
    cfg = parse_config(BASE + "[model]\nkernel = 5\n[sweep]\nalpha1 = 0.1, 1.0\nalpha2 = 0.9, 1.0\n")
    assert cfg.grid_points() == [(0.1, 0.9), (0.1, 1.0), (1.0, 0.9), (1.0, 1.0)]
    assert alpha_label((0.1, 0.9)) == "(0.1, 0.9)"
    assert alpha_label((0.8,)) == "0.8"


def test_with_density_uniform_point_runs_standard():
    cfg = parse_config(BASE + "[sweep]\nalpha1 = 0.5, 1.0\n")
    assert cfg.with_density((1.0,)).conv_variant == "standard"
    w = cfg.with_density((0.5,))
    assert w.conv_variant == "weighted" and w.free_coeffs == (0.5,) and w.grid is None


@pytest.mark.parametrize("name", ["toy_denoise", "toy_classify", "desk_denoise", "desk_classify",
                                  "desk_denoise_sweep", "desk_nafnet_5x5"])
def test_bundled_configs_load(name):
    assert load_config(name).name


def test_missing_config():
    with pytest.raises(ConfigError, match="not found"):
        load_config("no_such_config")


# -- report -------------------------------------------------------------------


def _row(**kw):
    row = dict(method="mini-dncnn", variant="weighted", kernel="3x3", alpha="0.8", split="val", seed=0,
               epochs=3, loss=1.25e-4, psnr=math.inf, ssim=0.9, sec_per_epoch=0.5, selected=1,
               timestamp="2024-01-01T00:00:00+00:00")
    row.update(kw)
    return row


def test_single_row_csv_has_two_lines(tmp_path):
    path = emit_report(MetricReport([_row()]), tmp_path / "r.csv")
    lines = path.read_text().splitlines()
    assert len(lines) == 2
    assert lines[0] == ",".join(COLUMNS)
    assert ",inf," in lines[1]


def test_csv_round_trip(tmp_path):
    rep = MetricReport([_row(), _row(split="test", loss=0.1 + 0.2, alpha="(0.1, 0.9)", accuracy=0.5)])
    back = read_report(emit_report(rep, tmp_path / "r.csv"))
    assert back == rep


def test_report_is_append_only():
    rep = MetricReport([_row()])
    rows = rep.rows
    rows[0]["loss"] = -1
    assert rep.rows[0]["loss"] == 1.25e-4
    with pytest.raises(KeyError):
        rep.append({"bogus": 1})


def test_empty_report_refused(tmp_path):
    with pytest.raises(ValueError):
        emit_report(MetricReport(), tmp_path / "r.csv")


def test_strip_wall_clock():
    text = report_to_csv(MetricReport([_row()]))
    stripped = strip_wall_clock(text)
    assert "sec_per_epoch" not in stripped and "timestamp" not in stripped
    assert strip_wall_clock(report_to_csv(MetricReport([_row(sec_per_epoch=9.0, timestamp="x")]))) == stripped


def test_confusion_render_diagonal(tmp_path):
    cm = ConfusionMatrix(np.diag([5, 3, 8]))
    img = confusion_image(cm)
    assert np.array_equal(img, np.eye(3))
    p = render_confusion(cm, tmp_path / "cm.ppm")
    assert p.read_bytes().startswith(b"P5")
    assert np.array_equal(load_ppm(p)[0], np.eye(3))


def test_confusion_row_max_normalisation():
    img = confusion_image(ConfusionMatrix([[4, 2], [0, 0]]))
    assert img.tolist() == [[1.0, 0.5], [0.0, 0.0]]


# -- training -----------------------------------------------------------------


def tiny_denoise(**kw):
    cfg = ExperimentConfig(
        task="denoising", depth=3, width=4, epochs=2, batch_size=4,
        optimizer=OptimizerConfig(kind="adam", lr=1e-3),
        data=DataConfig(n_images=4, image_size=24, patch_size=12, patch_stride=12, split=(0.5, 0.25, 0.25)),
    )
    return replace(cfg, **kw)


def tiny_classify(**kw):
    cfg = ExperimentConfig(
        task="classification", recipe="mini-vgg", loss="cross_entropy", hflip=True, widths=(4, 4, 4),
        epochs=1, batch_size=16, data=DataConfig(classes=(0, 1, 2), train_per_class=8, test_per_class=4),
    )
    return replace(cfg, **kw)


def test_epochs_zero_returns_initial_model():
    res = run_training(tiny_denoise(epochs=0))
    assert res.epochs_run == 0 and res.history == []
    rows = res.report.rows
    assert [r["split"] for r in rows] == ["val", "test"]
    # zero-initialised last layer: the untrained model is the identity
    assert rows[1]["psnr"] == pytest.approx(rows[1]["input_psnr"], abs=1e-12)


def test_denoising_rows_have_image_metrics():
    res = run_training(tiny_denoise())
    for row in res.report.rows:
        for key in ("nrmse", "psnr", "ssim", "fsim", "uiq", "input_psnr"):
            assert math.isfinite(row[key])
        assert row["accuracy"] is None and row["seed"] == 0 and row["alpha"] == "1.0"


def test_classification_rows_and_confusion():
    res = run_training(tiny_classify())
    test = res.report.rows[1]
    assert 0 <= test["accuracy"] <= 1 and test["psnr"] is None
    assert res.confusion.total == 12


def test_uniform_weighted_equals_standard_losses():
    std = run_training(tiny_denoise())
    w = run_training(tiny_denoise(conv_variant="weighted", free_coeffs=(1.0,)))
    assert [h["train_loss"] for h in std.history] == [h["train_loss"] for h in w.history]
    assert [h["val_loss"] for h in std.history] == [h["val_loss"] for h in w.history]


def test_train_steps_uniform_equivalence():
    cfg = tiny_denoise()
    ds = prepare_data(cfg)
    from wconv.harness.training import build_model

    a = train_steps(build_model(cfg, ds), cfg, ds, 10)
    wcfg = replace(cfg, conv_variant="weighted", free_coeffs=(1.0,))
    b = train_steps(build_model(wcfg, ds), wcfg, ds, 10)
    assert np.max(np.abs(np.subtract(a, b))) <= 1e-12


def test_training_is_deterministic():
    a, b = run_training(tiny_denoise()), run_training(tiny_denoise())
    assert a.history == b.history


def test_weighted_epoch_time_overhead():
    # paired, order-alternating epochs; the median ratio shrugs off scheduler hiccups
    cfg = load_config("desk_denoise")
    cfg = replace(cfg, epochs=2, data=replace(cfg.data, n_images=4, image_size=64, patch_stride=16))
    wcfg = replace(cfg, conv_variant="weighted", free_coeffs=(0.8,))
    ds = prepare_data(cfg)
    ratios = []
    for rep in range(5):
        order = (cfg, wcfg) if rep % 2 == 0 else (wcfg, cfg)
        t = {c.conv_variant: run_training(c, ds).sec_per_epoch for c in order}
        ratios.append(t["weighted"] / t["standard"])
    assert np.median(ratios) <= 1.25


def test_overfit_tiny_denoising_set():
    # ten noisy patches; the residual model should drive the training loss below 0.01
    rng = make_rng(0)
    clean = np.concatenate([extract_patches(synthetic_image(24, 24, rng), 12, 12) for _ in range(3)])[:10]
    noisy = add_gaussian_noise(clean, NoiseConfig(0.0, 0.2, seed=3))
    ds = Dataset(noisy, clean, noisy, clean, noisy, clean)
    cfg = tiny_denoise(epochs=200, batch_size=10, patience=200, cosine=False,
                       optimizer=OptimizerConfig(kind="adam", lr=3e-3), width=8)
    res = run_training(cfg, ds)
    losses = [h["train_loss"] for h in res.history]
    assert losses[0] > 0.01
    assert min(losses) < 0.01


def test_nan_loss_aborts():
    cfg = tiny_denoise()
    ds = prepare_data(cfg)
    ds.train_x[0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingError, match="non-finite training loss at epoch 0"):
        run_training(cfg, ds)


def test_early_stopping_restores_best():
    res = run_training(tiny_denoise(epochs=6, patience=1, optimizer=OptimizerConfig(kind="adam", lr=0.05)))
    assert res.best_val_loss == min(h["val_loss"] for h in res.history)
    assert res.report.rows[0]["loss"] == res.best_val_loss


def test_missing_data_files():
    cfg = tiny_denoise(data=DataConfig(source="files", ppm_dir="/nonexistent"))
    with pytest.raises(FileNotFoundError):
        run_training(cfg)
    cfg = tiny_classify(data=DataConfig(source="files", cifar_train="/nope/train.bin", cifar_test="/nope/test.bin"))
    with pytest.raises(FileNotFoundError):
        run_training(cfg)


def test_files_source_reads_ppm_corpus(tmp_path):
    from wconv.data import write_synthetic_corpus

    write_synthetic_corpus(tmp_path, n_images=4, size=24)
    cfg = tiny_denoise(epochs=1, data=DataConfig(source="files", ppm_dir=str(tmp_path), patch_size=12,
                                                 patch_stride=12, split=(0.5, 0.25, 0.25)))
    ds = prepare_data(cfg)
    assert ds.train_x.shape == (8, 3, 12, 12)


def test_run_training_rejects_grid():
    with pytest.raises(ConfigError):
        run_training(tiny_denoise(grid=((0.5, 1.0),)))


# -- sweep ----------------------------------------------------------------------


def test_single_uniform_point_equals_standard():
    rep = sweep_alpha(tiny_denoise(grid=((1.0,),)))
    std = run_training(tiny_denoise())
    strip = lambda rows: [{k: v for k, v in r.items() if k not in ("sec_per_epoch", "timestamp", "selected")}
                          for r in rows]
    assert strip(rep.rows) == strip(std.report.rows)
    assert all(r["selected"] == 1 for r in rep.rows)


def test_sweep_selection_dominates_baseline():
    rep = sweep_alpha(tiny_denoise(grid=((0.5, 0.75, 1.0, 1.25, 1.5),)))
    val = [r for r in rep.rows if r["split"] == "val"]
    assert [r["alpha"] for r in val] == ["0.5", "0.75", "1.0", "1.25", "1.5"]
    assert len(rep) == 10
    chosen = [r for r in val if r["selected"]]
    assert len(chosen) == 1
    base = next(r for r in val if r["alpha"] == "1.0")
    assert chosen[0]["loss"] <= base["loss"]
    assert chosen[0]["loss"] == min(r["loss"] for r in val)


def test_sweep_5x5_labels():
    cfg = tiny_denoise(kernel=5, epochs=1, grid=((0.1, 1.0), (0.9, 1.0)))
    rep = sweep_alpha(cfg)
    labels = sorted({r["alpha"] for r in rep.rows})
    assert labels == ["(0.1, 0.9)", "(0.1, 1.0)", "(1.0, 0.9)", "(1.0, 1.0)"]
    assert {r["kernel"] for r in rep.rows} == {"5x5"}
