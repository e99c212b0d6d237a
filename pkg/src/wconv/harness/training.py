"""Training loops for both tasks and the density-coefficient sweep."""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .. import data as wdata
from ..density import build_density
from ..metrics import ConfusionMatrix, accuracy, f1_score, fsim, nrmse, psnr, ssim, uiq
from ..nn import Model, build_mini_dncnn, build_mini_vgg, cross_entropy_label_smoothing, mse_loss
from ..optim import Adam, EarlyStopping, SGD, Schedule, cosine_lr
from ..tensor import derive_rng
from .config import ConfigError, ExperimentConfig, alpha_label
from .report import MetricReport

log = logging.getLogger(__name__)

# derive_rng keys
_SHUFFLE, _AUGMENT, _SPLIT, _DATA = 1, 2, 3, 4


class TrainingError(RuntimeError):
    pass


@dataclass
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    n_classes: int = 0
    class_ids: tuple = ()


@dataclass
class TrainResult:
    model: Model
    report: MetricReport
    history: list = field(default_factory=list)
    best_val_loss: float = math.nan
    epochs_run: int = 0
    sec_per_epoch: float = 0.0
    confusion: ConfusionMatrix | None = None


# -- data -------------------------------------------------------------------------


def _classification_data(cfg: ExperimentConfig) -> Dataset:
    dc = cfg.data
    classes = tuple(dc.classes)
    if dc.source == "synthetic":
        train = wdata.synthetic_cifar(dc.train_per_class, classes, seed=cfg.seed)
        test = wdata.synthetic_cifar(dc.test_per_class, classes, seed=cfg.seed + 7919)
    else:
        for p in (dc.cifar_train, dc.cifar_test):
            if not p or not Path(p).exists():
                raise FileNotFoundError(f"CIFAR-100 binary not found: {p!r}")
        train = _take_per_class(wdata.load_cifar100(dc.cifar_train), classes, dc.train_per_class)
        test = _take_per_class(wdata.load_cifar100(dc.cifar_test), classes, dc.test_per_class)
    remap = {c: i for i, c in enumerate(classes)}
    ytr = np.array([remap[c] for c in train.fine])
    yte = np.array([remap[c] for c in test.fine])
    tr_idx, val_idx = wdata.split(len(train), (1 - dc.val_fraction, dc.val_fraction), seed=cfg.seed)
    return Dataset(train.images[tr_idx], ytr[tr_idx], train.images[val_idx], ytr[val_idx],
                   test.images, yte, len(classes), classes)


def _take_per_class(ds: wdata.LabeledImageSet, classes, per_class) -> wdata.LabeledImageSet:
    idx = []
    for c in classes:
        hits = np.flatnonzero(ds.fine == c)[:per_class]
        if len(hits) == 0:
            raise ValueError(f"class {c} absent from dataset")
        idx.extend(hits.tolist())
    return ds.subset(np.sort(np.array(idx)))


def _denoising_data(cfg: ExperimentConfig) -> Dataset:
    dc = cfg.data
    if dc.source == "synthetic":
        rng = derive_rng(cfg.seed, _DATA)
        images = [wdata.synthetic_image(dc.image_size, dc.image_size, rng) for _ in range(dc.n_images)]
    else:
        if not dc.ppm_dir or not Path(dc.ppm_dir).is_dir():
            raise FileNotFoundError(f"PPM directory not found: {dc.ppm_dir!r}")
        images = wdata.load_ppm_dir(dc.ppm_dir)
    if len(images) < 3:
        raise ValueError("denoising needs at least three images for train/val/test")
    parts = wdata.split(len(images), dc.split, seed=cfg.seed)
    noise = wdata.NoiseConfig(cfg.noise_mu, cfg.noise_sigma, cfg.noise_seed)
    out = []
    for i, part in enumerate(parts):
        if len(part) == 0:
            raise ValueError(f"split {dc.split} leaves an empty partition for {len(images)} images")
        clean = np.concatenate([wdata.extract_patches(images[j], dc.patch_size, dc.patch_stride) for j in part])
        # one fixed noise realisation per partition, identical for every method
        noisy = wdata.add_gaussian_noise(clean, wdata.NoiseConfig(noise.mu, noise.sigma, noise.seed * 1000 + i))
        out += [noisy, clean]
    return Dataset(*out)


def prepare_data(cfg: ExperimentConfig) -> Dataset:
    if cfg.task == "classification":
        return _classification_data(cfg)
    return _denoising_data(cfg)


# -- model / optimizer ------------------------------------------------------------


def build_model(cfg: ExperimentConfig, ds: Dataset) -> Model:
    d = None
    if cfg.conv_variant == "weighted":
        if cfg.free_coeffs is None:
            raise ConfigError("weighted run without density coefficients")
        d = build_density(cfg.kernel, cfg.central_value, cfg.free_coeffs)
    if cfg.recipe == "mini-vgg":
        return build_mini_vgg(ds.n_classes, cfg.conv_variant, d, widths=cfg.widths,
                              in_channels=ds.train_x.shape[1], image_size=ds.train_x.shape[2],
                              k=cfg.kernel, seed=cfg.seed)
    return build_mini_dncnn(cfg.depth, cfg.width, cfg.conv_variant, d, channels=ds.train_x.shape[1],
                            k=cfg.kernel, seed=cfg.seed)


def _optimizer(cfg: ExperimentConfig):
    o = cfg.optimizer
    if o.kind == "sgd":
        return SGD(o.lr, o.momentum, o.weight_decay)
    return Adam(o.lr, o.beta1, o.beta2, weight_decay=o.weight_decay)


def _loss(cfg: ExperimentConfig, out, target):
    if cfg.loss == "cross_entropy":
        return cross_entropy_label_smoothing(out, target, cfg.label_smoothing)
    return mse_loss(out, target)


def _batches(n, size):
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


def evaluate_loss(model: Model, cfg: ExperimentConfig, x, y, batch_size=64) -> float:
    total = 0.0
    for sl in _batches(len(x), batch_size):
        loss, _ = _loss(cfg, model.forward(x[sl], train=False), y[sl])
        total += loss * (sl.stop - sl.start)
    return total / len(x)


def predict(model: Model, x, batch_size=64) -> np.ndarray:
    return np.concatenate([model.forward(x[sl], train=False) for sl in _batches(len(x), batch_size)])


# -- training -------------------------------------------------------------------


def train_steps(model: Model, cfg: ExperimentConfig, ds: Dataset, steps: int) -> list[float]:
    """Run ``steps`` optimizer steps over shuffled mini-batches, returning the losses.

    Uses the base learning rate throughout; meant for short equivalence checks.
    """
    opt = _optimizer(cfg)
    rng = derive_rng(cfg.seed, _SHUFFLE)
    losses = []
    order = rng.permutation(len(ds.train_x))
    pos = 0
    for _ in range(steps):
        if pos + cfg.batch_size > len(order):
            order, pos = rng.permutation(len(ds.train_x)), 0
        idx = order[pos : pos + cfg.batch_size]
        pos += cfg.batch_size
        out = model.forward(ds.train_x[idx], train=True)
        loss, g = _loss(cfg, out, ds.train_y[idx])
        opt.step(model.named_params(), model.backward(g))
        losses.append(loss)
    return losses


def run_training(cfg: ExperimentConfig, ds: Dataset | None = None) -> TrainResult:
    """Train one model for ``cfg`` and evaluate it on the validation and test splits.

    Cosine-annealed learning rate per epoch, early stopping on validation
    loss (best parameters are restored), seconds per epoch measured over
    the optimisation passes only. Raises ``TrainingError`` on a non-finite
    loss.
    """
    if cfg.grid is not None:
        raise ConfigError("run_training takes a single-density config; use sweep_alpha for grids")
    ds = ds if ds is not None else prepare_data(cfg)
    model = build_model(cfg, ds)
    opt = _optimizer(cfg)
    schedule = Schedule(cfg.optimizer.lr, cfg.epochs, cfg.min_lr)
    stopper = EarlyStopping(cfg.patience)
    shuffle_rng = derive_rng(cfg.seed, _SHUFFLE)
    aug_rng = derive_rng(cfg.seed, _AUGMENT)

    history = []
    best_val, best_state = math.inf, None
    epoch_times = []
    epochs_run = 0
    for epoch in range(cfg.epochs):
        opt.lr = cosine_lr(epoch, schedule) if cfg.cosine else cfg.optimizer.lr
        order = shuffle_rng.permutation(len(ds.train_x))
        t0 = time.perf_counter()
        run_loss = 0.0
        for sl in _batches(len(order), cfg.batch_size):
            idx = order[sl]
            x = ds.train_x[idx]
            if cfg.hflip:
                x = wdata.random_hflip(x, 0.5, aug_rng)
            out = model.forward(x, train=True)
            loss, g = _loss(cfg, out, ds.train_y[idx])
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite training loss at epoch {epoch} (lr={opt.lr:g})")
            opt.step(model.named_params(), model.backward(g))
            run_loss += loss * len(idx)
        epoch_times.append(time.perf_counter() - t0)
        epochs_run += 1
        val_loss = evaluate_loss(model, cfg, ds.val_x, ds.val_y)
        if not math.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        history.append({"epoch": epoch, "lr": opt.lr, "train_loss": run_loss / len(order), "val_loss": val_loss})
        log.info("epoch %d lr=%.4g train=%.6g val=%.6g", epoch, opt.lr, run_loss / len(order), val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_state = _snapshot(model)
        if stopper.update(val_loss):
            break
    if best_state is not None:
        _restore(model, best_state)
    else:
        best_val = evaluate_loss(model, cfg, ds.val_x, ds.val_y)

    sec = float(np.mean(epoch_times)) if epoch_times else 0.0
    report, cm = _evaluate(model, cfg, ds, epochs_run, sec, best_val)
    return TrainResult(model, report, history, best_val, epochs_run, sec, cm)


def _snapshot(model):
    return [(copy.deepcopy(l.params), copy.deepcopy(l.buffers)) for l in model.layers]


def _restore(model, state):
    for layer, (params, buffers) in zip(model.layers, state):
        for k, v in params.items():
            layer.params[k][...] = v
        layer.buffers.update(buffers)


def _evaluate(model, cfg, ds, epochs_run, sec, best_val):
    stamp = datetime.now(timezone.utc).isoformat(timespec="seconds")
    base = {
        "method": cfg.recipe,
        "variant": cfg.conv_variant,
        "kernel": f"{cfg.kernel}x{cfg.kernel}",
        "alpha": alpha_label(cfg.alpha_tuple) if cfg.kernel > 1 else "",
        "seed": cfg.seed,
        "epochs": epochs_run,
        "sec_per_epoch": sec,
        "selected": 0,
        "timestamp": stamp,
    }
    report = MetricReport()
    cm_test = None
    for split, x, y in (("val", ds.val_x, ds.val_y), ("test", ds.test_x, ds.test_y)):
        row = dict(base, split=split)
        row["loss"] = best_val if split == "val" else evaluate_loss(model, cfg, x, y)
        if cfg.task == "classification":
            pred = predict(model, x).argmax(axis=1)
            cm = ConfusionMatrix.from_labels(y, pred, ds.n_classes)
            row["accuracy"], row["f1"] = accuracy(cm), f1_score(cm)
            if split == "test":
                cm_test = cm
        else:
            row.update(denoising_metrics(predict(model, x), y, x))
        report.append(row)
    return report, cm_test


def denoising_metrics(pred, clean, noisy) -> dict:
    """Per-patch metrics averaged over the set (unit dynamic range)."""
    vals = {k: [] for k in ("nrmse", "psnr", "ssim", "fsim", "uiq", "input_psnr")}
    for p, c, n in zip(pred, clean, noisy):
        vals["nrmse"].append(nrmse(p, c))
        vals["psnr"].append(psnr(p, c))
        vals["ssim"].append(ssim(p, c))
        vals["fsim"].append(fsim(p, c))
        vals["uiq"].append(uiq(p, c))
        vals["input_psnr"].append(psnr(n, c))
    return {k: float(np.mean(v)) for k, v in vals.items()}


# -- sweep ----------------------------------------------------------------------


def sweep_alpha(cfg: ExperimentConfig, ds: Dataset | None = None, on_point=None) -> MetricReport:
    """Train one model per grid point from identical data and initialisation.

    The point with the lowest validation loss is marked ``selected = 1``;
    test metrics are reported for every point.
    """
    points = cfg.grid_points()
    ds = ds if ds is not None else prepare_data(cfg)
    results = []
    for point in points:
        res = run_training(cfg.with_density(point), ds)
        log.info("alpha=%s val_loss=%.6g", alpha_label(point), res.best_val_loss)
        results.append(res)
        if on_point is not None:
            on_point(point, res)
    best = min(range(len(results)), key=lambda i: results[i].best_val_loss)
    report = MetricReport()
    for i, res in enumerate(results):
        for row in res.report.rows:
            row["selected"] = int(i == best)
            report.append(row)
    return report
