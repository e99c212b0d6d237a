"""Experiment configuration files.

The format is INI (``key = value`` under ``[sections]``) with a mandatory
``format = 1`` in ``[experiment]``. A config either fixes one density in
``[density]`` or declares a grid in ``[sweep]``, never both. Grids are written
per coefficient either as ``lo:hi:step`` or as a comma-separated list::

    [sweep]
    alpha1 = 0.5:1.5:0.25
    alpha2 = 0.5, 0.9, 1.0

``alpha1`` is the outermost coefficient of ``alpha``.
"""

from __future__ import annotations

import configparser
import itertools
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

FORMAT_VERSION = 1

# Paper ranges per kernel extent, outermost coefficient first.
GRID_RANGES = {
    3: [(0.5, 1.5)],
    5: [(0.05, 1.0), (0.5, 1.5)],
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "sgd"
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.5e-4
    beta1: float = 0.9
    beta2: float = 0.999


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    # classification
    cifar_train: str = ""
    cifar_test: str = ""
    classes: tuple[int, ...] = tuple(range(10))
    train_per_class: int = 500
    test_per_class: int = 100
    val_fraction: float = 0.1
    # denoising
    ppm_dir: str = ""
    n_images: int = 12
    image_size: int = 96
    patch_size: int = 32
    patch_stride: int = 32
    split: tuple[float, float, float] = (0.7, 0.15, 0.15)


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "denoising"
    recipe: str = "mini-dncnn"
    depth: int = 6
    width: int = 16
    widths: tuple[int, ...] = (16, 32, 64)
    conv_variant: str = "standard"
    kernel: int = 3
    central_value: float = 1.0
    free_coeffs: tuple[float, ...] | None = None
    grid: tuple[tuple[float, ...], ...] | None = None
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    epochs: int = 20
    cosine: bool = True
    min_lr: float = 0.0
    patience: int = 10
    batch_size: int = 16
    loss: str = "mse"
    label_smoothing: float = 0.1
    hflip: bool = False
    noise_mu: float = 0.0
    noise_sigma: float = 0.01
    noise_seed: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    out_dir: str = "runs"
    name: str = "experiment"

    def with_density(self, coeffs) -> "ExperimentConfig":
        """Single-point config for one grid point (uniform point runs as standard conv)."""
        coeffs = tuple(float(c) for c in coeffs)
        if all(c == 1.0 for c in coeffs) and self.central_value == 1.0:
            return replace(self, grid=None, free_coeffs=None, conv_variant="standard")
        return replace(self, grid=None, free_coeffs=coeffs, conv_variant="weighted")

    def grid_points(self) -> list[tuple[float, ...]]:
        if self.grid is None:
            raise ConfigError("config has no [sweep] grid")
        return [tuple(p) for p in itertools.product(*self.grid)]

    @property
    def alpha_tuple(self) -> tuple[float, ...]:
        if self.conv_variant == "weighted" and self.free_coeffs is not None:
            return self.free_coeffs
        return (1.0,) * ((self.kernel - 1) // 2)


def parse_grid(text: str) -> tuple[float, ...]:
    text = text.strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ConfigError(f"grid {text!r} must be lo:hi:step")
        lo, hi, step = (float(p) for p in parts)
        if step <= 0 or hi < lo:
            raise ConfigError(f"grid {text!r} needs step > 0 and hi >= lo")
        n = int(math.floor((hi - lo) / step + 1e-9)) + 1
        values = [round(lo + i * step, 10) for i in range(n)]
    else:
        values = [float(v) for v in text.split(",") if v.strip()]
    if not values:
        raise ConfigError("empty grid")
    return tuple(values)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def resolve_config_path(name_or_path) -> Path:
    p = Path(name_or_path)
    if p.exists():
        return p
    bundled = resources.files("wconv") / "configs" / f"{name_or_path}.ini"
    if bundled.is_file():
        return Path(str(bundled))
    raise ConfigError(f"config {name_or_path!r} not found (neither a file nor a bundled config)")


def load_config(name_or_path) -> ExperimentConfig:
    path = resolve_config_path(name_or_path)
    return parse_config(path.read_text(), source=str(path))


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    try:
        return _build(cp, source)
    except (KeyError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{source}: {exc}") from None


def _build(cp: configparser.ConfigParser, source: str) -> ExperimentConfig:
    if "experiment" not in cp:
        raise ConfigError(f"{source}: missing [experiment] section")
    exp = cp["experiment"]
    if exp.getint("format", fallback=None) != FORMAT_VERSION:
        raise ConfigError(f"{source}: [experiment] format must be {FORMAT_VERSION}")
    task = exp.get("task", "denoising")
    if task not in ("classification", "denoising"):
        raise ConfigError(f"{source}: unknown task {task!r}")

    kw: dict = {"task": task, "seed": exp.getint("seed", 0), "out_dir": exp.get("out_dir", "runs"),
                "name": exp.get("name", Path(source).stem)}
    defaults = {
        "classification": dict(recipe="mini-vgg", loss="cross_entropy", hflip=True, epochs=30,
                               batch_size=128, optimizer=OptimizerConfig()),
        "denoising": dict(recipe="mini-dncnn", loss="mse", hflip=False, epochs=20, batch_size=16,
                          optimizer=OptimizerConfig(kind="adam", lr=1e-3, momentum=0.0, weight_decay=0.0)),
    }[task]
    kw.update(defaults)

    if "model" in cp:
        m = cp["model"]
        kw["recipe"] = m.get("recipe", kw["recipe"])
        kw["depth"] = m.getint("depth", 6)
        kw["width"] = m.getint("width", 16)
        if "widths" in m:
            kw["widths"] = _ints(m["widths"])
        kw["conv_variant"] = m.get("conv_variant", "standard")
        kw["kernel"] = m.getint("kernel", 3)
    if kw.get("conv_variant", "standard") not in ("standard", "weighted"):
        raise ConfigError(f"{source}: conv_variant must be standard or weighted")
    if kw["recipe"] not in ("mini-vgg", "mini-dncnn"):
        raise ConfigError(f"{source}: unknown recipe {kw['recipe']!r}")
    k = kw.get("kernel", 3)
    if k < 1 or k % 2 == 0:
        raise ConfigError(f"{source}: kernel must be odd, got {k}")
    half = (k - 1) // 2

    has_density, has_sweep = "density" in cp, "sweep" in cp
    if has_density and has_sweep:
        raise ConfigError(f"{source}: give either [density] or [sweep], not both")
    if has_density:
        d = cp["density"]
        kw["central_value"] = d.getfloat("central_value", 1.0)
        coeffs = _floats(d.get("free_coeffs", ""))
        if len(coeffs) != half:
            raise ConfigError(f"{source}: kernel {k} needs {half} free_coeffs, got {len(coeffs)}")
        kw["free_coeffs"] = coeffs
        kw["conv_variant"] = "weighted"
    elif has_sweep:
        s = cp["sweep"]
        kw["central_value"] = s.getfloat("central_value", 1.0)
        grid = []
        for i in range(half):
            key = f"alpha{i + 1}"
            if key not in s:
                raise ConfigError(f"{source}: [sweep] needs {key} for a {k}x{k} kernel")
            grid.append(parse_grid(s[key]))
        _check_grid(grid, k, source)
        kw["grid"] = tuple(grid)
    elif kw.get("conv_variant") == "weighted":
        raise ConfigError(f"{source}: weighted conv needs a [density] or [sweep] section")

    if "optimizer" in cp:
        o = cp["optimizer"]
        base = kw["optimizer"]
        kw["optimizer"] = OptimizerConfig(
            kind=o.get("kind", base.kind),
            lr=o.getfloat("lr", base.lr),
            momentum=o.getfloat("momentum", base.momentum),
            weight_decay=o.getfloat("weight_decay", base.weight_decay),
            beta1=o.getfloat("beta1", base.beta1),
            beta2=o.getfloat("beta2", base.beta2),
        )
    if kw["optimizer"].kind not in ("sgd", "adam"):
        raise ConfigError(f"{source}: optimizer kind must be sgd or adam")
    if "schedule" in cp:
        s = cp["schedule"]
        kw["epochs"] = s.getint("epochs", kw["epochs"])
        kw["cosine"] = s.getboolean("cosine", True)
        kw["min_lr"] = s.getfloat("min_lr", 0.0)
        kw["patience"] = s.getint("patience", 10)
    if kw["epochs"] < 0:
        raise ConfigError(f"{source}: epochs must be >= 0")
    if "train" in cp:
        t = cp["train"]
        kw["batch_size"] = t.getint("batch_size", kw["batch_size"])
        kw["hflip"] = t.getboolean("hflip", kw["hflip"])
    if "loss" in cp:
        lo = cp["loss"]
        kw["loss"] = lo.get("kind", kw["loss"])
        kw["label_smoothing"] = lo.getfloat("label_smoothing", 0.1)
    if kw["loss"] not in ("mse", "cross_entropy"):
        raise ConfigError(f"{source}: loss kind must be mse or cross_entropy")
    if "noise" in cp:
        n = cp["noise"]
        kw["noise_mu"] = n.getfloat("mu", 0.0)
        kw["noise_sigma"] = n.getfloat("sigma", 0.01)
        kw["noise_seed"] = n.getint("seed", 1)
    if kw.get("noise_sigma", 0.01) < 0:
        raise ConfigError(f"{source}: noise sigma must be >= 0")
    if "data" in cp:
        dsec = cp["data"]
        base = DataConfig()
        kw["data"] = DataConfig(
            source=dsec.get("source", base.source),
            cifar_train=dsec.get("cifar_train", ""),
            cifar_test=dsec.get("cifar_test", ""),
            classes=_ints(dsec["classes"]) if "classes" in dsec else base.classes,
            train_per_class=dsec.getint("train_per_class", base.train_per_class),
            test_per_class=dsec.getint("test_per_class", base.test_per_class),
            val_fraction=dsec.getfloat("val_fraction", base.val_fraction),
            ppm_dir=dsec.get("ppm_dir", ""),
            n_images=dsec.getint("n_images", base.n_images),
            image_size=dsec.getint("image_size", base.image_size),
            patch_size=dsec.getint("patch_size", base.patch_size),
            patch_stride=dsec.getint("patch_stride", base.patch_stride),
            split=_floats(dsec["split"]) if "split" in dsec else base.split,
        )
    kw.setdefault("data", DataConfig())
    if kw["data"].source not in ("synthetic", "files"):
        raise ConfigError(f"{source}: data source must be synthetic or files")
    return ExperimentConfig(**kw)


def _check_grid(grid, k, source):
    ranges = GRID_RANGES.get(k)
    for i, values in enumerate(grid):
        if not any(abs(v - 1.0) < 1e-12 for v in values):
            raise ConfigError(
                f"{source}: alpha{i + 1} grid must contain the uniform point 1.0 (baseline comparability)"
            )
        if ranges is not None:
            lo, hi = ranges[i]
            bad = [v for v in values if not lo - 1e-12 <= v <= hi + 1e-12]
            if bad:
                raise ConfigError(f"{source}: alpha{i + 1} values {bad} outside [{lo}, {hi}] for {k}x{k} kernels")


def alpha_label(coeffs) -> str:
    """``0.8`` for one coefficient, ``(0.1, 0.9)`` for several."""
    vals = [repr(round(float(c), 10)) for c in coeffs]
    if len(vals) == 1:
        return vals[0]
    return "(" + ", ".join(vals) + ")"
