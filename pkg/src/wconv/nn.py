"""Layers, losses, initialisation and the two desk-scale model recipes.

Every layer caches what its backward pass needs during ``forward`` and
fills ``layer.grads`` (same keys and shapes as ``layer.params``) during
``backward``. Activations are ``[B, C, H, W]`` for spatial layers and
``[B, D]`` after ``Flatten``.
"""

from __future__ import annotations

import configparser
import math
from pathlib import Path

import numpy as np

from .conv import ConvGeometry, KernelTensor, conv2d_backward, conv2d_forward, apply_density
from .density import DensityFunction, build_density, uniform_density
from .tensor import DTYPE, load_tensor, make_rng, save_tensor

CONV_VARIANTS = ("standard", "weighted")


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x, train: bool = True):
        raise NotImplementedError

    def backward(self, g):
        raise NotImplementedError

    def config(self) -> dict:
        return {}

    def _take_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{self.kind}: backward called before forward")
        return self._cache

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def __repr__(self):
        cfg = ", ".join(f"{k}={v}" for k, v in self.config().items())
        return f"{type(self).__name__}({cfg})"


class Identity(Layer):
    kind = "identity"

    def forward(self, x, train=True):
        self._cache = True
        return x

    def backward(self, g):
        self._take_cache()
        return g


class Conv2d(Layer):
    """Convolution layer; ``variant="weighted"`` applies a fixed density.

    The density is a hyperparameter, not a trainable parameter, so both
    variants carry exactly ``weight`` and ``bias``.
    """

    kind = "conv2d"

    def __init__(self, in_channels, out_channels, k=3, variant="standard",
                 density: DensityFunction | None = None, padding=None, stride=1):
        super().__init__()
        if variant not in CONV_VARIANTS:
            raise ValueError(f"conv variant must be one of {CONV_VARIANTS}, got {variant!r}")
        if variant == "weighted":
            density = uniform_density(k) if density is None else density
            if density.k != k:
                raise ValueError(f"density is {density.k}x{density.k}, layer kernel is {k}x{k}")
        else:
            density = None
        self.in_channels, self.out_channels, self.k = in_channels, out_channels, k
        self.variant = variant
        self.density = density
        self.geom = ConvGeometry((k - 1) // 2 if padding is None else padding, stride)
        self.params["weight"] = np.zeros((out_channels, in_channels, k, k))
        self.params["bias"] = np.zeros(out_channels)

    @property
    def kernels(self) -> KernelTensor:
        return KernelTensor(self.params["weight"], self.params["bias"])

    def effective_kernels(self) -> KernelTensor:
        # W_phi is rebuilt every call so optimizer updates to W are picked up.
        if self.density is None:
            return self.kernels
        return apply_density(self.kernels, self.density)

    def forward(self, x, train=True):
        kt = self.effective_kernels()
        self._cache = (x, kt)
        return conv2d_forward(x, kt, self.geom)

    def backward(self, g):
        x, kt = self._take_cache()
        gx, gw, gb = conv2d_backward(x, kt, self.geom, g)
        if self.density is not None:
            gw = gw * self.density.phi
        self.grads["weight"], self.grads["bias"] = gw, gb
        return gx

    def config(self):
        cfg = {
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "k": self.k,
            "variant": self.variant,
            "padding": self.geom.padding,
            "stride": self.geom.stride,
        }
        if self.density is not None:
            cfg["density_central"] = self.density.central_value
            cfg["density_free"] = ",".join(repr(c) for c in self.density.free_coeffs)
        return cfg


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=True):
        mask = x > 0
        self._cache = mask
        return np.where(mask, x, 0.0)

    def backward(self, g):
        return np.where(self._take_cache(), g, 0.0)


class MaxPool2d(Layer):
    """Non-overlapping ``size x size`` max pooling; ties route to the first max."""

    kind = "maxpool2d"

    def __init__(self, size=2):
        super().__init__()
        self.size = size

    def forward(self, x, train=True):
        b, c, h, w = x.shape
        s = self.size
        if h % s or w % s:
            raise ValueError(f"maxpool{s}: spatial extents {h}x{w} not divisible by {s}")
        blocks = x.reshape(b, c, h // s, s, w // s, s).transpose(0, 1, 2, 4, 3, 5)
        blocks = blocks.reshape(b, c, h // s, w // s, s * s)
        idx = blocks.argmax(axis=-1)
        self._cache = (x.shape, idx)
        return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(self, g):
        shape, idx = self._take_cache()
        b, c, h, w = shape
        s = self.size
        blocks = np.zeros((b, c, h // s, w // s, s * s))
        np.put_along_axis(blocks, idx[..., None], g[..., None], axis=-1)
        blocks = blocks.reshape(b, c, h // s, w // s, s, s).transpose(0, 1, 2, 4, 3, 5)
        return blocks.reshape(shape)

    def config(self):
        return {"size": self.size}


class BatchNorm2d(Layer):
    """Per-channel batch normalisation.

    Running statistics follow ``running = momentum * running + (1 - momentum) * batch``.
    """

    kind = "batchnorm2d"

    def __init__(self, channels, momentum=0.9, eps=1e-5):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.params["gamma"] = np.ones(channels)
        self.params["beta"] = np.zeros(channels)
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)

    def forward(self, x, train=True):
        gamma = self.params["gamma"][None, :, None, None]
        beta = self.params["beta"][None, :, None, None]
        if not train:
            mean = self.buffers["running_mean"][None, :, None, None]
            var = self.buffers["running_var"][None, :, None, None]
            inv = 1.0 / np.sqrt(var + self.eps)
            self._cache = ("eval", inv)
            return (x - mean) * inv * gamma + beta
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = self.momentum
        self.buffers["running_mean"] = m * self.buffers["running_mean"] + (1 - m) * mean
        self.buffers["running_var"] = m * self.buffers["running_var"] + (1 - m) * var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
        self._cache = ("train", xhat, inv)
        return xhat * gamma + beta

    def backward(self, g):
        cache = self._take_cache()
        gamma = self.params["gamma"]
        if cache[0] == "eval":
            raise RuntimeError("batchnorm2d: backward through eval mode is not supported")
        _, xhat, inv = cache
        self.grads["gamma"] = (g * xhat).sum(axis=(0, 2, 3))
        self.grads["beta"] = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma[None, :, None, None]
        mean_g = gxhat.mean(axis=(0, 2, 3), keepdims=True)
        mean_gx = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        return (gxhat - mean_g - xhat * mean_gx) * inv[None, :, None, None]

    def config(self):
        return {"channels": self.channels, "momentum": self.momentum, "eps": self.eps}


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, train=True):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, g):
        return g.reshape(self._take_cache())


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features, out_features):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        self.params["weight"] = np.zeros((in_features, out_features))
        self.params["bias"] = np.zeros(out_features)

    def forward(self, x, train=True):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ValueError(f"dense expects [B, {self.in_features}], got {x.shape}")
        self._cache = x
        return x @ self.params["weight"] + self.params["bias"]

    def backward(self, g):
        x = self._take_cache()
        self.grads["weight"] = x.T @ g
        self.grads["bias"] = g.sum(axis=0)
        return g @ self.params["weight"].T

    def config(self):
        return {"in_features": self.in_features, "out_features": self.out_features}


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x, train=True):
        p = softmax(x)
        self._cache = p
        return p

    def backward(self, g):
        p = self._take_cache()
        return p * (g - (g * p).sum(axis=-1, keepdims=True))


LAYER_KINDS = {cls.kind: cls for cls in (Identity, Conv2d, ReLU, MaxPool2d, BatchNorm2d, Flatten, Dense, Softmax)}


# -- losses -------------------------------------------------------------------


def cross_entropy_label_smoothing(logits, targets, epsilon=0.1):
    """Softmax cross-entropy against ``(1 - eps) * onehot + eps / n``.

    Returns ``(loss, grad_logits)`` with the loss averaged over the batch.
    """
    logits = np.asarray(logits, dtype=DTYPE)
    targets = np.asarray(targets)
    b, n = logits.shape
    if n < 2:
        raise ValueError("need at least two classes")
    if not 0 <= epsilon < 1:
        raise ValueError(f"label smoothing must be in [0, 1), got {epsilon}")
    if targets.shape != (b,) or targets.min() < 0 or targets.max() >= n:
        raise ValueError(f"class ids must be {b} integers in [0, {n})")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    q = np.full((b, n), epsilon / n)
    q[np.arange(b), targets] += 1.0 - epsilon
    loss = float(-(q * logp).sum() / b)
    grad = (np.exp(logp) - q) / b
    return loss, grad


def mse_loss(pred, target):
    pred = np.asarray(pred, dtype=DTYPE)
    target = np.asarray(target, dtype=DTYPE)
    if pred.shape != target.shape:
        raise ValueError(f"mse: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


# -- initialisation -----------------------------------------------------------


def kaiming_std(fan_in: int) -> float:
    if fan_in <= 0:
        raise ValueError("fan_in must be positive")
    return math.sqrt(2.0 / fan_in)


def kaiming_init(kernels: KernelTensor, rng: np.random.Generator) -> KernelTensor:
    """He-normal weights with std ``sqrt(2 / (C_in K^2))`` and zero bias."""
    f, c, k, _ = kernels.weights.shape
    std = kaiming_std(c * k * k)
    return KernelTensor(rng.normal(0.0, std, size=kernels.weights.shape), np.zeros(f))


def init_model(model: "Model", rng: np.random.Generator) -> None:
    """Kaiming-initialise every conv and dense layer in order."""
    for layer in model.layers:
        if isinstance(layer, Conv2d):
            kt = kaiming_init(layer.kernels, rng)
            layer.params["weight"], layer.params["bias"] = kt.weights, kt.bias
        elif isinstance(layer, Dense):
            std = kaiming_std(layer.in_features)
            layer.params["weight"] = rng.normal(0.0, std, size=layer.params["weight"].shape)
            layer.params["bias"] = np.zeros(layer.out_features)


# -- models -------------------------------------------------------------------


class Model:
    """Ordered layers; with ``residual=True`` the output is ``x - body(x)``."""

    def __init__(self, layers, task="classification", residual=False, name="model"):
        if task not in ("classification", "denoising"):
            raise ValueError(f"unknown task {task!r}")
        self.layers = list(layers)
        self.task = task
        self.residual = residual
        self.name = name
        self._forwarded = False

    def forward(self, x, train=True):
        x = np.asarray(x, dtype=DTYPE)
        h = x
        for layer in self.layers:
            h = layer.forward(h, train)
        self._forwarded = True
        if self.residual:
            if h.shape != x.shape:
                raise ValueError(f"residual body changes shape {x.shape} -> {h.shape}")
            return x - h
        return h

    def backward(self, upstream):
        """Backpropagate ``dL/d(output)``; returns the parameter gradients."""
        if not self._forwarded:
            raise RuntimeError("backward called before forward")
        g = -upstream if self.residual else upstream
        for layer in reversed(self.layers):
            g = layer.backward(g)
        self._forwarded = False
        return self.gradients()

    def named_params(self):
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.params.items()}

    def gradients(self):
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.grads.items()}

    def set_param(self, name, value):
        i, key = name.split(".", 1)
        self.layers[int(i)].params[key] = value

    @property
    def n_params(self) -> int:
        return sum(layer.n_params for layer in self.layers)

    def conv_layers(self):
        return [layer for layer in self.layers if isinstance(layer, Conv2d)]

    def __repr__(self):
        body = "\n".join(f"  {layer!r}" for layer in self.layers)
        return f"Model(name={self.name}, task={self.task}, residual={self.residual})\n{body}"


def model_forward(m: Model, batch, train=True):
    return m.forward(batch, train)


def model_backward(m: Model, upstream):
    return m.backward(upstream)


def _density_for(variant, d, k):
    if variant == "weighted" and d is not None and d.k != k:
        raise ValueError(f"density is {d.k}x{d.k}, recipe uses {k}x{k} kernels")
    return d if variant == "weighted" else None


def build_mini_vgg(n_classes=10, conv_variant="standard", d: DensityFunction | None = None,
                   widths=(16, 32, 64), in_channels=3, image_size=32, k=None, seed=0) -> Model:
    """Three conv-BN-ReLU-pool blocks and a dense head."""
    k = d.k if (k is None and d is not None) else (k or 3)
    d = _density_for(conv_variant, d, k)
    if image_size % 8:
        raise ValueError("image size must be divisible by 8 for three 2x2 pools")
    layers = []
    c = in_channels
    for w in widths[:3]:
        layers += [Conv2d(c, w, k, conv_variant, d), BatchNorm2d(w), ReLU(), MaxPool2d(2)]
        c = w
    side = image_size // 8
    layers += [Flatten(), Dense(c * side * side, n_classes)]
    model = Model(layers, "classification", name="mini-vgg")
    init_model(model, make_rng(seed))
    return model


def build_mini_dncnn(depth=6, width=16, conv_variant="standard", d: DensityFunction | None = None,
                     channels=3, k=None, seed=0, zero_init_last=True) -> Model:
    """Residual denoiser: conv-ReLU, (depth-2) x conv-BN-ReLU, conv.

    The body predicts the noise, the model returns ``input - noise``. With
    ``zero_init_last`` the final conv starts at zero, so the untrained model
    is the identity map.
    """
    if depth < 2:
        raise ValueError(f"depth must be >= 2, got {depth}")
    k = d.k if (k is None and d is not None) else (k or 3)
    d = _density_for(conv_variant, d, k)
    layers = [Conv2d(channels, width, k, conv_variant, d), ReLU()]
    for _ in range(depth - 2):
        layers += [Conv2d(width, width, k, conv_variant, d), BatchNorm2d(width), ReLU()]
    layers.append(Conv2d(width, channels, k, conv_variant, d))
    model = Model(layers, "denoising", residual=True, name="mini-dncnn")
    init_model(model, make_rng(seed))
    if zero_init_last:
        last = layers[-1]
        last.params["weight"] = np.zeros_like(last.params["weight"])
        last.params["bias"] = np.zeros_like(last.params["bias"])
    return model


# -- checkpoints --------------------------------------------------------------
#
# <dir>/manifest.ini lists the model and one [layer.N] section per layer;
# parameters and buffers live next to it as WCTENSOR files "N.<name>.wct".


def save_model(model: Model, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cp = configparser.ConfigParser()
    cp["model"] = {
        "format": "1",
        "name": model.name,
        "task": model.task,
        "residual": str(model.residual).lower(),
        "layers": str(len(model.layers)),
    }
    for i, layer in enumerate(model.layers):
        sec = {"kind": layer.kind}
        sec.update({k: str(v) for k, v in layer.config().items()})
        sec["params"] = ",".join(layer.params)
        sec["buffers"] = ",".join(layer.buffers)
        cp[f"layer.{i}"] = sec
        for name, arr in {**layer.params, **layer.buffers}.items():
            save_tensor(directory / f"{i}.{name}.wct", arr)
    with open(directory / "manifest.ini", "w") as fh:
        cp.write(fh)
    return directory


def _layer_from_section(sec) -> Layer:
    kind = sec["kind"]
    if kind == "conv2d":
        k = int(sec["k"])
        d = None
        if sec["variant"] == "weighted":
            free = [float(v) for v in sec.get("density_free", "").split(",") if v.strip()]
            d = build_density(k, float(sec["density_central"]), free)
        return Conv2d(int(sec["in_channels"]), int(sec["out_channels"]), k, sec["variant"], d,
                      int(sec["padding"]), int(sec["stride"]))
    if kind == "batchnorm2d":
        return BatchNorm2d(int(sec["channels"]), float(sec["momentum"]), float(sec["eps"]))
    if kind == "dense":
        return Dense(int(sec["in_features"]), int(sec["out_features"]))
    if kind == "maxpool2d":
        return MaxPool2d(int(sec["size"]))
    if kind in LAYER_KINDS:
        return LAYER_KINDS[kind]()
    raise ValueError(f"unknown layer kind {kind!r} in manifest")


def load_model(directory) -> Model:
    directory = Path(directory)
    cp = configparser.ConfigParser()
    if not cp.read(directory / "manifest.ini"):
        raise FileNotFoundError(f"no manifest.ini in {directory}")
    meta = cp["model"]
    layers = []
    for i in range(int(meta["layers"])):
        sec = cp[f"layer.{i}"]
        layer = _layer_from_section(sec)
        for name in filter(None, sec.get("params", "").split(",")):
            layer.params[name] = load_tensor(directory / f"{i}.{name}.wct")
        for name in filter(None, sec.get("buffers", "").split(",")):
            layer.buffers[name] = load_tensor(directory / f"{i}.{name}.wct")
        layers.append(layer)
    return Model(layers, meta["task"], meta["residual"] == "true", meta["name"])
