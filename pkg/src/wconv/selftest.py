"""Quick invariant checks runnable from an installed package (``wconv selftest``).

Each check returns ``None`` on success or a short failure description. The
suite is a smoke screen for broken installs; the pytest suite is the real
verification.
"""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np

from . import _kernels
from .conv import ConvGeometry, KernelTensor, conv2d_backward, conv2d_forward, wconv2d_forward
from .data import LabeledImageSet, encode_ppm, parse_cifar100, parse_ppm, save_cifar100, to_bytes
from .density import build_density, uniform_density, validate_density
from .harness.config import GRID_RANGES
from .metrics import fsim, nrmse, psnr, ssim, uiq
from .tensor import make_rng


def naive_conv(x, w, b, pad, stride):
    """Direct six-loop cross-correlation of one ``[C, H, W]`` image."""
    c, h, wd = x.shape
    f, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.empty((f, ho, wo))
    for o in range(f):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for ch in range(c):
                    for u in range(k):
                        for v in range(k):
                            acc += xp[ch, i * stride + u, j * stride + v] * w[o, ch, u, v]
                out[o, i, j] = acc + b[o]
    return out


def _random_case(rng, max_hw=8, ks=(1, 3, 5)):
    k = int(rng.choice(ks))
    c, f = int(rng.integers(1, 4)), int(rng.integers(1, 5))
    h, w = int(rng.integers(k, max_hw + 1)), int(rng.integers(k, max_hw + 1))
    x = rng.standard_normal((c, h, w))
    kern = KernelTensor.of(rng.standard_normal((f, c, k, k)), rng.standard_normal(f))
    return x, kern, k


def check_uniform_reduction():
    rng = make_rng(11)
    for _ in range(30):
        x, kern, k = _random_case(rng)
        geom = ConvGeometry.same(k)
        if not np.array_equal(wconv2d_forward(x, kern, uniform_density(k), geom), conv2d_forward(x, kern, geom)):
            return f"uniform density changed the output for k={k}"
    return None


def check_oracle():
    rng = make_rng(12)
    for _ in range(20):
        x, kern, k = _random_case(rng)
        d = build_density(k, 1.0, rng.uniform(0.5, 1.5, (k - 1) // 2))
        geom = ConvGeometry.same(k)
        err = np.abs(wconv2d_forward(x, kern, d, geom) - naive_conv(x, kern.weights * d.phi, kern.bias, k // 2, 1)).max()
        if err > 1e-12:
            return f"weighted conv deviates from the loop oracle by {err:.3g}"
    return None


def check_gradient():
    rng = make_rng(13)
    x = rng.standard_normal((2, 5, 5))
    kern = KernelTensor.of(rng.standard_normal((2, 2, 3, 3)), rng.standard_normal(2))
    geom = ConvGeometry.same(3)
    up = rng.standard_normal((2, 5, 5))
    _, gw, _ = conv2d_backward(x, kern, geom, up)
    h = 1e-5
    idx = (1, 0, 2, 1)
    wp, wm = kern.weights.copy(), kern.weights.copy()
    wp[idx] += h
    wm[idx] -= h
    fd = (np.sum(conv2d_forward(x, KernelTensor(wp, kern.bias), geom) * up)
          - np.sum(conv2d_forward(x, KernelTensor(wm, kern.bias), geom) * up)) / (2 * h)
    rel = abs(fd - gw[idx]) / max(abs(fd), 1e-12)
    return None if rel < 1e-6 else f"weight gradient off by relative {rel:.3g}"


def check_densities():
    for k, ranges in GRID_RANGES.items():
        for lo, hi in ranges:
            for v in np.linspace(lo, hi, 5):
                problems = validate_density(build_density(k, 1.0, [v] * len(ranges)))
                if problems:
                    return f"k={k}, coeff {v}: {problems[0]}"
    return None


def check_metrics():
    rng = make_rng(14)
    img = rng.uniform(0.1, 0.9, (3, 24, 24))
    if psnr(img, img) != np.inf or nrmse(img, img) != 0.0:
        return "identity pair does not give psnr=inf / nrmse=0"
    for name, fn in (("ssim", ssim), ("fsim", fsim), ("uiq", uiq)):
        if abs(fn(img, img) - 1.0) > 1e-12:
            return f"{name} of an identity pair is not 1"
    return None


def check_parsers():
    rng = make_rng(15)
    img = rng.integers(0, 256, (3, 5, 7)) / 255.0
    if not np.array_equal(parse_ppm(encode_ppm(img)), img):
        return "PPM round trip is not exact"
    ds = LabeledImageSet(rng.integers(0, 256, (4, 3, 32, 32)) / 255.0, np.arange(4), np.arange(4) % 20)
    with tempfile.TemporaryDirectory() as tmp:
        p = Path(tmp) / "t.bin"
        save_cifar100(p, ds)
        back = parse_cifar100(p.read_bytes())
    if not (np.array_equal(to_bytes(back.images), to_bytes(ds.images)) and np.array_equal(back.fine, ds.fine)):
        return "CIFAR round trip is not exact"
    return None


def check_backends():
    if not _kernels.HAVE_NUMBA:
        return None
    rng = make_rng(16)
    x = rng.standard_normal((2, 3, 9, 9))
    kern = KernelTensor.of(rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4))
    geom = ConvGeometry.same(3)
    outs = []
    prev = _kernels.get_backend()
    try:
        for name in _kernels.BACKENDS:
            _kernels.set_backend(name)
            outs.append(conv2d_forward(x, kern, geom))
    finally:
        _kernels.set_backend(prev)
    err = np.abs(outs[0] - outs[1]).max()
    return None if err < 1e-12 else f"backends disagree by {err:.3g}"


CHECKS = {
    "uniform density reduces to standard conv": check_uniform_reduction,
    "conv matches loop oracle": check_oracle,
    "finite-difference weight gradient": check_gradient,
    "density grid validity": check_densities,
    "metric identities": check_metrics,
    "parser round trips": check_parsers,
    "backend agreement": check_backends,
}


def run_selftest() -> list[tuple[str, str | None]]:
    results = []
    for name, fn in CHECKS.items():
        try:
            results.append((name, fn()))
        except Exception as exc:  # report, don't crash the suite
            results.append((name, f"{type(exc).__name__}: {exc}"))
    return results
