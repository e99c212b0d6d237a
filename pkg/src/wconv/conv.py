"""Standard and density-weighted 2D convolution, forward and backward.

Convolution here means cross-correlation (no kernel flip), the usual CNN
meaning. Inputs are ``[C, H, W]`` images or ``[B, C, H, W]`` batches;
outputs follow the input's rank.

The weighted variant multiplies every ``K x K`` kernel slice by the same
density ``phi`` before convolving. ``W_phi`` is rebuilt from ``(W, phi)`` on
every call so that optimizer updates to ``W`` are always seen.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .density import DensityFunction
from .tensor import DTYPE, make_rng


@dataclass(frozen=True, eq=False)
class KernelTensor:
    weights: np.ndarray  # [F, C_in, K, K]
    bias: np.ndarray  # [F]

    def __post_init__(self):
        w, b = self.weights, self.bias
        if w.ndim != 4:
            raise ValueError(f"weights must be [F, C_in, K, K], got shape {w.shape}")
        f, c, ka, kb = w.shape
        if f < 1 or c < 1:
            raise ValueError(f"need F >= 1 and C_in >= 1, got {w.shape}")
        if ka != kb or ka % 2 == 0:
            raise ValueError(f"kernels must be square with odd extent, got {ka}x{kb}")
        if b.shape != (f,):
            raise ValueError(f"bias must have shape ({f},), got {b.shape}")

    @classmethod
    def of(cls, weights, bias=None) -> "KernelTensor":
        w = np.ascontiguousarray(weights, dtype=DTYPE)
        b = np.zeros(w.shape[0]) if bias is None else np.ascontiguousarray(bias, dtype=DTYPE)
        return cls(w, b)

    @property
    def filters(self) -> int:
        return self.weights.shape[0]

    @property
    def channels(self) -> int:
        return self.weights.shape[1]

    @property
    def k(self) -> int:
        return self.weights.shape[2]

    @property
    def n_params(self) -> int:
        return self.weights.size + self.bias.size


@dataclass(frozen=True)
class ConvGeometry:
    padding: int = 0
    stride: int = 1

    def __post_init__(self):
        if self.padding < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")

    @classmethod
    def same(cls, k: int) -> "ConvGeometry":
        """Resolution-preserving geometry: pad (K-1)/2, stride 1."""
        return cls(padding=(k - 1) // 2, stride=1)

    def out_extent(self, n: int, k: int) -> int:
        span = n + 2 * self.padding - k
        if span < 0:
            raise ValueError(f"kernel {k} larger than padded extent {n + 2 * self.padding}")
        if span % self.stride:
            raise ValueError(
                f"extent {n} with padding {self.padding}, kernel {k} is not divisible by stride {self.stride}"
            )
        return span // self.stride + 1


def _batched(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"input must be [C, H, W] or [B, C, H, W], got shape {x.shape}")


def _pad(x, p):
    if p == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _check(x4, kernels: KernelTensor, geom: ConvGeometry):
    if x4.shape[1] != kernels.channels:
        raise ValueError(f"input has {x4.shape[1]} channels, kernels expect {kernels.channels}")
    ho = geom.out_extent(x4.shape[2], kernels.k)
    wo = geom.out_extent(x4.shape[3], kernels.k)
    return ho, wo


def conv2d_forward(x, kernels: KernelTensor, geom: ConvGeometry) -> np.ndarray:
    x4, single = _batched(x)
    ho, wo = _check(x4, kernels, geom)
    out = _kernels.conv_forward(
        _pad(x4, geom.padding), kernels.weights, kernels.bias, geom.stride, ho, wo
    )
    return out[0] if single else out


def apply_density(kernels: KernelTensor, d: DensityFunction) -> KernelTensor:
    """Return ``W_phi``: every filter/channel slice multiplied by ``phi``."""
    if d.k != kernels.k:
        raise ValueError(f"density is {d.k}x{d.k} but kernels are {kernels.k}x{kernels.k}")
    return KernelTensor(kernels.weights * d.phi, kernels.bias)


def wconv2d_forward(x, kernels: KernelTensor, d: DensityFunction, geom: ConvGeometry) -> np.ndarray:
    return conv2d_forward(x, apply_density(kernels, d), geom)


def conv2d_backward(x, kernels: KernelTensor, geom: ConvGeometry, upstream):
    """Gradients of the forward map given ``dL/d(output)``.

    Returns ``(grad_input, grad_weights, grad_bias)``.
    """
    x4, single = _batched(x)
    ho, wo = _check(x4, kernels, geom)
    g = np.asarray(upstream, dtype=DTYPE)
    g4 = g[None] if single and g.ndim == 3 else g
    expected = (x4.shape[0], kernels.filters, ho, wo)
    if g4.shape != expected:
        raise ValueError(f"upstream gradient has shape {g.shape}, expected {expected[single:]}")
    g4 = np.ascontiguousarray(g4)
    p = geom.padding
    xp = _pad(x4, p)
    gxp = _kernels.conv_grad_input(g4, kernels.weights, geom.stride, xp.shape[2], xp.shape[3])
    gx = gxp[:, :, p : p + x4.shape[2], p : p + x4.shape[3]]
    gw, gb = _kernels.conv_grad_weight(xp, g4, kernels.k, geom.stride)
    gx = np.ascontiguousarray(gx)
    return (gx[0] if single else gx), gw, gb


def wconv2d_backward(x, kernels: KernelTensor, d: DensityFunction, geom: ConvGeometry, upstream):
    """Gradients with respect to the raw weights ``W``; ``phi`` stays fixed.

    By the chain rule ``dL/dW = phi * dL/dW_phi``.
    """
    kphi = apply_density(kernels, d)
    gx, gw_phi, gb = conv2d_backward(x, kphi, geom, upstream)
    return gx, gw_phi * d.phi, gb


def overhead_samples(n: int, c: int, f: int, k: int, reps: int = 50, seed: int = 0):
    """Paired per-call forward times ``(standard[reps], weighted[reps])`` in seconds."""
    if reps < 10:
        raise ValueError("reps must be >= 10")
    from .density import build_density

    rng = make_rng(seed)
    x = rng.standard_normal((c, n, n))
    kernels = KernelTensor.of(rng.standard_normal((f, c, k, k)), rng.standard_normal(f))
    d = build_density(k, 1.0, [0.8] * ((k - 1) // 2))
    geom = ConvGeometry.same(k)

    def standard():
        conv2d_forward(x, kernels, geom)

    def weighted():
        wconv2d_forward(x, kernels, d, geom)

    standard()
    weighted()
    clock = time.perf_counter
    # batch calls per timed sample so each sample spans >= ~5 ms
    t0 = clock()
    standard()
    inner = max(1, int(5e-3 / max(clock() - t0, 1e-9)))

    def timed(fn):
        t0 = clock()
        for _ in range(inner):
            fn()
        return (clock() - t0) / inner

    ts, tw = np.empty(reps), np.empty(reps)
    for r in range(reps):
        # alternate which variant goes first so ordering effects cancel
        if r % 2:
            tw[r] = timed(weighted)
            ts[r] = timed(standard)
        else:
            ts[r] = timed(standard)
            tw[r] = timed(weighted)
    return ts, tw


def overhead_benchmark(n: int, c: int, f: int, k: int, reps: int = 50, seed: int = 0):
    """Median forward wall-clock of standard vs weighted convolution.

    Both variants see the same ``[c, n, n]`` input and kernels with "same"
    padding. Samples are taken in adjacent pairs, after an untimed warm-up.

    Returns ``(t_standard, t_weighted)`` in seconds.
    """
    ts, tw = overhead_samples(n, c, f, k, reps, seed)
    return float(np.median(ts)), float(np.median(tw))


def overhead_ratio(n: int, c: int, f: int, k: int, reps: int = 50, seed: int = 0) -> float:
    """Median over ``reps`` of the paired weighted/standard time ratio.

    Pairing cancels machine-load drift that a ratio of two separate
    medians would pick up, which matters when the true overhead is ~1%.
    """
    ts, tw = overhead_samples(n, c, f, k, reps, seed)
    return float(np.median(tw / ts))
