"""Convolution inner loops: numba ``@njit`` kernels with a pure-numpy fallback.

The backend is chosen once at import from the ``WCONV_BACKEND`` environment
variable (``numba`` or ``numpy``; default ``numba`` when it imports) and can be
switched at runtime with :func:`set_backend`.

All kernels take a zero-padded batch ``xp`` of shape ``[B, C, Hp, Wp]`` and
cross-correlate it with ``w`` of shape ``[F, C, K, K]``. The numba kernels
accumulate each output element over channel, kernel row, kernel column in
that order. The numpy path goes through BLAS and has no fixed order, so the
two backends agree to rounding, not bitwise.
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

BACKENDS = ("numba", "numpy")


def _initial_backend() -> str:
    requested = os.environ.get("WCONV_BACKEND", "").strip().lower()
    if requested and requested not in BACKENDS:
        raise ValueError(f"WCONV_BACKEND must be one of {BACKENDS}, got {requested!r}")
    if requested == "numpy" or not HAVE_NUMBA:
        return "numpy"
    return "numba"


_backend = _initial_backend()


def get_backend() -> str:
    return _backend


def set_backend(name: str) -> str:
    """Select the kernel backend; returns the previous one."""
    global _backend
    if name not in BACKENDS:
        raise ValueError(f"unknown backend {name!r}; choose from {BACKENDS}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not installed")
    prev, _backend = _backend, name
    return prev


# -- numba ------------------------------------------------------------------

if HAVE_NUMBA:

    # Loops keep one output row hot in cache: batch, output row, filter,
    # then channel, kernel row, kernel column, column.

    @njit(cache=True)
    def _fwd_nb(xp, w, b, stride, ho, wo):
        bsz, c_in = xp.shape[0], xp.shape[1]
        f_out, k = w.shape[0], w.shape[2]
        out = np.zeros((bsz, f_out, ho, wo))
        for n in range(bsz):
            for i in range(ho):
                for f in range(f_out):
                    orow = out[n, f, i]
                    for c in range(c_in):
                        for a in range(k):
                            row = xp[n, c, i * stride + a]
                            for q in range(k):
                                wv = w[f, c, a, q]
                                if stride == 1:
                                    for j in range(wo):
                                        orow[j] += wv * row[j + q]
                                else:
                                    for j in range(wo):
                                        orow[j] += wv * row[j * stride + q]
                    bf = b[f]
                    for j in range(wo):
                        orow[j] += bf
        return out

    @njit(cache=True)
    def _grad_input_nb(g, w, stride, hp, wp):
        bsz, f_out, ho, wo = g.shape
        c_in, k = w.shape[1], w.shape[2]
        gxp = np.zeros((bsz, c_in, hp, wp))
        for n in range(bsz):
            for i in range(ho):
                for c in range(c_in):
                    for a in range(k):
                        trow = gxp[n, c, i * stride + a]
                        for f in range(f_out):
                            grow = g[n, f, i]
                            for q in range(k):
                                wv = w[f, c, a, q]
                                if stride == 1:
                                    for j in range(wo):
                                        trow[j + q] += wv * grow[j]
                                else:
                                    for j in range(wo):
                                        trow[j * stride + q] += wv * grow[j]
        return gxp

    # The per-tap reduction over columns may be reassociated so it
    # vectorises; the result is still fixed for a given build.
    @njit(cache=True, fastmath={"reassoc"})
    def _grad_weight_nb(xp, g, k, stride):
        bsz, c_in = xp.shape[0], xp.shape[1]
        f_out, ho, wo = g.shape[1], g.shape[2], g.shape[3]
        gw = np.zeros((f_out, c_in, k, k))
        gb = np.zeros(f_out)
        for n in range(bsz):
            for i in range(ho):
                for f in range(f_out):
                    grow = g[n, f, i]
                    s = 0.0
                    for j in range(wo):
                        s += grow[j]
                    gb[f] += s
                    for c in range(c_in):
                        for a in range(k):
                            row = xp[n, c, i * stride + a]
                            for q in range(k):
                                acc = 0.0
                                if stride == 1:
                                    for j in range(wo):
                                        acc += grow[j] * row[j + q]
                                else:
                                    for j in range(wo):
                                        acc += grow[j] * row[j * stride + q]
                                gw[f, c, a, q] += acc
        return gw, gb


# -- numpy ------------------------------------------------------------------


def _windows(xp, k, stride, ho, wo):
    # [B, C, Ho, Wo, K, K] strided view; no copy
    v = sliding_window_view(xp, (k, k), axis=(2, 3))
    return v[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def _fwd_np(xp, w, b, stride, ho, wo):
    f_out, c_in, k, _ = w.shape
    cols = _windows(xp, k, stride, ho, wo)
    out = np.einsum("nchwab,fcab->nfhw", cols, w, optimize=True)
    out += b[None, :, None, None]
    return out


def _grad_input_np(g, w, stride, hp, wp):
    bsz, f_out, ho, wo = g.shape
    c_in, k = w.shape[1], w.shape[2]
    gxp = np.zeros((bsz, c_in, hp, wp))
    # [B, C, K, K, Ho, Wo]
    dcols = np.einsum("nfhw,fcab->ncabhw", g, w, optimize=True)
    for a in range(k):
        for q in range(k):
            gxp[:, :, a : a + stride * (ho - 1) + 1 : stride, q : q + stride * (wo - 1) + 1 : stride] += dcols[:, :, a, q]
    return gxp


def _grad_weight_np(xp, g, k, stride):
    ho, wo = g.shape[2], g.shape[3]
    cols = _windows(xp, k, stride, ho, wo)
    gw = np.einsum("nchwab,nfhw->fcab", cols, g, optimize=True)
    gb = g.sum(axis=(0, 2, 3))
    return gw, gb


# -- dispatch ---------------------------------------------------------------


def conv_forward(xp, w, b, stride, ho, wo):
    if _backend == "numba":
        return _fwd_nb(xp, w, b, stride, ho, wo)
    return _fwd_np(xp, w, b, stride, ho, wo)


def conv_grad_input(g, w, stride, hp, wp):
    if _backend == "numba":
        return _grad_input_nb(g, w, stride, hp, wp)
    return _grad_input_np(g, w, stride, hp, wp)


def conv_grad_weight(xp, g, k, stride):
    if _backend == "numba":
        return _grad_weight_nb(xp, g, k, stride)
    return _grad_weight_np(xp, g, k, stride)
