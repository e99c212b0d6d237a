"""Classification and full-reference image quality metrics.

Images are ``[H, W]`` grayscale or ``[C, H, W]`` arrays with dynamic range
``[0, L]`` (``L = 1`` by default). PSNR and NRMSE use every channel; SSIM,
UIQ and FSIM work on the luminance ``0.299 R + 0.587 G + 0.114 B`` of RGB
inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

METRIC_NAMES = ("accuracy", "f1", "nrmse", "psnr", "ssim", "fsim", "uiq")

# -- classification -----------------------------------------------------------


@dataclass
class ConfusionMatrix:
    """``counts[i, j]`` = samples of true class ``i`` predicted as ``j``."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise ValueError("confusion counts must be non-negative")

    @classmethod
    def from_labels(cls, true, pred, n: int) -> "ConfusionMatrix":
        true = np.asarray(true, dtype=np.int64)
        pred = np.asarray(pred, dtype=np.int64)
        if true.shape != pred.shape:
            raise ValueError("true and predicted label streams differ in length")
        if true.size and (min(true.min(), pred.min()) < 0 or max(true.max(), pred.max()) >= n):
            raise ValueError(f"labels must lie in [0, {n})")
        counts = np.zeros((n, n), dtype=np.int64)
        np.add.at(counts, (true, pred), 1)
        return cls(counts)

    @property
    def n(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def _nonempty(cm: ConfusionMatrix):
    if cm.total == 0:
        raise ValueError("confusion matrix holds no samples")


def accuracy(cm: ConfusionMatrix) -> float:
    _nonempty(cm)
    return float(np.trace(cm.counts) / cm.total)


def f1_per_class(cm: ConfusionMatrix) -> np.ndarray:
    _nonempty(cm)
    tp = np.diag(cm.counts).astype(np.float64)
    fp = cm.counts.sum(axis=0) - tp
    fn = cm.counts.sum(axis=1) - tp
    denom = tp + 0.5 * (fp + fn)
    with np.errstate(invalid="ignore", divide="ignore"):
        f1 = np.where(denom > 0, tp / denom, 0.0)
    return f1


def f1_score(cm: ConfusionMatrix) -> float:
    """Macro average of the per-class ``TP / (TP + (FP + FN) / 2)``."""
    return float(f1_per_class(cm).mean())


# -- image helpers --------------------------------------------------------------


def luminance(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[0] == 1:
        return img[0]
    if img.ndim == 3 and img.shape[0] == 3:
        return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    raise ValueError(f"expected [H, W], [1, H, W] or [3, H, W] image, got {img.shape}")


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"image shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def psnr(pred, gt, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    pred, gt = _pair(pred, gt)
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def nrmse(pred, gt) -> float:
    """``||pred - gt|| / ||gt||`` (Euclidean)."""
    pred, gt = _pair(pred, gt)
    norm = float(np.linalg.norm(gt))
    if norm == 0:
        raise ValueError("nrmse undefined for an all-zero ground truth")
    return float(np.linalg.norm(pred - gt)) / norm


# -- SSIM -----------------------------------------------------------------------


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img, g1d):
    """Separable 'valid' correlation with the 1-D window ``g1d`` on both axes."""
    n = g1d.size
    rows = sliding_window_view(img, n, axis=1) @ g1d
    return sliding_window_view(rows, n, axis=0) @ g1d


def ssim_map(pred, gt, data_range: float = 1.0, win: int = 11, sigma: float = 1.5) -> np.ndarray:
    x, y = luminance(pred), luminance(gt)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    if min(x.shape) < win:
        raise ValueError(f"image {x.shape} smaller than the {win}x{win} SSIM window")
    g = gaussian_window(win, sigma)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ssim(pred, gt, data_range: float = 1.0) -> float:
    """Mean SSIM over valid 11x11 Gaussian (sigma 1.5) windows."""
    return float(ssim_map(pred, gt, data_range).mean())


# -- UIQ ------------------------------------------------------------------------


def uiq(pred, gt, win: int = 8) -> float:
    """Universal image quality index averaged over sliding ``win x win`` windows.

    Per window ``Q = 4 s_xy mx my / ((s_x^2 + s_y^2)(mx^2 + my^2))``. When one
    factor of the denominator vanishes the remaining well-defined factor is
    used (``2 s_xy / (s_x^2 + s_y^2)`` or ``2 mx my / (mx^2 + my^2)``); windows
    where both vanish are skipped.
    """
    x, y = luminance(pred), luminance(gt)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    if min(x.shape) < win:
        raise ValueError(f"image {x.shape} smaller than the {win}x{win} UIQ window")
    box = np.full(win, 1.0 / win)
    mx, my = _filter_valid(x, box), _filter_valid(y, box)
    sxx = _filter_valid(x * x, box) - mx * mx
    syy = _filter_valid(y * y, box) - my * my
    sxy = _filter_valid(x * y, box) - mx * my
    # clean cancellation noise so constant windows read as exactly zero variance
    tol = 1e-12 * max(1.0, float(np.abs(x).max()), float(np.abs(y).max())) ** 2
    contrast = sxx + syy
    lum = mx * mx + my * my
    contrast = np.where(np.abs(contrast) <= tol, 0.0, contrast)
    lum = np.where(np.abs(lum) <= tol, 0.0, lum)
    sxy = np.where(contrast == 0, 0.0, sxy)

    q = np.full(contrast.shape, np.nan)
    both = (contrast != 0) & (lum != 0)
    q[both] = 4 * sxy[both] * mx[both] * my[both] / (contrast[both] * lum[both])
    only_c = (contrast != 0) & (lum == 0)
    q[only_c] = 2 * sxy[only_c] / contrast[only_c]
    only_l = (contrast == 0) & (lum != 0)
    q[only_l] = 2 * mx[only_l] * my[only_l] / lum[only_l]
    valid = ~np.isnan(q)
    if not valid.any():
        return math.nan
    return float(q[valid].mean())


# -- FSIM -----------------------------------------------------------------------

_PC_NSCALE = 4
_PC_NORIENT = 4
_PC_MIN_WAVELENGTH = 6
_PC_MULT = 2
_PC_SIGMA_ON_F = 0.55
_PC_DTHETA_ON_SIGMA = 1.2
_PC_K = 2.0
_PC_EPS = 1e-4
_FSIM_T1 = 0.85
_FSIM_T2 = 160.0


def _freq_grid(n):
    if n % 2:
        return np.arange(-(n - 1) / 2, (n - 1) / 2 + 1) / (n - 1)
    return np.arange(-n / 2, n / 2) / n


def phase_congruency(img) -> np.ndarray:
    """Log-Gabor phase congruency map summed over orientations.

    4 scales, 4 orientations, minimum wavelength 6, scale factor 2,
    ``sigma_on_f = 0.55``, noise threshold ``k = 2``.
    """
    img = np.asarray(img, dtype=np.float64)
    rows, cols = img.shape
    imfft = np.fft.fft2(img)
    x, y = np.meshgrid(_freq_grid(cols), _freq_grid(rows))
    radius = np.fft.ifftshift(np.sqrt(x * x + y * y))
    theta = np.fft.ifftshift(np.arctan2(-y, x))
    radius[0, 0] = 1.0
    sintheta, costheta = np.sin(theta), np.cos(theta)
    lowpass = 1.0 / (1.0 + (radius / 0.45) ** 30)

    log_gabor = []
    for s in range(_PC_NSCALE):
        fo = 1.0 / (_PC_MIN_WAVELENGTH * _PC_MULT**s)
        lg = np.exp(-(np.log(radius / fo) ** 2) / (2 * math.log(_PC_SIGMA_ON_F) ** 2)) * lowpass
        lg[0, 0] = 0.0
        log_gabor.append(lg)

    theta_sigma = math.pi / _PC_NORIENT / _PC_DTHETA_ON_SIGMA
    energy_all = np.zeros((rows, cols))
    an_all = np.zeros((rows, cols))
    for o in range(_PC_NORIENT):
        angl = o * math.pi / _PC_NORIENT
        ds = sintheta * math.cos(angl) - costheta * math.sin(angl)
        dc = costheta * math.cos(angl) + sintheta * math.sin(angl)
        spread = np.exp(-(np.arctan2(ds, dc) ** 2) / (2 * theta_sigma**2))

        sum_e = np.zeros((rows, cols))
        sum_o = np.zeros((rows, cols))
        sum_an = np.zeros((rows, cols))
        eo = []
        ifft_filters = []
        for s in range(_PC_NSCALE):
            filt = log_gabor[s] * spread
            ifft_filters.append(np.real(np.fft.ifft2(filt)) * math.sqrt(rows * cols))
            resp = np.fft.ifft2(imfft * filt)
            eo.append(resp)
            sum_an += np.abs(resp)
            sum_e += resp.real
            sum_o += resp.imag
            if s == 0:
                em_n = float(np.sum(filt**2))
        x_energy = np.sqrt(sum_e**2 + sum_o**2) + _PC_EPS
        mean_e, mean_o = sum_e / x_energy, sum_o / x_energy
        energy = np.zeros((rows, cols))
        for resp in eo:
            e, od = resp.real, resp.imag
            energy += e * mean_e + od * mean_o - np.abs(e * mean_o - od * mean_e)

        # noise threshold from the smallest scale's response statistics
        median_e2n = float(np.median(np.abs(eo[0]) ** 2))
        noise_power = (-median_e2n / math.log(0.5)) / em_n if em_n > 0 else 0.0
        sum_an2 = sum(float(np.sum(f**2)) for f in ifft_filters)
        sum_aiaj = sum(
            float(np.sum(ifft_filters[i] * ifft_filters[j]))
            for i in range(_PC_NSCALE)
            for j in range(i + 1, _PC_NSCALE)
        )
        est_noise_energy2 = 2 * noise_power * sum_an2 + 4 * noise_power * sum_aiaj
        tau = math.sqrt(max(est_noise_energy2, 0.0) / 2)
        threshold = (tau * math.sqrt(math.pi / 2) + _PC_K * math.sqrt((2 - math.pi / 2) * tau**2)) / 1.7
        energy_all += np.maximum(energy - threshold, 0.0)
        an_all += sum_an
    with np.errstate(invalid="ignore", divide="ignore"):
        pc = np.where(an_all > 0, energy_all / an_all, 0.0)
    return pc


def _conv2_same(img, kernel):
    # true convolution (kernel flipped), zero boundary
    k = kernel[::-1, ::-1]
    p = k.shape[0] // 2
    padded = np.pad(img, p)
    return np.einsum("ijab,ab->ij", sliding_window_view(padded, k.shape), k)


_SCHARR_X = np.array([[3, 0, -3], [10, 0, -10], [3, 0, -3]], dtype=np.float64) / 16
_SCHARR_Y = _SCHARR_X.T.copy()


def fsim(pred, gt, data_range: float = 1.0) -> float:
    """Feature similarity index on luminance.

    Images are rescaled to [0, 255] internally so the stock constants
    ``T1 = 0.85`` and ``T2 = 160`` apply. Images with a side above 256 are
    box-filtered and decimated by ``round(min_side / 256)`` first.
    """
    x = luminance(pred) * (255.0 / data_range)
    y = luminance(gt) * (255.0 / data_range)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    if min(x.shape) < 8:
        raise ValueError(f"image {x.shape} too small for FSIM (need at least 8x8)")
    f = max(1, round(min(x.shape) / 256))
    if f > 1:
        box = np.full((f, f), 1.0 / (f * f))
        x = _conv2_same(x, box)[::f, ::f]
        y = _conv2_same(y, box)[::f, ::f]
    pc1, pc2 = phase_congruency(x), phase_congruency(y)
    g1 = np.hypot(_conv2_same(x, _SCHARR_X), _conv2_same(x, _SCHARR_Y))
    g2 = np.hypot(_conv2_same(y, _SCHARR_X), _conv2_same(y, _SCHARR_Y))
    s_pc = (2 * pc1 * pc2 + _FSIM_T1) / (pc1**2 + pc2**2 + _FSIM_T1)
    s_g = (2 * g1 * g2 + _FSIM_T2) / (g1**2 + g2**2 + _FSIM_T2)
    pcm = np.maximum(pc1, pc2)
    total = float(pcm.sum())
    if total <= 0:
        # no phase structure anywhere: fall back to the unweighted similarity
        return float(np.mean(s_pc * s_g))
    return float(np.sum(s_pc * s_g * pcm) / total)


def image_metrics(pred, gt, data_range: float = 1.0) -> dict:
    """All five image metrics for one pair."""
    return {
        "nrmse": nrmse(pred, gt),
        "psnr": psnr(pred, gt, data_range),
        "ssim": ssim(pred, gt, data_range),
        "fsim": fsim(pred, gt, data_range),
        "uiq": uiq(pred, gt),
    }
