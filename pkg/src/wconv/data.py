"""Dataset ingestion: CIFAR-100 binaries, Netpbm images, noise, augmentation.

CIFAR-100 binary records are 3074 bytes: coarse label, fine label, then
3072 pixel bytes stored channel-planar (R, G, B), each plane row-major.
Images are returned as float64 ``[N, 3, 32, 32]`` in ``[0, 1]``.

Netpbm support covers binary P5 (gray) and P6 (RGB) with ``maxval = 255``.
Images load as ``[C, H, W]`` float64 in ``[0, 1]``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import make_rng

CIFAR_RECORD = 3074
CIFAR_PIXELS = 3072
CIFAR_FINE = 100
CIFAR_COARSE = 20


@dataclass
class LabeledImageSet:
    images: np.ndarray  # [N, 3, 32, 32]
    fine: np.ndarray  # [N]
    coarse: np.ndarray  # [N]

    def __post_init__(self):
        n = len(self.images)
        if n == 0:
            raise ValueError("empty image set")
        if len(self.fine) != n or len(self.coarse) != n:
            raise ValueError("label arrays do not match image count")

    def __len__(self):
        return len(self.images)

    def subset(self, idx) -> "LabeledImageSet":
        return LabeledImageSet(self.images[idx], self.fine[idx], self.coarse[idx])


class CifarFormatError(ValueError):
    pass


def parse_cifar100(raw: bytes, source: str = "<bytes>") -> LabeledImageSet:
    if len(raw) == 0:
        raise CifarFormatError(f"{source}: empty file; expected records of {CIFAR_RECORD} bytes")
    if len(raw) % CIFAR_RECORD:
        raise CifarFormatError(
            f"{source}: size {len(raw)} is not a multiple of {CIFAR_RECORD} bytes "
            "(1 coarse label byte, 1 fine label byte, 3072 pixel bytes R,G,B planes row-major)"
        )
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    coarse = rec[:, 0].astype(np.int64)
    fine = rec[:, 1].astype(np.int64)
    if coarse.max() >= CIFAR_COARSE:
        bad = int(np.argmax(coarse >= CIFAR_COARSE))
        raise CifarFormatError(f"{source}: record {bad} has coarse label {coarse[bad]} >= {CIFAR_COARSE}")
    if fine.max() >= CIFAR_FINE:
        bad = int(np.argmax(fine >= CIFAR_FINE))
        raise CifarFormatError(f"{source}: record {bad} has fine label {fine[bad]} >= {CIFAR_FINE}")
    images = rec[:, 2:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return LabeledImageSet(images, fine, coarse)


def load_cifar100(path) -> LabeledImageSet:
    path = Path(path)
    return parse_cifar100(path.read_bytes(), str(path))


def to_bytes(images) -> np.ndarray:
    """Quantise ``[0, 1]`` floats to uint8 by rounding."""
    return np.clip(np.rint(np.asarray(images) * 255.0), 0, 255).astype(np.uint8)


def save_cifar100(path, data: LabeledImageSet) -> None:
    n = len(data)
    rec = np.empty((n, CIFAR_RECORD), dtype=np.uint8)
    rec[:, 0] = data.coarse
    rec[:, 1] = data.fine
    rec[:, 2:] = to_bytes(data.images).reshape(n, CIFAR_PIXELS)
    Path(path).write_bytes(rec.tobytes())


# -- Netpbm ---------------------------------------------------------------------


class PPMFormatError(ValueError):
    pass


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*([^\s#]+)")


def parse_ppm(raw: bytes, source: str = "<bytes>") -> np.ndarray:
    pos = 0
    tokens = []
    for _ in range(4):
        m = _TOKEN.match(raw, pos)
        if not m:
            raise PPMFormatError(f"{source}: truncated or malformed header")
        tokens.append(m.group(1))
        pos = m.end()
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise PPMFormatError(f"{source}: unsupported magic {magic!r}, expected P5 or P6")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise PPMFormatError(f"{source}: non-numeric header field") from None
    if width < 1 or height < 1:
        raise PPMFormatError(f"{source}: bad dimensions {width}x{height}")
    if maxval != 255:
        raise PPMFormatError(f"{source}: maxval {maxval} unsupported, only 255")
    if pos >= len(raw) or not raw[pos : pos + 1].isspace():
        raise PPMFormatError(f"{source}: missing whitespace after header")
    pos += 1
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    if len(raw) - pos < need:
        raise PPMFormatError(f"{source}: raster has {len(raw) - pos} bytes, need {need}")
    pix = np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos)
    return pix.reshape(height, width, channels).transpose(2, 0, 1).astype(np.float64) / 255.0


def load_ppm(path) -> np.ndarray:
    path = Path(path)
    return parse_ppm(path.read_bytes(), str(path))


def encode_ppm(image) -> bytes:
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ValueError(f"expected [1|3, H, W] image, got {img.shape}")
    c, h, w = img.shape
    magic = b"P6" if c == 3 else b"P5"
    return magic + f"\n{w} {h}\n255\n".encode() + to_bytes(img).transpose(1, 2, 0).tobytes()


def save_ppm(path, image) -> None:
    """Write a P6 (3 channels) or P5 (1 channel or 2-D) file; values clipped to [0, 1]."""
    Path(path).write_bytes(encode_ppm(image))


def load_ppm_dir(directory) -> list[np.ndarray]:
    files = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in (".ppm", ".pgm", ".pnm"))
    if not files:
        raise FileNotFoundError(f"no .ppm/.pgm images in {directory}")
    return [load_ppm(p) for p in files]


# -- noise, augmentation, patches, splits -------------------------------------


@dataclass(frozen=True)
class NoiseConfig:
    mu: float = 0.0
    sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")


def add_gaussian_noise(images, cfg: NoiseConfig) -> np.ndarray:
    """``x + n`` with ``n ~ N(mu, sigma^2)``; no clipping."""
    images = np.asarray(images, dtype=np.float64)
    if cfg.sigma == 0 and cfg.mu == 0:
        return images.copy()
    rng = make_rng(cfg.seed)
    return images + rng.normal(cfg.mu, cfg.sigma, size=images.shape)


def random_hflip(batch, p: float = 0.5, rng: np.random.Generator | None = None) -> np.ndarray:
    """Mirror each ``[.., H, W]`` image along width independently with probability ``p``."""
    batch = np.asarray(batch)
    if p <= 0:
        return batch.copy()
    rng = rng if rng is not None else make_rng(0)
    flip = rng.random(len(batch)) < p
    out = batch.copy()
    out[flip] = out[flip][..., ::-1]
    return out


def extract_patches(image, size: int, stride: int | None = None, count: int | None = None,
                    rng: np.random.Generator | None = None) -> np.ndarray:
    """Patches of ``[C, size, size]`` from a ``[C, H, W]`` image.

    Tiles on a regular grid with ``stride`` (default ``size``) or, when
    ``count`` and ``rng`` are given, samples ``count`` random positions.
    """
    image = np.asarray(image)
    _, h, w = image.shape
    if size > h or size > w:
        raise ValueError(f"patch size {size} exceeds image extent {h}x{w}")
    if count is not None:
        if rng is None:
            raise ValueError("random patch sampling needs an rng")
        ys = rng.integers(0, h - size + 1, count)
        xs = rng.integers(0, w - size + 1, count)
        return np.stack([image[:, y : y + size, x : x + size] for y, x in zip(ys, xs)])
    stride = stride or size
    return np.stack([
        image[:, y : y + size, x : x + size]
        for y in range(0, h - size + 1, stride)
        for x in range(0, w - size + 1, stride)
    ])


def split(n_items: int, fractions: Sequence[float], seed: int = 0) -> list[np.ndarray]:
    """Partition ``range(n_items)`` into shuffled index sets.

    Every part but the first gets ``round(f * n)`` items; the first takes
    the remainder.
    """
    if abs(sum(fractions) - 1.0) > 1e-9 or any(f < 0 for f in fractions):
        raise ValueError(f"fractions must be non-negative and sum to 1, got {fractions}")
    perm = make_rng(seed).permutation(n_items)
    sizes = [int(round(f * n_items)) for f in fractions[1:]]
    first = n_items - sum(sizes)
    if first < 0:
        raise ValueError("fractions round to more items than available")
    bounds = np.cumsum([first] + sizes)[:-1]
    return [np.sort(part) for part in np.split(perm, bounds)]


# -- synthetic stand-ins ----------------------------------------------------------


def synthetic_cifar(n_per_class: int, classes: Sequence[int] = tuple(range(10)), seed: int = 0) -> LabeledImageSet:
    """CIFAR-format images whose classes differ in texture orientation, frequency and hue.

    Each class owns one (orientation, spatial frequency, colour) triple; samples
    add random phase, contrast, brightness, a random blob and pixel noise.
    Used where the real dataset is unavailable.
    """
    rng = make_rng(seed)
    yy, xx = np.mgrid[0:32, 0:32] / 32.0
    images, fine = [], []
    for ci, cls in enumerate(classes):
        crng = make_rng(10_000 + int(cls))
        angle = np.pi * ci / len(classes) + crng.uniform(-0.1, 0.1)
        freq = (2.0, 4.0, 6.0)[ci % 3] + crng.uniform(-0.3, 0.3)
        hue = crng.uniform(0.2, 0.8, size=3)
        for _ in range(n_per_class):
            a = angle + rng.normal(0, 0.12)
            f = freq * rng.uniform(0.85, 1.15)
            phase = rng.uniform(0, 2 * np.pi)
            wave = np.sin(2 * np.pi * f * (xx * np.cos(a) + yy * np.sin(a)) + phase)
            cy, cx, r = rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.08, 0.2)
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
            contrast = rng.uniform(0.15, 0.3)
            col = np.clip(hue + rng.normal(0, 0.08, 3), 0.05, 0.95)
            img = col[:, None, None] + contrast * wave[None] + rng.uniform(-0.3, 0.3) * blob[None]
            img += rng.normal(0, 0.05, size=img.shape)
            images.append(np.clip(img, 0, 1))
            fine.append(cls)
    images = np.rint(np.stack(images) * 255) / 255
    fine = np.array(fine, dtype=np.int64)
    order = rng.permutation(len(fine))
    return LabeledImageSet(images[order], fine[order], fine[order] % CIFAR_COARSE)


def synthetic_image(height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth RGB scene: shaded background, soft blobs and a few hard-edged shapes."""
    yy, xx = np.mgrid[0:height, 0:width]
    yy = yy / height
    xx = xx / width
    img = np.empty((3, height, width))
    for c in range(3):
        g = rng.uniform(-0.3, 0.3, 2)
        img[c] = rng.uniform(0.3, 0.7) + g[0] * (xx - 0.5) + g[1] * (yy - 0.5)
    for _ in range(int(rng.integers(3, 7))):
        cy, cx = rng.uniform(0, 1, 2)
        r = rng.uniform(0.05, 0.25)
        amp = rng.uniform(-0.35, 0.35, 3)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
        img += amp[:, None, None] * blob[None]
    for _ in range(int(rng.integers(1, 4))):
        y0, x0 = rng.uniform(0, 0.8, 2)
        hh, ww = rng.uniform(0.1, 0.4, 2)
        mask = (yy >= y0) & (yy < y0 + hh) & (xx >= x0) & (xx < x0 + ww)
        img[:, mask] += rng.uniform(-0.25, 0.25, 3)[:, None]
    return np.rint(np.clip(img, 0, 1) * 255) / 255


def write_synthetic_corpus(directory, n_images: int = 12, size: int = 96, seed: int = 0) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = make_rng(seed)
    paths = []
    for i in range(n_images):
        p = directory / f"{i:04d}.ppm"
        save_ppm(p, synthetic_image(size, size, rng))
        paths.append(p)
    return paths
