"""Discrete rank-1 density functions ``phi = alpha alpha^T`` for square kernels.

For an odd kernel extent ``k`` with centre index ``m = (k + 1) / 2`` the
vector ``alpha`` is symmetric about its centre and pinned to
``central_value`` there, so it is fully described by ``(k - 1) / 2`` free
coefficients given from the outside in::

    k = 5, free_coeffs = (a1, a2)  ->  alpha = (a1, a2, M, a2, a1)
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

RANK_TOL = 1e-12
EIG_FLOOR = -1e-12


@dataclass(frozen=True, eq=False)
class DensityFunction:
    k: int
    central_value: float
    free_coeffs: tuple[float, ...]
    alpha: np.ndarray
    phi: np.ndarray

    @property
    def is_uniform(self) -> bool:
        return bool(np.all(self.phi == 1.0))

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "central_value": self.central_value,
            "free_coeffs": list(self.free_coeffs),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DensityFunction":
        return build_density(int(d["k"]), float(d["central_value"]), d["free_coeffs"])

    def __repr__(self) -> str:
        coeffs = ", ".join(f"{c:g}" for c in self.free_coeffs)
        return f"DensityFunction(k={self.k}, M={self.central_value:g}, free=({coeffs}))"


def _check_k(k: int) -> None:
    if int(k) != k or k < 1 or k % 2 == 0:
        raise ValueError(f"kernel extent must be an odd integer >= 1, got {k}")


def assemble_alpha(k: int, central_value: float, free_coeffs: Sequence[float]) -> np.ndarray:
    _check_k(k)
    half = (k - 1) // 2
    coeffs = [float(c) for c in free_coeffs]
    if len(coeffs) != half:
        raise ValueError(f"k={k} needs {half} free coefficients, got {len(coeffs)}")
    values = coeffs + [float(central_value)]
    if not all(math.isfinite(v) for v in values):
        raise ValueError("density coefficients must be finite")
    return np.array(coeffs + [float(central_value)] + coeffs[::-1], dtype=np.float64)


def build_density(k: int, central_value: float = 1.0, free_coeffs: Sequence[float] = ()) -> DensityFunction:
    """Assemble ``alpha`` from its free coefficients and form ``phi``."""
    alpha = assemble_alpha(k, central_value, free_coeffs)
    phi = np.outer(alpha, alpha)
    alpha.setflags(write=False)
    phi.setflags(write=False)
    return DensityFunction(
        k=int(k),
        central_value=float(central_value),
        free_coeffs=tuple(float(c) for c in free_coeffs),
        alpha=alpha,
        phi=phi,
    )


def uniform_density(k: int) -> DensityFunction:
    """All-ones density; a weighted layer using it is a standard convolution."""
    _check_k(k)
    return build_density(k, 1.0, [1.0] * ((k - 1) // 2))


def validate_density(d: DensityFunction) -> list[str]:
    """Return a list of human-readable invariant violations (empty when valid)."""
    out: list[str] = []
    k = d.k
    if int(k) != k or k < 1 or k % 2 == 0:
        return [f"kernel extent {k} is not an odd integer >= 1"]
    half = (k - 1) // 2
    alpha = np.asarray(d.alpha, dtype=np.float64)
    phi = np.asarray(d.phi, dtype=np.float64)

    if len(d.free_coeffs) != half:
        out.append(f"expected {half} free coefficients, found {len(d.free_coeffs)}")
    if alpha.shape != (k,):
        out.append(f"alpha has shape {alpha.shape}, expected ({k},)")
    if phi.shape != (k, k):
        out.append(f"phi has shape {phi.shape}, expected ({k}, {k})")
    if out:
        return out
    if not (np.all(np.isfinite(alpha)) and np.all(np.isfinite(phi))):
        return ["non-finite entries in alpha or phi"]

    if not np.array_equal(alpha, alpha[::-1]):
        out.append("alpha is not symmetric about its centre")
    if alpha[half] != d.central_value:
        out.append(f"central node alpha[{half}]={alpha[half]!r} != M={d.central_value!r}")
    if len(d.free_coeffs) == half:
        expected = np.array(list(d.free_coeffs) + [d.central_value] + list(d.free_coeffs)[::-1])
        if not np.array_equal(alpha, expected):
            out.append("alpha does not match its free coefficients")
    if not np.array_equal(phi, phi.T):
        out.append("phi is not symmetric")
    if not np.array_equal(phi, np.outer(alpha, alpha)):
        out.append("phi != outer(alpha, alpha)")

    eig = np.linalg.eigvalsh((phi + phi.T) / 2)
    if eig.min() < EIG_FLOOR:
        out.append(f"phi is not positive semidefinite (min eigenvalue {eig.min():.3e})")
    sv = np.linalg.svd(phi, compute_uv=False)
    if sv[0] > 0 and k > 1 and sv[1] > RANK_TOL * sv[0]:
        out.append(f"phi is not rank 1 (sigma2/sigma1 = {sv[1] / sv[0]:.3e})")
    return out
