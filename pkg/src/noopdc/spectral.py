"""2-D DFT, high-frequency energy ratio and Gaussian noise statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _dft_matrix(n: int, sign: float) -> np.ndarray:
    k = np.arange(n)
    return np.exp(sign * 2j * np.pi * np.outer(k, k) / n)


def dft2(image: np.ndarray) -> np.ndarray:
    """F(u, v) = sum_x sum_y f(x, y) exp(-j 2 pi (u x / M + v y / N)), evaluated directly."""
    f = np.asarray(image)
    if f.ndim != 2 or f.size == 0:
        raise ValueError(f"dft2 needs a nonempty 2-D array, got shape {f.shape}")
    m, n = f.shape
    return _dft_matrix(m, -1.0) @ f.astype(np.complex128) @ _dft_matrix(n, -1.0)


def idft2(spectrum: np.ndarray) -> np.ndarray:
    """Inverse of ``dft2`` including the 1/(MN) factor. Returns a complex array."""
    F = np.asarray(spectrum, dtype=np.complex128)
    if F.ndim != 2 or F.size == 0:
        raise ValueError(f"idft2 needs a nonempty 2-D array, got shape {F.shape}")
    m, n = F.shape
    return _dft_matrix(m, 1.0) @ F @ _dft_matrix(n, 1.0) / (m * n)


def radial_distance(m: int, n: int) -> np.ndarray:
    """Distance of each centred-spectrum bin from DC, normalised to 1 at the corner."""
    u = np.arange(m) - m // 2
    v = np.arange(n) - n // 2
    r = np.sqrt(u[:, None] ** 2 + v[None, :] ** 2)
    return r / np.sqrt((m // 2) ** 2 + (n // 2) ** 2) if r.max() > 0 else r


def high_freq_ratio(image: np.ndarray, cutoff: float = 0.3) -> float:
    """Fraction of spectral energy in bins whose normalised radius exceeds ``cutoff``.

    Accepts (H, W) or channel-first (C, H, W) / (1, C, H, W); channels are
    averaged. An all-zero image has ratio 0.
    """
    if not 0 < cutoff < 1:
        raise ValueError(f"cutoff must be in (0, 1), got {cutoff}")
    x = np.asarray(image, dtype=np.float64)
    while x.ndim > 3 and x.shape[0] == 1:
        x = x[0]
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ValueError(f"expected (H, W) or (C, H, W), got shape {np.shape(image)}")
    high = radial_distance(*x.shape[1:]) > cutoff
    ratios = []
    for ch in x:
        energy = np.abs(np.fft.fftshift(dft2(ch))) ** 2
        total = energy.sum()
        ratios.append(0.0 if total == 0 else float(energy[high].sum() / total))
    return float(np.mean(ratios))


@dataclass(frozen=True)
class NoiseStats:
    mean: float
    variance: float
    log_pdf: float


def noise_stats(eps: np.ndarray) -> NoiseStats:
    """Mean, biased variance and standard-normal log density of the flattened tensor."""
    x = np.asarray(eps, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("noise_stats needs a nonempty tensor")
    log_pdf = -0.5 * x.size * np.log(2 * np.pi) - 0.5 * float(np.dot(x, x))
    return NoiseStats(mean=float(x.mean()), variance=float(x.var()), log_pdf=float(log_pdf))
