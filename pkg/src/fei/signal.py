"""FFT utilities, mask sampling and construction of masked target series.

Arrays follow the ``(..., channels, length)`` layout. Spectra use the
unnormalized forward / ``1/L``-scaled inverse convention of ``numpy.fft``.
"""

from __future__ import annotations

import numpy as np

from fei.errors import ConfigError, InvalidInputError

STRATEGIES = ("dfm", "cfm", "tdm")


def num_bins(length: int) -> int:
    """Number of one-sided frequency bins for a real series of ``length``."""
    return length // 2 + 1


def _check_finite(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("series contains non-finite values")


def rfft(x: np.ndarray) -> np.ndarray:
    """One-sided spectrum along the last axis."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 2:
        raise InvalidInputError(f"series length must be >= 2, got {x.shape[-1]}")
    _check_finite(x)
    return np.fft.rfft(x, axis=-1)


def irfft(spectrum: np.ndarray, length: int) -> np.ndarray:
    spectrum = np.asarray(spectrum)
    if spectrum.shape[-1] != num_bins(length):
        raise InvalidInputError(
            f"spectrum has {spectrum.shape[-1]} bins, expected {num_bins(length)} for length {length}"
        )
    return np.fft.irfft(spectrum, n=length, axis=-1)


def _check_ratios(beta1: float, beta2: float) -> None:
    if not (0.0 <= beta1 < beta2 < 1.0):
        raise ConfigError(f"mask ratios must satisfy 0 <= beta1 < beta2 < 1, got ({beta1}, {beta2})")


def mask_count(ratio: float, dim: int, beta1: float = 0.0, beta2: float = 1.0) -> int:
    """``round(ratio * dim)`` (half-up), kept so that ``k / dim`` stays inside ``[beta1, beta2]``."""
    k = int(np.floor(ratio * dim + 0.5))
    lo = int(np.ceil(beta1 * dim - 1e-9))
    hi = int(np.floor(beta2 * dim + 1e-9))
    return min(max(k, lo), hi)


def _draw_count(dim: int, beta1: float, beta2: float, rng: np.random.Generator) -> int:
    _check_ratios(beta1, beta2)
    return mask_count(rng.uniform(beta1, beta2), dim, beta1, beta2)


def sample_mask_dfm(n: int, beta1: float, beta2: float, rng: np.random.Generator) -> np.ndarray:
    """Discrete frequency mask: ``k`` bins picked uniformly without replacement."""
    k = _draw_count(n, beta1, beta2, rng)
    bits = np.zeros(n, dtype=np.int8)
    if k:
        bits[rng.choice(n, size=k, replace=False)] = 1
    return bits


def sample_mask_cfm(n: int, beta1: float, beta2: float, rng: np.random.Generator) -> np.ndarray:
    """Continuous frequency mask: one contiguous run of ``k`` bins at a uniform start."""
    k = _draw_count(n, beta1, beta2, rng)
    bits = np.zeros(n, dtype=np.int8)
    if k:
        start = int(rng.integers(0, n - k + 1))
        bits[start:start + k] = 1
    return bits


def sample_mask_tdm(length: int, beta1: float, beta2: float, rng: np.random.Generator) -> np.ndarray:
    """Time-domain mask: ``k_t`` time steps picked uniformly without replacement."""
    return sample_mask_dfm(length, beta1, beta2, rng)


def sample_mask(strategy: str, length: int, beta1: float, beta2: float,
                rng: np.random.Generator) -> np.ndarray:
    """Sample one mask for a series of ``length`` steps under ``strategy``.

    Frequency strategies return ``num_bins(length)`` bits, ``tdm`` returns ``length`` bits.
    """
    if strategy == "dfm":
        return sample_mask_dfm(num_bins(length), beta1, beta2, rng)
    if strategy == "cfm":
        return sample_mask_cfm(num_bins(length), beta1, beta2, rng)
    if strategy == "tdm":
        return sample_mask_tdm(length, beta1, beta2, rng)
    raise ConfigError(f"unknown masking strategy {strategy!r}; expected one of {STRATEGIES}")


def mask_dim(strategy: str, length: int) -> int:
    return length if strategy == "tdm" else num_bins(length)


def apply_frequency_mask(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Remove the masked frequency components of ``x``.

    ``mask`` has shape ``(n,)`` (shared by every series and channel) or
    ``(batch, n)`` for a ``(batch, channels, length)`` input; the mask of a
    sample is shared across its channels.
    """
    x = np.asarray(x, dtype=np.float64)
    length = x.shape[-1]
    mask = np.asarray(mask)
    if mask.shape[-1] != num_bins(length):
        raise InvalidInputError(
            f"frequency mask has {mask.shape[-1]} bins, expected {num_bins(length)}"
        )
    keep = 1.0 - mask.astype(np.float64)
    if mask.ndim == 2:
        keep = keep[:, None, :]
    return irfft(rfft(x) * keep, length)


def apply_time_mask(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero the masked time steps of ``x``; mask layout as in :func:`apply_frequency_mask`."""
    x = np.asarray(x, dtype=np.float64)
    mask = np.asarray(mask)
    if mask.shape[-1] != x.shape[-1]:
        raise InvalidInputError(f"time mask has {mask.shape[-1]} steps, expected {x.shape[-1]}")
    keep = 1.0 - mask.astype(np.float64)
    if mask.ndim == 2:
        keep = keep[:, None, :]
    return x * keep


def apply_mask(strategy: str, x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    if strategy == "tdm":
        return apply_time_mask(x, mask)
    return apply_frequency_mask(x, mask)
