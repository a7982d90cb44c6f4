"""Fourier Fusion of reference feature maps.

Each reference map is moved to the frequency domain, split into high and low
bands with a radial binary mask, summed band-wise across references and
brought back with an inverse FFT. Summation follows a canonical order (sorted
by content hash) so the result does not depend on input order at all.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from mofu import autograd as ag
from mofu.numerics import NonFiniteError, fft2, ifft2

DEFAULT_CUTOFF = 0.25


@dataclass(frozen=True)
class FrequencyMask:
    grid: np.ndarray  # (H, W), 1 marks the high-frequency band
    cutoff_ratio: float


@dataclass
class FusedCondition:
    feature: np.ndarray  # (d, H, W)
    n_refs: int
    cutoff_ratio: float


def _signed_freqs(n: int) -> np.ndarray:
    # DFT bin k -> signed frequency in [-n/2, n/2)
    k = np.arange(n)
    return np.where(k < (n + 1) // 2, k, k - n).astype(np.float64)


def radial_radius(h: int, w: int) -> np.ndarray:
    """Normalized radial frequency per DFT bin (0 at DC, 1 at the largest bin radius)."""
    u = _signed_freqs(h)[:, None] / h
    v = _signed_freqs(w)[None, :] / w
    r = np.sqrt(u * u + v * v)
    r_max = r.max()
    return r / r_max if r_max > 0 else r


def radial_mask(h: int, w: int, cutoff_ratio: float = DEFAULT_CUTOFF) -> FrequencyMask:
    if not 0.0 < cutoff_ratio < 1.0:
        raise ValueError(f"cutoff_ratio must lie in (0, 1), got {cutoff_ratio}")
    if h < 1 or w < 1:
        raise ValueError("radial_mask: extents must be >= 1")
    r = radial_radius(h, w)
    grid = (r > cutoff_ratio).astype(np.float64)
    grid[0, 0] = 0.0
    return FrequencyMask(grid, float(cutoff_ratio))


def decompose(spectrum: np.ndarray, mask: FrequencyMask) -> tuple[np.ndarray, np.ndarray]:
    """Split a spectrum (..., H, W) into (high, low) bands; the mask broadcasts over leading axes."""
    if spectrum.shape[-2:] != mask.grid.shape:
        raise ValueError(f"decompose: spectrum {spectrum.shape[-2:]} vs mask {mask.grid.shape}")
    sel = mask.grid.astype(bool)
    hf = np.where(sel, spectrum, 0)
    lf = np.where(sel, 0, spectrum)
    return hf, lf


def content_key(a: np.ndarray) -> str:
    a = np.ascontiguousarray(a, dtype=np.float64)
    return hashlib.sha256(a.tobytes() + repr(a.shape).encode()).hexdigest()


def canonical_order(arrays: Sequence[np.ndarray]) -> list[int]:
    keys = [content_key(a) for a in arrays]
    return sorted(range(len(arrays)), key=lambda i: (keys[i], i))


def _check_features(features: Sequence[np.ndarray]) -> None:
    if len(features) == 0:
        raise ValueError("fuse: need at least one reference feature map")
    shape = features[0].shape
    if len(shape) < 2:
        raise ValueError("fuse: feature maps need spatial axes")
    for f in features[1:]:
        if f.shape != shape:
            raise ValueError(f"fuse: shape mismatch {f.shape} vs {shape}")
    for f in features:
        if not np.all(np.isfinite(f)):
            raise NonFiniteError("fuse: non-finite feature values")


def band_filter(mask: FrequencyMask, band_weights: tuple[float, float]) -> np.ndarray:
    w_hf, w_lf = band_weights
    return w_hf * mask.grid + w_lf * (1.0 - mask.grid)


def fuse_arrays(
    features: Sequence[np.ndarray],
    cutoff_ratio: float = DEFAULT_CUTOFF,
    band_weights: tuple[float, float] = (1.0, 1.0),
    canonical: bool = True,
) -> np.ndarray:
    features = [np.asarray(f, dtype=np.float64) for f in features]
    _check_features(features)
    mask = radial_mask(*features[0].shape[-2:], cutoff_ratio)
    order = canonical_order(features) if canonical else list(range(len(features)))
    hf_sum = lf_sum = None
    for i in order:
        hf, lf = decompose(fft2(features[i]), mask)
        hf_sum = hf if hf_sum is None else hf_sum + hf
        lf_sum = lf if lf_sum is None else lf_sum + lf
    w_hf, w_lf = band_weights
    return ifft2(w_hf * hf_sum + w_lf * lf_sum)


def fuse(
    features: Sequence[np.ndarray],
    cutoff_ratio: float = DEFAULT_CUTOFF,
    band_weights: tuple[float, float] = (1.0, 1.0),
    canonical: bool = True,
) -> FusedCondition:
    out = fuse_arrays(features, cutoff_ratio, band_weights, canonical)
    return FusedCondition(out, len(features), float(cutoff_ratio))


def fuse_var(
    features: Sequence[ag.Var],
    cutoff_ratio: float = DEFAULT_CUTOFF,
    band_weights: tuple[float, float] = (1.0, 1.0),
    canonical: bool = True,
) -> ag.Var:
    """Differentiable fusion.

    The map from each input to the output is the real linear filter
    x -> Re IFFT(G * FFT(x)) with G = w_hf*M + w_lf*(1-M). Its adjoint applies
    conj(G), which is what the backward pass does.
    """
    feats = [ag.as_var(f) for f in features]
    out = fuse_arrays([f.data for f in feats], cutoff_ratio, band_weights, canonical)
    g_filter = band_filter(radial_mask(*out.shape[-2:], cutoff_ratio), band_weights)

    def bw(g):
        back = ifft2(np.conj(g_filter) * fft2(g))
        for f in feats:
            if f.requires_grad:
                f._accumulate(back)

    return ag.custom(out, feats, bw)
