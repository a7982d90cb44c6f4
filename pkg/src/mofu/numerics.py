"""Dense numeric primitives: 2D FFT, normalization, error maps, resizing, grad checks.

Arrays are plain ``numpy.ndarray`` in float64 unless noted. Spectra are complex128
arrays with the same shape as the real input.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

LAYER_NORM_EPS = 1e-6
IMAG_RESIDUAL_TOL = 1e-8


class NonFiniteError(ValueError):
    """A numeric primitive received NaN or Inf."""


def _require_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what}: input contains NaN or Inf")


def _dft_last(x: np.ndarray, sign: int) -> np.ndarray:
    """O(n^2) DFT along the last axis. Also the test oracle for the fast path."""
    n = x.shape[-1]
    k = np.arange(n)
    w = np.exp(sign * 2j * np.pi * np.outer(k, k) / n)
    return x @ w.T


def _fft_last(x: np.ndarray, sign: int) -> np.ndarray:
    n = x.shape[-1]
    if n == 1:
        return x.astype(np.complex128)
    if n & (n - 1):
        return _dft_last(x, sign)
    even = _fft_last(x[..., 0::2], sign)
    odd = _fft_last(x[..., 1::2], sign)
    twiddled = np.exp(sign * 2j * np.pi * np.arange(n // 2) / n) * odd
    return np.concatenate([even + twiddled, even - twiddled], axis=-1)


def _transform2(x: np.ndarray, sign: int) -> np.ndarray:
    out = _fft_last(np.asarray(x, dtype=np.complex128), sign)
    out = _fft_last(np.swapaxes(out, -1, -2), sign)
    return np.ascontiguousarray(np.swapaxes(out, -1, -2))


def naive_dft2(x: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Double-sum DFT over the last two axes (unnormalized in both directions)."""
    sign = 1 if inverse else -1
    out = _dft_last(np.asarray(x, dtype=np.complex128), sign)
    out = _dft_last(np.swapaxes(out, -1, -2), sign)
    return np.swapaxes(out, -1, -2)


def fft2(t: np.ndarray) -> np.ndarray:
    """Unnormalized forward 2D DFT over the last two axes.

    Radix-2 Cooley-Tukey on power-of-two extents, direct DFT otherwise.
    """
    t = np.asarray(t)
    if t.ndim < 2:
        raise ValueError("fft2 needs at least two axes")
    _require_finite(t, "fft2")
    return _transform2(t, -1)


def ifft2(c: np.ndarray) -> np.ndarray:
    """Inverse 2D DFT with 1/(H*W) normalization; returns the real part.

    Raises if the imaginary residual is not negligible, which means the
    spectrum was not Hermitian (i.e. did not come from a real signal).
    """
    c = np.asarray(c, dtype=np.complex128)
    if c.ndim < 2:
        raise ValueError("ifft2 needs at least two axes")
    _require_finite(c, "ifft2")
    h, w = c.shape[-2:]
    out = _transform2(c, 1) / (h * w)
    re, im = out.real, out.imag
    scale = max(1.0, float(np.max(np.abs(re))) if re.size else 1.0)
    residual = float(np.max(np.abs(im))) if im.size else 0.0
    if residual >= IMAG_RESIDUAL_TOL * scale:
        raise ValueError(
            f"ifft2: imaginary residual {residual:.3e} exceeds tolerance; "
            "spectrum is not conjugate-symmetric"
        )
    return np.ascontiguousarray(re)


def layer_norm(t: np.ndarray, eps: float = LAYER_NORM_EPS) -> np.ndarray:
    """Normalize over the trailing axis with population variance."""
    t = np.asarray(t, dtype=np.float64)
    if t.shape[-1] == 0:
        raise ValueError("layer_norm: feature axis has length 0")
    mu = t.mean(axis=-1, keepdims=True)
    centered = t - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / np.sqrt(var + eps)


def softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0 or v.shape[axis] == 0:
        raise ValueError("softmax: empty input")
    _require_finite(v, "softmax")
    shifted = np.exp(v - v.max(axis=axis, keepdims=True))
    return shifted / shifted.sum(axis=axis, keepdims=True)


def sq_err_map(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"sq_err_map: shape mismatch {pred.shape} vs {target.shape}")
    d = pred - target
    return d * d


def _interp_axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # align-corners sample positions; a single output sample sits at the centre
    if n_out == 1:
        pos = np.array([(n_in - 1) / 2.0])
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.clip(np.floor(pos).astype(int), 0, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    return lo, hi, frac


def resize_bilinear(m: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of the last two axes with align-corners semantics."""
    m = np.asarray(m, dtype=np.float64)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"resize_bilinear: output extents must be >= 1, got {out_h}x{out_w}")
    h, w = m.shape[-2:]
    if h < 1 or w < 1:
        raise ValueError("resize_bilinear: empty input")
    if (h, w) == (out_h, out_w):
        return m.copy()
    y0, y1, fy = _interp_axis(h, out_h)
    x0, x1, fx = _interp_axis(w, out_w)
    rows = m[..., y0, :] * (1 - fy)[:, None] + m[..., y1, :] * fy[:, None]
    out = rows[..., x0] * (1 - fx) + rows[..., x1] * fx
    return np.clip(out, m.min(), m.max())


@dataclass
class GradReport:
    analytic: dict[str, np.ndarray]
    numeric: dict[str, np.ndarray]
    max_rel_error: float
    worst: tuple[str, tuple[int, ...]] | None = None
    n_checked: int = 0
    per_param: dict[str, float] = field(default_factory=dict)


def rel_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)


def grad_check(
    loss_fn: Callable[[Mapping[str, object]], object],
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
    grad_fn: Callable[[Mapping[str, np.ndarray]], Mapping[str, np.ndarray]] | None = None,
) -> GradReport:
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` maps a dict of parameters to a scalar. Without ``grad_fn`` the
    analytic gradient comes from running ``loss_fn`` on autograd variables.
    """
    from mofu import autograd as ag

    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def value(p: Mapping[str, np.ndarray]) -> float:
        with ag.no_grad():
            out = loss_fn(p)
        return float(out.data if isinstance(out, ag.Var) else out)

    f0 = value(base)
    if value(base) != f0:
        raise ValueError("grad_check: loss_fn is not deterministic (re-evaluation differs)")

    if grad_fn is not None:
        analytic = {k: np.asarray(g, dtype=np.float64) for k, g in grad_fn(base).items()}
    else:
        leaves = {k: ag.Var(v.copy(), requires_grad=True) for k, v in base.items()}
        out = loss_fn(leaves)
        if not isinstance(out, ag.Var):
            raise TypeError("grad_check: loss_fn must return a Var when grad_fn is absent")
        out.backward()
        analytic = {k: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data))
                    for k, leaf in leaves.items()}

    numeric: dict[str, np.ndarray] = {}
    worst_err, worst = 0.0, None
    per_param: dict[str, float] = {}
    n = 0
    for name, arr in base.items():
        fd = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = value(base)
            flat[i] = orig - h
            fm = value(base)
            flat[i] = orig
            fd.reshape(-1)[i] = (fp - fm) / (2 * h)
        numeric[name] = fd
        err = rel_error(analytic[name], fd)
        n += err.size
        if err.size:
            idx = np.unravel_index(int(np.argmax(err)), err.shape)
            per_param[name] = float(err[idx])
            if err[idx] > worst_err:
                worst_err, worst = float(err[idx]), (name, tuple(int(j) for j in idx))
    return GradReport(analytic, numeric, worst_err, worst, n, per_param)
