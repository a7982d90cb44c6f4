"""Scale-Permutation Stability Loss and the flow-matching target it re-weights."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from mofu import autograd as ag
from mofu.conditioning import ReferenceImage
from mofu.fusion import DEFAULT_CUTOFF, fuse_var
from mofu.numerics import resize_bilinear, softmax

SCALE_EPS = 1e-15  # only guards an all-zero map; keeps uniform-M loss equal to the MSE to ~1e-15


def flow_match_target(x0, noise, t) -> tuple[np.ndarray, np.ndarray]:
    """Rectified-flow path x_t = (1 - t) x0 + t * noise with velocity target noise - x0.

    ``t`` is a scalar or one value per batch item (leading axis).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if x0.shape != noise.shape:
        raise ValueError(f"flow_match_target: shape mismatch {x0.shape} vs {noise.shape}")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= 0.0) or np.any(t >= 1.0):
        raise ValueError("flow_match_target: t must lie strictly inside (0, 1)")
    tb = t.reshape(t.shape + (1,) * (x0.ndim - t.ndim)) if t.ndim else t
    return (1.0 - tb) * x0 + tb * noise, noise - x0


@dataclass
class MaskSet:
    masks: list[np.ndarray]  # per reference, reference-image resolution
    area_ratios: np.ndarray

    def __post_init__(self):
        self.area_ratios = np.asarray(self.area_ratios, dtype=np.float64)
        if len(self.masks) == 0:
            raise ValueError("MaskSet needs at least one reference mask")
        if len(self.masks) != self.area_ratios.size:
            raise ValueError("one area ratio per mask")
        if np.any(self.area_ratios <= 0) or np.any(self.area_ratios > 1):
            raise ValueError("area ratios must lie in (0, 1]")

    @classmethod
    def from_references(cls, refs: Sequence[ReferenceImage]) -> "MaskSet":
        return cls([r.subject_mask for r in refs], [r.area_ratio for r in refs])

    @property
    def weights(self) -> np.ndarray:
        return softmax(self.area_ratios)


def combine_masks(masks: Sequence[np.ndarray], weights: Sequence[float], lat_h: int, lat_w: int) -> np.ndarray:
    """sum_r weights_r * Resize(m_r) on a lat_h x lat_w grid."""
    if len(masks) == 0 or len(masks) != len(weights):
        raise ValueError("combine_masks: need one weight per mask and at least one mask")
    out = np.zeros((lat_h, lat_w))
    for wr, m in zip(weights, masks):
        out = out + wr * resize_bilinear(m, lat_h, lat_w)
    return out


def spatial_weight_map(masks: MaskSet, lat_h: int, lat_w: int) -> np.ndarray:
    """M = sum_r softmax(a)_r * Resize(m_r) on the latent grid."""
    return combine_masks(masks.masks, masks.weights, lat_h, lat_w)


def scale_loss(err_map, weight_map, eps: float = SCALE_EPS):
    """sum(err * M) / (sum(M) + eps) with M broadcast over batch, channel and time.

    ``err_map`` is (B, C, T, H, W); ``weight_map`` is (H, W) or per-sample (B, H, W).
    The denominator sums M after broadcasting to err_map's shape.
    """
    err = ag.as_var(err_map)
    m = np.asarray(weight_map, dtype=np.float64)
    if np.any(m < 0):
        raise ValueError("scale_loss: weight map has negative entries")
    if m.ndim == 3:
        m = m[:, None, None]
    full = np.broadcast_to(m, err.shape)
    return (err * full).sum() * (1.0 / (full.sum() + eps))


def sq_err(pred, target) -> ag.Var:
    pred = ag.as_var(pred)
    if pred.shape != np.shape(target):
        raise ValueError(f"sq_err: shape mismatch {pred.shape} vs {np.shape(target)}")
    d = pred - target
    return d * d


def default_perm_count(n: int) -> int:
    return min(3, math.factorial(n) - 1)


def sample_permutations(n: int, count: int, rng: np.random.Generator) -> list[tuple[int, ...]]:
    """Non-identity permutations of range(n); without replacement while enough exist."""
    if count < 1:
        raise ValueError("permutation count P must be >= 1")
    ident = tuple(range(n))
    available = math.factorial(n) - 1
    if available == 0:
        return []
    if n <= 7:
        pool = [p for p in itertools.permutations(range(n)) if p != ident]
        if count <= available:
            pick = rng.choice(available, size=count, replace=False)
        else:
            pick = rng.integers(0, available, size=count)
        return [pool[int(i)] for i in pick]
    out: list[tuple[int, ...]] = []
    seen: set[tuple[int, ...]] = set()
    while len(out) < count:
        p = tuple(int(i) for i in rng.permutation(n))
        if p != ident and p not in seen:
            seen.add(p)
            out.append(p)
    return out


PerturbHook = Callable[[list, tuple[int, ...]], list]


def permutation_loss(
    references: Sequence,
    n_perms: int | None,
    cutoff_ratio: float = DEFAULT_CUTOFF,
    rng: np.random.Generator | None = None,
    band_weights: tuple[float, float] = (1.0, 1.0),
    canonical: bool = True,
    perturb: PerturbHook | None = None,
) -> ag.Var:
    """(1/P) sum_p ||fuse(R_p) - fuse(R_ref)||^2 over sampled non-identity orders.

    ``references`` are encoded feature maps in their given (canonical) order.
    ``perturb`` is a test hook applied to each permuted feature list before fusion.
    """
    refs = [ag.as_var(r) for r in references]
    if not refs:
        raise ValueError("permutation_loss: no references")
    if n_perms is None:
        n_perms = max(1, default_perm_count(len(refs)))
    if n_perms < 1:
        raise ValueError("permutation count P must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    perms = sample_permutations(len(refs), n_perms, rng)
    if not perms:
        return ag.Var(0.0)
    base = fuse_var(refs, cutoff_ratio, band_weights, canonical)
    total = None
    for perm in perms:
        ordered = [refs[i] for i in perm]
        if perturb is not None:
            ordered = perturb(ordered, perm)
        diff = fuse_var(ordered, cutoff_ratio, band_weights, canonical) - base
        term = (diff * diff).sum()
        total = term if total is None else total + term
    return total * (1.0 / len(perms))


def spsl_total(l_scale, l_perm, w_scale: float = 1.0, w_perm: float = 1.0):
    if w_scale == 1.0 and w_perm == 1.0:
        return l_scale + l_perm
    return w_scale * l_scale + w_perm * l_perm


@dataclass
class LossReport:
    l_scale: float
    l_perm: float
    l_spsl: float
    l_mse_mean: float
    step: int = 0

    def to_dict(self) -> dict:
        return {"l_scale": self.l_scale, "l_perm": self.l_perm, "l_spsl": self.l_spsl,
                "l_mse_mean": self.l_mse_mean, "step": self.step}
