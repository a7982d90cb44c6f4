"""Reference preparation, the reference encoder, prompt embeddings and the Scale Control Adapter."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Protocol

import numpy as np

from mofu import autograd as ag
from mofu.numerics import resize_bilinear

BACKGROUND = 1.0  # white fill for non-subject pixels and padding


@dataclass
class ReferenceImage:
    pixels: np.ndarray  # (c, H, W) in [0, 1]
    subject_mask: np.ndarray  # (H, W) in {0, 1}

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        self.subject_mask = np.asarray(self.subject_mask, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[1:] != self.subject_mask.shape:
            raise ValueError(
                f"reference pixels {self.pixels.shape} and mask {self.subject_mask.shape} disagree")
        if not np.all((self.subject_mask == 0) | (self.subject_mask == 1)):
            raise ValueError("subject mask must be binary")

    @property
    def area_ratio(self) -> float:
        return float(self.subject_mask.mean())


def load_reference(image_path: str | Path, mask_path: str | Path) -> ReferenceImage:
    """Read an 8-bit RGB(A) raster and a single-channel 0/255 mask raster."""
    from PIL import Image

    with Image.open(image_path) as im:
        rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    with Image.open(mask_path) as im:
        mask = (np.asarray(im.convert("L")) >= 128).astype(np.float64)
    return ReferenceImage(rgb.transpose(2, 0, 1), mask)


def mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ValueError("no subject: reference mask is empty")
    return int(rows[0]), int(rows[-1]) + 1, int(cols[0]), int(cols[-1]) + 1


def preprocess_reference(ref: ReferenceImage, out_h: int, out_w: int) -> np.ndarray:
    """Crop to the mask's bounding box, whiten the background, fit into out_h x out_w.

    Aspect ratio is kept; the leftover band is white, split evenly (extra row or
    column goes to the bottom/right).
    """
    y0, y1, x0, x1 = mask_bbox(ref.subject_mask)
    crop = ref.pixels[:, y0:y1, x0:x1].copy()
    m = ref.subject_mask[y0:y1, x0:x1]
    crop[:, m == 0] = BACKGROUND
    h, w = y1 - y0, x1 - x0
    scale = min(out_h / h, out_w / w)
    nh = min(out_h, max(1, int(round(h * scale))))
    nw = min(out_w, max(1, int(round(w * scale))))
    resized = resize_bilinear(crop, nh, nw)
    out = np.full((ref.pixels.shape[0], out_h, out_w), BACKGROUND)
    top, left = (out_h - nh) // 2, (out_w - nw) // 2
    out[:, top:top + nh, left:left + nw] = resized
    return out


@dataclass
class EncoderParams:
    weight: np.ndarray  # (d, c, 3, 3)
    bias: np.ndarray  # (d,)

    def __post_init__(self):
        if self.weight.ndim != 4 or self.weight.shape[2:] != (3, 3):
            raise ValueError(f"encoder kernel must be d x c x 3 x 3, got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ValueError("encoder bias must have one entry per output channel")


def encode_reference(x, weight, bias) -> ag.Var:
    """3x3 conv encoder, stride 1, padding 1: (c, H, W) -> (d, H, W)."""
    return ag.conv3x3(x, weight, bias)


# prompt embeddings ---------------------------------------------------------

@dataclass(frozen=True)
class PromptEmbedding:
    vector: np.ndarray
    provider_id: str


class PromptProvider(Protocol):
    provider_id: str
    dim: int

    def embed(self, prompt: str) -> np.ndarray: ...


def tokenize(prompt: str) -> list[str]:
    return prompt.split()


class HashUnigramProvider:
    """Sum of per-token pseudo-random vectors, L2-normalized.

    Each token seeds a generator through a keyed BLAKE2 digest, so the mapping
    is stable across processes and platforms.
    """

    provider_id = "hash-unigram"

    def __init__(self, dim: int = 16, seed: int = 0):
        self.dim = dim
        self.seed = seed

    def token_vector(self, token: str) -> np.ndarray:
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8,
                                 key=self.seed.to_bytes(8, "little")).digest()
        return np.random.default_rng(int.from_bytes(digest, "little")).standard_normal(self.dim)

    def embed(self, prompt: str) -> np.ndarray:
        toks = tokenize(prompt)
        v = np.zeros(self.dim)
        for t in toks:
            v = v + self.token_vector(t)
        return v / np.linalg.norm(v)


_PROVIDERS: dict[str, Callable[[int], PromptProvider]] = {
    HashUnigramProvider.provider_id: lambda dim: HashUnigramProvider(dim),
}


def register_prompt_provider(name: str, factory: Callable[[int], PromptProvider]) -> None:
    _PROVIDERS[name] = factory


def get_prompt_provider(name: str, dim: int) -> PromptProvider:
    try:
        return _PROVIDERS[name](dim)
    except KeyError:
        raise KeyError(f"unknown prompt provider {name!r}; known: {sorted(_PROVIDERS)}") from None


def embed_prompt(prompt: str, provider: str | PromptProvider = "hash-unigram", dim: int = 16) -> PromptEmbedding:
    if not tokenize(prompt):
        raise ValueError("embed_prompt: empty prompt")
    if isinstance(provider, str):
        provider = get_prompt_provider(provider, dim)
    vec = np.asarray(provider.embed(prompt), dtype=np.float64)
    if not np.all(np.isfinite(vec)):
        raise ValueError("embed_prompt: provider returned non-finite values")
    return PromptEmbedding(vec, provider.provider_id)


# scale control adapter -----------------------------------------------------

@dataclass
class ModulationParams:
    gamma: ag.Var
    beta: ag.Var
    eta: ag.Var


def sca_forward(e, head: Mapping[str, object]) -> ModulationParams:
    """Two-layer MLP: e -> GELU(e W1 + b1) W2, split into (delta_gamma, beta, eta).

    ``head`` holds ``w1`` (d_emb, hidden), ``b1`` (hidden,) and ``w2``
    (hidden, 3*d_model). ``e`` may be (d_emb,) or batched (B, d_emb).
    """
    if isinstance(e, PromptEmbedding):
        e = e.vector
    e = ag.as_var(e)
    w1, b1, w2 = (ag.as_var(head[k]) for k in ("w1", "b1", "w2"))
    if e.shape[-1] != w1.shape[0]:
        raise ValueError(f"sca_forward: embedding width {e.shape[-1]} != adapter input {w1.shape[0]}")
    out = ag.gelu(e @ w1 + b1) @ w2
    d = w2.shape[1] // 3
    idx = (slice(None),) * (out.ndim - 1)
    return ModulationParams(
        gamma=1.0 + out[idx + (slice(0, d),)],
        beta=out[idx + (slice(d, 2 * d),)],
        eta=out[idx + (slice(2 * d, 3 * d),)],
    )
