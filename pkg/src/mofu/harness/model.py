"""Bundles a denoiser config and parameters into a velocity callable for sampling and evaluation."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from mofu import autograd as ag
from mofu.conditioning import embed_prompt, get_prompt_provider, preprocess_reference
from mofu.dit import DiTConfig, Params, condition_batch, denoise_tokens
from mofu.fusion import DEFAULT_CUTOFF
from mofu.harness.synthetic import SyntheticScene, video_to_latent
from mofu.losses import MaskSet, spatial_weight_map


@dataclass
class TrainSample:
    x0: np.ndarray  # (C, T, H, W) latent
    refs: list[np.ndarray]  # preprocessed references, (c, R, R) each
    weight_map: np.ndarray  # (H_lat, W_lat)
    prompt_emb: np.ndarray  # (d_emb,)


def prepare_sample(scene: SyntheticScene, cfg: DiTConfig, provider: str = "hash-unigram") -> TrainSample:
    x0 = video_to_latent(scene.video)
    if x0.shape != cfg.latent_shape:
        raise ValueError(f"scene latent {x0.shape} does not match model latent {cfg.latent_shape}")
    refs = [preprocess_reference(r, cfg.ref_size, cfg.ref_size) for r in scene.references]
    m = spatial_weight_map(MaskSet.from_references(scene.references), cfg.latent_height, cfg.latent_width)
    e = embed_prompt(scene.prompt, get_prompt_provider(provider, cfg.d_emb)).vector
    return TrainSample(x0, refs, m, e)


@dataclass
class MoFuModel:
    config: DiTConfig
    params: Params
    conditioner: str = "fourier"
    cutoff_ratio: float = DEFAULT_CUTOFF
    band_weights: tuple[float, float] = (1.0, 1.0)
    canonical: bool = True
    provider: str = "hash-unigram"
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def latent_shape(self) -> tuple[int, ...]:
        return self.config.latent_shape

    def inputs(self, scene: SyntheticScene) -> tuple[list[np.ndarray], np.ndarray]:
        """Preprocessed references and prompt embedding for a scene."""
        cfg = self.config
        refs = [preprocess_reference(r, cfg.ref_size, cfg.ref_size) for r in scene.references]
        return refs, embed_prompt(scene.prompt, get_prompt_provider(self.provider, cfg.d_emb)).vector

    def tokens(self, refs: Sequence[np.ndarray]) -> np.ndarray:
        with ag.no_grad():
            tok, _ = condition_batch(self.config, self.params, [list(refs)], self.conditioner,
                                     self.cutoff_ratio, self.band_weights, self.canonical)
        return tok.data

    def __call__(self, x_t: np.ndarray, t: float, refs: Sequence[np.ndarray], e: np.ndarray) -> np.ndarray:
        """Velocity for a single latent (C, T, H, W) given preprocessed references."""
        key = tuple(hashlib.sha256(np.ascontiguousarray(r).tobytes() + repr(r.shape).encode()).hexdigest()
                    for r in refs)
        tok = self._cache.get(key)
        if tok is None:
            tok = self._cache[key] = self.tokens(refs)
        with ag.no_grad():
            v = denoise_tokens(self.config, self.params, x_t[None], np.array([t]), tok, e[None])
        return v.data[0]

    def clear_cache(self) -> None:
        self._cache.clear()
