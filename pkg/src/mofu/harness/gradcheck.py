"""End-to-end finite-difference check of the SPSL gradient over every parameter."""
from __future__ import annotations

import numpy as np

from mofu.dit import DiTConfig, init_params
from mofu.harness.model import prepare_sample
from mofu.harness.synthetic import SceneConfig, gen_synthetic
from mofu.harness.train import LossConfig, spsl_forward
from mofu.numerics import GradReport, grad_check


def gradcheck_config(depth: int = 1) -> DiTConfig:
    """Narrow model with the full block structure, small enough for a coordinate-wise check."""
    return DiTConfig(depth=depth, d_model=8, n_heads=2, latent_frames=2, latent_height=2, latent_width=2,
                     ref_channels=4, ref_size=4, ref_patch=2, d_emb=8, max_refs=3, mlp_ratio=2,
                     adapter_ratio=2)


def gradcheck_scenes(cfg: DiTConfig, seed: int, n: int = 2):
    sc = SceneConfig(frame_size=2 * cfg.latent_height, n_frames=cfg.latent_frames, ref_size=cfg.ref_size,
                     min_subjects=2, max_subjects=min(3, cfg.max_refs), scales=(0.25, 0.5))
    return gen_synthetic(seed, n, sc)


def spsl_grad_check(cfg: DiTConfig | None = None, seed: int = 0, h: float = 1e-5,
                    loss_cfg: LossConfig | None = None, n_scenes: int = 2) -> GradReport:
    """Random (non-zero) initialization so every parameter carries gradient."""
    cfg = cfg or gradcheck_config()
    loss_cfg = loss_cfg or LossConfig()
    params = init_params(cfg, seed, zero_init=False)
    batch = [prepare_sample(s, cfg) for s in gradcheck_scenes(cfg, seed, n_scenes)]

    def loss_fn(p):
        return spsl_forward(cfg, loss_cfg, p, batch, np.random.default_rng([seed, 7]))[0]

    return grad_check(loss_fn, params, h=h)
