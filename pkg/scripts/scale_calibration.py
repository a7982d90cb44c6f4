"""Reference points for the toy scale-deviation metric on the evaluation scenes.

Scores ground truth, pure noise, the zero-initialized model (its samples are the
noise itself), a randomly initialized model and, optionally, a trained checkpoint.
"""
import argparse
from dataclasses import replace

import numpy as np

from mofu.cli import model_from_checkpoint
from mofu.config import load_config
from mofu.dit import init_params
from mofu.harness.evaluate import eval_scale_consistency, scale_deviation
from mofu.harness.model import MoFuModel
from mofu.harness.sampling import initial_noise
from mofu.harness.synthetic import gen_synthetic, latent_to_video


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config")
    ap.add_argument("--checkpoint", action="append", default=[], help="trained checkpoint (repeatable)")
    args = ap.parse_args()
    cfg = load_config(args.config).config
    ev = cfg.eval
    scenes = gen_synthetic(ev.scene_seed, ev.n_scenes, replace(cfg.scene, min_subjects=ev.min_subjects))

    def model(params, model_cfg=cfg.model):
        return MoFuModel(model_cfg, params, "fourier", cfg.loss.cutoff_ratio, cfg.loss.band_weights)

    rows = {
        "ground truth": np.mean([scale_deviation(sc.video, sc).deviation for sc in scenes]),
        "noise": np.mean([scale_deviation(latent_to_video(initial_noise(cfg.model.latent_shape, [cfg.seed, sc.scene_id])),
                                          sc).deviation for sc in scenes]),
        "zero init": eval_scale_consistency(model(init_params(cfg.model, cfg.seed)), scenes, cfg.seed,
                                            ev.sample_steps).deviation,
        "random init": eval_scale_consistency(model(init_params(cfg.model, cfg.seed, zero_init=False)), scenes,
                                              cfg.seed, ev.sample_steps).deviation,
    }
    for path in args.checkpoint:
        mcfg, params = model_from_checkpoint(path, cfg.model)
        rows[path] = eval_scale_consistency(model(params, mcfg), scenes, cfg.seed, ev.sample_steps).deviation
    for name, value in rows.items():
        print(f"{name:>24s}  {value:.4f}")


if __name__ == "__main__":
    main()
