"""Fuse random feature stacks and compare against a double-sum DFT oracle and every input order."""
import argparse
import itertools

import numpy as np

from mofu.fusion import fuse_arrays, radial_mask
from mofu.numerics import naive_dft2


def oracle(feats, cutoff, band_weights):
    h, w = feats[0].shape[-2:]
    grid = radial_mask(h, w, cutoff).grid
    spec = sum(naive_dft2(f) for f in feats)
    filt = band_weights[0] * grid + band_weights[1] * (1 - grid)
    return naive_dft2(filt * spec, inverse=True).real / (h * w)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--size", type=int, nargs="+", default=[4, 8])
    ap.add_argument("--cutoff", type=float, default=0.25)
    ap.add_argument("--band-weights", type=float, nargs=2, default=[1.0, 1.0])
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    bw = tuple(args.band_weights)
    for hw in args.size:
        for n in (2, 3, 4):
            feats = list(rng.standard_normal((n, 3, hw, hw)))
            fused = fuse_arrays(feats, args.cutoff, bw)
            dev_oracle = np.max(np.abs(fused - oracle(feats, args.cutoff, bw)))
            bitwise = all(np.array_equal(fuse_arrays([feats[i] for i in p], args.cutoff, bw), fused)
                          for p in itertools.permutations(range(n)))
            naive = max(np.max(np.abs(fuse_arrays([feats[i] for i in p], args.cutoff, bw, canonical=False) - fused))
                        for p in itertools.permutations(range(n)))
            print(f"{hw}x{hw} N={n}: oracle {dev_oracle:.2e}  canonical bitwise {bitwise}  naive order {naive:.2e}")


if __name__ == "__main__":
    main()
