#!/usr/bin/env python3
"""Check the any-backbone comparison: a fresh random backbone with the
language path versus an equal-capacity no-language control, plus the
template-vs-learnable-contexts direction, seed-averaged."""

import sys
import time

import numpy as np

sys.path.insert(0, "src")

from pixtext import datagen
from pixtext.encoders import ImageEncoderConfig, ToyImageEncoder
from pixtext.harness import OptimConfig, train
from pixtext.pipeline import build_pipeline, rng_for, swap_backbone, toy_config

SWAP_CFG = ImageEncoderConfig(patch=4, width=40, blocks=2, heads=4, out_dim=40, ffn_mult=2)


def swapped_run(mode, dataset, class_names, seed):
    pipe = build_pipeline(toy_config(mode), class_names, seed)
    new_enc = ToyImageEncoder(SWAP_CFG, rng_for(seed, "swapped_backbone"))
    swapped = swap_backbone(pipe, new_enc)
    report = train(swapped, dataset, OptimConfig(seed=seed))
    return report.final_eval_miou


def main():
    t0 = time.time()
    spec = datagen.default_task()
    samples = datagen.generate(spec, 48)
    dataset = datagen.split(samples, 0.667)
    seeds = [0, 1, 2, 3, 4]

    for mode in ("post", None):
        mious = [swapped_run(mode, dataset, spec.class_names, s) for s in seeds]
        arr = np.array(mious)
        print(f"swapped {str(mode):8s} mean={arr.mean():.4f} per-seed={np.round(arr,3).tolist()}")

    for mode in ("template",):
        mious = []
        for s in seeds:
            pipe = build_pipeline(toy_config(mode), spec.class_names, s)
            mious.append(train(pipe, dataset, OptimConfig(seed=s)).final_eval_miou)
        arr = np.array(mious)
        print(f"plain   {mode:8s} mean={arr.mean():.4f} per-seed={np.round(arr,3).tolist()}")
    print(f"elapsed {time.time()-t0:.0f}s")


if __name__ == "__main__":
    main()
