#!/usr/bin/env python3
"""Render a sample sheet from any generator checkpoint (pretrained or an arm).

Usage:
    python scripts/render_samples.py --workdir runs_full --arm lora_r1 --out samples.png
    python scripts/render_samples.py --workdir runs_full --arm pretrained --random 16
"""

import argparse
import sys
from pathlib import Path

import numpy as np
import torch

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from peft3d import pipeline
from peft3d.apps import random_views, render_views, save_image_grid
from peft3d.config import load_run_config
from peft3d.hull import PersonalHull
from peft3d.pipeline import Workspace


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", required=True)
    ap.add_argument("--config", default=None)
    ap.add_argument("--arm", default="pretrained")
    ap.add_argument("--out", default="samples.png")
    ap.add_argument("--random", type=int, default=0,
                    help="sample N random latents instead of hull samples")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = load_run_config(args.config)
    ws = Workspace(args.workdir)
    model, _ = pipeline.load_arm(ws, cfg, args.arm)
    rng = np.random.default_rng(args.seed)

    if args.random:
        gen = torch.Generator().manual_seed(args.seed)
        z = torch.randn(args.random, model.cfg.latent_dim, generator=gen)
        w = model.map_latent(z)
        poses = random_views(args.random, rng)
        with torch.no_grad():
            _, full = model.generate(w, poses)
        images = full.clamp(0, 1)
    else:
        identity = pipeline.target_identity(ws, cfg)
        hull = PersonalHull(pipeline.arm_anchors(ws, cfg, args.arm, identity).ws)
        frames = []
        for _ in range(16):
            w = hull.sample(rng)
            frames.append(render_views(model, w.astype(np.float32), random_views(1, rng))[0])
        images = torch.stack(frames)

    save_image_grid(images, args.out)
    print(f"wrote {args.out} ({images.shape[0]} samples from arm {args.arm})")


if __name__ == "__main__":
    main()
