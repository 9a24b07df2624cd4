#!/usr/bin/env python3
"""Full experiment reproduction: every stage and every table analog, in order.

Equivalent to running the CLI commands by hand:

    peft3d data gen
    peft3d pretrain
    peft3d anchor
    peft3d personalize            (+ the legacy-variant arm)
    peft3d finetune-full
    peft3d eval invert / interpolate / synthesize / edit / inpaint / sr
    peft3d analyze weights
    peft3d ablate rank / dataset-size
    peft3d report

Usage: python scripts/run_all.py --workdir runs_full [--config my.ini] [--seed 0]
"""

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from peft3d import pipeline
from peft3d.config import load_run_config
from peft3d.pipeline import ARM_FULL, ARM_PRETRAINED, Workspace, lora_arm_name


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", required=True)
    ap.add_argument("--config", default=None)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--force", action="store_true", help="overwrite existing corpora")
    args = ap.parse_args()

    cfg = load_run_config(args.config, seed=args.seed)
    ws = Workspace(args.workdir)
    lora = lora_arm_name(cfg.lora.rank, cfg.lora.variant)
    legacy = lora_arm_name(cfg.lora.rank, "legacy")
    arms = [ARM_PRETRAINED, lora, ARM_FULL]

    stages = [
        ("data", lambda: pipeline.stage_data(ws, cfg, force=args.force)),
        ("embedder", lambda: pipeline.stage_embedder(ws, cfg)),
        ("pretrain", lambda: pipeline.stage_pretrain(ws, cfg)),
        ("anchor", lambda: pipeline.stage_anchor(ws, cfg)),
        ("personalize", lambda: pipeline.stage_personalize(ws, cfg)),
        ("personalize-legacy", lambda: pipeline.stage_personalize(ws, cfg, variant="legacy")),
        ("finetune-full", lambda: pipeline.stage_finetune_full(ws, cfg)),
        ("eval-invert", lambda: pipeline.stage_eval_invert(ws, cfg, arms)),
        ("eval-interpolate", lambda: pipeline.stage_eval_interpolate(ws, cfg, arms)),
        ("eval-synthesize", lambda: pipeline.stage_eval_synthesize(ws, cfg, arms)),
        ("eval-edit", lambda: pipeline.stage_eval_edit(ws, cfg, [ARM_PRETRAINED, lora])),
        ("eval-inpaint", lambda: pipeline.stage_eval_enhance(ws, cfg, [ARM_PRETRAINED, lora], "inpaint")),
        ("eval-sr", lambda: pipeline.stage_eval_enhance(ws, cfg, [ARM_PRETRAINED, lora], "sr")),
        ("analyze-weights", lambda: pipeline.stage_analyze_weights(ws, cfg)),
        ("ablate-rank", lambda: pipeline.stage_ablate_rank(ws, cfg)),
        ("ablate-dataset", lambda: pipeline.stage_ablate_dataset(ws, cfg)),
        ("report", lambda: pipeline.stage_report(ws, cfg)),
    ]
    t_all = time.perf_counter()
    for name, fn in stages:
        t0 = time.perf_counter()
        fn()
        print(f"[{name}] done in {time.perf_counter() - t0:.1f}s", flush=True)
    print(f"total {time.perf_counter() - t_all:.1f}s; reports under {ws.reports_dir}")


if __name__ == "__main__":
    main()
