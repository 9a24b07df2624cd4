"""Command-line entry point.

Every command reads the run configuration (INI file + flags), operates on a
workdir (``--workdir`` or ``PEFT3D_WORKDIR``, defaulting to the current
directory), and exits 0 on success, 1 on gate/invariant failures or missing
prerequisites, 2 on usage errors.
"""

from __future__ import annotations

import functools
import sys
from pathlib import Path

import click

from . import pipeline
from .config import ConfigError, RunConfig, default_config_ini, load_run_config
from .evalsuite import GateError
from .pipeline import ARM_FULL, ARM_PRETRAINED, MissingArtifactError, Workspace, lora_arm_name
from .training import DivergenceError, FrozenWeightError


class RunState:
    def __init__(self, workdir: Path, cfg: RunConfig):
        self.ws = Workspace(workdir)
        self.cfg = cfg


def _fail(message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(1)


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (MissingArtifactError, GateError, FrozenWeightError, DivergenceError,
                FileExistsError, ValueError) as exc:
            _fail(str(exc))

    return wrapper


@click.group()
@click.option("--workdir", type=click.Path(path_type=Path), default=None,
              help="workspace root (falls back to $PEFT3D_WORKDIR, then '.')")
@click.option("--config", "config_path", type=click.Path(exists=True, path_type=Path),
              default=None, help="INI run configuration")
@click.option("--seed", type=int, default=None, help="override the global seed")
@click.pass_context
def main(ctx, workdir, config_path, seed):
    """Parameter-efficient personalization of a desk-scale 3D generator."""
    import os

    if workdir is None:
        workdir = Path(os.environ.get("PEFT3D_WORKDIR", "."))
    try:
        cfg = load_run_config(config_path, seed=seed)
    except ConfigError as exc:
        raise click.UsageError(str(exc))
    ctx.obj = RunState(workdir, cfg)


@main.group()
def data():
    """Corpus generation."""


@data.command("gen")
@click.option("--force", is_flag=True, help="overwrite existing corpora")
@click.pass_obj
@handle_errors
def data_gen(state, force):
    """Render the pretrain/heldout/target corpora."""
    digests = pipeline.stage_data(state.ws, state.cfg, force=force)
    for role, digest in digests.items():
        click.echo(f"{role}: {digest[:16]}")


@main.command()
@click.option("--skip-embedder", is_flag=True, help="reuse an existing embedder")
@click.pass_obj
@handle_errors
def pretrain(state, skip_embedder):
    """Train the identity embedder (gated) and the generator prior."""
    if not skip_embedder or not state.ws.embedder_path.exists():
        report = pipeline.stage_embedder(state.ws, state.cfg)
        click.echo(f"embedder verification accuracy: {report['verification_accuracy']:.3f}")
    path = pipeline.stage_pretrain(state.ws, state.cfg)
    click.echo(f"pretrained checkpoint: {path}")


@main.command()
@click.pass_obj
@handle_errors
def anchor(state):
    """Invert the target identity's reference images into anchor latents."""
    anchors = pipeline.stage_anchor(state.ws, state.cfg)
    click.echo(f"{len(anchors)} anchors for {anchors.identity_id}")


@main.command()
@click.option("--rank", type=int, default=None, help="adapter rank (default from [lora])")
@click.option("--variant", type=click.Choice(["correct", "legacy"]), default=None)
@click.option("--dp-size", type=int, default=None, help="personalization set size")
@click.pass_obj
@handle_errors
def personalize(state, rank, variant, dp_size):
    """Tune low-rank adapters + decoder on the target identity."""
    arm, info = pipeline.stage_personalize(state.ws, state.cfg, rank=rank,
                                           variant=variant, dp_size=dp_size)
    click.echo(f"arm {arm}: terminal recon {info['terminal_total']:.4f}, "
               f"trainable {info['counts']['trainable']}")


@main.command("finetune-full")
@click.option("--dp-size", type=int, default=None)
@click.pass_obj
@handle_errors
def finetune_full(state, dp_size):
    """Baseline arm: full fine-tuning of every generator weight."""
    info = pipeline.stage_finetune_full(state.ws, state.cfg, dp_size=dp_size)
    click.echo(f"arm {ARM_FULL}: terminal recon {info['terminal_total']:.4f}, "
               f"trainable {info['trainable']}")


def _default_arms(state) -> list[str]:
    arms = [ARM_PRETRAINED]
    lora = lora_arm_name(state.cfg.lora.rank, state.cfg.lora.variant)
    if (state.ws.arm_dir(lora) / "ckpt_adapters.bin").exists():
        arms.append(lora)
    if (state.ws.arm_dir(ARM_FULL) / "ckpt_model.bin").exists():
        arms.append(ARM_FULL)
    return arms


def _arms_option(fn):
    return click.option("--arm", "arms", multiple=True,
                        help="arms to evaluate (default: pretrained + available)")(fn)


@main.command()
@click.option("--pti/--hull", "use_pti", default=True, help="inversion mode")
@_arms_option
@click.option("--limit", type=int, default=None, help="cap on test images")
@click.pass_obj
@handle_errors
def invert(state, use_pti, arms, limit):
    """Invert held-out test images and score novel-view identity."""
    arms = list(arms) or _default_arms(state)
    rep = pipeline.stage_eval_invert(state.ws, state.cfg, arms,
                                     mode="pti" if use_pti else "hull", limit=limit)
    for arm, row in rep.arms.items():
        click.echo(f"{arm}: id_sim={row['id_sim']:.4f}")


@main.command()
@_arms_option
@click.option("--limit", type=int, default=1)
@click.pass_obj
@handle_errors
def views(state, arms, limit):
    """Novel-view sweeps for test images (writes grids under tasks/)."""
    arms = list(arms) or _default_arms(state)
    rep = pipeline.stage_eval_invert(state.ws, state.cfg, arms, mode="pti", limit=limit)
    for arm, row in rep.arms.items():
        click.echo(f"{arm}: id_sim={row['id_sim']:.4f}")


@main.command()
@_arms_option
@click.pass_obj
@handle_errors
def interpolate(state, arms):
    """Anchor-pair interpolation identity curves."""
    arms = list(arms) or _default_arms(state)
    rep = pipeline.stage_eval_interpolate(state.ws, state.cfg, arms)
    for arm, row in rep.arms.items():
        click.echo(f"{arm}: mean id_sim={row['id_sim']:.4f}")


@main.command()
@_arms_option
@click.option("--no-diversity", is_flag=True)
@click.pass_obj
@handle_errors
def synthesize(state, arms, no_diversity):
    """In-hull appearance synthesis with identity and diversity scores."""
    arms = list(arms) or _default_arms(state)
    rep = pipeline.stage_eval_synthesize(state.ws, state.cfg, arms,
                                         with_diversity=not no_diversity)
    for arm, row in rep.arms.items():
        click.echo(f"{arm}: id_sim={row['id_sim']:.4f}"
                   + (f" diversity={row['diversity']:.4f}" if "diversity" in row else ""))


@main.command()
@_arms_option
@click.option("--attribute", type=click.Choice(["smile", "age"]), default=None)
@click.pass_obj
@handle_errors
def edit(state, arms, attribute):
    """Hull-constrained semantic editing sweeps."""
    arms = list(arms) or _default_arms(state)
    rep = pipeline.stage_eval_edit(state.ws, state.cfg, arms, attribute=attribute)
    for arm, row in rep.arms.items():
        click.echo(f"{arm}: id_sim={row['id_sim']:.4f}")


@main.group()
def enhance():
    """Image enhancement tasks."""


@enhance.command("inpaint")
@_arms_option
@click.pass_obj
@handle_errors
def enhance_inpaint(state, arms):
    arms = list(arms) or _default_arms(state)
    rep = pipeline.stage_eval_enhance(state.ws, state.cfg, arms, "inpaint")
    for arm, row in rep.arms.items():
        click.echo(f"{arm}: id_sim={row['id_sim']:.4f}")


@enhance.command("sr")
@_arms_option
@click.pass_obj
@handle_errors
def enhance_sr(state, arms):
    arms = list(arms) or _default_arms(state)
    rep = pipeline.stage_eval_enhance(state.ws, state.cfg, arms, "sr")
    for arm, row in rep.arms.items():
        click.echo(f"{arm}: id_sim={row['id_sim']:.4f}")


@main.command("eval")
@click.argument("task", type=click.Choice(["invert", "interpolate", "synthesize",
                                           "edit", "inpaint", "sr"]))
@_arms_option
@click.pass_obj
@handle_errors
def eval_task(state, task, arms):
    """Compute the metric table for one downstream task."""
    arms = list(arms) or _default_arms(state)
    if task == "invert":
        rep = pipeline.stage_eval_invert(state.ws, state.cfg, arms)
    elif task == "interpolate":
        rep = pipeline.stage_eval_interpolate(state.ws, state.cfg, arms)
    elif task == "synthesize":
        rep = pipeline.stage_eval_synthesize(state.ws, state.cfg, arms)
    elif task == "edit":
        rep = pipeline.stage_eval_edit(state.ws, state.cfg, arms)
    else:
        rep = pipeline.stage_eval_enhance(state.ws, state.cfg, arms, task)
    click.echo(f"wrote reports/{rep.task}.csv")


@main.group()
def analyze():
    """Analysis over trained arms."""


@analyze.command("weights")
@click.option("--arm", default=None)
@click.pass_obj
@handle_errors
def analyze_weights(state, arm):
    """Per-block relative weight change of a personalized arm."""
    rep = pipeline.stage_analyze_weights(state.ws, state.cfg, arm=arm)
    for arm_name, row in rep.arms.items():
        blocks = {k: v for k, v in row.items() if k.startswith("pct_")}
        click.echo(f"{arm_name}: " + " ".join(f"{k[4:]}={v:.3f}%" for k, v in sorted(blocks.items())))


@main.group()
def ablate():
    """Ablation sweeps."""


@ablate.command("rank")
@click.option("--ranks", default="1,4,16", help="comma-separated ranks")
@click.pass_obj
@handle_errors
def ablate_rank(state, ranks):
    """Adapter-rank sweep (reconstruction + interpolation identity)."""
    rank_list = tuple(int(r) for r in ranks.split(","))
    rep = pipeline.stage_ablate_rank(state.ws, state.cfg, rank_list)
    for arm, row in rep.arms.items():
        click.echo(f"{arm}: recon={row['recon_perc']:.4f} id_sim={row['interp_id_sim']:.4f}")


@ablate.command("dataset-size")
@click.option("--sizes", default="10,50,100", help="comma-separated set sizes")
@click.pass_obj
@handle_errors
def ablate_dataset(state, sizes):
    """Personalization-set-size sweep on the interpolation task."""
    size_list = tuple(int(s) for s in sizes.split(","))
    rep = pipeline.stage_ablate_dataset(state.ws, state.cfg, size_list)
    for arm, row in rep.arms.items():
        click.echo(f"{arm}: id_sim={row['id_sim']:.4f}")


@main.command()
@click.pass_obj
@handle_errors
def report(state):
    """Aggregate all task reports into reports/summary.{csv,json}."""
    rep = pipeline.stage_report(state.ws, state.cfg)
    click.echo(f"summary over {len(rep.arms)} arms, "
               f"{len(rep.config_digests) - 1} task reports")


@main.command("show-config")
def show_config():
    """Print the default configuration INI with every tunable default."""
    click.echo(default_config_ini(), nl=False)


if __name__ == "__main__":
    main()
