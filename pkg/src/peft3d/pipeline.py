"""End-to-end experiment pipeline over a workspace directory.

Every stage reads artifacts produced by earlier stages from a fixed layout
under one workdir and writes its own into it:

    corpus/{pretrain,heldout,target}/   rendered corpora
    embedder/                           embedder checkpoint + gate report
    runs/pretrain/                      adversarial pretraining
    runs/anchors_<identity>/            anchor latents
    runs/<arm>/                         personalization / fine-tuning arms
    tasks/<task>/<arm>/<identity>/      task outputs (grids + metrics)
    reports/<task>.{csv,json}           metric tables

The CLI wraps these functions one-to-one; the acceptance suite calls them
directly so both exercise the same code path.
"""

from __future__ import annotations

import copy
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import apps
from .adapters import AdapterPolicy, AdapterRegistry, load_adapter_checkpoint
from .config import RunConfig
from .evalsuite import (
    Embedder,
    MetricsReport,
    diversity,
    embed_images,
    id_sim_batch,
    interpolation_curve,
    train_embedder,
    write_report,
)
from .generator import TriPlaneGenerator
from .hull import PersonalHull, save_hull
from .scene import IdentityCorpus, generate_corpus
from .seeding import derive_seed
from .serialization import read_json, write_json
from .training import (
    AnchorSet,
    TrainConfig,
    build_anchor_set,
    full_finetune,
    personalize,
    pretrain,
    pti_invert,
    records_tensor,
)


class MissingArtifactError(FileNotFoundError):
    pass


ARM_PRETRAINED = "pretrained"
ARM_FULL = "full_ft"


def lora_arm_name(rank: int, variant: str = "correct", dp_size: int | None = None) -> str:
    name = f"lora_r{rank}"
    if variant == "legacy":
        name += "_legacy"
    if dp_size is not None:
        name += f"_d{dp_size}"
    return name


class Workspace:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    @property
    def corpus_dir(self) -> Path:
        return self.root / "corpus"

    def corpus_path(self, role: str) -> Path:
        return self.corpus_dir / role

    @property
    def embedder_path(self) -> Path:
        return self.root / "embedder" / "embedder.bin"

    @property
    def pretrain_dir(self) -> Path:
        return self.root / "runs" / "pretrain"

    @property
    def pretrain_ckpt(self) -> Path:
        return self.pretrain_dir / "ckpt_final.bin"

    def anchors_path(self, identity: str) -> Path:
        return self.root / "runs" / f"anchors_{identity}" / "anchors.json"

    def arm_dir(self, arm: str) -> Path:
        return self.root / "runs" / arm

    def task_dir(self, task: str, arm: str, identity: str) -> Path:
        return self.root / "tasks" / task / arm / identity

    @property
    def reports_dir(self) -> Path:
        return self.root / "reports"

    def require(self, path: Path, producer: str) -> Path:
        if not path.exists():
            raise MissingArtifactError(f"missing {path} (run `{producer}` first)")
        return path

    def load_corpus(self, role: str) -> IdentityCorpus:
        self.require(self.corpus_path(role) / "manifest.json", "peft3d data gen")
        return IdentityCorpus.load(self.corpus_path(role))

    def load_embedder(self) -> Embedder:
        self.require(self.embedder_path, "peft3d pretrain (embedder stage)")
        return Embedder.load(self.embedder_path)

    def load_pretrained(self) -> TriPlaneGenerator:
        self.require(self.pretrain_ckpt, "peft3d pretrain")
        return TriPlaneGenerator.load(self.pretrain_ckpt)

    def load_anchors(self, identity: str) -> AnchorSet:
        self.require(self.anchors_path(identity), "peft3d anchor")
        return AnchorSet.load(self.anchors_path(identity))


# ---------------------------------------------------------------------------
# data / embedder / pretraining stages


def stage_data(ws: Workspace, cfg: RunConfig, force: bool = False) -> dict:
    d = cfg.data
    out = {}
    roles = (
        ("pretrain", d.pretrain_identities, d.pretrain_images, 0),
        ("heldout", d.heldout_identities, d.heldout_images, 1000),
        ("target", d.target_identities, d.target_images, 2000),
    )
    for role, n_ids, n_imgs, offset in roles:
        corpus = generate_corpus(
            n_ids, n_imgs, None, seed=derive_seed(d.seed, "corpus", role),
            out_dir=ws.corpus_path(role), n_test=d.n_test, resolution=d.resolution,
            identity_offset=offset, force=force,
        )
        out[role] = corpus.manifest_digest()
    write_json(ws.corpus_dir / "digests.json", {**out, "config_digest": cfg.digest()})
    return out


def stage_embedder(ws: Workspace, cfg: RunConfig) -> dict:
    train = ws.load_corpus("pretrain")
    held = ws.load_corpus("heldout")
    model, report = train_embedder(train, held, cfg.embedder_config())
    ws.embedder_path.parent.mkdir(parents=True, exist_ok=True)
    model.save(ws.embedder_path, extra={"gate": report, "config_digest": cfg.digest()})
    write_json(ws.embedder_path.parent / "gate.json", report)
    return report


def stage_pretrain(ws: Workspace, cfg: RunConfig) -> Path:
    corpus = ws.load_corpus("pretrain")
    pretrain(corpus, cfg.train, cfg.generator_config(), out_dir=ws.pretrain_dir)
    return ws.pretrain_ckpt


def target_identity(ws: Workspace, cfg: RunConfig) -> str:
    return ws.load_corpus("target").identity_ids[0]


def stage_anchor(ws: Workspace, cfg: RunConfig, identity: str | None = None) -> AnchorSet:
    corpus = ws.load_corpus("target")
    identity = identity or corpus.identity_ids[0]
    model = ws.load_pretrained()
    embedder = ws.load_embedder()
    path = ws.anchors_path(identity)
    path.parent.mkdir(parents=True, exist_ok=True)
    anchors = build_anchor_set(model, corpus, identity, embedder, cfg.train, out_path=path)
    return anchors


def _dp_anchors(ws: Workspace, cfg: RunConfig, identity: str, dp_size: int | None) -> AnchorSet:
    anchors = ws.load_anchors(identity)
    size = dp_size if dp_size is not None else min(cfg.data.dp_size, len(anchors))
    return anchors.subset(min(size, len(anchors)))


def stage_personalize(ws: Workspace, cfg: RunConfig, rank: int | None = None,
                      variant: str | None = None, dp_size: int | None = None,
                      arm: str | None = None) -> tuple[str, dict]:
    rank = rank if rank is not None else cfg.lora.rank
    variant = variant or cfg.lora.variant
    corpus = ws.load_corpus("target")
    identity = corpus.identity_ids[0]
    anchors = _dp_anchors(ws, cfg, identity, dp_size)
    arm = arm or lora_arm_name(rank, variant, dp_size)
    model = ws.load_pretrained()
    embedder = ws.load_embedder()
    out = ws.arm_dir(arm)
    policy = AdapterPolicy(rank=rank, variant=variant, init_seed=derive_seed(cfg.seed, "adapters", arm))
    registry, info = personalize(model, corpus, anchors, policy, cfg.train, embedder, out_dir=out)
    counts = registry.count_parameters()
    info["counts"] = counts
    info["arm"] = arm
    info["identity"] = identity
    info["dp_size"] = len(anchors)
    write_json(out / "info.json", info)
    weight_change = registry.relative_weight_change()
    write_json(out / "weight_change.json", weight_change)
    return arm, info


def stage_finetune_full(ws: Workspace, cfg: RunConfig, dp_size: int | None = None) -> dict:
    corpus = ws.load_corpus("target")
    identity = corpus.identity_ids[0]
    anchors = _dp_anchors(ws, cfg, identity, dp_size)
    model = ws.load_pretrained()
    embedder = ws.load_embedder()
    out = ws.arm_dir(ARM_FULL)
    info = full_finetune(model, corpus, anchors, cfg.train, embedder, out_dir=out)
    info["arm"] = ARM_FULL
    info["identity"] = identity
    info["dp_size"] = len(anchors)
    write_json(out / "info.json", info)
    return info


# ---------------------------------------------------------------------------
# arm loading


def load_arm(ws: Workspace, cfg: RunConfig, arm: str) -> tuple[TriPlaneGenerator, AdapterRegistry | None]:
    """Fresh model instance for an arm; lora arms come back with a registry."""
    if arm == ARM_PRETRAINED:
        return ws.load_pretrained(), None
    if arm == ARM_FULL:
        path = ws.require(ws.arm_dir(arm) / "ckpt_model.bin", "peft3d finetune-full")
        return TriPlaneGenerator.load(path), None
    path = ws.require(ws.arm_dir(arm) / "ckpt_adapters.bin", "peft3d personalize")
    model = ws.load_pretrained()
    registry = load_adapter_checkpoint(model, path)
    return model, registry


def arm_anchors(ws: Workspace, cfg: RunConfig, arm: str, identity: str) -> AnchorSet:
    info_path = ws.arm_dir(arm) / "info.json"
    dp = None
    if info_path.exists():
        dp = read_json(info_path).get("dp_size")
    anchors = ws.load_anchors(identity)
    size = dp if dp else min(cfg.data.dp_size, len(anchors))
    return anchors.subset(size)


def arm_hull(ws: Workspace, cfg: RunConfig, arm: str, identity: str) -> PersonalHull:
    return PersonalHull(arm_anchors(ws, cfg, arm, identity).ws)


def reference_embeddings(ws: Workspace, embedder: Embedder, identity: str):
    corpus = ws.load_corpus("target")
    images, _ = records_tensor(corpus, corpus.records(identity, "reference"))
    return embed_images(embedder, images), images


def test_records(ws: Workspace, identity: str, limit: int | None = None):
    corpus = ws.load_corpus("target")
    recs = corpus.records(identity, "test")
    return corpus, recs[:limit] if limit else recs


# ---------------------------------------------------------------------------
# evaluation stages (one per downstream task)


def stage_eval_invert(ws: Workspace, cfg: RunConfig, arms: list[str], mode: str = "pti",
                      limit: int | None = None) -> MetricsReport:
    """Per-arm inversion of held-out test images + novel-view identity scores."""
    embedder = ws.load_embedder()
    identity = target_identity(ws, cfg)
    ref_embs, _ = reference_embeddings(ws, embedder, identity)
    corpus, recs = test_records(ws, identity, limit)
    results = {}
    for arm in arms:
        sims, percs = [], []
        for rec in recs:
            model, registry = load_arm(ws, cfg, arm)
            img = torch.from_numpy(corpus.load_image(rec)).permute(2, 0, 1)
            hull = arm_hull(ws, cfg, arm, identity) if mode == "hull" else None
            out = apps.novel_views(model, embedder, img, rec.pose, ref_embs, cfg.train,
                                   mode=mode, hull=hull, registry=registry)
            sims.append(out["id_sim_mean"])
            if mode == "pti":
                percs.append(out["stage2_perc"])
            apps.save_task_outputs(
                ws.task_dir("invert", arm, identity) / rec.name,
                {"views": out["views"]},
                {"id_sim_per_view": out["id_sim_per_view"], "id_sim_mean": out["id_sim_mean"],
                 "stage1_perc": out["stage1_perc"], "stage2_perc": out["stage2_perc"],
                 "mode": mode, "arm": arm},
            )
        results[arm] = {"id_sim": float(np.mean(sims)), "n_images": float(len(recs))}
        if percs:
            results[arm]["recon_perc"] = float(np.mean(percs))
    rep = MetricsReport(task=f"invert_{mode}", arms=results,
                        config_digests={"config": cfg.digest()}, seed=cfg.seed)
    write_report(rep, ws.reports_dir)
    return rep


def stage_eval_interpolate(ws: Workspace, cfg: RunConfig, arms: list[str]) -> MetricsReport:
    embedder = ws.load_embedder()
    identity = target_identity(ws, cfg)
    ref_embs, _ = reference_embeddings(ws, embedder, identity)
    results = {}
    for arm in arms:
        model, _ = load_arm(ws, cfg, arm)
        hull = arm_hull(ws, cfg, arm, identity)
        curve = interpolation_curve(
            model, hull, embedder, ref_embs,
            pairs=cfg.eval.interp_pairs, steps=cfg.eval.interp_steps,
            views=cfg.eval.interp_views, seed=derive_seed(cfg.seed, "interp", arm),
        )
        results[arm] = {"id_sim": float(curve.mean())}
        results[arm].update({f"id_sim_t{i}": float(v) for i, v in enumerate(curve)})
    rep = MetricsReport(task="interpolate", arms=results,
                        config_digests={"config": cfg.digest()}, seed=cfg.seed)
    write_report(rep, ws.reports_dir)
    return rep


def stage_eval_synthesize(ws: Workspace, cfg: RunConfig, arms: list[str],
                          with_diversity: bool = True) -> MetricsReport:
    embedder = ws.load_embedder()
    identity = target_identity(ws, cfg)
    ref_embs, _ = reference_embeddings(ws, embedder, identity)
    corpus = ws.load_corpus("target")
    results = {}
    for arm in arms:
        model, _ = load_arm(ws, cfg, arm)
        hull = arm_hull(ws, cfg, arm, identity)
        images, alphas, _ = apps.synthesize(model, hull, cfg.tasks.n_synthesize,
                                            seed=derive_seed(cfg.seed, "synth", arm))
        sims = id_sim_batch(images, ref_embs, embedder)
        results[arm] = {"id_sim": float(sims.mean())}
        if with_diversity:
            anchors = arm_anchors(ws, cfg, arm, identity)
            recs = {r.name: r for r in corpus.records(identity)}
            train_imgs, _ = records_tensor(corpus, [recs[n] for n in anchors.names])
            val, nonempty = diversity(model, hull, train_imgs, embedder,
                                      n=cfg.eval.diversity_n,
                                      seed=derive_seed(cfg.seed, "diversity", arm))
            results[arm]["diversity"] = val
            results[arm]["diversity_clusters"] = float(nonempty)
        apps.save_task_outputs(ws.task_dir("synthesize", arm, identity),
                               {"samples": images[:16]}, results[arm])
    rep = MetricsReport(task="synthesize", arms=results,
                        config_digests={"config": cfg.digest()}, seed=cfg.seed)
    write_report(rep, ws.reports_dir)
    return rep


def stage_eval_edit(ws: Workspace, cfg: RunConfig, arms: list[str],
                    attribute: str | None = None, limit: int | None = None) -> MetricsReport:
    from . import scene as scene_mod

    embedder = ws.load_embedder()
    identity = target_identity(ws, cfg)
    ref_embs, _ = reference_embeddings(ws, embedder, identity)
    probe_corpus = ws.load_corpus("pretrain")
    corpus, recs = test_records(ws, identity, limit or cfg.tasks.n_task_images)
    attribute = attribute or cfg.tasks.edit_attribute
    mags = cfg.tasks.edit_magnitudes
    results = {}
    for arm in arms:
        model, _ = load_arm(ws, cfg, arm)
        direction = apps.fit_attribute_direction(
            model, embedder, probe_corpus, attribute, cfg.train,
            n_per_class=cfg.tasks.edit_probe_per_class, steps=cfg.tasks.edit_probe_steps,
        )
        hull = arm_hull(ws, cfg, arm, identity)
        hull_path = ws.arm_dir(arm) / f"hull_{identity}.json"
        hull_path.parent.mkdir(parents=True, exist_ok=True)
        save_hull(hull_path, identity, hull, {attribute: direction})
        stats = np.zeros(len(mags))
        sims = []
        for rec in recs:
            img = torch.from_numpy(corpus.load_image(rec)).permute(2, 0, 1)
            out = apps.semantic_edit(model, embedder, img, rec.pose, attribute, hull,
                                     direction, cfg.train, magnitudes=mags, ref_embs=ref_embs)
            stats += np.array(out["attribute_stats"])
            sims.extend(out["id_sims"])
            apps.save_task_outputs(
                ws.task_dir("edit", arm, identity) / rec.name,
                {"sweep": out["outputs"]},
                {"magnitudes": list(mags), "attribute_stats": out["attribute_stats"],
                 "id_sims": out["id_sims"], "attribute": attribute},
            )
        stats /= len(recs)
        results[arm] = {"id_sim": float(np.mean(sims))}
        results[arm].update({f"stat_m{i}": float(v) for i, v in enumerate(stats)})
    rep = MetricsReport(task=f"edit_{attribute}", arms=results,
                        config_digests={"config": cfg.digest()}, seed=cfg.seed)
    write_report(rep, ws.reports_dir)
    return rep


def stage_eval_enhance(ws: Workspace, cfg: RunConfig, arms: list[str], kind: str,
                       limit: int | None = None) -> MetricsReport:
    from . import scene as scene_mod

    if kind not in ("inpaint", "sr"):
        raise ValueError("enhance kind must be 'inpaint' or 'sr'")
    embedder = ws.load_embedder()
    identity = target_identity(ws, cfg)
    ref_embs, _ = reference_embeddings(ws, embedder, identity)
    corpus, recs = test_records(ws, identity, limit or cfg.tasks.n_task_images)
    res = cfg.data.resolution
    results = {}
    for arm in arms:
        model, _ = load_arm(ws, cfg, arm)
        sims = []
        for rec in recs:
            img = torch.from_numpy(corpus.load_image(rec)).permute(2, 0, 1)
            if kind == "inpaint":
                bbox = scene_mod.face_bbox(rec.params, rec.pose, res)
                mask = apps.center_mask(bbox, (res, res))
                bg = scene_mod.background_mask(rec.params, rec.pose, res)
                out = apps.inpaint(model, embedder, img, rec.pose, mask, cfg.train, bg_mask=bg)
                result_img = out["output"]
                metrics = {"terminal_loss": out["terminal_loss"]}
            else:
                out = apps.superres(model, embedder, img, rec.pose, cfg.train,
                                    factor=cfg.tasks.sr_factor)
                result_img = out["output"]
                metrics = {"terminal_loss": out["terminal_loss"],
                           "consistency_perc": out["consistency_perc"]}
            sim = float(id_sim_batch(result_img.unsqueeze(0), ref_embs, embedder)[0])
            sims.append(sim)
            metrics.update({"id_sim": sim, "arm": arm})
            apps.save_task_outputs(
                ws.task_dir(kind, arm, identity) / rec.name,
                {"output": result_img, "input": img}, metrics,
            )
        results[arm] = {"id_sim": float(np.mean(sims))}
    rep = MetricsReport(task=kind, arms=results,
                        config_digests={"config": cfg.digest()}, seed=cfg.seed)
    write_report(rep, ws.reports_dir)
    return rep


def stage_analyze_weights(ws: Workspace, cfg: RunConfig, arm: str | None = None) -> MetricsReport:
    arm = arm or lora_arm_name(cfg.lora.rank, cfg.lora.variant)
    model, registry = load_arm(ws, cfg, arm)
    if registry is None:
        raise ValueError(f"arm {arm!r} has no adapters to analyze")
    pct = registry.relative_weight_change()
    blocks = model.backbone_blocks()
    backbone_pct = {b: pct[b] for b in blocks if b in pct}
    coarse_mid = float(np.mean([backbone_pct[b] for b in blocks[:-1]]))
    finest = backbone_pct[blocks[-1]]
    arms = {arm: {**{f"pct_{k}": v for k, v in pct.items()},
                  "coarse_mid_mean": coarse_mid, "finest": finest}}
    rep = MetricsReport(task="weight_change", arms=arms,
                        config_digests={"config": cfg.digest()}, seed=cfg.seed)
    write_report(rep, ws.reports_dir)
    return rep


def stage_ablate_rank(ws: Workspace, cfg: RunConfig, ranks=(1, 4, 16),
                      limit: int | None = None) -> MetricsReport:
    """Rank sweep: terminal reconstruction distance + interpolation identity."""
    embedder = ws.load_embedder()
    identity = target_identity(ws, cfg)
    ref_embs, _ = reference_embeddings(ws, embedder, identity)
    results = {}
    for rank in ranks:
        arm = lora_arm_name(rank, cfg.lora.variant)
        info_path = ws.arm_dir(arm) / "info.json"
        if not info_path.exists():
            arm, info = stage_personalize(ws, cfg, rank=rank)
        else:
            info = read_json(info_path)
        model, _ = load_arm(ws, cfg, arm)
        hull = arm_hull(ws, cfg, arm, identity)
        curve = interpolation_curve(model, hull, embedder, ref_embs,
                                    pairs=cfg.eval.interp_pairs, steps=cfg.eval.interp_steps,
                                    views=cfg.eval.interp_views,
                                    seed=derive_seed(cfg.seed, "interp", "rank-ablation"))
        results[f"rank_{rank}"] = {
            "recon_perc": info["terminal_perc"],
            "recon_total": info["terminal_total"],
            "interp_id_sim": float(curve.mean()),
            "trainable": float(info["counts"]["trainable"]),
        }
    rep = MetricsReport(task="rank_ablation", arms=results,
                        config_digests={"config": cfg.digest()}, seed=cfg.seed)
    write_report(rep, ws.reports_dir)
    return rep


def stage_ablate_dataset(ws: Workspace, cfg: RunConfig, sizes=(10, 50, 100)) -> MetricsReport:
    """Training-set-size sweep evaluated on the interpolation task."""
    embedder = ws.load_embedder()
    identity = target_identity(ws, cfg)
    ref_embs, _ = reference_embeddings(ws, embedder, identity)
    results = {}
    for size in sizes:
        arm = lora_arm_name(cfg.lora.rank, cfg.lora.variant, dp_size=size)
        info_path = ws.arm_dir(arm) / "info.json"
        if not info_path.exists():
            arm, info = stage_personalize(ws, cfg, dp_size=size)
        else:
            info = read_json(info_path)
        model, _ = load_arm(ws, cfg, arm)
        hull = arm_hull(ws, cfg, arm, identity)
        curve = interpolation_curve(model, hull, embedder, ref_embs,
                                    pairs=cfg.eval.interp_pairs, steps=cfg.eval.interp_steps,
                                    views=cfg.eval.interp_views,
                                    seed=derive_seed(cfg.seed, "interp", "dp-ablation"))
        results[f"dp_{size}"] = {
            "id_sim": float(curve.mean()),
            "recon_perc": info["terminal_perc"],
        }
    rep = MetricsReport(task="dataset_size_ablation", arms=results,
                        config_digests={"config": cfg.digest()}, seed=cfg.seed)
    write_report(rep, ws.reports_dir)
    return rep


def stage_report(ws: Workspace, cfg: RunConfig) -> MetricsReport:
    """Aggregate every task report into one summary with provenance."""
    ws.require(ws.reports_dir, "peft3d eval <task>")
    arms: dict[str, dict[str, float]] = {}
    provenance = {}
    for path in sorted(ws.reports_dir.glob("*.json")):
        if path.stem == "summary":
            continue
        data = read_json(path)
        provenance[data["task"]] = str(path.name)
        for arm, metrics in data["arms"].items():
            row = arms.setdefault(arm, {})
            for key, val in metrics.items():
                if isinstance(val, (int, float)):
                    row[f"{data['task']}.{key}"] = float(val)
    if not arms:
        raise MissingArtifactError(f"no task reports found under {ws.reports_dir}")
    rep = MetricsReport(task="summary", arms=arms,
                        config_digests={"config": cfg.digest(), **provenance}, seed=cfg.seed)
    write_report(rep, ws.reports_dir)
    return rep
