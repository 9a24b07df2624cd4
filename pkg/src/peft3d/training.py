"""Training stages: generator pretraining, anchor inversion, personalization,
full fine-tuning, and two-stage per-image inversion.

Personalization minimizes the reconstruction objective
``perc(G(w_i, c_i), x_i) + lambda * ||G(w_i, c_i) - x_i||`` summed over both
output resolutions, over adapter parameters plus the fully tuned point
decoder, with every other weight frozen (digest-guarded).  The L2 term is
the Euclidean norm scaled by 1/sqrt(numel) so the two resolutions enter at
equal weight.
"""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .adapters import AdapterPolicy, AdapterRegistry, attach_adapters
from .evalsuite import Embedder, perceptual_distance
from .generator import Discriminator, GeneratorConfig, TriPlaneGenerator
from .scene import GEN_PITCH_LIMIT, GEN_YAW_LIMIT, CameraPose, IdentityCorpus, ImageRecord
from .seeding import derive_seed, seed_all
from .serialization import canonical_json, digest_arrays, read_json, write_json


class FrozenWeightError(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lambda_l2: float = 1.0
    lambda_perc: float = 1.0
    resolution_weights: tuple[float, float] = (1.0, 1.0)  # (raw, full)
    anchor_steps: int = 200
    personalize_steps: int = 500
    pti_latent_steps: int = 300
    pti_model_steps: int = 175
    pretrain_steps: int = 1800
    batch_size: int = 4
    lr_latent: float = 5e-2
    lr_adapters: float = 1e-3
    lr_full: float = 1e-4
    lr_gan: float = 2e-3
    lr_gan_d: float = 1e-3
    r1_gamma: float = 1.0
    r1_interval: int = 4
    instance_noise: float = 0.1
    ema_decay: float = 0.995
    seed: int = 0

    def digest(self) -> str:
        from .serialization import digest_text

        return digest_text(canonical_json(asdict(self)))


# ---------------------------------------------------------------------------
# reconstruction objective


def _rms(diff: torch.Tensor) -> torch.Tensor:
    return torch.sqrt(diff.pow(2).mean(dim=(1, 2, 3)) + 1e-12)


def reconstruction_terms(model: TriPlaneGenerator, embedder: Embedder, w: torch.Tensor,
                         poses: torch.Tensor, x_full: torch.Tensor,
                         cfg: TrainConfig) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(total, perc, l2) of the reconstruction objective on a batch."""
    raw, full = model.generate(w, poses)
    x_raw = F.avg_pool2d(x_full, 2)
    wr, wf = cfg.resolution_weights
    perc = wr * perceptual_distance(raw, x_raw, embedder).mean() + wf * perceptual_distance(
        full, x_full, embedder
    ).mean()
    l2 = wr * _rms(raw - x_raw).mean() + wf * _rms(full - x_full).mean()
    total = cfg.lambda_perc * perc + cfg.lambda_l2 * l2
    return total, perc, l2


def _check_finite(loss, step: int, stage: str) -> None:
    value = float(loss.detach()) if isinstance(loss, torch.Tensor) else float(loss)
    if not math.isfinite(value):
        raise DivergenceError(f"{stage} diverged at step {step}: loss={value}")


class RunLog:
    """CSV log with the run-directory schema: step,total_loss,perc_loss,l2_loss,lr."""

    def __init__(self, path: Path | None):
        self.path = path
        self.rows: list[tuple] = []

    def add(self, step: int, total: float, perc: float, l2: float, lr: float) -> None:
        self.rows.append((step, total, perc, l2, lr))

    def write(self) -> None:
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "total_loss", "perc_loss", "l2_loss", "lr"])
            for row in self.rows:
                writer.writerow([row[0]] + [format(v, ".8g") for v in row[1:]])


# ---------------------------------------------------------------------------
# data plumbing


def records_tensor(corpus: IdentityCorpus, records: list[ImageRecord]):
    images = torch.stack(
        [torch.from_numpy(corpus.load_image(rec)).permute(2, 0, 1) for rec in records]
    )
    poses = torch.tensor([[rec.yaw, rec.pitch] for rec in records], dtype=torch.float32)
    return images, poses


@dataclass
class AnchorSet:
    identity_id: str
    names: list[str]
    ws: np.ndarray  # (N, latent_dim)
    poses: np.ndarray  # (N, 2)

    def __len__(self) -> int:
        return self.ws.shape[0]

    def save(self, path: str | Path) -> None:
        write_json(
            path,
            {
                "identity_id": self.identity_id,
                "names": self.names,
                "ws": [[float(x) for x in row] for row in self.ws],
                "poses": [[float(x) for x in row] for row in self.poses],
            },
        )

    @staticmethod
    def load(path: str | Path) -> "AnchorSet":
        data = read_json(path)
        return AnchorSet(
            identity_id=data["identity_id"],
            names=list(data["names"]),
            ws=np.array(data["ws"], dtype=np.float64),
            poses=np.array(data["poses"], dtype=np.float64),
        )

    def subset(self, n: int) -> "AnchorSet":
        if n > len(self):
            raise ValueError(f"cannot take {n} anchors from {len(self)}")
        return AnchorSet(self.identity_id, self.names[:n], self.ws[:n].copy(), self.poses[:n].copy())


# ---------------------------------------------------------------------------
# latent inversion


def invert_latents(model: TriPlaneGenerator, embedder: Embedder, images: torch.Tensor,
                   poses: torch.Tensor, config: TrainConfig, steps: int | None = None,
                   init_w: torch.Tensor | None = None, log: RunLog | None = None,
                   seed_label: str = "invert", loss_fn=None) -> tuple[torch.Tensor, torch.Tensor]:
    """Optimize latents for a batch of images on a frozen model.

    Returns (best_ws, best_losses); per image, the returned latent is the one
    with the lowest loss seen, so the accepted-loss sequence is non-increasing.
    ``loss_fn(w) -> (B,) losses`` overrides the default reconstruction
    objective (masked or downsampled task variants).
    """
    steps = config.anchor_steps if steps is None else steps
    seed_all(derive_seed(config.seed, seed_label))
    n = images.shape[0]
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    if init_w is None:
        init_w = model.mean_latent(seed=derive_seed(config.seed, "mean-latent")).unsqueeze(0).repeat(n, 1)
    w = init_w.clone().detach().requires_grad_(True)
    opt = torch.optim.Adam([w], lr=config.lr_latent)

    def default_losses(wt: torch.Tensor) -> torch.Tensor:
        raw, full = model.generate(wt, poses)
        x_raw = F.avg_pool2d(images, 2)
        wr, wf = config.resolution_weights
        perc = wr * perceptual_distance(raw, x_raw, embedder) + wf * perceptual_distance(full, images, embedder)
        l2 = wr * _rms(raw - x_raw) + wf * _rms(full - images)
        return config.lambda_perc * perc + config.lambda_l2 * l2

    batch_losses = loss_fn if loss_fn is not None else default_losses

    best_w = w.detach().clone()
    best_loss = batch_losses(w).detach()
    for step in range(steps):
        losses = batch_losses(w)
        loss = losses.mean()
        _check_finite(float(loss.detach()), step, "inversion")
        opt.zero_grad()
        loss.backward()
        opt.step()
        with torch.no_grad():
            cur = batch_losses(w).detach()
            better = cur < best_loss
            best_w[better] = w.detach()[better]
            best_loss = torch.where(better, cur, best_loss)
        if log is not None:
            log.add(step, float(best_loss.mean()), 0.0, 0.0, config.lr_latent)
    return best_w.detach(), best_loss


def invert_anchor(image: torch.Tensor, pose: CameraPose, model: TriPlaneGenerator,
                  embedder: Embedder, config: TrainConfig,
                  steps: int | None = None) -> tuple[np.ndarray, float]:
    """Invert a single image into a latent on the frozen model."""
    images = image.unsqueeze(0) if image.ndim == 3 else image
    poses = torch.tensor([[pose.yaw, pose.pitch]], dtype=torch.float32)
    ws, losses = invert_latents(model, embedder, images, poses, config, steps=steps)
    return ws[0].numpy(), float(losses[0])


def build_anchor_set(model: TriPlaneGenerator, corpus: IdentityCorpus, identity_id: str,
                     embedder: Embedder, config: TrainConfig,
                     records: list[ImageRecord] | None = None,
                     out_path: str | Path | None = None) -> AnchorSet:
    records = records if records is not None else corpus.records(identity_id, "reference")
    images, poses = records_tensor(corpus, records)
    ws, _ = invert_latents(model, embedder, images, poses, config, seed_label=f"anchors-{identity_id}")
    anchors = AnchorSet(
        identity_id=identity_id,
        names=[rec.name for rec in records],
        ws=ws.numpy().astype(np.float64),
        poses=poses.numpy().astype(np.float64),
    )
    if out_path is not None:
        anchors.save(out_path)
    return anchors


# ---------------------------------------------------------------------------
# personalization and the full fine-tuning baseline


def frozen_parameter_digest(model: nn.Module) -> str:
    arrays = {
        name: p.detach().cpu().numpy()
        for name, p in model.named_parameters()
        if not p.requires_grad
    }
    return digest_arrays(arrays)


def _recon_eval(model, embedder, ws, poses, images, cfg, batch: int = 16):
    """Full-set reconstruction terms without gradients (the final log row)."""
    tot = perc = l2 = 0.0
    n = images.shape[0]
    with torch.no_grad():
        for i in range(0, n, batch):
            sl = slice(i, min(i + batch, n))
            t, p, l = reconstruction_terms(model, embedder, ws[sl], poses[sl], images[sl], cfg)
            m = sl.stop - sl.start
            tot += float(t) * m
            perc += float(p) * m
            l2 += float(l) * m
    return tot / n, perc / n, l2 / n


def _fit_reconstruction(model, embedder, anchors, images, config, steps, params, lr,
                        log: RunLog | None, stage: str):
    ws = torch.from_numpy(anchors.ws).float()
    poses = torch.from_numpy(anchors.poses).float()
    opt = torch.optim.Adam(params, lr=lr)
    gen = torch.Generator().manual_seed(derive_seed(config.seed, stage, "batches") & 0xFFFF_FFFF)
    n = images.shape[0]
    for step in range(steps):
        idx = torch.randint(0, n, (min(config.batch_size, n),), generator=gen)
        total, perc, l2 = reconstruction_terms(model, embedder, ws[idx], poses[idx], images[idx], config)
        _check_finite(total, step, stage)
        opt.zero_grad()
        total.backward()
        opt.step()
        if log is not None:
            log.add(step, float(total), float(perc), float(l2), lr)
    final = _recon_eval(model, embedder, ws, poses, images, config)
    if log is not None:
        log.add(steps, final[0], final[1], final[2], 0.0)
    return final


def personalize(model: TriPlaneGenerator, corpus: IdentityCorpus, anchors: AnchorSet,
                lora_policy: AdapterPolicy, config: TrainConfig, embedder: Embedder,
                out_dir: str | Path | None = None,
                registry: AdapterRegistry | None = None) -> tuple[AdapterRegistry, dict]:
    """Tune adapters (+ fully trainable decoder) to reconstruct the anchor set.

    All frozen weights are digest-checked before/after; any mutation is a
    hard failure.
    """
    records = {rec.name: rec for rec in corpus.records(anchors.identity_id)}
    recs = [records[name] for name in anchors.names]
    images, _ = records_tensor(corpus, recs)

    if registry is None:
        registry = attach_adapters(model, lora_policy)
    model.train()
    digest_before = frozen_parameter_digest(model)

    out = Path(out_dir) if out_dir is not None else None
    log = RunLog(out / "log.csv" if out else None)
    final = _fit_reconstruction(
        model, embedder, anchors, images, config, config.personalize_steps,
        list(registry.trainable_parameters()), config.lr_adapters, log, "personalize",
    )
    log.write()

    if frozen_parameter_digest(model) != digest_before:
        raise FrozenWeightError("a frozen weight changed during personalization")

    info = {
        "terminal_total": final[0],
        "terminal_perc": final[1],
        "terminal_l2": final[2],
        "rank": lora_policy.rank,
        "variant": lora_policy.variant,
        "steps": config.personalize_steps,
    }
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        registry.save(out / "ckpt_adapters.bin")
        write_json(out / "config.json", {"train": asdict(config), "info": info})
    return registry, info


def full_finetune(model: TriPlaneGenerator, corpus: IdentityCorpus, anchors: AnchorSet,
                  config: TrainConfig, embedder: Embedder,
                  out_dir: str | Path | None = None) -> dict:
    """Baseline arm: the same objective with every generator parameter trainable."""
    records = {rec.name: rec for rec in corpus.records(anchors.identity_id)}
    recs = [records[name] for name in anchors.names]
    images, _ = records_tensor(corpus, recs)
    for p in model.parameters():
        p.requires_grad_(True)
    model.train()

    out = Path(out_dir) if out_dir is not None else None
    log = RunLog(out / "log.csv" if out else None)
    final = _fit_reconstruction(
        model, embedder, anchors, images, config, config.personalize_steps,
        list(model.parameters()), config.lr_full, log, "full-finetune",
    )
    log.write()
    info = {
        "terminal_total": final[0],
        "terminal_perc": final[1],
        "terminal_l2": final[2],
        "trainable": sum(p.numel() for p in model.parameters()),
        "steps": config.personalize_steps,
    }
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        model.save(out / "ckpt_model.bin", step=config.personalize_steps, extra={"stage": "full_finetune"})
        write_json(out / "config.json", {"train": asdict(config), "info": info})
    return info


# ---------------------------------------------------------------------------
# two-stage per-image inversion


def pti_invert(image: torch.Tensor, pose: CameraPose, model: TriPlaneGenerator,
               embedder: Embedder, config: TrainConfig, mode: str = "all",
               registry: AdapterRegistry | None = None):
    """Latent optimization, then per-image model tuning around the pivot.

    ``mode="all"`` tunes every weight (baseline parity); ``mode="adapters"``
    tunes the attached adapters + decoder.  The model is modified in place;
    callers clone per image.  Returns (w, stage1_perc, stage2_perc).
    """
    if image.ndim == 3:
        image = image.unsqueeze(0)
    poses = torch.tensor([[pose.yaw, pose.pitch]], dtype=torch.float32)
    ws, _ = invert_latents(
        model, embedder, image, poses, config, steps=config.pti_latent_steps, seed_label="pti-latent"
    )
    w = ws[0:1]

    def perc_now() -> float:
        with torch.no_grad():
            raw, full = model.generate(w, poses)
            x_raw = F.avg_pool2d(image, 2)
            wr, wf = config.resolution_weights
            return float(
                wr * perceptual_distance(raw, x_raw, embedder)
                + wf * perceptual_distance(full, image, embedder)
            )

    stage1_perc = perc_now()
    if config.pti_model_steps == 0:
        return w[0].numpy(), stage1_perc, stage1_perc

    if mode == "all":
        for p in model.parameters():
            p.requires_grad_(True)
        params = list(model.parameters())
        lr = config.lr_full
    elif mode == "adapters":
        if registry is None:
            raise ValueError("mode='adapters' requires the attached registry")
        params = list(registry.trainable_parameters())
        for p in params:  # stage 1 froze everything, including adapters
            p.requires_grad_(True)
        lr = config.lr_adapters
    else:
        raise ValueError(f"unknown pti mode {mode!r}")

    opt = torch.optim.Adam(params, lr=lr)
    best_perc = stage1_perc
    best_state = copy.deepcopy(model.state_dict())
    for step in range(config.pti_model_steps):
        total, _, _ = reconstruction_terms(model, embedder, w, poses, image, config)
        _check_finite(total, step, "pti")
        opt.zero_grad()
        total.backward()
        opt.step()
        cur = perc_now()
        if cur < best_perc:
            best_perc = cur
            best_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    return w[0].numpy(), stage1_perc, best_perc


# ---------------------------------------------------------------------------
# pretraining


def _pose_batch(gen: torch.Generator, n: int) -> torch.Tensor:
    yaw = (torch.rand(n, generator=gen) * 2 - 1) * GEN_YAW_LIMIT
    pitch = (torch.rand(n, generator=gen) * 2 - 1) * GEN_PITCH_LIMIT
    return torch.stack([yaw, pitch], dim=-1)


def pretrain(corpus: IdentityCorpus, config: TrainConfig,
             gen_config: GeneratorConfig | None = None,
             out_dir: str | Path | None = None,
             steps: int | None = None) -> TriPlaneGenerator:
    """Adversarial pretraining of the global prior on the multi-identity corpus.

    Non-saturating logistic losses with an R1 penalty on real batches and an
    exponential weight average of the generator; the averaged generator is
    what gets checkpointed.
    """
    if len(corpus.identity_ids) < 2:
        raise ValueError("pretraining needs a corpus with >= 2 identities")
    steps = config.pretrain_steps if steps is None else steps
    seed_all(derive_seed(config.seed, "pretrain"))
    gen_config = gen_config or GeneratorConfig()

    model = TriPlaneGenerator(gen_config, seed=derive_seed(config.seed, "g-init"))
    disc = Discriminator(gen_config.image_resolution, seed=derive_seed(config.seed, "d-init"))
    ema = copy.deepcopy(model)
    for p in ema.parameters():
        p.requires_grad_(False)

    images, _ = corpus_images_tensor(corpus)
    opt_g = torch.optim.Adam(model.parameters(), lr=config.lr_gan, betas=(0.0, 0.99))
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.lr_gan, betas=(0.0, 0.99))
    gen = torch.Generator().manual_seed(derive_seed(config.seed, "pretrain-batches") & 0xFFFF_FFFF)

    out = Path(out_dir) if out_dir is not None else None
    log = RunLog(out / "log.csv" if out else None)
    b = config.batch_size

    for step in range(steps):
        # discriminator
        idx = torch.randint(0, images.shape[0], (b,), generator=gen)
        real = images[idx]
        z = torch.randn(b, gen_config.latent_dim, generator=gen)
        with torch.no_grad():
            _, fake = model.generate(model.map_latent(z), _pose_batch(gen, b))
        d_fake = disc(fake)
        if step % config.r1_interval == 0:
            real_req = real.detach().requires_grad_(True)
            d_real = disc(real_req)
            grad = torch.autograd.grad(d_real.sum(), real_req, create_graph=True)[0]
            r1 = grad.pow(2).sum(dim=(1, 2, 3)).mean()
            d_loss = (
                F.softplus(d_fake).mean()
                + F.softplus(-d_real).mean()
                + 0.5 * config.r1_gamma * config.r1_interval * r1
            )
        else:
            d_real = disc(real)
            d_loss = F.softplus(d_fake).mean() + F.softplus(-d_real).mean()
        _check_finite(d_loss, step, "pretrain-d")
        opt_d.zero_grad()
        d_loss.backward()
        opt_d.step()

        # generator
        z = torch.randn(b, gen_config.latent_dim, generator=gen)
        _, fake = model.generate(model.map_latent(z), _pose_batch(gen, b))
        g_loss = F.softplus(-disc(fake)).mean()
        _check_finite(g_loss, step, "pretrain-g")
        opt_g.zero_grad()
        g_loss.backward()
        opt_g.step()

        with torch.no_grad():
            for pe, pm in zip(ema.parameters(), model.parameters()):
                pe.lerp_(pm.detach(), 1.0 - config.ema_decay)
            for be, bm in zip(ema.buffers(), model.buffers()):
                be.copy_(bm)

        # log schema note: for the adversarial stage the perc/l2 columns carry
        # the generator/discriminator losses
        g_val, d_val = float(g_loss.detach()), float(d_loss.detach())
        log.add(step, g_val + d_val, g_val, d_val, config.lr_gan)

    log.write()
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        ema.save(out / "ckpt_final.bin", step=steps, seed=config.seed,
                 extra={"stage": "pretrain", "train_config_digest": config.digest()})
        write_json(out / "config.json", {"train": asdict(config), "stage": "pretrain"})
    return ema


def corpus_images_tensor(corpus: IdentityCorpus):
    recs = corpus.all_records()
    images = torch.stack(
        [torch.from_numpy(corpus.load_image(rec)).permute(2, 0, 1) for rec in recs]
    )
    poses = torch.tensor([[rec.yaw, rec.pitch] for rec in recs], dtype=torch.float32)
    return images, poses
