"""Downstream task drivers: novel views, appearance synthesis, inpainting,
super-resolution, and semantic editing, each runnable against any arm.

Every task is a pure function of (model weights, task spec, seed).  Image
inputs and outputs are float tensors in [0, 1]; grid/metric persistence is a
thin helper so the pipeline owns the directory layout.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from . import scene
from .evalsuite import Embedder, embed_images, id_sim_batch, perceptual_distance
from .generator import TriPlaneGenerator
from .hull import EditDirection, PersonalHull, edit_alpha, find_direction, project_to_hull
from .scene import EVAL_PITCH_LIMIT, EVAL_YAW_LIMIT, CameraPose, IdentityCorpus
from .seeding import derive_seed
from .serialization import write_json
from .training import TrainConfig, invert_latents, pti_invert, _rms

TASKS = ("invert", "views", "synthesize", "inpaint", "superres", "edit")
SR_FACTORS = (2, 4, 8)
EDIT_ATTRIBUTES = ("smile", "age")
EDIT_MAGNITUDES = (-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0)  # units of anchor-projection std
VIEW_GRID = (5, 3)  # yaw x pitch


@dataclass(frozen=True)
class TaskSpec:
    task: str
    arm: str
    identity_id: str
    seed: int = 0
    sr_factor: int = 4
    edit_attribute: str = "smile"
    edit_magnitudes: tuple[float, ...] = EDIT_MAGNITUDES
    yaw_range: float = EVAL_YAW_LIMIT
    pitch_range: float = EVAL_PITCH_LIMIT

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if self.sr_factor not in SR_FACTORS:
            raise ValueError(f"sr factor must be one of {SR_FACTORS}")
        if self.edit_attribute not in EDIT_ATTRIBUTES:
            raise ValueError(f"edit attribute must be one of {EDIT_ATTRIBUTES}")
        if self.yaw_range > EVAL_YAW_LIMIT + 1e-9 or self.pitch_range > EVAL_PITCH_LIMIT + 1e-9:
            raise ValueError("view ranges exceed the evaluation limits")


def view_grid(yaw_range: float = EVAL_YAW_LIMIT, pitch_range: float = EVAL_PITCH_LIMIT,
              shape: tuple[int, int] = VIEW_GRID) -> list[CameraPose]:
    return [
        CameraPose(float(y), float(p))
        for p in np.linspace(-pitch_range, pitch_range, shape[1])
        for y in np.linspace(-yaw_range, yaw_range, shape[0])
    ]


def random_views(n: int, rng: np.random.Generator, yaw_range: float = EVAL_YAW_LIMIT,
                 pitch_range: float = EVAL_PITCH_LIMIT) -> list[CameraPose]:
    return [
        CameraPose(float(rng.uniform(-yaw_range, yaw_range)), float(rng.uniform(-pitch_range, pitch_range)))
        for _ in range(n)
    ]


def render_views(model: TriPlaneGenerator, w: np.ndarray | torch.Tensor,
                 poses: list[CameraPose]) -> torch.Tensor:
    wt = torch.as_tensor(np.asarray(w), dtype=torch.float32)
    if wt.ndim == 1:
        wt = wt.unsqueeze(0)
    wt = wt.repeat(len(poses), 1)
    with torch.no_grad():
        _, full = model.generate(wt, poses)
    return full.clamp(0, 1)


# ---------------------------------------------------------------------------
# novel-view synthesis


def novel_views(model: TriPlaneGenerator, embedder: Embedder, image: torch.Tensor,
                pose: CameraPose, ref_embs: torch.Tensor, config: TrainConfig,
                mode: str = "pti", hull: PersonalHull | None = None,
                registry=None) -> dict:
    """Invert one image then render the evaluation view grid with ID scores.

    With a registry attached (an adapter arm) the model is tuned in place, so
    callers pass a disposable instance; without one, the model is cloned.
    """
    if mode == "pti":
        work = model if registry is not None else copy.deepcopy(model)
        w, s1, s2 = pti_invert(image, pose, work, embedder, config,
                               mode="adapters" if registry is not None else "all",
                               registry=registry)
        render_model = work
    elif mode == "hull":
        if hull is None:
            raise ValueError("hull-projection inversion needs the personal hull")
        poses_t = torch.tensor([[pose.yaw, pose.pitch]], dtype=torch.float32)
        ws, _ = invert_latents(model, embedder, image.unsqueeze(0), poses_t, config,
                               steps=config.pti_latent_steps, seed_label="hull-invert")
        w, _ = project_to_hull(ws[0].numpy().astype(np.float64), hull)
        s1 = s2 = float("nan")
        render_model = model
    else:
        raise ValueError(f"unknown inversion mode {mode!r}")

    poses = view_grid()
    views = render_views(render_model, np.asarray(w, dtype=np.float32), poses)
    sims = id_sim_batch(views, ref_embs, embedder)
    return {
        "w": np.asarray(w, dtype=np.float64),
        "views": views,
        "poses": poses,
        "id_sim_per_view": sims.numpy().tolist(),
        "id_sim_mean": float(sims.mean()),
        "stage1_perc": s1,
        "stage2_perc": s2,
        "model": render_model,
    }


# ---------------------------------------------------------------------------
# appearance synthesis


def synthesize(model: TriPlaneGenerator, hull: PersonalHull, n: int, seed: int = 0):
    """n in-hull samples rendered at random poses, with alpha certificates."""
    rng = np.random.default_rng(derive_seed(seed, "synthesize"))
    ws, alphas = [], []
    for _ in range(n):
        w, alpha = hull.sample_with_alpha(rng)
        ws.append(w)
        alphas.append(alpha)
    if n == 0:
        return torch.zeros(0, 3, model.cfg.image_resolution, model.cfg.image_resolution), [], []
    poses = random_views(n, rng)
    wt = torch.tensor(np.stack(ws), dtype=torch.float32)
    images = []
    with torch.no_grad():
        for i in range(0, n, 32):
            _, full = model.generate(wt[i : i + 32], poses[i : i + 32])
            images.append(full.clamp(0, 1))
    return torch.cat(images), alphas, poses


# ---------------------------------------------------------------------------
# inpainting


def center_mask(bbox: tuple[int, int, int, int], shape: tuple[int, int]) -> np.ndarray:
    """Centered rectangle covering 25% of the face box (half side lengths)."""
    r0, c0, r1, c1 = bbox
    h, w = r1 - r0, c1 - c0
    cr, cc = (r0 + r1) // 2, (c0 + c1) // 2
    mh, mw = max(1, h // 4), max(1, w // 4)
    mask = np.zeros(shape, dtype=bool)
    mask[cr - mh : cr + mh, cc - mw : cc + mw] = True
    return mask


def _dilate(mask: np.ndarray, iters: int) -> np.ndarray:
    out = mask.copy()
    for _ in range(iters):
        grown = out.copy()
        grown[1:, :] |= out[:-1, :]
        grown[:-1, :] |= out[1:, :]
        grown[:, 1:] |= out[:, :-1]
        grown[:, :-1] |= out[:, 1:]
        out = grown
    return out


def inpaint(model: TriPlaneGenerator, embedder: Embedder, image: torch.Tensor,
            pose: CameraPose, mask: np.ndarray, config: TrainConfig,
            bg_mask: np.ndarray | None = None) -> dict:
    """Reconstruct the masked region; blend with a 2-pixel linear feather.

    The inversion objective is computed only over unmasked pixels (the
    perceptual term is fully masked: both inputs are zeroed inside the mask).
    Pixels outside mask+feather are returned bit-exactly from the input.
    """
    if mask.mean() > 0.90:
        raise ValueError("mask covers more than 90% of the image")
    keep = torch.from_numpy(~mask).float()
    keep_raw = F.avg_pool2d(keep[None, None], 2)[0, 0]
    poses_t = torch.tensor([[pose.yaw, pose.pitch]], dtype=torch.float32)
    target = image.unsqueeze(0)
    x_raw = F.avg_pool2d(target, 2)

    def masked_loss(wt: torch.Tensor) -> torch.Tensor:
        raw, full = model.generate(wt, poses_t)
        wr, wf = config.resolution_weights
        perc = wr * perceptual_distance(raw * keep_raw, x_raw * keep_raw, embedder) + \
            wf * perceptual_distance(full * keep, target * keep, embedder)
        l2 = wr * _rms((raw - x_raw) * keep_raw) + wf * _rms((full - target) * keep)
        return config.lambda_perc * perc + config.lambda_l2 * l2

    ws, losses = invert_latents(model, embedder, target, poses_t, config,
                                steps=config.pti_latent_steps, seed_label="inpaint",
                                loss_fn=masked_loss)
    with torch.no_grad():
        _, gen_full = model.generate(ws, poses_t)
    gen = gen_full[0].clamp(0, 1).permute(1, 2, 0).numpy().astype(np.float64)
    inp = image.permute(1, 2, 0).numpy().astype(np.float64)

    if bg_mask is not None:
        gen[mask & bg_mask] = scene.BACKGROUND

    d1 = _dilate(mask, 1)
    d2 = _dilate(mask, 2)
    weight = np.zeros(mask.shape)
    weight[d2] = 1.0 / 3.0
    weight[d1] = 2.0 / 3.0
    weight[mask] = 1.0
    out = inp.copy()
    band = d2 & ~mask
    out[mask] = gen[mask]
    out[band] = (weight[band, None] * gen[band] + (1.0 - weight[band, None]) * inp[band])
    # bit-exact outside mask + feather
    out[~d2] = inp[~d2]
    return {
        "output": torch.from_numpy(out).float().permute(2, 0, 1),
        "w": ws[0].numpy(),
        "mask": mask,
        "feather_band": band,
        "terminal_loss": float(losses[0]),
    }


# ---------------------------------------------------------------------------
# super-resolution


def area_downsample(image: torch.Tensor, factor: int) -> torch.Tensor:
    x = image.unsqueeze(0) if image.ndim == 3 else image
    return F.avg_pool2d(x, factor)


def superres(model: TriPlaneGenerator, embedder: Embedder, image: torch.Tensor,
             pose: CameraPose, config: TrainConfig, factor: int = 4) -> dict:
    """Invert against the area-downsampled target; emit the full-res render."""
    if factor not in SR_FACTORS:
        raise ValueError(f"sr factor must be one of {SR_FACTORS}")
    target_low = area_downsample(image, factor)
    poses_t = torch.tensor([[pose.yaw, pose.pitch]], dtype=torch.float32)

    def lowres_loss(wt: torch.Tensor) -> torch.Tensor:
        _, full = model.generate(wt, poses_t)
        down = F.avg_pool2d(full, factor)
        perc = perceptual_distance(down, target_low, embedder)
        l2 = _rms(down - target_low)
        return config.lambda_perc * perc + config.lambda_l2 * l2

    ws, losses = invert_latents(model, embedder, image.unsqueeze(0), poses_t, config,
                                steps=config.pti_latent_steps, seed_label="superres",
                                loss_fn=lowres_loss)
    with torch.no_grad():
        _, full = model.generate(ws, poses_t)
        out = full.clamp(0, 1)
        down = F.avg_pool2d(out, factor)
        consistency = float(perceptual_distance(down, target_low, embedder))
    return {
        "output": out[0],
        "input_low": target_low[0],
        "w": ws[0].numpy(),
        "terminal_loss": float(losses[0]),
        "consistency_perc": consistency,
    }


# ---------------------------------------------------------------------------
# semantic editing


ATTRIBUTE_STATS = {
    "smile": scene.mouth_curvature_stat,
    "age": scene.forehead_wrinkle_stat,
}


def probe_records(corpus: IdentityCorpus, attribute: str, n_per_class: int = 30,
                  margin: float = 0.15):
    """Balanced attribute-labeled probe images across corpus identities."""
    pos, neg = [], []
    for rec in corpus.all_records("reference"):
        v = rec.params[attribute]
        if v > margin and len(pos) < n_per_class:
            pos.append(rec)
        elif v < -margin and len(neg) < n_per_class:
            neg.append(rec)
    if len(pos) < 10 or len(neg) < 10:
        raise ValueError(f"not enough probe images for attribute {attribute!r}")
    return pos, neg


def fit_attribute_direction(model: TriPlaneGenerator, embedder: Embedder,
                            corpus: IdentityCorpus, attribute: str, config: TrainConfig,
                            n_per_class: int = 30, steps: int = 120) -> EditDirection:
    """Invert labeled probe images in this arm's model and fit the separator."""
    from .training import records_tensor

    pos, neg = probe_records(corpus, attribute, n_per_class)
    recs = pos + neg
    images, poses = records_tensor(corpus, recs)
    ws, _ = invert_latents(model, embedder, images, poses, config, steps=steps,
                           seed_label=f"probe-{attribute}")
    labels = np.array([1] * len(pos) + [0] * len(neg))
    return find_direction(ws.numpy().astype(np.float64), labels, attribute)


def semantic_edit(model: TriPlaneGenerator, embedder: Embedder, image: torch.Tensor,
                  pose: CameraPose, attribute: str, hull: PersonalHull,
                  direction: EditDirection, config: TrainConfig,
                  magnitudes: tuple[float, ...] = EDIT_MAGNITUDES,
                  ref_embs: torch.Tensor | None = None,
                  stat_poses: list[CameraPose] | None = None,
                  edit_mode: str = "w-projected") -> dict:
    """Invert, edit along the attribute direction per magnitude, re-render.

    Magnitudes are in units of the anchor projections' standard deviation
    along the direction.  The attribute statistic is averaged over the input
    pose plus ``stat_poses`` renders to suppress rasterization noise.
    """
    poses_t = torch.tensor([[pose.yaw, pose.pitch]], dtype=torch.float32)
    ws, _ = invert_latents(model, embedder, image.unsqueeze(0), poses_t, config,
                           steps=config.pti_latent_steps, seed_label="edit-invert")
    w0 = ws[0].numpy().astype(np.float64)
    sigma = float(np.std(hull.anchors @ direction.vector))
    if sigma <= 1e-9:
        sigma = 1.0
    stat_fn = ATTRIBUTE_STATS[attribute]
    if stat_poses is None:
        stat_poses = [CameraPose(y, 0.0) for y in (-0.15, -0.05, 0.05, 0.15)]

    outputs, stats, sims = [], [], []
    for mag in magnitudes:
        w_edit, _ = edit_alpha(w0, direction, mag * sigma, hull, mode=edit_mode)
        frame = render_views(model, w_edit.astype(np.float32), [pose])[0]
        outputs.append(frame)
        stat_frames = render_views(model, w_edit.astype(np.float32), stat_poses)
        values = [stat_fn(f.permute(1, 2, 0).numpy()) for f in [frame] + list(stat_frames)]
        stats.append(float(np.mean(values)))
        if ref_embs is not None:
            sims.append(float(id_sim_batch(frame.unsqueeze(0), ref_embs, embedder)[0]))
    return {
        "w0": w0,
        "magnitudes": list(magnitudes),
        "outputs": torch.stack(outputs),
        "attribute_stats": stats,
        "id_sims": sims,
        "sigma": sigma,
    }


# ---------------------------------------------------------------------------
# output persistence


def save_image_grid(images: torch.Tensor, path: str | Path, ncol: int | None = None) -> None:
    """Tile (N, 3, H, W) images into one PNG."""
    n, _, h, w = images.shape
    ncol = ncol or min(n, 8)
    nrow = (n + ncol - 1) // ncol
    grid = np.ones((nrow * h, ncol * w, 3), dtype=np.float32)
    for i in range(n):
        r, c = divmod(i, ncol)
        grid[r * h : (r + 1) * h, c * w : (c + 1) * w] = images[i].permute(1, 2, 0).numpy()
    Image.fromarray((np.clip(grid, 0, 1) * 255).round().astype(np.uint8)).save(path)


def save_task_outputs(out_dir: str | Path, images: dict[str, torch.Tensor],
                      metrics: dict) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, imgs in images.items():
        if imgs.ndim == 3:
            imgs = imgs.unsqueeze(0)
        save_image_grid(imgs, out / f"{name}.png")
    write_json(out / "metrics.json", metrics)
    return out
