"""Identity embedder and quantitative metrics.

The embedder is a small conv net trained in-repo with a cosine-softmax
metric objective on corpus identities; every identity-similarity number in
the repo is gated on its held-out verification accuracy.  Its intermediate
conv features also provide the perceptual distance used as the training
loss and as the evaluation metric.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .scene import EVAL_PITCH_LIMIT, EVAL_YAW_LIMIT, CameraPose, IdentityCorpus
from .seeding import derive_seed
from .serialization import canonical_json, digest_arrays, load_blob, save_blob, write_json


class GateError(RuntimeError):
    """Raised when the embedder fails its verification-accuracy gate."""


@dataclass(frozen=True)
class EmbedderConfig:
    embed_dim: int = 32
    channels: tuple[int, ...] = (24, 48, 96, 96)
    steps: int = 1200
    batch_size: int = 32
    lr: float = 2e-3
    logit_scale: float = 16.0
    min_accuracy: float = 0.90
    seed: int = 0


class Embedder(nn.Module):
    """64x64 RGB -> unit-norm identity embedding, with conv feature taps."""

    def __init__(self, config: EmbedderConfig | None = None, n_classes: int = 0):
        super().__init__()
        self.config = config or EmbedderConfig()
        torch.manual_seed(derive_seed(self.config.seed, "embedder-init") & 0xFFFF_FFFF)
        chans = self.config.channels
        convs = []
        prev = 3
        for ch in chans:
            convs.append(nn.Conv2d(prev, ch, 3, stride=2, padding=1))
            prev = ch
        self.convs = nn.ModuleList(convs)
        self.head = nn.Linear(prev, self.config.embed_dim)
        if n_classes:
            self.classifier = nn.Parameter(torch.randn(n_classes, self.config.embed_dim) * 0.1)
        else:
            self.classifier = None

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        h = x * 2.0 - 1.0
        feats = []
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.2)
            feats.append(h)
        return feats

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x)[-1]
        h = h.mean(dim=(2, 3))
        e = self.head(h)
        return F.normalize(e, dim=-1)

    def digest(self) -> str:
        arrays = {k: v.detach().cpu().numpy() for k, v in self.state_dict().items() if k != "classifier"}
        return digest_arrays(arrays)

    def save(self, path: str | Path, extra: dict | None = None) -> str:
        arrays = {k: v.detach().cpu().numpy() for k, v in self.state_dict().items() if k != "classifier"}
        manifest = {
            "kind": "embedder_checkpoint",
            "embed_dim": self.config.embed_dim,
            "channels": list(self.config.channels),
            "digest": self.digest(),
        }
        if extra:
            manifest.update(extra)
        return save_blob(path, arrays, manifest)

    @staticmethod
    def load(path: str | Path) -> "Embedder":
        arrays, manifest = load_blob(path)
        if manifest.get("kind") != "embedder_checkpoint":
            raise ValueError(f"{path} is not an embedder checkpoint")
        cfg = EmbedderConfig(embed_dim=manifest["embed_dim"], channels=tuple(manifest["channels"]))
        model = Embedder(cfg)
        model.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()}, strict=False)
        for p in model.parameters():
            p.requires_grad_(False)
        return model


def _augment(x: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """Blur/noise/brightness jitter so the embedder tolerates neural renders."""
    b = x.shape[0]
    blur_mask = (torch.rand(b, generator=gen) < 0.5).to(x.dtype).view(b, 1, 1, 1)
    blurred = F.avg_pool2d(x, 3, stride=1, padding=1)
    x = blur_mask * blurred + (1 - blur_mask) * x
    x = x + torch.randn(x.shape, generator=gen) * 0.02
    bright = (torch.rand(b, 1, 1, 1, generator=gen) - 0.5) * 0.12
    return (x + bright).clamp(0.0, 1.0)


def corpus_tensor(corpus: IdentityCorpus, split: str = "all") -> tuple[torch.Tensor, list[str]]:
    """Stack corpus images into a (N, 3, H, W) tensor with identity labels."""
    images, labels = [], []
    for iid in corpus.identity_ids:
        for rec in corpus.records(iid, split):
            images.append(torch.from_numpy(corpus.load_image(rec)).permute(2, 0, 1))
            labels.append(iid)
    return torch.stack(images), labels


def verification_accuracy(embs: torch.Tensor, labels: list[str], n_pairs: int = 800,
                          seed: int = 0) -> tuple[float, float]:
    """Optimal-threshold same/different accuracy and same>diff triple rate."""
    rng = np.random.default_rng(seed)
    by_id: dict[str, list[int]] = {}
    for i, lab in enumerate(labels):
        by_id.setdefault(lab, []).append(i)
    ids = [k for k, v in by_id.items() if len(v) >= 2]
    cosines, truth = [], []
    for k in range(n_pairs):
        if k % 2 == 0:
            iid = ids[rng.integers(len(ids))]
            i, j = rng.choice(by_id[iid], size=2, replace=False)
            truth.append(1)
        else:
            ia, ib = rng.choice(len(ids), size=2, replace=False)
            i = by_id[ids[ia]][rng.integers(len(by_id[ids[ia]]))]
            j = by_id[ids[ib]][rng.integers(len(by_id[ids[ib]]))]
            truth.append(0)
        cosines.append(float(embs[i] @ embs[j]))
    cos = np.array(cosines)
    truth_a = np.array(truth)
    best = 0.0
    for thr in np.unique(cos):
        acc = float(np.mean((cos >= thr) == truth_a))
        best = max(best, acc)
    same = cos[truth_a == 1]
    diff = cos[truth_a == 0]
    n_trip = min(len(same), len(diff))
    triple_rate = float(np.mean(same[:n_trip] > diff[:n_trip]))
    return best, triple_rate


def train_embedder(corpus: IdentityCorpus, heldout: IdentityCorpus,
                   config: EmbedderConfig | None = None) -> tuple[Embedder, dict]:
    """Train the identity embedder and enforce the verification-accuracy gate."""
    cfg = config or EmbedderConfig()
    if len(corpus.identity_ids) < 10:
        raise ValueError("embedder training needs a corpus with >= 10 identities")
    images, labels = corpus_tensor(corpus)
    ids = sorted(set(labels))
    label_idx = torch.tensor([ids.index(lab) for lab in labels])

    model = Embedder(cfg, n_classes=len(ids))
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    gen = torch.Generator().manual_seed(derive_seed(cfg.seed, "embedder-train") & 0xFFFF_FFFF)

    model.train()
    for step in range(cfg.steps):
        idx = torch.randint(0, images.shape[0], (cfg.batch_size,), generator=gen)
        batch = _augment(images[idx], gen)
        emb = model.embed(batch)
        logits = cfg.logit_scale * emb @ F.normalize(model.classifier, dim=-1).T
        loss = F.cross_entropy(logits, label_idx[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)

    held_images, held_labels = corpus_tensor(heldout)
    with torch.no_grad():
        held_embs = model.embed(held_images)
    accuracy, triple_rate = verification_accuracy(held_embs, held_labels, seed=cfg.seed)
    report = {
        "verification_accuracy": accuracy,
        "triple_rate": triple_rate,
        "n_train_identities": len(ids),
        "n_heldout_identities": len(heldout.identity_ids),
        "digest": model.digest(),
    }
    if accuracy < cfg.min_accuracy:
        raise GateError(
            f"embedder verification accuracy {accuracy:.3f} below gate {cfg.min_accuracy:.2f}; "
            "identity metrics would be meaningless"
        )
    return model, report


# ---------------------------------------------------------------------------
# metrics


def to_tensor_image(img) -> torch.Tensor:
    """(H, W, 3) array in [0,1] or uint8 -> (3, H, W) float tensor."""
    if isinstance(img, torch.Tensor):
        t = img
    else:
        arr = np.asarray(img)
        if arr.dtype == np.uint8:
            arr = arr.astype(np.float32) / 255.0
        t = torch.from_numpy(np.ascontiguousarray(arr)).float()
    if t.ndim == 3 and t.shape[-1] == 3 and t.shape[0] != 3:
        t = t.permute(2, 0, 1)
    return t.float()


def embed_images(embedder: Embedder, images: torch.Tensor, batch: int = 64) -> torch.Tensor:
    outs = []
    with torch.no_grad():
        for i in range(0, images.shape[0], batch):
            outs.append(embedder.embed(images[i : i + batch]))
    return torch.cat(outs)


def id_sim(image, reference, embedder: Embedder) -> float:
    """Max cosine similarity of the image to the reference set (in [-1, 1])."""
    ref = reference
    if isinstance(ref, torch.Tensor) and ref.ndim == 2:
        ref_embs = ref
    else:
        if isinstance(ref, (list, tuple)):
            ref = torch.stack([to_tensor_image(r) for r in ref])
        if ref.ndim != 4 or ref.shape[0] == 0:
            raise ValueError("reference set must be nonempty")
        ref_embs = embed_images(embedder, ref)
    if ref_embs.shape[0] == 0:
        raise ValueError("reference set must be nonempty")
    img = to_tensor_image(image)
    with torch.no_grad():
        e = embedder.embed(img.unsqueeze(0))[0]
    return float((ref_embs @ e).max())


def id_sim_batch(images: torch.Tensor, ref_embs: torch.Tensor, embedder: Embedder) -> torch.Tensor:
    if ref_embs.shape[0] == 0:
        raise ValueError("reference set must be nonempty")
    embs = embed_images(embedder, images)
    return (embs @ ref_embs.T).max(dim=1).values


PIXEL_WEIGHT = 0.5


def _normalized_feats(embedder: Embedder, x: torch.Tensor) -> list[torch.Tensor]:
    feats = embedder.features(x)
    return [f / torch.sqrt(f.pow(2).sum(dim=1, keepdim=True) + 1e-10) for f in feats]


def perceptual_distance(a: torch.Tensor, b: torch.Tensor, embedder: Embedder) -> torch.Tensor:
    """Layer-weighted feature distance; symmetric, zero iff inputs identical.

    Accepts (3, H, W) or (B, 3, H, W); both inputs must share a resolution.
    Differentiable, so it doubles as the training reconstruction loss.
    """
    if a.ndim == 3:
        a = a.unsqueeze(0)
    if b.ndim == 3:
        b = b.unsqueeze(0)
    if a.shape[-2:] != b.shape[-2:]:
        raise ValueError(f"resolution mismatch: {tuple(a.shape[-2:])} vs {tuple(b.shape[-2:])}")
    fa = _normalized_feats(embedder, a)
    fb = _normalized_feats(embedder, b)
    dist = PIXEL_WEIGHT * (a - b).pow(2).mean(dim=(1, 2, 3))
    for la, lb in zip(fa, fb):
        dist = dist + (la - lb).pow(2).mean(dim=(1, 2, 3))
    return dist


def perceptual_features(embedder: Embedder, images: torch.Tensor, batch: int = 64):
    """Precompute normalized feature pyramids for pairwise distance reuse."""
    pyramids = None
    with torch.no_grad():
        for i in range(0, images.shape[0], batch):
            chunk = images[i : i + batch]
            feats = _normalized_feats(embedder, chunk)
            feats = [chunk] + feats
            if pyramids is None:
                pyramids = [[f] for f in feats]
            else:
                for store, f in zip(pyramids, feats):
                    store.append(f)
    return [torch.cat(store) for store in pyramids]


def perceptual_distance_from_feats(pyr, i, j) -> float:
    pix = PIXEL_WEIGHT * (pyr[0][i] - pyr[0][j]).pow(2).mean()
    total = pix
    for level in pyr[1:]:
        total = total + (level[i] - level[j]).pow(2).mean()
    return float(total)


def diversity(model, hull, training_images: torch.Tensor, embedder: Embedder,
              n: int = 1000, seed: int = 0, batch: int = 32) -> tuple[float, int]:
    """Mean within-cluster std of pairwise perceptual distances.

    Generates n hull samples at random evaluation poses, assigns each to the
    nearest training image by perceptual distance (ties to the lowest index),
    computes the std of pairwise distances within each cluster, and averages
    over clusters; clusters with fewer than two members are excluded and the
    surviving count is returned.
    """
    k = training_images.shape[0]
    if k < 2:
        raise ValueError("diversity requires k >= 2 training images")
    rng = np.random.default_rng(derive_seed(seed, "diversity"))
    samples = []
    with torch.no_grad():
        for i in range(0, n, batch):
            m = min(batch, n - i)
            ws = torch.stack([torch.from_numpy(hull.sample(rng)).float() for _ in range(m)])
            poses = [
                CameraPose(rng.uniform(-EVAL_YAW_LIMIT, EVAL_YAW_LIMIT),
                           rng.uniform(-EVAL_PITCH_LIMIT, EVAL_PITCH_LIMIT))
                for _ in range(m)
            ]
            _, full = model.generate(ws, poses)
            samples.append(full.clamp(0, 1))
    samples = torch.cat(samples)

    all_images = torch.cat([training_images, samples])
    pyr = perceptual_features(embedder, all_images)
    assign = []
    for si in range(n):
        dists = [perceptual_distance_from_feats(pyr, k + si, t) for t in range(k)]
        assign.append(int(np.argmin(dists)))  # argmin takes the lowest index on ties
    stds = []
    empty = 0
    for t in range(k):
        members = [k + si for si, a in enumerate(assign) if a == t]
        if len(members) < 2:
            empty += 1
            continue
        pd = [
            perceptual_distance_from_feats(pyr, members[i], members[j])
            for i in range(len(members))
            for j in range(i + 1, len(members))
        ]
        stds.append(float(np.std(pd)))
    if not stds:
        warnings.warn("all samples collapsed into one cluster; diversity over remaining clusters is empty")
        return 0.0, 0
    if empty:
        warnings.warn(f"{empty} of {k} clusters had fewer than two members and were excluded")
    return float(np.mean(stds)), len(stds)


def interpolation_curve(model, hull, embedder: Embedder, ref_embs: torch.Tensor,
                        pairs: int = 10, steps: int = 10, views: int = 20,
                        seed: int = 0) -> np.ndarray:
    """Mean ID_sim per interpolation weight over random anchor pairs and views."""
    if hull.anchors.shape[0] < 2:
        raise ValueError("interpolation needs at least two anchors")
    rng = np.random.default_rng(derive_seed(seed, "interp-curve"))
    thetas = np.linspace(0.0, 1.0, steps)
    acc = np.zeros(steps)
    with torch.no_grad():
        for _ in range(pairs):
            ia, ib = rng.choice(hull.anchors.shape[0], size=2, replace=False)
            poses = [
                CameraPose(rng.uniform(-EVAL_YAW_LIMIT, EVAL_YAW_LIMIT),
                           rng.uniform(-EVAL_PITCH_LIMIT, EVAL_PITCH_LIMIT))
                for _ in range(views)
            ]
            for ti, theta in enumerate(thetas):
                w = hull.interpolate_index(ia, ib, float(theta))
                wt = torch.from_numpy(w).float().unsqueeze(0).repeat(views, 1)
                _, full = model.generate(wt, poses)
                acc[ti] += float(id_sim_batch(full.clamp(0, 1), ref_embs, embedder).mean())
    return acc / pairs


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    task: str
    arms: dict[str, dict[str, float]]
    config_digests: dict[str, str] = field(default_factory=dict)
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "arms": self.arms,
            "config_digests": self.config_digests,
            "seed": self.seed,
        }


def write_report(rep: MetricsReport, out_dir: str | Path) -> tuple[Path, Path]:
    """Serialize a metrics report to reports/<task>.csv and .json."""
    if not rep.arms:
        raise ValueError("report requires at least one arm")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    json_path = out / f"{rep.task}.json"
    csv_path = out / f"{rep.task}.csv"
    write_json(json_path, rep.to_dict())
    metrics = sorted({m for arm in rep.arms.values() for m in arm})
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["arm"] + metrics)
        for arm in sorted(rep.arms):
            row = [arm] + [format(rep.arms[arm].get(m, ""), ".10g") if isinstance(rep.arms[arm].get(m), float)
                           else rep.arms[arm].get(m, "") for m in metrics]
            writer.writerow(row)
    return csv_path, json_path
