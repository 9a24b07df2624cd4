"""Desk-scale 3D-aware generator.

Latent -> mapping network -> conv backbone emitting three 32x32x8 feature
planes -> per-point decoder -> orthographic volumetric renderer at 32x32 ->
conv super-resolution head at 64x64.  The camera geometry matches the
ground-truth scene renderer exactly (same orthographic window, same
head-local rotation), so inversion losses compare aligned images.

Every conv and dense layer of the mapping, backbone and super-resolution
head is adapter-eligible; the point decoder is the small fully tunable part.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .adapters import AdaptedConv2d, AdaptedLinear, LayerInfo
from .scene import BACKGROUND, CameraPose
from .serialization import load_blob, save_blob


@dataclass(frozen=True)
class RenderConfig:
    n_samples: int = 16
    near: float = 1.1
    far: float = 2.9
    raw_resolution: int = 32
    background: tuple[float, float, float] = tuple(float(c) for c in BACKGROUND)

    def __post_init__(self):
        if self.n_samples < 2:
            raise ValueError("n_samples must be >= 2")
        if not self.near < self.far:
            raise ValueError("near must be strictly less than far")


@dataclass(frozen=True)
class GeneratorConfig:
    latent_dim: int = 64
    plane_channels: int = 8
    plane_resolution: int = 32
    backbone_channels: tuple[int, ...] = (128, 128, 96, 64)
    decoder_hidden: int = 32
    sr_channels: int = 16
    image_resolution: int = 64
    render: RenderConfig = field(default_factory=RenderConfig)

    def __post_init__(self):
        if self.plane_resolution != 4 * 2 ** (len(self.backbone_channels) - 1):
            raise ValueError("plane_resolution must be 4 * 2**(n_blocks - 1)")
        if self.image_resolution != 2 * self.render.raw_resolution:
            raise ValueError("image_resolution must be twice the raw render resolution")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_channels"] = list(self.backbone_channels)
        d["render"]["background"] = list(self.render.background)
        return d

    @staticmethod
    def from_dict(d: dict) -> "GeneratorConfig":
        d = dict(d)
        rend = dict(d.pop("render"))
        rend["background"] = tuple(rend["background"])
        return GeneratorConfig(
            render=RenderConfig(**rend),
            backbone_channels=tuple(d.pop("backbone_channels")),
            **d,
        )


def pose_rotations(poses: torch.Tensor) -> torch.Tensor:
    """(B, 2) yaw/pitch -> (B, 3, 3) head-local-to-world rotations."""
    yaw, pitch = poses[:, 0], poses[:, 1]
    cy, sy = torch.cos(yaw), torch.sin(yaw)
    cp, sp = torch.cos(pitch), torch.sin(pitch)
    zeros = torch.zeros_like(cy)
    ones = torch.ones_like(cy)
    ry = torch.stack(
        [cy, zeros, sy, zeros, ones, zeros, -sy, zeros, cy], dim=-1
    ).reshape(-1, 3, 3)
    rx = torch.stack(
        [ones, zeros, zeros, zeros, cp, -sp, zeros, sp, cp], dim=-1
    ).reshape(-1, 3, 3)
    return ry @ rx


def poses_to_tensor(poses, dtype=torch.float32) -> torch.Tensor:
    if isinstance(poses, CameraPose):
        poses = [poses]
    if isinstance(poses, (list, tuple)) and poses and isinstance(poses[0], CameraPose):
        return torch.tensor([[p.yaw, p.pitch] for p in poses], dtype=dtype)
    t = torch.as_tensor(poses, dtype=dtype)
    if t.ndim == 1:
        t = t.unsqueeze(0)
    return t


class MappingNetwork(nn.Module):
    def __init__(self, latent_dim: int, n_layers: int = 4):
        super().__init__()
        self.latent_dim = latent_dim
        self.layers = nn.ModuleList(
            [AdaptedLinear(latent_dim, latent_dim, gain=1.0) for _ in range(n_layers)]
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        # normalize the input sphere, then a stack of lrelu dense layers
        w = z * torch.rsqrt(z.pow(2).mean(dim=-1, keepdim=True) + 1e-8)
        for layer in self.layers:
            w = F.leaky_relu(layer(w), 0.2)
        return w


def pixel_norm(x: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    return x * torch.rsqrt(x.pow(2).mean(dim=1, keepdim=True) + eps)


class FilmBlock(nn.Module):
    """conv -> pixel norm -> feature-wise affine conditioning on w -> lrelu.

    The per-location channel normalization keeps activations O(1) through the
    stack; without it adversarial training drives plane magnitudes into
    decoder saturation.
    """

    def __init__(self, in_ch: int, out_ch: int, latent_dim: int):
        super().__init__()
        self.conv = AdaptedConv2d(in_ch, out_ch, 3, padding=1)
        self.film = AdaptedLinear(latent_dim, 2 * out_ch, gain=1.0)

    def forward(self, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        h = pixel_norm(self.conv(x))
        sc, sh = self.film(w).chunk(2, dim=-1)
        h = h * (1.0 + sc[:, :, None, None]) + sh[:, :, None, None]
        return F.leaky_relu(h, 0.2)


class Backbone(nn.Module):
    """Constant 4x4 seed upsampled through conditioned conv blocks to planes."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        chans = cfg.backbone_channels
        self.const = nn.Parameter(torch.randn(chans[0], 4, 4))
        self.blocks = nn.ModuleList()
        prev = chans[0]
        for ch in chans:
            self.blocks.append(FilmBlock(prev, ch, cfg.latent_dim))
            prev = ch
        self.to_planes = AdaptedConv2d(prev, 3 * cfg.plane_channels, 3, padding=1, gain=0.5)
        self.plane_channels = cfg.plane_channels
        self.plane_resolution = cfg.plane_resolution

    def forward(self, w: torch.Tensor) -> torch.Tensor:
        batch = w.shape[0]
        x = self.const.unsqueeze(0).expand(batch, -1, -1, -1)
        for i, block in enumerate(self.blocks):
            if i > 0:
                x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = block(x, w)
        x = self.to_planes(x)
        p = self.plane_resolution
        return x.reshape(batch, 3, self.plane_channels, p, p)


class PointDecoder(nn.Module):
    """Summed triplane feature -> (rgb, density); softplus keeps density >= 0."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.fc0 = AdaptedLinear(cfg.plane_channels, cfg.decoder_hidden)
        self.fc1 = AdaptedLinear(cfg.decoder_hidden, 4)

    def forward(self, feats: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = F.leaky_relu(self.fc0(feats), 0.2)
        out = self.fc1(h)
        color = torch.sigmoid(out[..., :3])
        density = F.softplus(out[..., 3])
        return color, density


class SuperRes(nn.Module):
    """x2 conv upsampler on the raw render; residual on bilinear upsampling."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        c = cfg.sr_channels
        self.conv0 = AdaptedConv2d(3, c, 3, padding=1)
        self.conv1 = AdaptedConv2d(c, c, 3, padding=1)
        self.conv2 = AdaptedConv2d(c, 3, 3, padding=1, gain=0.2)

    def forward(self, raw: torch.Tensor) -> torch.Tensor:
        base = F.interpolate(raw, scale_factor=2, mode="bilinear", align_corners=False)
        h = F.leaky_relu(self.conv0(raw), 0.2)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = F.leaky_relu(self.conv1(h), 0.2)
        return base + self.conv2(h)


class TriPlaneGenerator(nn.Module):
    def __init__(self, cfg: GeneratorConfig | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg or GeneratorConfig()
        torch.manual_seed(seed & 0xFFFF_FFFF)
        self.mapping = MappingNetwork(self.cfg.latent_dim)
        self.backbone = Backbone(self.cfg)
        self.decoder = PointDecoder(self.cfg)
        self.superres = SuperRes(self.cfg)

    # -- adaptable layer enumeration ----------------------------------------

    def adaptable_layers(self) -> list[LayerInfo]:
        infos = [
            LayerInfo(f"mapping.fc{i}", layer, block="mapping", role="mapping")
            for i, layer in enumerate(self.mapping.layers)
        ]
        res = 4
        for i, block in enumerate(self.backbone.blocks):
            infos.append(LayerInfo(f"backbone.b{res}.conv", block.conv, block=f"b{res}", role="backbone"))
            infos.append(LayerInfo(f"backbone.b{res}.film", block.film, block=f"b{res}", role="backbone"))
            if i < len(self.backbone.blocks) - 1:
                res *= 2
        infos.append(LayerInfo("backbone.to_planes", self.backbone.to_planes, block=f"b{res}", role="backbone"))
        for i, layer in enumerate((self.superres.conv0, self.superres.conv1, self.superres.conv2)):
            infos.append(LayerInfo(f"superres.conv{i}", layer, block="sr", role="superres"))
        infos.append(LayerInfo("decoder.fc0", self.decoder.fc0, block="decoder", role="decoder"))
        infos.append(LayerInfo("decoder.fc1", self.decoder.fc1, block="decoder", role="decoder"))
        return infos

    def backbone_blocks(self) -> list[str]:
        out = []
        res = 4
        for _ in self.backbone.blocks:
            out.append(f"b{res}")
            res *= 2
        return out

    # -- pipeline stages ------------------------------------------------------

    def map_latent(self, z: torch.Tensor) -> torch.Tensor:
        return self.mapping(z)

    def mean_latent(self, n: int = 1000, seed: int = 0) -> torch.Tensor:
        gen = torch.Generator().manual_seed(seed & 0xFFFF_FFFF)
        z = torch.randn(n, self.cfg.latent_dim, generator=gen).to(self.backbone.const.dtype)
        with torch.no_grad():
            return self.map_latent(z).mean(dim=0)

    def synthesize_planes(self, w: torch.Tensor) -> torch.Tensor:
        return self.backbone(w)

    def query_point(self, planes: torch.Tensor, xyz: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Decode (B, N, 3) points against (B, 3, F, P, P) planes.

        Points outside the unit cube are clamped for sampling and contribute
        zero density.
        """
        feats = sample_planes(planes, xyz.clamp(-1.0, 1.0))
        color, density = self.decoder(feats)
        inside = (xyz.abs() <= 1.0).all(dim=-1)
        return color, density * inside.to(density.dtype)

    def render(self, planes: torch.Tensor, poses, config: RenderConfig | None = None,
               return_weights: bool = False):
        cfg = config or self.cfg.render
        dtype = self.backbone.const.dtype
        poses_t = poses_to_tensor(poses, dtype=dtype)
        batch = planes.shape[0]
        if poses_t.shape[0] != batch:
            raise ValueError(f"got {poses_t.shape[0]} poses for {batch} plane sets")

        pts, delta = camera_rays(poses_t, cfg, dtype)
        n_pix = cfg.raw_resolution * cfg.raw_resolution
        color, density = self.query_point(planes, pts.reshape(batch, -1, 3))
        color = color.reshape(batch, n_pix, cfg.n_samples, 3)
        density = density.reshape(batch, n_pix, cfg.n_samples)

        alpha = 1.0 - torch.exp(-density * delta)
        trans = torch.cumprod(1.0 - alpha + 1e-10, dim=-1)
        trans = torch.cat([torch.ones_like(trans[..., :1]), trans[..., :-1]], dim=-1)
        weights = trans * alpha
        bg = torch.tensor(cfg.background, dtype=dtype)
        rgb = (weights[..., None] * color).sum(dim=-2)
        rgb = rgb + (1.0 - weights.sum(dim=-1, keepdim=True)) * bg
        r = cfg.raw_resolution
        image = rgb.reshape(batch, r, r, 3).permute(0, 3, 1, 2)
        if return_weights:
            return image, weights
        return image

    def superresolve(self, raw: torch.Tensor) -> torch.Tensor:
        return self.superres(raw)

    def generate(self, latent: torch.Tensor, poses, latent_is_w: bool = True,
                 config: RenderConfig | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        if latent.ndim == 1:
            latent = latent.unsqueeze(0)
        w = latent if latent_is_w else self.map_latent(latent)
        planes = self.synthesize_planes(w)
        raw = self.render(planes, poses, config)
        return raw, self.superresolve(raw)

    # -- persistence -----------------------------------------------------------

    def save(self, path: str | Path, step: int = 0, seed: int = 0, extra: dict | None = None) -> str:
        arrays = {k: v.detach().cpu().numpy() for k, v in self.state_dict().items()}
        manifest = {
            "kind": "generator_checkpoint",
            "config": self.cfg.to_dict(),
            "step": step,
            "seed": seed,
        }
        if extra:
            manifest.update(extra)
        return save_blob(path, arrays, manifest)

    @staticmethod
    def load(path: str | Path) -> "TriPlaneGenerator":
        arrays, manifest = load_blob(path)
        if manifest.get("kind") != "generator_checkpoint":
            raise ValueError(f"{path} is not a generator checkpoint")
        model = TriPlaneGenerator(GeneratorConfig.from_dict(manifest["config"]))
        state = {k: torch.from_numpy(v) for k, v in arrays.items()}
        model.load_state_dict(state)
        return model


def sample_planes(planes: torch.Tensor, xyz: torch.Tensor) -> torch.Tensor:
    """Bilinear triplane lookup, summed over the three projections.

    planes: (B, 3, F, P, P) with plane order (xy, xz, yz); the plane's last
    axis is the first named coordinate.  Exact at grid nodes
    u_i = -1 + 2i/(P-1).
    """
    b, _, f, p, _ = planes.shape
    n = xyz.shape[1]
    grids = torch.stack([xyz[:, :, (0, 1)], xyz[:, :, (0, 2)], xyz[:, :, (1, 2)]], dim=1)
    sampled = F.grid_sample(
        planes.reshape(b * 3, f, p, p),
        grids.reshape(b * 3, n, 1, 2),
        mode="bilinear",
        align_corners=True,
    )
    return sampled.reshape(b, 3, f, n).sum(dim=1).permute(0, 2, 1)


def camera_rays(poses_t: torch.Tensor, cfg: RenderConfig, dtype=torch.float32):
    """Head-local sample points for each pixel ray.

    Orthographic rays o=(px, py, -2), d=(0, 0, 1) in world coordinates are
    rotated into the head frame; depth samples are the midpoints of
    n_samples even bins of [near, far].  Returns (points (B, n_pix, n_s, 3),
    delta scalar tensor).
    """
    batch = poses_t.shape[0]
    r = cfg.raw_resolution
    half = 1.0 / r
    coords = torch.linspace(-1.0 + half, 1.0 - half, r, dtype=dtype)
    px = coords.repeat(r)
    py = (-coords).repeat_interleave(r)
    origins = torch.stack([px, py, torch.full_like(px, -2.0)], dim=-1)

    rot_t = pose_rotations(poses_t).transpose(1, 2)
    o_local = torch.einsum("bij,nj->bni", rot_t, origins)
    d_local = rot_t @ torch.tensor([0.0, 0.0, 1.0], dtype=dtype)

    delta = (cfg.far - cfg.near) / cfg.n_samples
    t = cfg.near + (torch.arange(cfg.n_samples, dtype=dtype) + 0.5) * delta
    pts = o_local[:, :, None, :] + t[None, None, :, None] * d_local[:, None, None, :]
    return pts, torch.tensor(delta, dtype=dtype)


class Discriminator(nn.Module):
    """Plain conv discriminator for pretraining."""

    def __init__(self, resolution: int = 64, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed & 0xFFFF_FFFF)
        self.net = nn.Sequential(
            nn.Conv2d(3, 32, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(64, 64, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(64, 128, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
        )
        side = resolution // 16
        self.fc = nn.Linear(128 * side * side, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.net(x)
        return self.fc(h.reshape(h.shape[0], -1)).squeeze(-1)
