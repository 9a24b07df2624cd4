"""Low-rank adaptation of dense and convolutional weights.

A frozen base weight W0 gains a trainable update dW = scale * B @ A whose
rank is bounded by construction.  Dense layers decompose (d_out, k_in)
directly.  Convolutions have two variants:

* ``correct``: the kernel is flattened to (C1, C2*k*k), the matrix that
  actually multiplies im2col(X), and decomposed there with B in R^{C1 x r}.
* ``legacy``: the factors are shaped (C1*k, r) x (r, C2*k) and their product
  is reinterpreted in row-major element order as a (C1, C2, k, k) kernel,
  reproducing the original reference implementation's behavior.

B is zero-initialized so a freshly attached adapter is an exact no-op.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .seeding import derive_seed
from .serialization import load_blob, save_blob

VARIANTS = ("correct", "legacy")
TAG_ADAPTED = "adapted"
TAG_FULL = "fully-trainable"
TAG_FROZEN = "frozen"


class AdapterError(ValueError):
    pass


# ---------------------------------------------------------------------------
# im2col


def im2col(x: np.ndarray, kernel: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Unroll conv receptive fields of a (C, H, W) map into matrix columns.

    Column j holds the flattened (C*k*k) receptive field of output position j
    in row-major output order, so convolution equals W_flat @ im2col(x).
    """
    x = np.asarray(x)
    if x.ndim != 3:
        raise AdapterError(f"expected (C, H, W) input, got shape {x.shape}")
    if kernel < 1 or stride < 1 or padding < 0:
        raise AdapterError("kernel/stride must be >= 1 and padding >= 0")
    c, h, w = x.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if kernel > hp or kernel > wp:
        raise AdapterError(f"kernel {kernel} larger than padded input ({hp}, {wp})")
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    h_out = (hp - kernel) // stride + 1
    w_out = (wp - kernel) // stride + 1
    cols = np.empty((c * kernel * kernel, h_out * w_out), dtype=x.dtype)
    row = 0
    for ch in range(c):
        for ki in range(kernel):
            for kj in range(kernel):
                patch = xp[ch, ki : ki + h_out * stride : stride, kj : kj + w_out * stride : stride]
                cols[row] = patch.reshape(-1)
                row += 1
    return cols


# ---------------------------------------------------------------------------
# adapter modules


def _init_factors(b_shape, a_shape, dtype, seed: int, std: float):
    gen = torch.Generator().manual_seed(seed & 0xFFFF_FFFF)
    b = torch.zeros(b_shape, dtype=dtype)
    a = torch.empty(a_shape, dtype=dtype).normal_(0.0, std, generator=gen)
    return nn.Parameter(b), nn.Parameter(a)


class DenseAdapter(nn.Module):
    variant = "dense"

    def __init__(self, base_shape: tuple[int, int], rank: int, scale: float = 1.0,
                 init_seed: int = 0, init_std: float = 0.01, dtype=torch.float32):
        super().__init__()
        d_out, k_in = base_shape
        if not 1 <= rank <= min(d_out, k_in):
            raise AdapterError(f"rank {rank} outside [1, min{base_shape}] for dense {base_shape}")
        self.base_shape = (d_out, k_in)
        self.rank = rank
        self.scale = scale
        self.enabled = True
        self.B, self.A = _init_factors((d_out, rank), (rank, k_in), dtype, init_seed, init_std)

    def factor_matrix(self) -> torch.Tensor:
        return self.B @ self.A

    def delta(self) -> torch.Tensor:
        return self.scale * self.factor_matrix()

    def merge(self, base_weight: torch.Tensor) -> torch.Tensor:
        if tuple(base_weight.shape) != self.base_shape:
            raise AdapterError(f"weight shape {tuple(base_weight.shape)} != {self.base_shape}")
        return base_weight + self.delta()

    def unmerge(self, merged_weight: torch.Tensor) -> torch.Tensor:
        if tuple(merged_weight.shape) != self.base_shape:
            raise AdapterError(f"weight shape {tuple(merged_weight.shape)} != {self.base_shape}")
        return merged_weight - self.delta()


class ConvAdapterCorrect(nn.Module):
    variant = "correct"

    def __init__(self, base_shape: tuple[int, int, int, int], rank: int, scale: float = 1.0,
                 init_seed: int = 0, init_std: float = 0.01, dtype=torch.float32):
        super().__init__()
        c1, c2, kh, kw = base_shape
        if kh != kw:
            raise AdapterError("square kernels only")
        if not 1 <= rank <= min(c1, c2 * kh * kw):
            raise AdapterError(f"rank {rank} invalid for conv {base_shape}")
        self.base_shape = (c1, c2, kh, kw)
        self.rank = rank
        self.scale = scale
        self.enabled = True
        self.B, self.A = _init_factors((c1, rank), (rank, c2 * kh * kw), dtype, init_seed, init_std)

    def factor_matrix(self) -> torch.Tensor:
        return self.B @ self.A

    def delta(self) -> torch.Tensor:
        return self.scale * self.factor_matrix().reshape(self.base_shape)

    def merge(self, base_weight: torch.Tensor) -> torch.Tensor:
        if tuple(base_weight.shape) != self.base_shape:
            raise AdapterError(f"weight shape {tuple(base_weight.shape)} != {self.base_shape}")
        return base_weight + self.delta()

    def unmerge(self, merged_weight: torch.Tensor) -> torch.Tensor:
        if tuple(merged_weight.shape) != self.base_shape:
            raise AdapterError(f"weight shape {tuple(merged_weight.shape)} != {self.base_shape}")
        return merged_weight - self.delta()


class ConvAdapterLegacy(nn.Module):
    variant = "legacy"

    def __init__(self, base_shape: tuple[int, int, int, int], rank: int, scale: float = 1.0,
                 init_seed: int = 0, init_std: float = 0.01, dtype=torch.float32):
        super().__init__()
        c1, c2, kh, kw = base_shape
        if kh != kw:
            raise AdapterError("square kernels only")
        k = kh
        if not 1 <= rank <= min(c1 * k, c2 * k):
            raise AdapterError(f"rank {rank} invalid for legacy conv {base_shape}")
        self.base_shape = (c1, c2, kh, kw)
        self.rank = rank
        self.scale = scale
        self.enabled = True
        self.B, self.A = _init_factors((c1 * k, rank), (rank, c2 * k), dtype, init_seed, init_std)

    def factor_matrix(self) -> torch.Tensor:
        return self.B @ self.A

    def delta(self) -> torch.Tensor:
        # row-major reinterpretation of the (C1*k, C2*k) product as a kernel
        return self.scale * self.factor_matrix().reshape(self.base_shape)

    def merge(self, base_weight: torch.Tensor) -> torch.Tensor:
        if tuple(base_weight.shape) != self.base_shape:
            raise AdapterError(f"weight shape {tuple(base_weight.shape)} != {self.base_shape}")
        return base_weight + self.delta()

    def unmerge(self, merged_weight: torch.Tensor) -> torch.Tensor:
        if tuple(merged_weight.shape) != self.base_shape:
            raise AdapterError(f"weight shape {tuple(merged_weight.shape)} != {self.base_shape}")
        return merged_weight - self.delta()


def make_adapter(kind: str, shape: Sequence[int], rank: int, variant: str = "correct",
                 scale: float = 1.0, init_seed: int = 0, init_std: float = 0.01,
                 dtype=torch.float32) -> nn.Module:
    if kind == "dense":
        return DenseAdapter(tuple(shape), rank, scale, init_seed, init_std, dtype)
    if kind != "conv":
        raise AdapterError(f"unknown layer kind {kind!r}")
    if variant == "correct":
        return ConvAdapterCorrect(tuple(shape), rank, scale, init_seed, init_std, dtype)
    if variant == "legacy":
        return ConvAdapterLegacy(tuple(shape), rank, scale, init_seed, init_std, dtype)
    raise AdapterError(f"unknown conv variant {variant!r}")


def delta_rank(adapter: nn.Module, tol: float = 1e-8) -> int:
    """Numerical rank of the adapter's native factor product."""
    b = adapter.B.detach().double().numpy()
    a = adapter.A.detach().double().numpy()
    s = np.linalg.svd(b @ a, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > tol * s[0]))


# ---------------------------------------------------------------------------
# adaptable layers (used by the generator and by toy test models)


class AdaptedConv2d(nn.Module):
    kind = "conv"

    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 stride: int = 1, padding: int = 0, gain: float = 1.0):
        super().__init__()
        fan_in = in_channels * kernel * kernel
        self.weight = nn.Parameter(torch.randn(out_channels, in_channels, kernel, kernel) * gain / np.sqrt(fan_in))
        self.bias = nn.Parameter(torch.zeros(out_channels))
        self.stride = stride
        self.padding = padding
        self.adapter: nn.Module | None = None

    @property
    def base_shape(self):
        return tuple(self.weight.shape)

    def effective_weight(self) -> torch.Tensor:
        if self.adapter is not None and self.adapter.enabled:
            return self.adapter.merge(self.weight)
        return self.weight

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.conv2d(x, self.effective_weight(), self.bias, self.stride, self.padding)


class AdaptedLinear(nn.Module):
    kind = "dense"

    def __init__(self, in_features: int, out_features: int, gain: float = 1.0):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_features, in_features) * gain / np.sqrt(in_features))
        self.bias = nn.Parameter(torch.zeros(out_features))
        self.adapter: nn.Module | None = None

    @property
    def base_shape(self):
        return tuple(self.weight.shape)

    def effective_weight(self) -> torch.Tensor:
        if self.adapter is not None and self.adapter.enabled:
            return self.adapter.merge(self.weight)
        return self.weight

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(x, self.effective_weight(), self.bias)


# ---------------------------------------------------------------------------
# registry


@dataclass(frozen=True)
class LayerInfo:
    """One adaptable layer of a model: its name, module, and grouping labels."""

    name: str
    module: nn.Module | None
    block: str
    role: str  # backbone | mapping | superres | decoder
    kind: str = ""
    shape: tuple[int, ...] = ()
    has_bias: bool = True

    def resolved_kind(self) -> str:
        return self.kind or self.module.kind

    def resolved_shape(self) -> tuple[int, ...]:
        return self.shape or tuple(self.module.weight.shape)

    def bias_numel(self) -> int:
        if self.module is not None:
            return 0 if self.module.bias is None else self.module.bias.numel()
        return int(self.resolved_shape()[0]) if self.has_bias else 0


@dataclass
class AdapterPolicy:
    rank: int
    variant: str = "correct"
    predicate: Callable[[LayerInfo], bool] | None = None
    scale: float = 1.0
    init_seed: int = 0
    init_std: float = 0.01


@dataclass
class RegistryEntry:
    name: str
    kind: str
    shape: tuple[int, ...]
    block: str
    role: str
    tag: str
    bias_numel: int
    adapter: nn.Module | None = None
    module: nn.Module | None = None

    def weight_numel(self) -> int:
        return int(np.prod(self.shape))

    def adapter_numel(self) -> int:
        if self.adapter is None:
            return 0
        return self.adapter.B.numel() + self.adapter.A.numel()


class AdapterRegistry:
    """Map layer-name -> adapter + tuning-policy tag for one attached model."""

    def __init__(self, rank: int, variant: str, model: nn.Module | None = None):
        if variant not in VARIANTS:
            raise AdapterError(f"variant must be one of {VARIANTS}")
        self.rank = rank
        self.variant = variant
        self.model = model
        self.entries: dict[str, RegistryEntry] = {}
        self.extra_frozen_numel = 0  # model params outside adaptable layers

    # -- construction -------------------------------------------------------

    @staticmethod
    def from_shapes(layers: Iterable[LayerInfo], rank: int, variant: str = "correct",
                    policy_tags: dict[str, str] | None = None) -> "AdapterRegistry":
        """Build a registry over shape descriptions only (no live model)."""
        reg = AdapterRegistry(rank, variant)
        policy_tags = policy_tags or {}
        for info in layers:
            if info.name in reg.entries:
                raise AdapterError(f"duplicate layer name {info.name!r}")
            tag = policy_tags.get(info.name, TAG_ADAPTED if info.role != "decoder" else TAG_FULL)
            adapter = None
            if tag == TAG_ADAPTED:
                adapter = make_adapter(info.resolved_kind(), info.resolved_shape(), rank, variant)
            reg.entries[info.name] = RegistryEntry(
                name=info.name, kind=info.resolved_kind(), shape=info.resolved_shape(),
                block=info.block, role=info.role, tag=tag,
                bias_numel=info.bias_numel(), adapter=adapter,
            )
        return reg

    # -- iteration and access ------------------------------------------------

    def adapted_entries(self) -> list[RegistryEntry]:
        return [e for e in self.entries.values() if e.tag == TAG_ADAPTED]

    def adapters(self) -> dict[str, nn.Module]:
        return {e.name: e.adapter for e in self.adapted_entries()}

    def trainable_parameters(self) -> Iterator[nn.Parameter]:
        for e in self.entries.values():
            if e.tag == TAG_ADAPTED:
                yield e.adapter.B
                yield e.adapter.A
            elif e.tag == TAG_FULL and e.module is not None:
                yield e.module.weight
                if e.module.bias is not None:
                    yield e.module.bias

    def set_enabled(self, enabled: bool) -> None:
        for e in self.adapted_entries():
            e.adapter.enabled = enabled

    # -- accounting ----------------------------------------------------------

    def count_parameters(self) -> dict:
        """Exact parameter accounting plus the reduction over full tuning.

        ``trainable`` includes the fully tuned decoder; ``trainable_adapters``
        is the adapters-only (decoder-exclusive) count, reported separately
        because whether the decoder belongs in the headline number is
        ambiguous.
        """
        adapters_n = sum(e.adapter_numel() for e in self.adapted_entries())
        full_layer_n = sum(
            e.weight_numel() + e.bias_numel for e in self.entries.values() if e.tag == TAG_FULL
        )
        layer_total = sum(e.weight_numel() + e.bias_numel for e in self.entries.values())
        full_model = layer_total + self.extra_frozen_numel
        trainable = adapters_n + full_layer_n
        frozen = full_model - full_layer_n
        return {
            "trainable": trainable,
            "trainable_adapters": adapters_n,
            "frozen": frozen,
            "full_model": full_model,
            "reduction_factor": full_model / trainable if trainable else float("inf"),
            "reduction_factor_adapters": full_model / adapters_n if adapters_n else float("inf"),
        }

    def relative_weight_change(self) -> dict[str, float]:
        """Per-block 100 * ||dW||_F / ||W0||_F over block-concatenated layers."""
        sq_delta: dict[str, float] = {}
        sq_base: dict[str, float] = {}
        for e in self.adapted_entries():
            if e.module is None:
                raise AdapterError("relative_weight_change requires a live attached model")
            d = float(e.adapter.delta().detach().double().pow(2).sum())
            b = float(e.module.weight.detach().double().pow(2).sum())
            sq_delta[e.block] = sq_delta.get(e.block, 0.0) + d
            sq_base[e.block] = sq_base.get(e.block, 0.0) + b
        return {
            blk: 100.0 * float(np.sqrt(sq_delta[blk]) / max(np.sqrt(sq_base[blk]), 1e-30))
            for blk in sorted(sq_delta)
        }

    # -- persistence ----------------------------------------------------------

    def save(self, path: str | Path) -> str:
        arrays: dict[str, np.ndarray] = {}
        manifest_layers: dict[str, dict] = {}
        for e in self.entries.values():
            rec: dict = {"policy": e.tag, "kind": e.kind, "shape": list(e.shape), "block": e.block, "role": e.role}
            if e.adapter is not None:
                rec["variant"] = "dense" if e.kind == "dense" else self.variant
                rec["rank"] = e.adapter.rank
                rec["scale"] = e.adapter.scale
                arrays[f"{e.name}.B"] = e.adapter.B.detach().cpu().numpy()
                arrays[f"{e.name}.A"] = e.adapter.A.detach().cpu().numpy()
            if e.tag == TAG_FULL and e.module is not None:
                arrays[f"{e.name}.weight"] = e.module.weight.detach().cpu().numpy()
                if e.module.bias is not None:
                    arrays[f"{e.name}.bias"] = e.module.bias.detach().cpu().numpy()
            manifest_layers[e.name] = rec
        manifest = {"kind": "adapter_checkpoint", "rank": self.rank, "variant": self.variant,
                    "layers": manifest_layers}
        return save_blob(path, arrays, manifest)


def attach_adapters(model: nn.Module, policy: AdapterPolicy) -> AdapterRegistry:
    """Attach zero-initialized adapters per policy; freeze everything else.

    Layers with role ``decoder`` are tagged fully-trainable, layers matched
    by the predicate gain adapters, and every other parameter is frozen.
    """
    if policy.variant not in VARIANTS:
        raise AdapterError(f"variant must be one of {VARIANTS}")
    infos = list(model.adaptable_layers())
    predicate = policy.predicate or (lambda info: True)
    reg = AdapterRegistry(policy.rank, policy.variant, model=model)

    for p in model.parameters():
        p.requires_grad_(False)

    matched = 0
    accounted_param_ids = set()
    for info in infos:
        if info.name in reg.entries:
            raise AdapterError(f"duplicate layer name {info.name!r}")
        module = info.module
        accounted_param_ids.add(id(module.weight))
        if module.bias is not None:
            accounted_param_ids.add(id(module.bias))
        if info.role == "decoder":
            tag, adapter = TAG_FULL, None
            module.weight.requires_grad_(True)
            if module.bias is not None:
                module.bias.requires_grad_(True)
        elif predicate(info):
            tag = TAG_ADAPTED
            adapter = make_adapter(
                module.kind, tuple(module.weight.shape), policy.rank, policy.variant,
                scale=policy.scale,
                init_seed=derive_seed(policy.init_seed, "adapter", info.name),
                init_std=policy.init_std, dtype=module.weight.dtype,
            )
            module.adapter = adapter
            accounted_param_ids.update((id(adapter.B), id(adapter.A)))
            matched += 1
        else:
            tag, adapter = TAG_FROZEN, None
        reg.entries[info.name] = RegistryEntry(
            name=info.name, kind=module.kind, shape=tuple(module.weight.shape),
            block=info.block, role=info.role, tag=tag,
            bias_numel=0 if module.bias is None else module.bias.numel(),
            adapter=adapter, module=module,
        )
    if matched == 0:
        raise AdapterError("adapter predicate matched no layers; refusing to attach nothing")
    reg.extra_frozen_numel = sum(
        p.numel() for p in model.parameters() if id(p) not in accounted_param_ids
    )
    return reg


def detach_adapters(model: nn.Module) -> None:
    """Remove adapters and restore every parameter to trainable."""
    for info in model.adaptable_layers():
        info.module.adapter = None
    for p in model.parameters():
        p.requires_grad_(True)


def load_adapter_checkpoint(model: nn.Module, path: str | Path) -> AdapterRegistry:
    """Re-attach adapters from a checkpoint; the manifest drives construction."""
    arrays, manifest = load_blob(path)
    if manifest.get("kind") != "adapter_checkpoint":
        raise AdapterError(f"{path} is not an adapter checkpoint")
    layers = manifest["layers"]
    policy = AdapterPolicy(
        rank=manifest["rank"], variant=manifest["variant"],
        predicate=lambda info: layers.get(info.name, {}).get("policy") == TAG_ADAPTED,
    )
    infos = {info.name: info for info in model.adaptable_layers()}
    missing = set(layers) - set(infos)
    if missing:
        raise AdapterError(f"checkpoint layers missing from model: {sorted(missing)}")
    reg = attach_adapters(model, policy)
    with torch.no_grad():
        for name, e in reg.entries.items():
            rec = layers[name]
            if tuple(rec["shape"]) != e.shape:
                raise AdapterError(f"shape mismatch for {name}: {rec['shape']} vs {e.shape}")
            if e.tag == TAG_ADAPTED:
                e.adapter.B.copy_(torch.from_numpy(arrays[f"{name}.B"]))
                e.adapter.A.copy_(torch.from_numpy(arrays[f"{name}.A"]))
                e.adapter.scale = rec.get("scale", 1.0)
            elif e.tag == TAG_FULL and f"{name}.weight" in arrays:
                e.module.weight.copy_(torch.from_numpy(arrays[f"{name}.weight"]))
                if e.module.bias is not None and f"{name}.bias" in arrays:
                    e.module.bias.copy_(torch.from_numpy(arrays[f"{name}.bias"]))
    return reg
