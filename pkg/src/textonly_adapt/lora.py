"""Low-rank adapters: creation, application, merging and trainability masks."""

from __future__ import annotations

import enum
import math

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, UsageError


class LoraAdapter(nn.Module):
    """Low-rank pair with ``delta = (alpha / rank) * B @ A``.

    ``A`` has shape (rank, in_dim) and ``B`` (out_dim, rank).
    """

    def __init__(self, A: torch.Tensor, B: torch.Tensor, alpha: float,
                 dropout_p: float = 0.0, site: str = ""):
        super().__init__()
        if A.ndim != 2 or B.ndim != 2 or A.shape[0] != B.shape[1]:
            raise ConfigurationError(f"incompatible adapter shapes {tuple(A.shape)}, {tuple(B.shape)}")
        if not 0.0 <= dropout_p < 1.0:
            raise ConfigurationError("dropout_p must lie in [0, 1)")
        if alpha <= 0:
            raise ConfigurationError("alpha must be positive")
        self.A = nn.Parameter(A)
        self.B = nn.Parameter(B)
        self.alpha = float(alpha)
        self.dropout_p = float(dropout_p)
        self.site = site

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def in_dim(self) -> int:
        return self.A.shape[1]

    @property
    def out_dim(self) -> int:
        return self.B.shape[0]

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> torch.Tensor:
        return self.scaling * (self.B @ self.A)

    def extra_repr(self):
        return f"site={self.site!r}, rank={self.rank}, alpha={self.alpha}, dropout_p={self.dropout_p}"


def init_adapter(in_dim: int, out_dim: int, rank: int, alpha: float,
                 dropout_p: float, seed: int, site: str = "",
                 dtype=torch.float32) -> LoraAdapter:
    """Fresh adapter: A ~ U(-1/sqrt(in_dim), 1/sqrt(in_dim)), B = 0."""
    if rank < 1 or rank > min(in_dim, out_dim):
        raise ConfigurationError(f"rank {rank} invalid for a {in_dim}->{out_dim} projection")
    gen = torch.Generator().manual_seed(int(seed))
    bound = 1.0 / math.sqrt(in_dim)
    A = (torch.rand(rank, in_dim, generator=gen, dtype=torch.float64) * 2 - 1) * bound
    B = torch.zeros(out_dim, rank, dtype=torch.float64)
    return LoraAdapter(A.to(dtype), B.to(dtype), alpha, dropout_p, site)


def apply(x: torch.Tensor, base_weight: torch.Tensor, adapter: LoraAdapter | None,
          training_mode: bool = False) -> torch.Tensor:
    """``x @ W.T + (alpha/rank) * drop(x) @ A.T @ B.T``; dropout hits the adapter branch only."""
    if x.shape[-1] != base_weight.shape[1]:
        raise ConfigurationError(
            f"input dim {x.shape[-1]} does not match weight {tuple(base_weight.shape)}")
    out = F.linear(x, base_weight)
    if adapter is None:
        return out
    if adapter.in_dim != base_weight.shape[1] or adapter.out_dim != base_weight.shape[0]:
        raise ConfigurationError(
            f"adapter {adapter.out_dim}x{adapter.in_dim} does not fit weight {tuple(base_weight.shape)}")
    h = F.dropout(x, adapter.dropout_p, training=True) if training_mode and adapter.dropout_p > 0 else x
    return out + adapter.scaling * F.linear(F.linear(h, adapter.A), adapter.B)


def merge(base_weight: torch.Tensor, adapter: LoraAdapter) -> torch.Tensor:
    if tuple(base_weight.shape) != (adapter.out_dim, adapter.in_dim):
        raise ConfigurationError(
            f"adapter {adapter.out_dim}x{adapter.in_dim} does not fit weight {tuple(base_weight.shape)}")
    with torch.no_grad():
        return base_weight + adapter.delta().to(base_weight.dtype)


def unmerge(merged_weight: torch.Tensor, adapter: LoraAdapter) -> torch.Tensor:
    with torch.no_grad():
        return merged_weight - adapter.delta().to(merged_weight.dtype)


class Strategy(str, enum.Enum):
    TEXT_ONLY = "text"
    SPEECH = "speech"
    TEXT_THEN_SPEECH = "text-then-speech"


# Parameter groups made trainable by each training stage. The encoder and base
# LM are frozen everywhere after foundation pretraining.
STAGE_GROUPS = {
    "foundation": ("lm",),
    "pretrain-projector": ("projector",),
    "pretrain-joint": ("projector", "adapters"),
    Strategy.TEXT_ONLY.value: ("adapters",),
    Strategy.SPEECH.value: ("projector", "adapters"),
    Strategy.TEXT_THEN_SPEECH.value: ("projector", "adapters"),
}

GROUPS = ("encoder", "projector", "lm", "adapters")


def param_group(name: str) -> str:
    group = name.split(".", 1)[0]
    if group not in GROUPS:
        raise UsageError(f"parameter {name!r} belongs to no known group")
    return group


def mask_for_groups(model: nn.Module, groups) -> dict[str, bool]:
    groups = set(groups)
    return {name: param_group(name) in groups for name, _ in model.named_parameters()}


def mask_for_strategy(strategy, model: nn.Module) -> dict[str, bool]:
    """Trainability mask for a target-domain strategy (text-then-speech means its speech phase)."""
    try:
        key = Strategy(strategy).value
    except ValueError:
        raise UsageError(f"unknown strategy {strategy!r}") from None
    if not any(param_group(n) == "adapters" for n, _ in model.named_parameters()):
        raise UsageError("model has no adapters attached")
    return mask_for_groups(model, STAGE_GROUPS[key])


def mask_for_stage(stage: str, model: nn.Module) -> dict[str, bool]:
    if stage not in STAGE_GROUPS:
        raise UsageError(f"unknown stage {stage!r}")
    return mask_for_groups(model, STAGE_GROUPS[stage])


def trainable_count(model: nn.Module, mask: dict[str, bool]) -> int:
    return sum(p.numel() for n, p in model.named_parameters() if mask.get(n, False))


def lora_count(site_shapes, rank: int) -> int:
    """Sum over sites of rank * (in_dim + out_dim)."""
    return sum(rank * (i + o) for i, o in site_shapes)


def full_scale_lora_count(geometry, sites=("q", "k", "v", "o")) -> int:
    shapes = geometry.site_shapes()
    per_layer = [shapes[s] for s in sites]
    return geometry.lm_layers * lora_count(per_layer, geometry.lora_rank)


def full_scale_projector_count(geometry) -> int:
    fin = geometry.encoder_dim * geometry.fold_k
    return (fin * geometry.projector_hidden + geometry.projector_hidden
            + geometry.projector_hidden * geometry.lm_dim + geometry.lm_dim)
