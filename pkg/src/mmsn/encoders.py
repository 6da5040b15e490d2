"""ViT encoders, the EHR branch, projection heads and the EMA rule."""

from __future__ import annotations

import copy
import math
from typing import Iterable

import torch
import torch.nn as nn
from pydantic import BaseModel, ConfigDict, model_validator

from .errors import ShapeMismatch


class VitConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    layers: int = 12
    hidden_size: int = 384
    mlp_size: int = 1536
    heads: int = 6
    patch_size: int = 16
    channels: int = 3

    @model_validator(mode="after")
    def _check(self):
        if self.hidden_size % self.heads:
            raise ValueError(f"hidden_size {self.hidden_size} not divisible by heads {self.heads}")
        if self.hidden_size % 4:
            raise ValueError("hidden_size must be divisible by 4 for 2-D sin-cos positions")
        return self

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2


VIT_PRESETS = {
    "vit-t": VitConfig(layers=12, hidden_size=192, mlp_size=768, heads=6),
    "vit-s": VitConfig(layers=12, hidden_size=384, mlp_size=1536, heads=6),
    "vit-b": VitConfig(layers=12, hidden_size=768, mlp_size=3072, heads=6),
    "vit-test": VitConfig(layers=2, hidden_size=32, mlp_size=128, heads=2),
}


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    backbone: str = "vit-s"
    # overrides the preset when given
    vit: VitConfig | None = None
    ehr_dim: int = 128
    head_hidden: tuple[int, ...] = (2048, 2048)
    n_proj: int = 256
    ema_momentum: float = 0.996

    @model_validator(mode="after")
    def _check(self):
        if self.vit is None and self.backbone not in VIT_PRESETS:
            raise ValueError(f"unknown backbone {self.backbone!r}; choose from {sorted(VIT_PRESETS)}")
        if not 0 <= self.ema_momentum <= 1:
            raise ValueError("ema_momentum must lie in [0, 1]")
        if len(self.head_hidden) != 2:
            raise ValueError("the projection head has exactly two hidden layers")
        return self

    def vit_config(self, patch_size: int | None = None, channels: int | None = None) -> VitConfig:
        cfg = self.vit or VIT_PRESETS[self.backbone]
        updates = {}
        if patch_size is not None:
            updates["patch_size"] = patch_size
        if channels is not None:
            updates["channels"] = channels
        return cfg.model_copy(update=updates) if updates else cfg


# ---------------------------------------------------------------- ViT


def sincos_pos_embed(grid: tuple[int, int], dim: int, dtype=torch.float32) -> torch.Tensor:
    """Fixed 2-D sin-cos positions, (gh*gw, dim), row-major like ``patchify``."""
    gh, gw = grid
    quarter = dim // 4
    omega = 1.0 / 10000 ** (torch.arange(quarter, dtype=torch.float64) / quarter)
    ys, xs = torch.meshgrid(
        torch.arange(gh, dtype=torch.float64), torch.arange(gw, dtype=torch.float64), indexing="ij"
    )
    out_y = ys.reshape(-1, 1) * omega
    out_x = xs.reshape(-1, 1) * omega
    emb = torch.cat([out_y.sin(), out_y.cos(), out_x.sin(), out_x.cos()], dim=1)
    return emb.to(dtype)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        B, N, C = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.heads, C // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        x = (attn.softmax(dim=-1) @ v).transpose(1, 2).reshape(B, N, C)
        return self.proj(x)


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp), nn.GELU(), nn.Linear(mlp, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class VisionTransformer(nn.Module):
    """Pre-norm ViT over pre-extracted patch vectors; returns the [CLS] output.

    Patches come in as the full grid plus the indices to keep. Positions are
    assigned on the full grid and masked patches are then dropped, so a kept
    patch always carries the position of its original grid cell.
    """

    def __init__(self, cfg: VitConfig):
        super().__init__()
        self.cfg = cfg
        D = cfg.hidden_size
        self.patch_embed = nn.Linear(cfg.patch_dim, D)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, D))
        self.blocks = nn.ModuleList([Block(D, cfg.heads, cfg.mlp_size) for _ in range(cfg.layers)])
        self.norm = nn.LayerNorm(D)
        self._pos_cache: dict = {}

    @property
    def embed_dim(self) -> int:
        return self.cfg.hidden_size

    def pos_embed(self, grid: tuple[int, int], dtype) -> torch.Tensor:
        key = (tuple(grid), dtype)
        if key not in self._pos_cache:
            self._pos_cache[key] = sincos_pos_embed(grid, self.embed_dim, dtype)
        return self._pos_cache[key]

    def forward(self, patches: torch.Tensor, grid: tuple[int, int], keep: torch.Tensor | None = None):
        if patches.ndim == 2:
            patches = patches[None]
            keep = None if keep is None else keep.reshape(1, -1)
            return self.forward(patches, grid, keep)[0]
        B, N, P = patches.shape
        if P != self.cfg.patch_dim:
            raise ShapeMismatch(f"patch dim {P} != {self.cfg.patch_dim}")
        if N != grid[0] * grid[1]:
            raise ShapeMismatch(f"{N} patches do not fill grid {grid}")
        pos = self.pos_embed(grid, patches.dtype).expand(B, N, -1)
        if keep is not None:
            if keep.ndim != 2 or keep.shape[0] != B or keep.shape[1] < 1:
                raise ShapeMismatch(f"keep indices of shape {tuple(keep.shape)} for batch {B}")
            patches = torch.gather(patches, 1, keep[..., None].expand(-1, -1, P))
            pos = torch.gather(pos, 1, keep[..., None].expand(-1, -1, pos.shape[-1]))
        x = self.patch_embed(patches) + pos
        x = torch.cat([self.cls_token.expand(B, -1, -1), x], dim=1)
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)[:, 0]


def vit_forward(patches, encoder: VisionTransformer, grid, keep=None) -> torch.Tensor:
    return encoder(patches, grid, keep)


# ---------------------------------------------------------------- heads


class ProjectionHead(nn.Sequential):
    """Three linear layers with LayerNorm + GELU between them."""

    def __init__(self, in_dim: int, hidden: Iterable[int], out_dim: int):
        h1, h2 = hidden
        super().__init__(
            nn.Linear(in_dim, h1), nn.LayerNorm(h1), nn.GELU(),
            nn.Linear(h1, h2), nn.LayerNorm(h2), nn.GELU(),
            nn.Linear(h2, out_dim),
        )
        self.in_dim = in_dim
        self.out_dim = out_dim


def _check_last_dim(x: torch.Tensor, expected: int, what: str) -> None:
    if x.shape[-1] != expected:
        raise ShapeMismatch(f"{what}: expected last dim {expected}, got {x.shape[-1]}")


def ehr_forward(x_ehr: torch.Tensor, encoder: nn.Linear) -> torch.Tensor:
    """v_ehr = W x_ehr + b."""
    _check_last_dim(x_ehr, encoder.in_features, "ehr input")
    return encoder(x_ehr)


def fuse(v_ehr: torch.Tensor, v_cxr: torch.Tensor, g: nn.Linear) -> torch.Tensor:
    """Concatenate (v_ehr, v_cxr) in that order and project back to the ViT width."""
    if v_ehr.shape[-1] + v_cxr.shape[-1] != g.in_features:
        raise ShapeMismatch(
            f"fusion expects {g.in_features} inputs, got {v_ehr.shape[-1]}+{v_cxr.shape[-1]}"
        )
    if v_ehr.shape[:-1] != v_cxr.shape[:-1]:
        v_ehr = v_ehr.expand(*v_cxr.shape[:-1], v_ehr.shape[-1])
    return g(torch.cat([v_ehr, v_cxr], dim=-1))


def project(v: torch.Tensor, head: ProjectionHead) -> torch.Tensor:
    _check_last_dim(v, head.in_dim, "projection input")
    return head(v)


@torch.no_grad()
def ema_update(target, anchor, momentum: float):
    """t <- m * t + (1 - m) * a, in place, for modules or tensor lists."""
    t_params = list(target.parameters()) if isinstance(target, nn.Module) else list(target)
    a_params = list(anchor.parameters()) if isinstance(anchor, nn.Module) else list(anchor)
    if len(t_params) != len(a_params) or any(t.shape != a.shape for t, a in zip(t_params, a_params)):
        raise ShapeMismatch("EMA target and anchor parameters differ in shape")
    for t, a in zip(t_params, a_params):
        t.mul_(momentum).add_(a, alpha=1.0 - momentum)
    return target


# ---------------------------------------------------------------- full model


class MultimodalMSN(nn.Module):
    """Anchor/target ViTs, heads h and h+, prototypes, and the optional EHR branch.

    With ``n_ehr=None`` no EHR encoder or fusion layer is created and the model
    is exactly vanilla MSN. Submodules are built in a fixed order (anchor,
    head, prototypes, then EHR parts) so that shared parameters draw identical
    initial values with or without the EHR branch.
    """

    def __init__(self, vit_cfg: VitConfig, n_prototypes: int, n_proj: int = 256,
                 head_hidden=(2048, 2048), n_ehr: int | None = None, ehr_dim: int = 128):
        super().__init__()
        D = vit_cfg.hidden_size
        self.anchor = VisionTransformer(vit_cfg)
        self.head = ProjectionHead(D, head_hidden, n_proj)
        bound = 1.0 / math.sqrt(n_proj)
        self.prototypes = nn.Parameter(torch.empty(n_prototypes, n_proj).uniform_(-bound, bound))
        if n_ehr is not None:
            self.ehr_encoder = nn.Linear(n_ehr, ehr_dim)
            self.fusion = nn.Linear(ehr_dim + D, D)
        else:
            self.ehr_encoder = None
            self.fusion = None
        self.target = copy.deepcopy(self.anchor)
        self.head_target = copy.deepcopy(self.head)
        for p in list(self.target.parameters()) + list(self.head_target.parameters()):
            p.requires_grad_(False)

    @property
    def multimodal(self) -> bool:
        return self.ehr_encoder is not None

    @property
    def embed_dim(self) -> int:
        return self.anchor.embed_dim

    def trainable_named_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def target_parameters(self):
        return list(self.target.parameters()) + list(self.head_target.parameters())

    def anchor_embeddings(self, views) -> torch.Tensor:
        """v_cxr for every anchor view: (B, M, D), random-masked views first."""
        parts = []
        for patches, keep, grid in views:
            B, V = patches.shape[:2]
            flat = patches.reshape(B * V, *patches.shape[2:])
            k = None if keep is None else keep.reshape(B * V, -1)
            parts.append(self.anchor(flat, grid, k).reshape(B, V, -1))
        return torch.cat(parts, dim=1)

    def anchor_projections(self, views, x_ehr: torch.Tensor | None = None) -> torch.Tensor:
        v_cxr = self.anchor_embeddings(views)
        if self.multimodal:
            if x_ehr is None:
                raise ShapeMismatch("model has an EHR branch but no EHR input was given")
            v_ehr = ehr_forward(x_ehr, self.ehr_encoder)[:, None, :]
            v = fuse(v_ehr, v_cxr, self.fusion)
        else:
            v = v_cxr
        return project(v, self.head)

    @torch.no_grad()
    def target_projections(self, patches: torch.Tensor, grid) -> torch.Tensor:
        return project(self.target(patches, grid), self.head_target)

    @torch.no_grad()
    def target_embeddings(self, patches: torch.Tensor, grid) -> torch.Tensor:
        return self.target(patches, grid)

    def update_target(self, momentum: float) -> None:
        ema_update(self.target, self.anchor, momentum)
        ema_update(self.head_target, self.head, momentum)
