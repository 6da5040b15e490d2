"""Prototype assignment and the MSN objective.

    L = 1/(MB) * sum_i sum_m H(p+_i, p_im) - lambda * H(mean_im p_im)

Targets are sharp softmaxes at ``tau_plus`` and carry no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, model_validator

from .errors import EmptyBatch, InvalidDistribution, NonPositiveTemperature, ShapeMismatch, ZeroVector

LOG_EPS = 1e-12


class LossConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_prototypes: int = 1024
    tau: float = 0.1
    tau_plus: float = 0.025
    lam: float = 1.0

    @model_validator(mode="after")
    def _check(self):
        if self.n_prototypes < 2:
            raise ValueError("need at least 2 prototypes")
        if self.tau <= 0 or self.tau_plus <= 0:
            raise NonPositiveTemperature("temperatures must be > 0")
        return self


@dataclass
class LossBreakdown:
    ce_term: torch.Tensor
    entropy_term: torch.Tensor
    lam: float
    total: torch.Tensor
    p_bar: torch.Tensor

    def as_dict(self) -> dict:
        return {
            "ce_term": float(self.ce_term.detach()),
            "entropy_term": float(self.entropy_term.detach()),
            "total": float(self.total.detach()),
        }


def assign(z: torch.Tensor, prototypes: torch.Tensor, temperature: float) -> torch.Tensor:
    """softmax_k(cos(z, q_k) / temperature) over the last axis of ``z``."""
    if temperature <= 0:
        raise NonPositiveTemperature(f"temperature must be > 0, got {temperature}")
    if z.shape[-1] != prototypes.shape[-1]:
        raise ShapeMismatch(f"embedding dim {z.shape[-1]} != prototype dim {prototypes.shape[-1]}")
    if bool((z.detach().norm(dim=-1) == 0).any()):
        raise ZeroVector("cannot assign a zero embedding")
    logits = F.normalize(z, dim=-1) @ F.normalize(prototypes, dim=-1).T
    return torch.softmax(logits / temperature, dim=-1)


def _check_distribution(p: torch.Tensor, what: str) -> None:
    d = p.detach()
    if bool((d < 0).any()) or not torch.allclose(d.sum(-1), torch.ones((), dtype=d.dtype), atol=1e-6, rtol=0):
        raise InvalidDistribution(f"{what} is not a probability distribution")


def cross_entropy(p_target: torch.Tensor, p_anchor: torch.Tensor) -> torch.Tensor:
    """H(p+, p) = -sum_k p+_k log p_k, with p clamped at 1e-12."""
    _check_distribution(p_target, "target distribution")
    _check_distribution(p_anchor, "anchor distribution")
    return -(p_target * torch.log(p_anchor.clamp_min(LOG_EPS))).sum(-1)


def entropy(p: torch.Tensor) -> torch.Tensor:
    return -(p * torch.log(p.clamp_min(LOG_EPS))).sum(-1)


def mean_anchor_distribution(p_all: torch.Tensor) -> torch.Tensor:
    """Average all (B, M, K) anchor assignments into one K-vector."""
    if p_all.numel() == 0 or p_all.shape[:-1].numel() == 0:
        raise EmptyBatch("no anchor distributions to average")
    return p_all.reshape(-1, p_all.shape[-1]).mean(dim=0)


def total_loss(z_anchor: torch.Tensor, z_target: torch.Tensor, prototypes: torch.Tensor,
               tau: float, tau_plus: float, lam: float) -> LossBreakdown:
    """Loss for anchors (B, M, n) against targets (B, n)."""
    if z_anchor.ndim != 3 or z_target.ndim != 2 or z_anchor.shape[0] != z_target.shape[0]:
        raise ShapeMismatch(
            f"expected anchors (B, M, n) and targets (B, n), got {tuple(z_anchor.shape)} and {tuple(z_target.shape)}"
        )
    with torch.no_grad():
        p_target = assign(z_target.detach(), prototypes.detach(), tau_plus)
    p_anchor = assign(z_anchor, prototypes, tau)
    ce = cross_entropy(p_target[:, None, :].expand_as(p_anchor), p_anchor).mean()
    p_bar = mean_anchor_distribution(p_anchor)
    ent = entropy(p_bar)
    return LossBreakdown(ce_term=ce, entropy_term=ent, lam=lam, total=ce - lam * ent, p_bar=p_bar)
