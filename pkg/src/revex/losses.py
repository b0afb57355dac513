"""
Training objectives: negated SI-SDR over every extraction output, a
triplet loss on reference embeddings, and the warm-up gated sum of both.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING

import torch
import torch.nn.functional as F

from revex import constants
from revex.errors import ContractError, InvalidInputError

if TYPE_CHECKING:
    from revex.model import ExtractionOutput


class ExtractionLossMode(str, Enum):
    """Which stage-1 outputs receive an SI-SDR term."""

    all = "all"
    final = "final"


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 2.0
    margin: float = 0.5
    warmup_steps: int = 200
    epsilon: float = constants.EPSILON
    mode: ExtractionLossMode = ExtractionLossMode.all
    use_triplet: bool = True

    def __post_init__(self) -> None:
        if self.alpha < 0 or self.margin < 0:
            raise InvalidInputError(f"alpha and margin must be non-negative, got {self.alpha}, {self.margin}")
        if self.epsilon <= 0:
            raise InvalidInputError(f"epsilon must be positive, got {self.epsilon}")
        if self.warmup_steps < 0:
            raise InvalidInputError(f"warmup_steps must be non-negative, got {self.warmup_steps}")
        object.__setattr__(self, "mode", ExtractionLossMode(self.mode))


@dataclass
class LossBreakdown:
    """Components of one total_loss evaluation."""

    total: torch.Tensor
    si_sdr_term: torch.Tensor
    triplet_term: torch.Tensor
    triplet_contribution: torch.Tensor
    warmup_active: bool

    def as_row(self) -> dict[str, float | bool]:
        return {
            "total": float(self.total.detach()),
            "sisdr": float(self.si_sdr_term.detach()),
            "triplet": float(self.triplet_term.detach()),
            "triplet_contribution": float(self.triplet_contribution.detach()),
            "warmup_active": self.warmup_active,
        }


def si_sdr(
    target: torch.Tensor,
    estimate: torch.Tensor,
    mask: torch.Tensor | None = None,
    eps: float = constants.EPSILON,
) -> torch.Tensor:
    """
    Scale-invariant SDR in dB over the last axis.
    A mask of shape [..., samples] excludes zero-padded tails.

    Raises:
        InvalidInputError: shape mismatch, or an all-zero target
    """
    if target.shape != estimate.shape:
        raise InvalidInputError(f"si_sdr shapes differ: {tuple(target.shape)} vs {tuple(estimate.shape)}")
    if mask is not None:
        mask = mask.to(target.dtype)
        target, estimate = target * mask, estimate * mask
    target_energy = torch.sum(target**2, dim=-1)
    if torch.any(target_energy <= 0):
        raise InvalidInputError("si_sdr target is identically zero")
    beta = torch.sum(estimate * target, dim=-1) / target_energy
    projection = beta.unsqueeze(-1) * target
    ratio = torch.sum(projection**2, dim=-1) / (torch.sum((projection - estimate) ** 2, dim=-1) + eps)
    return 10 * torch.log10(ratio + eps)


def sample_mask(lengths: torch.Tensor, n_samples: int) -> torch.Tensor:
    """Boolean [batch, n_samples] mask of valid samples."""
    return torch.arange(n_samples, device=lengths.device).unsqueeze(0) < lengths.unsqueeze(1)


def extraction_loss(
    outputs: ExtractionOutput,
    target_reverberant: torch.Tensor,
    target_dry: torch.Tensor,
    mode: ExtractionLossMode = ExtractionLossMode.all,
    mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """
    Negated sum of SI-SDR terms per item: every stage-1 estimate (or only
    the final one) against the reverberant target, plus the stage-2
    estimate against the dry target.

    Raises:
        ContractError: no stage-1 estimate or no stage-2 estimate
    """
    if not outputs.stage1_waves or outputs.stage2_wave is None:
        raise ContractError("Extraction loss needs stage-1 and stage-2 estimates")
    stage1 = outputs.stage1_waves if mode == ExtractionLossMode.all else outputs.stage1_waves[-1:]
    total = -si_sdr(target_dry, outputs.stage2_wave, mask)
    for estimate in stage1:
        total = total - si_sdr(target_reverberant, estimate, mask)
    return total


def cosine_distance(a: torch.Tensor, b: torch.Tensor, eps: float = constants.EPSILON) -> torch.Tensor:
    """1 - cos(a, b) over the last axis, in [0, 2]."""
    if a.shape[-1] != b.shape[-1]:
        raise InvalidInputError(f"Embedding widths differ: {a.shape[-1]} vs {b.shape[-1]}")
    norms = torch.clamp(torch.linalg.vector_norm(a, dim=-1) * torch.linalg.vector_norm(b, dim=-1), min=eps)
    return 1.0 - torch.sum(a * b, dim=-1) / norms


def triplet_loss(anchor: torch.Tensor, positive: torch.Tensor, negative: torch.Tensor, margin: float) -> torch.Tensor:
    """Per-item hinge max(cd(a, p) - cd(a, n) + margin, 0)."""
    return F.relu(cosine_distance(anchor, positive) - cosine_distance(anchor, negative) + margin)


def check_partners(partner: torch.Tensor) -> None:
    """
    Raise unless partner pairs every item with a different item, symmetrically.

    Raises:
        ContractError: a mixture does not appear with both reference roles
    """
    index = torch.arange(len(partner), device=partner.device)
    if torch.any(partner < 0) or torch.any(partner >= len(partner)):
        raise ContractError("Partner index out of range")
    if torch.any(partner == index) or torch.any(partner[partner] != index):
        raise ContractError("Every mixture must appear with both reference roles")


def total_loss(outputs: ExtractionOutput, batch: dict[str, torch.Tensor], cfg: LossConfig, step: int) -> LossBreakdown:
    """
    Batch objective. The batch mean over both speaker roles of the
    extraction loss, plus alpha times the mean triplet loss once step has
    reached warmup_steps. The triplet anchor is the final stage-1 estimate
    re-encoded; the positive is the item's own reference embedding and the
    negative is its partner's, which is the other speaker of the same mixture.

    Raises:
        ContractError: role pairs are missing, or triplet enabled without an anchor
    """
    if "partner" not in batch:
        raise ContractError("Batch has no partner indices")
    partner = batch["partner"]
    check_partners(partner)
    mask = sample_mask(batch["lengths"], batch["mixture"].shape[-1]) if "lengths" in batch else None
    sisdr_term = extraction_loss(outputs, batch["target_reverberant"], batch["target_dry"], cfg.mode, mask).mean()

    if outputs.anchor is not None:
        reference = outputs.ref_embedding
        triplet_term = triplet_loss(outputs.anchor, reference, reference[partner], cfg.margin).mean()
    elif cfg.use_triplet:
        raise ContractError("Triplet loss is enabled but the model produced no anchor embedding")
    else:
        triplet_term = sisdr_term.new_zeros(())

    warmup_active = cfg.use_triplet and step >= cfg.warmup_steps
    contribution = cfg.alpha * triplet_term if warmup_active else torch.zeros_like(triplet_term)
    return LossBreakdown(
        total=sisdr_term + contribution,
        si_sdr_term=sisdr_term,
        triplet_term=triplet_term,
        triplet_contribution=contribution,
        warmup_active=warmup_active,
    )
