"""Tests for SI-SDR, the extraction and triplet losses and their warm-up gated sum."""

import numpy as np
import pytest
import torch

from revex import constants, metrics
from revex.errors import ContractError, InvalidInputError
from revex.losses import (
    ExtractionLossMode,
    LossConfig,
    cosine_distance,
    extraction_loss,
    sample_mask,
    si_sdr,
    total_loss,
    triplet_loss,
)
from revex.model import ExtractionOutput


@pytest.fixture
def signals():
    gen = torch.Generator().manual_seed(0)
    return torch.randn(2, 800, generator=gen, dtype=torch.float64), torch.randn(2, 800, generator=gen, dtype=torch.float64)


def _outputs(n_stage1: int = 2, anchor: bool = True, length: int = 800) -> ExtractionOutput:
    gen = torch.Generator().manual_seed(3)
    waves = [torch.randn(2, length, generator=gen, dtype=torch.float64) for _ in range(n_stage1 + 1)]
    embeddings = torch.randn(2, 8, generator=gen, dtype=torch.float64)
    return ExtractionOutput(
        stage1_outputs=[],
        stage2_output=torch.zeros(0),
        ref_embedding=embeddings,
        stage1_waves=waves[:-1],
        stage2_wave=waves[-1],
        anchor=torch.randn(2, 8, generator=gen, dtype=torch.float64) if anchor else None,
    )


def _batch(length: int = 800) -> dict[str, torch.Tensor]:
    gen = torch.Generator().manual_seed(4)
    return {
        "mixture": torch.randn(2, length, generator=gen, dtype=torch.float64),
        "target_reverberant": torch.randn(2, length, generator=gen, dtype=torch.float64),
        "target_dry": torch.randn(2, length, generator=gen, dtype=torch.float64),
        "lengths": torch.full((2,), length),
        "partner": torch.tensor([1, 0]),
    }


# --- si_sdr ---


def test_si_sdr_scale_and_sign_invariant(signals):
    s, _ = signals
    assert torch.all(si_sdr(s, 2.5 * s) >= 60.0)
    assert torch.all(si_sdr(s, -s) >= 60.0)


def test_si_sdr_matches_formula(signals):
    s, e = signals
    beta = torch.sum(e * s, dim=-1, keepdim=True) / torch.sum(s * s, dim=-1, keepdim=True)
    expected = 10 * torch.log10(torch.sum((beta * s) ** 2, dim=-1) / torch.sum((beta * s - e) ** 2, dim=-1))
    assert torch.allclose(si_sdr(s, e), expected, atol=1e-6)


def test_si_sdr_rejects_zero_target_and_mismatch(signals):
    s, e = signals
    with pytest.raises(InvalidInputError):
        si_sdr(torch.zeros_like(s), e)
    with pytest.raises(InvalidInputError):
        si_sdr(s, e[:, :-1])


def test_si_sdr_mask_ignores_padding(signals):
    """Zero-padded tails do not change the score."""
    s, e = signals
    padded_s = torch.cat([s, torch.randn(2, 200, dtype=s.dtype)], dim=1)
    padded_e = torch.cat([e, torch.randn(2, 200, dtype=s.dtype)], dim=1)
    mask = sample_mask(torch.tensor([800, 800]), 1000)
    assert torch.allclose(si_sdr(padded_s, padded_e, mask), si_sdr(s, e), atol=1e-9)


def test_si_sdr_agrees_with_metric():
    """The training loss and the evaluation metric use one formula."""
    rng = np.random.default_rng(7)
    for _ in range(100):
        s, e = rng.standard_normal(400), rng.standard_normal(400)
        e += rng.uniform(0, 3) * s
        loss_value = si_sdr(torch.from_numpy(s), torch.from_numpy(e)).item()
        assert loss_value == pytest.approx(metrics.si_sdr(s, e), abs=1e-9)


# --- extraction loss ---


def test_extraction_loss_sums_every_estimate():
    out, batch = _outputs(n_stage1=2), _batch()
    rev, dry = batch["target_reverberant"], batch["target_dry"]
    expected = -(si_sdr(dry, out.stage2_wave) + si_sdr(rev, out.stage1_waves[0]) + si_sdr(rev, out.stage1_waves[1]))
    assert torch.allclose(extraction_loss(out, rev, dry), expected)


def test_extraction_loss_final_mode():
    out, batch = _outputs(n_stage1=3), _batch()
    rev, dry = batch["target_reverberant"], batch["target_dry"]
    expected = -(si_sdr(dry, out.stage2_wave) + si_sdr(rev, out.stage1_waves[-1]))
    assert torch.allclose(extraction_loss(out, rev, dry, ExtractionLossMode.final), expected)


def test_extraction_loss_needs_both_stages():
    out, batch = _outputs(n_stage1=0), _batch()
    with pytest.raises(ContractError):
        extraction_loss(out, batch["target_reverberant"], batch["target_dry"])


# --- triplet ---


def test_cosine_distance_range():
    a = torch.tensor([[1.0, 2.0, -1.0]])
    assert cosine_distance(a, 3 * a).item() == pytest.approx(0.0, abs=1e-6)
    assert cosine_distance(a, -a).item() == pytest.approx(2.0, abs=1e-6)
    assert cosine_distance(torch.tensor([[1.0, 0.0]]), torch.tensor([[0.0, 1.0]])).item() == pytest.approx(1.0)
    with pytest.raises(InvalidInputError):
        cosine_distance(a, torch.ones(1, 2))


def test_triplet_loss_examples():
    x, y = torch.tensor([[1.0, 0.0]]), torch.tensor([[0.0, 1.0]])
    assert triplet_loss(x, x, y, margin=0.5).item() == pytest.approx(0.0)
    assert triplet_loss(x, y, x, margin=0.1).item() == pytest.approx(1.1)


def test_triplet_gradient_moves_anchor_to_positive():
    anchor = torch.tensor([[1.0, 1.0]], requires_grad=True)
    positive, negative = torch.tensor([[1.0, 0.0]]), torch.tensor([[0.0, 1.0]])
    before = cosine_distance(anchor, positive).item()
    triplet_loss(anchor, positive, negative, margin=0.5).sum().backward()
    with torch.no_grad():
        stepped = anchor - 0.1 * anchor.grad
    assert cosine_distance(stepped, positive).item() < before
    assert cosine_distance(stepped, negative).item() > cosine_distance(anchor.detach(), negative).item()


# --- total loss ---


def test_loss_config_validation():
    with pytest.raises(InvalidInputError):
        LossConfig(alpha=-1.0)
    with pytest.raises(InvalidInputError):
        LossConfig(warmup_steps=-5)
    assert LossConfig(mode="final").mode is ExtractionLossMode.final


def test_triplet_gated_by_warmup():
    out, batch = _outputs(), _batch()
    cfg = LossConfig(alpha=2.0, warmup_steps=10)
    early = total_loss(out, batch, cfg, step=9)
    assert not early.warmup_active
    assert early.triplet_contribution.item() == 0.0
    assert torch.equal(early.total, early.si_sdr_term)
    late = total_loss(out, batch, cfg, step=10)
    assert late.warmup_active
    assert torch.allclose(late.total, late.si_sdr_term + 2.0 * late.triplet_term)
    assert torch.equal(early.triplet_term, late.triplet_term)


def test_triplet_negative_is_partner_reference():
    out, batch = _outputs(), _batch()
    breakdown = total_loss(out, batch, LossConfig(warmup_steps=0), step=0)
    reference = out.ref_embedding
    expected = triplet_loss(out.anchor, reference, reference.flip(0), 0.5).mean()
    assert torch.allclose(breakdown.triplet_term, expected)


def test_alpha_zero_is_extraction_only():
    out, batch = _outputs(), _batch()
    breakdown = total_loss(out, batch, LossConfig(alpha=0.0, warmup_steps=0), step=100)
    assert torch.equal(breakdown.total, breakdown.si_sdr_term)


def test_triplet_disabled_needs_no_anchor():
    out, batch = _outputs(anchor=False), _batch()
    breakdown = total_loss(out, batch, LossConfig(use_triplet=False), step=1000)
    assert not breakdown.warmup_active
    assert torch.equal(breakdown.total, breakdown.si_sdr_term)
    with pytest.raises(ContractError):
        total_loss(out, batch, LossConfig(), step=1000)


@pytest.mark.parametrize("partner", [[0, 1], [1, 1], [1, 2]])
def test_partner_contract(partner):
    out, batch = _outputs(), _batch()
    batch["partner"] = torch.tensor(partner)
    with pytest.raises(ContractError) as info:
        total_loss(out, batch, LossConfig(), step=0)
    assert info.value.exit_code == constants.DATA_ERROR
    del batch["partner"]
    with pytest.raises(ContractError):
        total_loss(out, batch, LossConfig(), step=0)


def test_breakdown_row():
    row = total_loss(_outputs(), _batch(), LossConfig(warmup_steps=0), step=0).as_row()
    assert set(row) == {"total", "sisdr", "triplet", "triplet_contribution", "warmup_active"}
    assert row["total"] == pytest.approx(row["sisdr"] + row["triplet_contribution"])
