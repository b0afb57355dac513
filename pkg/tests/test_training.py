"""Tests for checkpoints, ablation modes, the training loop and checkpoint evaluation."""

import json

import numpy as np
import pandas as pd
import pytest
import torch

from revex import metrics, training
from revex.audio import Waveform
from revex.dataset import DatasetConfig, Manifest, build_scene, dynamic_crop, generate_corpus
from revex.errors import InvalidInputError, ManifestError, NumericalError
from revex.losses import ExtractionLossMode, LossConfig, total_loss
from revex.model import ModelConfig, TwoStageExtractor
from revex.training import (
    AblationMode,
    TrainConfig,
    apply_ablation,
    evaluate_checkpoint,
    extract_waveforms,
    fit,
    load_checkpoint,
    save_checkpoint,
    train,
    validate,
)


@pytest.fixture
def short_run():
    """Four steps of the micro network with the triplet term from step 2."""
    return TrainConfig(batch_size=2, max_steps=4, checkpoint_interval=2, valid_interval=0), LossConfig(warmup_steps=2)


# --- configuration ---


def test_train_config_validation():
    with pytest.raises(InvalidInputError):
        TrainConfig(batch_size=3)
    with pytest.raises(InvalidInputError):
        TrainConfig(lr=0.0)
    assert TrainConfig(ablation_mode="cfg2").ablation_mode is AblationMode.cfg2


@pytest.mark.parametrize(
    "mode, iterations, loss_mode, triplet",
    [
        ("cfg1", 1, ExtractionLossMode.all, False),
        ("cfg2", 2, ExtractionLossMode.final, False),
        ("cfg3", 2, ExtractionLossMode.all, False),
        ("cfg4", 2, ExtractionLossMode.all, True),
    ],
)
def test_apply_ablation(mode, iterations, loss_mode, triplet):
    model_cfg, loss_cfg = apply_ablation(ModelConfig.micro(), LossConfig(), mode)
    assert model_cfg.n_iterations == iterations
    assert loss_cfg.mode is loss_mode
    assert loss_cfg.use_triplet is triplet


# --- checkpoints ---


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(0)
    model = TwoStageExtractor(ModelConfig.micro())
    optimizer = torch.optim.Adam(model.parameters())
    loss_cfg, train_cfg = LossConfig(alpha=1.5), TrainConfig(batch_size=4, seed=9)
    path = save_checkpoint(tmp_path / "ckpt.pt", model, optimizer, loss_cfg, train_cfg, 12, [{"step": 11, "total": -3.0}], 4.5)
    ckpt = load_checkpoint(path)
    assert ckpt.model_cfg == ModelConfig.micro()
    assert (ckpt.loss_cfg, ckpt.train_cfg, ckpt.step, ckpt.best_valid) == (loss_cfg, train_cfg, 12, 4.5)
    assert ckpt.history == [{"step": 11, "total": -3.0}]
    restored = ckpt.model.state_dict()
    for name, tensor in model.state_dict().items():
        assert torch.equal(restored[name], tensor)
    assert not ckpt.model.training


def test_checkpoint_rejects_foreign_files(tmp_path):
    torch.save({"weights": torch.zeros(2)}, tmp_path / "other.pt")
    with pytest.raises(InvalidInputError):
        load_checkpoint(tmp_path / "other.pt")
    torch.save({"header": {"format": training.CHECKPOINT_FORMAT, "version": 99}}, tmp_path / "future.pt")
    with pytest.raises(InvalidInputError):
        load_checkpoint(tmp_path / "future.pt")
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.pt")


# --- inference ---


def test_extract_waveforms_keeps_length():
    torch.manual_seed(0)
    model = TwoStageExtractor(ModelConfig.micro())
    rng = np.random.default_rng(0)
    stage1, stage2 = extract_waveforms(model, Waveform(rng.standard_normal(3000) * 0.1), Waveform(rng.standard_normal(2000) * 0.1))
    assert len(stage1) == len(stage2) == 3000
    assert not model.training


def test_extract_waveforms_rate_mismatch():
    model = TwoStageExtractor(ModelConfig.micro())
    with pytest.raises(InvalidInputError):
        extract_waveforms(model, Waveform(np.ones(2000), 8000), Waveform(np.ones(2000), 16000))


# --- training loop ---


def test_validate_batches_match_single_scenes(scenes):
    """Equal-length scenes score the same batched or one at a time."""
    torch.manual_seed(0)
    model = TwoStageExtractor(ModelConfig.micro())
    crops = [dynamic_crop(scene, np.random.default_rng(0), length=16000) for scene in scenes]
    single = np.mean([validate(model, [crop], batch_size=1) for crop in crops])
    assert validate(model, crops, batch_size=4) == pytest.approx(single, abs=1e-3)
    assert model.training


def test_validate_pads_mixed_lengths(scenes):
    torch.manual_seed(0)
    model = TwoStageExtractor(ModelConfig.micro())
    crops = [dynamic_crop(scene, np.random.default_rng(0), length=16000 + 1000 * k) for k, scene in enumerate(scenes)]
    assert np.isfinite(validate(model, crops, batch_size=3))


def test_fit_logs_and_checkpoints(tmp_path, scenes, short_run):
    train_cfg, loss_cfg = short_run
    result = fit(scenes, ModelConfig.micro(), loss_cfg, train_cfg, tmp_path)
    assert result.step == 4
    assert result.log["step"].tolist() == [0, 1, 2, 3]
    assert result.log["warmup_active"].tolist() == [False, False, True, True]
    assert (result.log["triplet_contribution"][:2] == 0).all()
    assert np.isfinite(result.log["total"]).all()
    assert [p.name for p in result.checkpoints] == ["step0000002.pt", "step0000004.pt", "last.pt"]
    written = pd.read_csv(tmp_path / "metrics.csv")
    assert list(written.columns) == training.LOG_COLUMNS
    assert len(written) == 4


def test_fit_validation_keeps_best(tmp_path, scenes):
    train_cfg = TrainConfig(batch_size=2, max_steps=2, checkpoint_interval=0, valid_interval=1)
    result = fit(scenes[:3], ModelConfig.micro(), LossConfig(), train_cfg, tmp_path, valid_scenes=scenes[3:])
    assert result.log["valid_si_sdr"].notna().all()
    best = load_checkpoint(tmp_path / "best.pt")
    assert best.best_valid == pytest.approx(result.log["valid_si_sdr"].max())


def test_resume_follows_uninterrupted_run(tmp_path, scenes, short_run):
    """Batches depend only on (seed, step), so resuming reproduces the log."""
    train_cfg, loss_cfg = short_run
    full = fit(scenes, ModelConfig.micro(), loss_cfg, train_cfg, tmp_path / "full")
    resumed = fit(scenes, ModelConfig.micro(), loss_cfg, train_cfg, tmp_path / "resumed", resume=tmp_path / "full" / "step0000002.pt")
    assert resumed.step == 4
    pd.testing.assert_frame_equal(full.log, resumed.log)
    for name, tensor in full.model.state_dict().items():
        assert torch.allclose(resumed.model.state_dict()[name], tensor, atol=1e-6)


def test_non_finite_loss_dumps_batch(tmp_path, scenes, short_run, monkeypatch):
    def poisoned(*args, **kwargs):
        breakdown = total_loss(*args, **kwargs)
        breakdown.total = breakdown.total * float("nan")
        return breakdown

    monkeypatch.setattr(training, "total_loss", poisoned)
    train_cfg, loss_cfg = short_run
    with pytest.raises(NumericalError) as info:
        fit(scenes, ModelConfig.micro(), loss_cfg, train_cfg, tmp_path)
    assert info.value.exit_code == 3
    dump = json.loads(info.value.dump_path.read_text())
    assert dump["step"] == 0
    assert dump["batch_seed"] == [0, 0]
    assert all(scene_id.startswith("scene_") for scene_id in dump["scene_ids"])


# --- manifests ---


@pytest.fixture
def small_manifest(tmp_path, corpus) -> Manifest:
    return generate_corpus(DatasetConfig(n_train=2, n_valid=0, n_test=1, seed=2), corpus, tmp_path / "data")


def test_train_and_evaluate_checkpoint(tmp_path, small_manifest):
    train_cfg = TrainConfig(batch_size=2, max_steps=1, checkpoint_interval=0)
    train(small_manifest, ModelConfig.micro(), LossConfig(), train_cfg, tmp_path / "run")
    result = evaluate_checkpoint(tmp_path / "run" / "last.pt", small_manifest, "test", tmp_path / "eval")
    scene_id = small_manifest.split("test")[0].scene_id
    assert (tmp_path / "eval" / "estimates" / scene_id / "stage1.wav").is_file()
    assert result.per_scene["scene_id"].tolist() == [scene_id]
    assert result.failed == []


def test_train_needs_train_split(tmp_path, corpus):
    manifest = generate_corpus(DatasetConfig(n_train=0, n_valid=0, n_test=1), corpus, tmp_path / "data")
    with pytest.raises(ManifestError):
        train(manifest, ModelConfig.micro(), LossConfig(), TrainConfig(batch_size=2, max_steps=1), tmp_path / "run")
    with pytest.raises(ManifestError):
        evaluate_checkpoint(tmp_path / "none.pt", manifest, "valid", tmp_path / "eval")


# --- longer runs ---


def _training_set_si_sdr(model: TwoStageExtractor, scenes) -> dict[str, float]:
    """Mean stage-1 (reverberant target) and stage-2 (dry target) SI-SDR, with the mixture's as baseline."""
    rows = []
    for scene in scenes:
        stage1, stage2 = extract_waveforms(model, scene.mixture, scene.reference_desired)
        rows.append(
            {
                "stage1": metrics.si_sdr(scene.reverberant_desired, stage1),
                "stage2": metrics.si_sdr(scene.dry_desired, stage2),
                "unprocessed_stage1": metrics.si_sdr(scene.reverberant_desired, scene.mixture),
                "unprocessed_stage2": metrics.si_sdr(scene.dry_desired, scene.mixture),
            }
        )
    return pd.DataFrame(rows).mean().to_dict()


@pytest.fixture(scope="module")
def overfit_run(tmp_path_factory, scenes):
    """The desk network trained on the four fixture scenes with the full objective."""
    loss_cfg = LossConfig(warmup_steps=200)
    train_cfg = TrainConfig(batch_size=8, max_steps=2000, checkpoint_interval=0, valid_interval=0)
    return fit(scenes, ModelConfig.desk(), loss_cfg, train_cfg, tmp_path_factory.mktemp("overfit")), loss_cfg


@pytest.mark.slow
def test_overfits_four_scenes(overfit_run, scenes):
    result, _ = overfit_run
    scores = _training_set_si_sdr(result.model, scenes)
    assert scores["stage1"] >= scores["unprocessed_stage1"] + 10.0
    assert scores["stage2"] >= scores["unprocessed_stage2"] + 5.0


@pytest.mark.slow
def test_triplet_term_follows_warmup(overfit_run):
    """Zero before warm-up ends, and almost never zero afterwards."""
    result, loss_cfg = overfit_run
    log = result.log
    before = log[log["step"] < loss_cfg.warmup_steps]
    after = log[log["step"] >= loss_cfg.warmup_steps]
    assert (before["triplet_contribution"] == 0).all()
    assert (after["triplet_contribution"] != 0).mean() >= 0.95


@pytest.mark.slow
def test_full_objective_beats_single_pass(tmp_path, corpus):
    """On fifty scenes the full configuration ends above the single-pass one."""
    fifty = [build_scene(corpus, seed, scene_id=f"scene_{seed}") for seed in range(100, 150)]
    stage2 = {}
    for mode in (AblationMode.cfg1, AblationMode.cfg4):
        train_cfg = TrainConfig(batch_size=6, max_steps=600, checkpoint_interval=0, valid_interval=0, ablation_mode=mode)
        result = fit(fifty, ModelConfig.desk(), LossConfig(warmup_steps=200), train_cfg, tmp_path / mode.value)
        stage2[mode] = _training_set_si_sdr(result.model, fifty)["stage2"]
    assert stage2[AblationMode.cfg4] >= stage2[AblationMode.cfg1] + 0.3


@pytest.mark.slow
def test_loss_decreases_on_small_set(tmp_path, scenes):
    train_cfg = TrainConfig(batch_size=4, max_steps=150, checkpoint_interval=0, lr=2e-3)
    result = fit(scenes[:2], ModelConfig.desk(), LossConfig(warmup_steps=50), train_cfg, tmp_path)
    assert result.log["sisdr"].tail(20).mean() < result.log["sisdr"].head(20).mean()


@pytest.mark.slow
@pytest.mark.parametrize("mode", list(AblationMode))
def test_every_ablation_trains(tmp_path, scenes, mode):
    train_cfg = TrainConfig(batch_size=2, max_steps=3, checkpoint_interval=0, ablation_mode=mode)
    result = fit(scenes, ModelConfig.micro(), LossConfig(warmup_steps=1), train_cfg, tmp_path)
    assert np.isfinite(result.log["total"]).all()
    ckpt = load_checkpoint(tmp_path / "last.pt")
    assert ckpt.model_cfg.n_iterations == (1 if mode is AblationMode.cfg1 else 2)
