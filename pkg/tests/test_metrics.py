"""Tests for BSS-eval SDR/SIR, STOI, per-scene scoring and the metric report."""

import numpy as np
import pandas as pd
import pytest

from revex import constants
from revex.audio import Waveform, resample, write_wav
from revex.dataset import DatasetConfig, generate_corpus, load_scene
from revex.errors import InvalidInputError, ManifestError, MeasurementError
from revex.metrics import (
    MetricReport,
    attach_external_scores,
    clamp_db,
    eval_sdr_sir,
    report,
    score_scene,
    si_sdr,
    speech_active_seconds,
    stoi,
)


@pytest.fixture
def sources():
    """Two seconds of independent white target, interference and artifact noise."""
    rng = np.random.default_rng(11)
    return rng.standard_normal(16000), rng.standard_normal(16000), rng.standard_normal(16000)


def _at_snr(clean: np.ndarray, noise: np.ndarray, snr_db: float) -> np.ndarray:
    gain = np.sqrt(np.mean(clean**2) / (np.mean(noise**2) * 10 ** (snr_db / 10)))
    return clean + gain * noise


# --- SDR / SIR ---


def test_clamp_db():
    assert clamp_db(100.0) == constants.DB_CEILING
    assert clamp_db(-100.0) == constants.DB_FLOOR
    assert clamp_db(12.5) == 12.5


def test_perfect_estimate_hits_ceiling(sources):
    s, i, _ = sources
    sdr, sir = eval_sdr_sir(s, i, s)
    assert sdr == pytest.approx(constants.DB_CEILING)
    assert sir == pytest.approx(constants.DB_CEILING)


def test_equal_mix_has_zero_sir(sources):
    s, i, _ = sources
    _, sir = eval_sdr_sir(s, i, s + i)
    assert abs(sir) < 1.0


def test_artifact_lowers_sdr_not_sir(sources):
    """Noise uncorrelated with both references counts as artifact."""
    s, i, n = sources
    sdr, sir = eval_sdr_sir(s, i, s + 0.3 * n)
    assert sdr < 12.0
    assert sir > 20.0


def test_sdr_not_below_si_sdr(sources):
    """A filtered projection fits at least as well as a scaled copy."""
    s, i, n = sources
    estimate = s + 0.4 * i + 0.5 * n
    sdr, _ = eval_sdr_sir(s, i, estimate)
    assert sdr >= si_sdr(s, estimate) - 1e-6


def test_sdr_sir_input_errors(sources):
    s, i, _ = sources
    with pytest.raises(InvalidInputError):
        eval_sdr_sir(s, i[:-1], s)
    with pytest.raises(InvalidInputError):
        eval_sdr_sir(s, np.zeros_like(i), s)
    with pytest.raises(InvalidInputError):
        eval_sdr_sir(s, i, np.zeros_like(s))


# --- STOI ---


def test_stoi_identity(speech):
    assert stoi(speech, speech) == pytest.approx(1.0, abs=1e-6)


def test_stoi_noise_is_low(speech):
    noise = np.random.default_rng(0).standard_normal(len(speech)) * 0.1
    assert stoi(speech, Waveform(noise)) < 0.2


def test_stoi_rises_with_snr(speech):
    noise = np.random.default_rng(1).standard_normal(len(speech))
    scores = [stoi(speech, Waveform(_at_snr(speech.samples, noise, snr))) for snr in (-10, 0, 10, 20)]
    assert scores == sorted(scores)
    assert 0.0 <= scores[0] < scores[-1] <= 1.0


def test_stoi_errors(speech):
    short = speech.segment(0, 800)
    with pytest.raises(MeasurementError):
        stoi(short, short)
    with pytest.raises(InvalidInputError):
        stoi(speech, speech.segment(0, len(speech) - 1))


def test_stoi_needs_a_second_of_speech(speech):
    """Long signals that are mostly silent are rejected like short ones."""
    padded = np.zeros(3 * 8000)
    padded[:4800] = speech.samples[:4800]
    assert speech_active_seconds(padded, padded, 8000) < 1.0
    with pytest.raises(MeasurementError):
        stoi(padded, padded)
    assert speech_active_seconds(speech.samples, speech.samples, 8000) >= 1.0


def test_stoi_at_analysis_rate(speech):
    clean = resample(speech, 10000).samples
    noisy = _at_snr(clean, np.random.default_rng(2).standard_normal(len(clean)), 0.0)
    assert 0.0 < stoi(clean, noisy, sample_rate=10000) < stoi(clean, clean, sample_rate=10000)


# --- scoring ---


def test_score_scene_flags_confusion(scenes):
    scene = scenes[0]
    right = score_scene(scene, scene.dry_desired, scene.reverberant_desired)
    assert not right["confused"]
    assert right["si_sdr"] == constants.DB_CEILING
    assert right["stage1_si_sdr"] == constants.DB_CEILING
    assert right["si_sdr"] > right["unprocessed_si_sdr"]
    wrong = score_scene(scene, scene.dry_interference)
    assert wrong["confused"]
    assert np.isnan(wrong["stage1_si_sdr"])


@pytest.fixture
def test_split(tmp_path, corpus):
    """A two-scene test split with an estimate for the first scene only."""
    manifest = generate_corpus(DatasetConfig(n_train=0, n_valid=0, n_test=2, seed=5), corpus, tmp_path / "data")
    estimates = tmp_path / "estimates"
    first = manifest.split("test")[0]
    scene = load_scene(first, manifest.root)
    write_wav(estimates / first.scene_id / "stage2.wav", scene.dry_desired)
    write_wav(estimates / first.scene_id / "stage1.wav", scene.reverberant_desired)
    return manifest, estimates


def test_report_skips_missing_estimates(test_split):
    manifest, estimates = test_split
    result = report(manifest, "test", estimates)
    assert result.failed == [manifest.split("test")[1].scene_id]
    assert len(result.per_scene) == 1
    row = result.per_scene.iloc[0]
    assert row["si_sdr"] == constants.DB_CEILING
    assert row["stoi"] == pytest.approx(1.0, abs=1e-6)
    assert result.confusion_rate == 0.0
    assert result.improvement["si_sdr"] > 0


def test_report_needs_scenes(test_split):
    manifest, estimates = test_split
    with pytest.raises(ManifestError):
        report(manifest, "train", estimates)


def test_report_summary_and_csv(test_split, tmp_path):
    manifest, estimates = test_split
    result = report(manifest, "test", estimates)
    summary = result.summary()
    assert list(summary.index) == ["Unprocessed", "Proposed"]
    assert list(summary.columns) == ["SI-SDR", "SDR", "SIR", "STOI"]
    assert "Proposed" in result.table()
    written = pd.read_csv(result.to_csv(tmp_path / "out" / "metrics.csv"))
    assert written["scene_id"].tolist() == result.per_scene["scene_id"].tolist()


def test_attach_external_scores(test_split, tmp_path):
    manifest, estimates = test_split
    result = report(manifest, "test", estimates)
    scene_id = result.per_scene["scene_id"].iloc[0]
    csv = tmp_path / "pesq.csv"
    pd.DataFrame({"scene_id": [scene_id], "pesq": [3.2]}).to_csv(csv, index=False)
    merged = attach_external_scores(result, csv)
    assert merged.per_scene["external_pesq"].tolist() == [3.2]
    assert merged.summary().loc["Proposed", "pesq"] == pytest.approx(3.2)
    pd.DataFrame({"scene_id": [scene_id]}).to_csv(csv, index=False)
    with pytest.raises(InvalidInputError):
        attach_external_scores(result, csv)


def test_empty_report_confusion_is_nan():
    empty = MetricReport(pd.DataFrame(columns=["scene_id", "confused"]))
    assert np.isnan(empty.confusion_rate)
