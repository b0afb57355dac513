"""
Objective evaluation: SI-SDR, BSS-eval SDR and SIR, and STOI, collected
per scene into a MetricReport.
"""

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import pandas as pd
import pystoi
from mir_eval.separation import bss_eval_sources
from pystoi.utils import remove_silent_frames
from scipy.signal import resample_poly
from tqdm import tqdm
from tqdm.contrib.concurrent import process_map

from revex import constants
from revex.audio import Waveform, read_wav
from revex.dataset import Manifest, Scene, SceneRecord, load_scene
from revex.errors import InvalidInputError, ManifestError, MeasurementError

logger = logging.getLogger(__name__)

METRICS = ("si_sdr", "sdr", "sir", "stoi")
METRIC_LABELS = {"si_sdr": "SI-SDR", "sdr": "SDR", "sir": "SIR", "stoi": "STOI"}

# STOI analysis rate, frame and silence threshold
STOI_RATE = 10000
STOI_FRAME = 256
STOI_DYN_RANGE = 40
STOI_MIN_ACTIVE = 1.0


def _samples(x: Waveform | np.ndarray) -> np.ndarray:
    return x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=np.float64)


def _equal_lengths(*signals: np.ndarray) -> None:
    if len({len(s) for s in signals}) != 1:
        raise InvalidInputError(f"Signals differ in length: {[len(s) for s in signals]}")


def clamp_db(value: float) -> float:
    return float(np.clip(value, constants.DB_FLOOR, constants.DB_CEILING))


def si_sdr(target: Waveform | np.ndarray, estimate: Waveform | np.ndarray, eps: float = constants.EPSILON) -> float:
    """Scale-invariant SDR in dB, the same formula the training loss negates."""
    s, s_hat = _samples(target), _samples(estimate)
    _equal_lengths(s, s_hat)
    energy = float(np.dot(s, s))
    if energy <= 0:
        raise InvalidInputError("si_sdr target is identically zero")
    projection = (np.dot(s_hat, s) / energy) * s
    ratio = np.sum(projection**2) / (np.sum((projection - s_hat) ** 2) + eps)
    return float(10 * np.log10(ratio + eps))


def eval_sdr_sir(
    target: Waveform | np.ndarray,
    interference: Waveform | np.ndarray,
    estimate: Waveform | np.ndarray,
) -> tuple[float, float]:
    """
    SDR and SIR in dB of one estimate, decomposed by mir_eval's BSS-eval
    against the target and interference references with 512-tap
    distortion filters.

    Raises:
        InvalidInputError: unequal lengths, an all-zero reference or a silent estimate
    """
    s, i, e = _samples(target), _samples(interference), _samples(estimate)
    _equal_lengths(s, i, e)
    if not np.any(s) or not np.any(i):
        raise InvalidInputError("Target and interference references must be non-zero")
    if not np.any(e):
        raise InvalidInputError("Estimate is silent")
    sdr, sir, _, _ = bss_eval_sources(np.stack([s, i]), np.stack([e, e]), compute_permutation=False)
    return clamp_db(sdr[0]), clamp_db(sir[0])


def speech_active_seconds(clean: np.ndarray, processed: np.ndarray, sample_rate: int) -> float:
    """Duration left once frames more than 40 dB below the loudest clean frame are dropped."""
    if sample_rate != STOI_RATE:
        ratio = Fraction(STOI_RATE, sample_rate)
        clean = resample_poly(clean, ratio.numerator, ratio.denominator)
        processed = resample_poly(processed, ratio.numerator, ratio.denominator)
    if len(clean) <= STOI_FRAME:
        return 0.0
    kept, _ = remove_silent_frames(clean, processed, STOI_DYN_RANGE, STOI_FRAME, STOI_FRAME // 2)
    return len(kept) / STOI_RATE


def stoi(clean: Waveform | np.ndarray, processed: Waveform | np.ndarray, sample_rate: int = constants.SAMPLE_RATE) -> float:
    """
    Short-time objective intelligibility in [0, 1], from pystoi.

    Raises:
        InvalidInputError: unequal lengths
        MeasurementError: less than STOI_MIN_ACTIVE seconds of speech-active signal
    """
    if isinstance(clean, Waveform):
        sample_rate = clean.sample_rate
    x, y = _samples(clean), _samples(processed)
    _equal_lengths(x, y)
    active = speech_active_seconds(x, y, sample_rate)
    if active < STOI_MIN_ACTIVE:
        raise MeasurementError(f"{active:.2f} s of speech-active signal, at least {STOI_MIN_ACTIVE} s are needed for STOI")
    return float(np.clip(pystoi.stoi(x, y, sample_rate, extended=False), 0.0, 1.0))


def score(target: Waveform, interference: Waveform, estimate: Waveform) -> dict[str, float]:
    """All four metrics of one estimate against one target."""
    sdr, sir = eval_sdr_sir(target, interference, estimate)
    return {
        "si_sdr": clamp_db(si_sdr(target, estimate)),
        "sdr": sdr,
        "sir": sir,
        "stoi": stoi(target, estimate),
    }


def score_scene(scene: Scene, stage2: Waveform, stage1: Waveform | None = None) -> dict:
    """
    Per-scene record: stage-2 metrics against the dry target, the same
    metrics for the unprocessed mixture, the stage-1 SI-SDR against the
    reverberant target, and whether the estimate matches the wrong speaker.
    """
    proposed = score(scene.dry_desired, scene.dry_interference, stage2)
    unprocessed = score(scene.dry_desired, scene.dry_interference, scene.mixture)
    record: dict = {"scene_id": scene.scene_id, **proposed}
    record.update({f"unprocessed_{k}": v for k, v in unprocessed.items()})
    record["stage1_si_sdr"] = clamp_db(si_sdr(scene.reverberant_desired, stage1)) if stage1 is not None else np.nan
    record["confused"] = si_sdr(scene.dry_interference, stage2) > si_sdr(scene.dry_desired, stage2)
    return record


@dataclass
class MetricReport:
    """Per-scene metric rows and the scenes that could not be scored."""

    per_scene: pd.DataFrame
    failed: list[str] = field(default_factory=list)

    @property
    def aggregate(self) -> pd.Series:
        return self.per_scene[list(METRICS)].mean()

    @property
    def unprocessed(self) -> pd.Series:
        values = self.per_scene[[f"unprocessed_{m}" for m in METRICS]].mean()
        return values.rename(lambda name: name.removeprefix("unprocessed_"))

    @property
    def improvement(self) -> pd.Series:
        return self.aggregate - self.unprocessed

    @property
    def confusion_rate(self) -> float:
        return float(self.per_scene["confused"].mean()) if len(self.per_scene) else float("nan")

    def summary(self) -> pd.DataFrame:
        """Unprocessed and Proposed rows in SI-SDR, SDR, SIR, STOI order, plus any external scores."""
        rows = pd.DataFrame([self.unprocessed, self.aggregate], index=["Unprocessed", "Proposed"])
        extra = [c for c in self.per_scene.columns if c.startswith("external_")]
        for column in extra:
            rows[column.removeprefix("external_")] = [np.nan, self.per_scene[column].mean()]
        return rows.rename(columns=METRIC_LABELS)

    def table(self) -> str:
        return self.summary().to_string(float_format=lambda v: f"{v:.2f}")

    def to_csv(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        self.per_scene.to_csv(path, index=False)
        return path


def _score_record(job: tuple) -> dict | str:
    record, root, estimates_dir = job
    stage2_path = estimates_dir / record.scene_id / "stage2.wav"
    if not stage2_path.is_file():
        return record.scene_id
    stage1_path = estimates_dir / record.scene_id / "stage1.wav"
    scene = load_scene(record, root)
    stage1 = read_wav(stage1_path) if stage1_path.is_file() else None
    return score_scene(scene, read_wav(stage2_path), stage1)


def report(
    manifest: Manifest,
    split: str,
    estimates_dir: Path,
    workers: int = 1,
    progress: bool = False,
) -> MetricReport:
    """
    Score <estimates_dir>/<scene_id>/stage2.wav for every scene of a split.
    Scenes without an estimate are listed as failed and left out of the
    aggregate.

    Raises:
        ManifestError: the split has no scenes
    """
    records: list[SceneRecord] = manifest.split(split)
    if not records:
        raise ManifestError(f"Manifest has no '{split}' scenes")
    jobs = [(record, manifest.root, estimates_dir) for record in records]
    if workers > 1:
        results = process_map(_score_record, jobs, max_workers=workers, chunksize=1, desc="Scoring", disable=not progress)
    else:
        results = [_score_record(job) for job in tqdm(jobs, desc="Scoring", disable=not progress)]
    failed = [r for r in results if isinstance(r, str)]
    rows = [r for r in results if isinstance(r, dict)]
    if failed:
        logger.warning("%d scenes have no estimate and are excluded: %s", len(failed), ", ".join(failed))
    columns = ["scene_id", *METRICS, *(f"unprocessed_{m}" for m in METRICS), "stage1_si_sdr", "confused"]
    return MetricReport(pd.DataFrame(rows, columns=columns), failed)


def attach_external_scores(report: MetricReport, csv_path: Path, column: str = "pesq") -> MetricReport:
    """
    Merge a per-scene CSV (scene_id,<column>) from an external tool.

    Raises:
        InvalidInputError: the CSV lacks scene_id or the column
    """
    external = pd.read_csv(csv_path)
    missing = {"scene_id", column} - set(external.columns)
    if missing:
        raise InvalidInputError(f"'{csv_path}' lacks columns {sorted(missing)}")
    merged = report.per_scene.merge(
        external[["scene_id", column]].rename(columns={column: f"external_{column}"}), on="scene_id", how="left"
    )
    return MetricReport(merged, list(report.failed))
