"""
End-to-end training of the two-stage extractor, checkpoints, inference
on waveforms and checkpoint evaluation.
"""

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
import pandas as pd
import torch
from torch.utils.data import DataLoader
from tqdm import tqdm

from revex.audio import Waveform, write_wav
from revex.dataset import Manifest, Scene, SceneBatches, collate_examples, load_scene
from revex.errors import InvalidInputError, ManifestError, NumericalError
from revex.losses import ExtractionLossMode, LossConfig, sample_mask, si_sdr, total_loss
from revex.metrics import MetricReport, report
from revex.model import ModelConfig, TwoStageExtractor

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "revex-checkpoint"
CHECKPOINT_VERSION = 1
LOG_COLUMNS = [
    "step",
    "total",
    "sisdr",
    "triplet",
    "triplet_contribution",
    "warmup_active",
    "stage1_si_sdr",
    "stage2_si_sdr",
    "valid_si_sdr",
]


class AblationMode(str, Enum):
    """
    cfg1: one stage-1 pass, no triplet loss
    cfg2: iterated stage 1, loss on the final stage-1 output only
    cfg3: iterated stage 1, loss on every stage-1 output
    cfg4: cfg3 plus the triplet loss
    """

    cfg1 = "cfg1"
    cfg2 = "cfg2"
    cfg3 = "cfg3"
    cfg4 = "cfg4"


def apply_ablation(model_cfg: ModelConfig, loss_cfg: LossConfig, mode: AblationMode) -> tuple[ModelConfig, LossConfig]:
    mode = AblationMode(mode)
    if mode == AblationMode.cfg1:
        return replace(model_cfg, n_iterations=1), replace(loss_cfg, use_triplet=False)
    if mode == AblationMode.cfg2:
        return model_cfg, replace(loss_cfg, mode=ExtractionLossMode.final, use_triplet=False)
    if mode == AblationMode.cfg3:
        return model_cfg, replace(loss_cfg, mode=ExtractionLossMode.all, use_triplet=False)
    return model_cfg, replace(loss_cfg, mode=ExtractionLossMode.all, use_triplet=True)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 6
    max_steps: int = 2000
    seed: int = 0
    ablation_mode: AblationMode = AblationMode.cfg4
    checkpoint_interval: int = 500
    valid_interval: int = 250
    early_stopping_patience: int = 0
    grad_clip: float = 5.0
    workers: int = 0

    def __post_init__(self) -> None:
        if self.batch_size < 2 or self.batch_size % 2:
            raise InvalidInputError(f"batch_size must be even so each mixture appears with both roles, got {self.batch_size}")
        if self.lr <= 0 or self.max_steps < 0:
            raise InvalidInputError(f"lr must be positive and max_steps non-negative, got {self.lr}, {self.max_steps}")
        object.__setattr__(self, "ablation_mode", AblationMode(self.ablation_mode))


@dataclass
class Checkpoint:
    model: TwoStageExtractor
    model_cfg: ModelConfig
    loss_cfg: LossConfig
    train_cfg: TrainConfig
    step: int
    optimizer_state: dict | None = None
    history: list[dict] = field(default_factory=list)
    rng_state: torch.Tensor | None = None
    best_valid: float | None = None


def _config_dict(cfg) -> dict:
    data = asdict(cfg)
    return {k: (v.value if isinstance(v, Enum) else v) for k, v in data.items()}


def save_checkpoint(
    path: Path,
    model: TwoStageExtractor,
    optimizer: torch.optim.Optimizer | None,
    loss_cfg: LossConfig,
    train_cfg: TrainConfig,
    step: int,
    history: list[dict] | None = None,
    best_valid: float | None = None,
) -> Path:
    """Write model, optimizer, configs, step and RNG state to one archive."""
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "header": {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION},
            "model_config": model.cfg.to_dict(),
            "loss_config": _config_dict(loss_cfg),
            "train_config": _config_dict(train_cfg),
            "step": step,
            "model_state": model.state_dict(),
            "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
            "rng_state": torch.get_rng_state(),
            "history": history or [],
            "best_valid": best_valid,
        },
        path,
    )
    logger.info("saved checkpoint %s at step %d", path, step)
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    """
    Raises:
        FileNotFoundError: path is not a file
        InvalidInputError: not a revex checkpoint, or an unsupported version
    """
    if not path.is_file():
        raise FileNotFoundError(f"Checkpoint '{path}' not found")
    data = torch.load(path, map_location="cpu", weights_only=True)
    header = data.get("header", {}) if isinstance(data, dict) else {}
    if header.get("format") != CHECKPOINT_FORMAT:
        raise InvalidInputError(f"'{path}' is not a revex checkpoint")
    if header.get("version") != CHECKPOINT_VERSION:
        raise InvalidInputError(f"'{path}' has checkpoint version {header.get('version')}, expected {CHECKPOINT_VERSION}")
    model_cfg = ModelConfig.from_dict(data["model_config"])
    model = TwoStageExtractor(model_cfg)
    model.load_state_dict(data["model_state"])
    model.eval()
    return Checkpoint(
        model=model,
        model_cfg=model_cfg,
        loss_cfg=LossConfig(**data["loss_config"]),
        train_cfg=TrainConfig(**data["train_config"]),
        step=int(data["step"]),
        optimizer_state=data["optimizer_state"],
        history=list(data["history"]),
        rng_state=data["rng_state"],
        best_valid=data["best_valid"],
    )


def _dump_batch(out_dir: Path, step: int, batch_seed: list[int], batch: dict, scenes: list[Scene], row: dict) -> Path:
    path = out_dir / f"nonfinite_step{step:07d}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    scene_ids = [scenes[int(i)].scene_id for i in batch["scene_index"]]
    path.write_text(json.dumps({"step": step, "batch_seed": batch_seed, "scene_ids": scene_ids, "loss": row}, indent=2))
    return path


def extract_waveforms(model: TwoStageExtractor, mixture: Waveform, reference: Waveform) -> tuple[Waveform, Waveform]:
    """Final stage-1 and stage-2 estimates for one mixture, in inference mode."""
    if mixture.sample_rate != reference.sample_rate:
        raise InvalidInputError(f"Mixture rate {mixture.sample_rate} Hz differs from reference rate {reference.sample_rate} Hz")
    model.eval()
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        out = model(
            torch.from_numpy(mixture.samples).to(dtype).unsqueeze(0),
            torch.from_numpy(reference.samples).to(dtype).unsqueeze(0),
        )
    stage1 = out.stage1_waves[-1][0].double().numpy()
    stage2 = out.stage2_wave[0].double().numpy()
    return Waveform(stage1, mixture.sample_rate), Waveform(stage2, mixture.sample_rate)


def validate(model: TwoStageExtractor, scenes: list[Scene], batch_size: int = 4) -> float:
    """
    Mean stage-2 SI-SDR against the dry target over whole scenes. Scenes
    are bucketed by length and zero-padded within a batch; padding is
    masked out of the score.
    """
    model.eval()
    dtype = next(model.parameters()).dtype
    ordered = sorted(scenes, key=lambda s: len(s.mixture))
    values: list[float] = []
    with torch.no_grad():
        for start in range(0, len(ordered), batch_size):
            batch = collate_examples(
                [
                    {"mixture": s.mixture.samples, "reference": s.reference_desired.samples, "target_dry": s.dry_desired.samples}
                    for s in ordered[start : start + batch_size]
                ]
            )
            out = model(batch["mixture"].to(dtype), batch["reference"].to(dtype), batch["lengths"], batch["reference_lengths"])
            mask = sample_mask(batch["lengths"], batch["mixture"].shape[-1])
            values.extend(si_sdr(batch["target_dry"].double(), out.stage2_wave.double(), mask).tolist())
    model.train()
    return float(np.mean(values))


@dataclass
class TrainResult:
    model: TwoStageExtractor
    log: pd.DataFrame
    step: int
    checkpoints: list[Path]
    stopped_early: bool = False


def fit(
    scenes: list[Scene],
    model_cfg: ModelConfig,
    loss_cfg: LossConfig,
    train_cfg: TrainConfig,
    out_dir: Path,
    valid_scenes: list[Scene] | None = None,
    resume: Path | None = None,
    progress: bool = False,
) -> TrainResult:
    """
    Train on in-memory scenes. Batch k depends only on (seed, k), so a
    resumed run follows the uninterrupted trajectory.

    Raises:
        NumericalError: a non-finite loss; the offending batch is dumped to out_dir first
    """
    model_cfg, loss_cfg = apply_ablation(model_cfg, loss_cfg, train_cfg.ablation_mode)
    torch.manual_seed(train_cfg.seed)
    model = TwoStageExtractor(model_cfg)
    optimizer = torch.optim.Adam(model.parameters(), lr=train_cfg.lr)
    history: list[dict] = []
    start, best_valid = 0, None
    if resume is not None:
        ckpt = load_checkpoint(resume)
        model.load_state_dict(ckpt.model.state_dict())
        if ckpt.optimizer_state is not None:
            optimizer.load_state_dict(ckpt.optimizer_state)
        if ckpt.rng_state is not None:
            torch.set_rng_state(ckpt.rng_state)
        start, history, best_valid = ckpt.step, ckpt.history, ckpt.best_valid
        logger.info("resuming from %s at step %d", resume, start)

    batches = SceneBatches(scenes, train_cfg.batch_size, train_cfg.seed, train_cfg.max_steps)
    loader = DataLoader(batches, batch_size=None, sampler=range(start, train_cfg.max_steps), num_workers=train_cfg.workers)
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoints: list[Path] = []
    stale, stopped_early, completed = 0, False, start
    model.train()

    for batch in tqdm(loader, total=train_cfg.max_steps - start, desc="Training", disable=not progress):
        step = int(batch["step"])
        if step == loss_cfg.warmup_steps and loss_cfg.use_triplet:
            logger.info("triplet loss active from step %d", step)
        out = model(batch["mixture"], batch["reference"], batch["lengths"], batch["lengths"], with_anchor=True)
        breakdown = total_loss(out, batch, loss_cfg, step)
        row = {"step": step, **breakdown.as_row()}
        if not torch.isfinite(breakdown.total):
            dump = _dump_batch(out_dir, step, batches.batch_seed(step), batch, batches.scenes, row)
            raise NumericalError(f"Non-finite loss at step {step}, batch dumped to {dump}", dump)

        optimizer.zero_grad()
        breakdown.total.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), train_cfg.grad_clip)
        optimizer.step()

        with torch.no_grad():
            row["stage1_si_sdr"] = float(si_sdr(batch["target_reverberant"], out.stage1_waves[-1]).mean())
            row["stage2_si_sdr"] = float(si_sdr(batch["target_dry"], out.stage2_wave).mean())
        row["valid_si_sdr"] = float("nan")
        done = step + 1
        if valid_scenes and train_cfg.valid_interval > 0 and done % train_cfg.valid_interval == 0:
            row["valid_si_sdr"] = validate(model, valid_scenes, train_cfg.batch_size)
            if best_valid is None or row["valid_si_sdr"] > best_valid:
                best_valid, stale = row["valid_si_sdr"], 0
                checkpoints.append(save_checkpoint(out_dir / "best.pt", model, optimizer, loss_cfg, train_cfg, done, history + [row], best_valid))
            else:
                stale += 1
        history.append(row)

        if train_cfg.checkpoint_interval > 0 and done % train_cfg.checkpoint_interval == 0:
            checkpoints.append(save_checkpoint(out_dir / f"step{done:07d}.pt", model, optimizer, loss_cfg, train_cfg, done, history, best_valid))
        if train_cfg.early_stopping_patience and stale >= train_cfg.early_stopping_patience:
            logger.info("validation SI-SDR stalled for %d checks, stopping at step %d", stale, done)
            stopped_early = True
            completed = done
            break
        completed = done

    final = completed
    checkpoints.append(save_checkpoint(out_dir / "last.pt", model, optimizer, loss_cfg, train_cfg, final, history, best_valid))
    log = pd.DataFrame(history, columns=LOG_COLUMNS)
    log.to_csv(out_dir / "metrics.csv", index=False)
    return TrainResult(model, log, final, checkpoints, stopped_early)


def load_split(manifest: Manifest, split: str) -> list[Scene]:
    return [load_scene(record, manifest.root) for record in manifest.split(split)]


def train(
    manifest: Manifest,
    model_cfg: ModelConfig,
    loss_cfg: LossConfig,
    train_cfg: TrainConfig,
    out_dir: Path,
    resume: Path | None = None,
    progress: bool = False,
) -> TrainResult:
    """
    Train on the manifest's train split, validating on its valid split.

    Raises:
        ManifestError: the manifest has no training scenes
    """
    scenes = load_split(manifest, "train")
    if not scenes:
        raise ManifestError("Manifest has no 'train' scenes")
    return fit(scenes, model_cfg, loss_cfg, train_cfg, out_dir, load_split(manifest, "valid"), resume, progress)


def evaluate_checkpoint(
    checkpoint: Path,
    manifest: Manifest,
    split: str,
    out_dir: Path,
    workers: int = 1,
    progress: bool = False,
) -> MetricReport:
    """
    Extract every scene of a split into <out_dir>/estimates and score them.

    Raises:
        ManifestError: the split has no scenes
    """
    records = manifest.split(split)
    if not records:
        raise ManifestError(f"Manifest has no '{split}' scenes")
    model = load_checkpoint(checkpoint).model
    estimates = out_dir / "estimates"
    started = time.perf_counter()
    for record in tqdm(records, desc="Extracting", disable=not progress):
        scene = load_scene(record, manifest.root)
        stage1, stage2 = extract_waveforms(model, scene.mixture, scene.reference_desired)
        write_wav(estimates / record.scene_id / "stage1.wav", stage1)
        write_wav(estimates / record.scene_id / "stage2.wav", stage2)
    logger.info("extracted %d scenes in %.1f s", len(records), time.perf_counter() - started)
    return report(manifest, split, estimates, workers, progress)
