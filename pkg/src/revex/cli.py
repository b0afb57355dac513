"""The Command Line Interface (CLI) code for revex
Uses the typer package to implement sub-commands, command options
and help text.
Only CLI code should be in this module, input and output for the user.
"""

import json
import logging
import sys
import time
from pathlib import Path
from typing import Annotated

import click
import typer
from typer.core import TyperGroup

from revex import constants
from revex.audio import read_wav, write_wav
from revex.config import build_configs, read_config_file, write_effective_config
from revex.corpus import NoiseSource, SpeakerCorpus, synthesize_corpus
from revex.dataset import DatasetConfig, Manifest, generate_corpus
from revex.errors import RevexError
from revex.metrics import attach_external_scores
from revex.training import AblationMode, evaluate_checkpoint, extract_waveforms, load_checkpoint, train

PROGRAM_NAME = constants.PROGRAM_NAME
VERSION = constants.VERSION
NO_ERROR = constants.NO_ERROR
USAGE_ERROR = constants.USAGE_ERROR
DATA_ERROR = constants.DATA_ERROR

MANIFEST_NAME = "manifest.jsonl"


def version_callback(is_version_requested: bool) -> None:
    """Display the version number and exit"""
    if is_version_requested:
        typer.echo(f"{PROGRAM_NAME} version: {VERSION}")
        raise typer.Exit(code=NO_ERROR)


def print_error(msg: str) -> None:
    """
    Display an error message
    """
    typer.secho(
        msg,
        fg=typer.colors.BRIGHT_WHITE,
        bg=typer.colors.RED,
    )


def print_header(label: str) -> None:
    border = "-" * len(label)
    typer.echo(border)
    typer.secho(label, fg=typer.colors.BRIGHT_YELLOW)
    typer.echo(border)


class RevexGroup(TyperGroup):
    """
    Runs commands without click's standalone handling so that usage errors
    exit with USAGE_ERROR and revex errors with their own exit code.
    """

    def main(self, *args, **kwargs):  # type: ignore[override]
        kwargs.pop("standalone_mode", None)
        try:
            result = super().main(*args, standalone_mode=False, **kwargs)
        except click.UsageError as e:
            e.show()
            sys.exit(USAGE_ERROR)
        except click.ClickException as e:
            e.show()
            sys.exit(e.exit_code)
        except click.Abort:
            typer.echo("Aborted!", err=True)
            sys.exit(USAGE_ERROR)
        except RevexError as e:
            print_error(str(e))
            sys.exit(e.exit_code)
        except FileNotFoundError as e:
            print_error(str(e))
            sys.exit(DATA_ERROR)
        sys.exit(result if isinstance(result, int) else NO_ERROR)


def _require_dir(path: Path, what: str) -> None:
    if not path.is_dir():
        raise click.BadParameter(f"{what} '{path}' is not a directory")


def _read_manifest(data: Path) -> Manifest:
    _require_dir(data, "Dataset directory")
    return Manifest.read(data / MANIFEST_NAME)


# CLI interface
# sourcery skip: avoid-global-variables
# module level variables are required by typer
app = typer.Typer(
    cls=RevexGroup,
    help=constants.APP_HELP,
    rich_markup_mode=None,
    pretty_exceptions_enable=False,
    add_completion=False,
    context_settings={"help_option_names": ["-h", "--help"]},
)


@app.callback()
def callback(
    version: Annotated[
        bool | None,
        typer.Option(
            "--version",
            "-V",
            callback=version_callback,
            is_eager=True,
            help="Print the version number.",
        ),
    ] = None,
    log_level: Annotated[str, typer.Option("--log-level", help="Logging level: DEBUG, INFO, WARNING, ERROR.")] = "WARNING",
) -> None:
    """Configure logging for every command"""
    level = logging.getLevelName(log_level.upper())
    if not isinstance(level, int):
        raise click.BadParameter(f"Unknown log level '{log_level}'", param_hint="--log-level")
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", force=True)


@app.command(name="gen-dataset")
def gen_dataset(
    out: Annotated[Path, typer.Option("--out", "-o", help="Output dataset directory")],
    corpus: Annotated[Path | None, typer.Option("--corpus", help="Speaker corpus: <dir>/<speaker>/<utterance>.wav")] = None,
    noise: Annotated[Path | None, typer.Option("--noise", help="Directory of noise WAVs (default: synthetic noise)")] = None,
    synthetic_speakers: Annotated[int, typer.Option("--synthetic-speakers", help="Speakers to synthesise without --corpus")] = 8,
    synthetic_utterances: Annotated[int, typer.Option("--synthetic-utterances", help="Utterances per synthetic speaker")] = 4,
    n_train: Annotated[int, typer.Option("--n-train", help="Training scenes")] = 200,
    n_valid: Annotated[int, typer.Option("--n-valid", help="Validation scenes")] = 20,
    n_test: Annotated[int, typer.Option("--n-test", help="Test scenes")] = 20,
    seed: Annotated[int, typer.Option("--seed", help="Master seed")] = 0,
    rir_cache: Annotated[Path | None, typer.Option("--rir-cache", help="Directory caching generated RIRs")] = None,
    resample: Annotated[bool, typer.Option("--resample", help="Resample input WAVs to 8 kHz")] = False,
    workers: Annotated[int, typer.Option("--workers", "-j", min=1, help="Worker processes")] = 1,
    progress: Annotated[bool, typer.Option("--progress/--no-progress", help="Show progress bars")] = True,
) -> None:
    """Generate reverberant two-speaker scenes and their manifest"""
    if corpus is None:
        typer.echo(f"No corpus given, synthesising {synthetic_speakers} speakers")
        speakers = synthesize_corpus(out / "corpus", synthetic_speakers, synthetic_utterances, seed, progress=progress)
    else:
        _require_dir(corpus, "Corpus")
        speakers = SpeakerCorpus.from_directory(corpus, resample_input=resample)
    noise_source = NoiseSource.from_directory(noise, resample_input=resample)
    cfg = DatasetConfig(n_train=n_train, n_valid=n_valid, n_test=n_test, seed=seed)
    write_effective_config(
        out,
        dataset=cfg,
        corpus=corpus or out / "corpus",
        noise=noise,
        rir_cache=rir_cache,
        workers=workers,
    )
    manifest = generate_corpus(cfg, speakers, out, noise_source, rir_cache, workers, progress)
    typer.secho(f"Wrote {len(manifest.records)} scenes to {out / MANIFEST_NAME}", fg=typer.colors.GREEN)


@app.command(name="train")
def train_command(
    data: Annotated[Path, typer.Option("--data", "-d", help="Dataset directory with a manifest")],
    out: Annotated[Path, typer.Option("--out", "-o", help="Output directory for checkpoints and logs")],
    config: Annotated[Path | None, typer.Option("--config", "-c", help="Flat TOML config file")] = None,
    resume: Annotated[Path | None, typer.Option("--resume", help="Checkpoint to resume from")] = None,
    max_steps: Annotated[int | None, typer.Option("--max-steps", help="Optimizer steps")] = None,
    batch_size: Annotated[int | None, typer.Option("--batch-size", help="Batch size (even)")] = None,
    lr: Annotated[float | None, typer.Option("--lr", help="Learning rate")] = None,
    seed: Annotated[int | None, typer.Option("--seed", help="Random seed")] = None,
    ablation: Annotated[AblationMode | None, typer.Option("--ablation", help="Ablation configuration")] = None,
    warmup_steps: Annotated[int | None, typer.Option("--warmup-steps", help="Steps before the triplet loss starts")] = None,
    workers: Annotated[int | None, typer.Option("--workers", "-j", help="Data loader worker processes")] = None,
    progress: Annotated[bool, typer.Option("--progress/--no-progress", help="Show progress bars")] = True,
) -> None:
    """Train the two-stage extractor"""
    manifest = _read_manifest(data)
    file_values = read_config_file(config) if config is not None else {}
    overrides = {
        "max_steps": max_steps,
        "batch_size": batch_size,
        "lr": lr,
        "seed": seed,
        "ablation_mode": ablation,
        "warmup_steps": warmup_steps,
        "workers": workers,
    }
    model_cfg, loss_cfg, train_cfg = build_configs(file_values, overrides)
    write_effective_config(out, model=model_cfg, loss=loss_cfg, train=train_cfg, data=data, resume=resume)
    result = train(manifest, model_cfg, loss_cfg, train_cfg, out, resume, progress)
    print_header(f"Training finished at step {result.step}")
    if len(result.log):
        last = result.log.iloc[-1]
        typer.echo(f"  loss:          {last['total']:.3f}")
        typer.echo(f"  stage-2 SI-SDR: {last['stage2_si_sdr']:.2f} dB")
    if result.stopped_early:
        typer.secho("Stopped early: validation SI-SDR stopped improving", fg=typer.colors.YELLOW)
    typer.secho(f"Checkpoint: {result.checkpoints[-1]}", fg=typer.colors.GREEN)


@app.command()
def extract(
    mixture: Annotated[Path, typer.Argument(help="Mixture WAV (8 kHz mono)")],
    reference: Annotated[Path, typer.Argument(help="Reference utterance WAV of the desired speaker")],
    checkpoint: Annotated[Path, typer.Option("--checkpoint", "-c", help="Trained checkpoint")],
    out: Annotated[Path, typer.Option("--out", "-o", help="Output directory")],
    resample: Annotated[bool, typer.Option("--resample", help="Resample inputs to 8 kHz")] = False,
) -> None:
    """Extract the reference speaker from a mixture"""
    mix = read_wav(mixture, resample_input=resample)
    ref = read_wav(reference, resample_input=resample)
    ckpt = load_checkpoint(checkpoint)
    started = time.perf_counter()
    stage1, stage2 = extract_waveforms(ckpt.model, mix, ref)
    elapsed = time.perf_counter() - started
    stage1_path = write_wav(out / "stage1.wav", stage1)
    stage2_path = write_wav(out / "stage2.wav", stage2)
    sidecar = {
        "mixture": str(mixture),
        "reference": str(reference),
        "checkpoint": str(checkpoint),
        "checkpoint_step": ckpt.step,
        "model": ckpt.model_cfg.to_dict(),
        "duration_s": mix.duration,
        "extract_s": elapsed,
    }
    (out / "extract.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True), encoding="utf-8")
    typer.secho(f"Stage 1: {stage1_path}", fg=typer.colors.CYAN)
    typer.secho(f"Stage 2: {stage2_path}", fg=typer.colors.BRIGHT_CYAN)


@app.command()
def evaluate(
    data: Annotated[Path, typer.Option("--data", "-d", help="Dataset directory with a manifest")],
    checkpoint: Annotated[Path, typer.Option("--checkpoint", "-c", help="Trained checkpoint")],
    out: Annotated[Path, typer.Option("--out", "-o", help="Output directory for estimates and reports")],
    split: Annotated[str, typer.Option("--split", help="Manifest split: train, valid or test")] = "test",
    strict: Annotated[bool, typer.Option("--strict", help="Exit non-zero if any scene fails")] = False,
    pesq_csv: Annotated[Path | None, typer.Option("--pesq-csv", help="External PESQ scores: scene_id,pesq")] = None,
    workers: Annotated[int, typer.Option("--workers", "-j", min=1, help="Worker processes for scoring")] = 1,
    progress: Annotated[bool, typer.Option("--progress/--no-progress", help="Show progress bars")] = True,
) -> int:
    """Extract and score every scene of a split"""
    manifest = _read_manifest(data)
    write_effective_config(out, data=data, checkpoint=checkpoint, split=split, pesq_csv=pesq_csv, workers=workers)
    metric_report = evaluate_checkpoint(checkpoint, manifest, split, out, workers, progress)
    if pesq_csv is not None:
        metric_report = attach_external_scores(metric_report, pesq_csv)
    csv_path = metric_report.to_csv(out / "metrics.csv")
    table = metric_report.table()
    (out / "metrics.txt").write_text(table + "\n", encoding="utf-8")

    print_header(f"Results on '{split}' ({len(metric_report.per_scene)} scenes)")
    typer.echo(table)
    typer.echo(f"Speaker confusion rate: {metric_report.confusion_rate:.1%}")
    typer.secho(f"Per-scene metrics: {csv_path}", fg=typer.colors.GREEN)
    if metric_report.failed:
        print_error(f"{len(metric_report.failed)} scenes failed: {', '.join(metric_report.failed)}")
        if strict:
            return DATA_ERROR
    return NO_ERROR


def main() -> None:
    app()


if __name__ == "__main__":
    main()
