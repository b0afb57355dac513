"""
Waveform container and WAV file input/output.

WAV files are 16-bit PCM mono at the canonical 8 kHz rate.
Other rates are rejected unless resampling is requested explicitly.
"""

import logging
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
import soundfile as sf
from scipy.signal import resample_poly

from revex import constants
from revex.errors import InvalidInputError

logger = logging.getLogger(__name__)

PCM_SUBTYPE = "PCM_16"
PCM_SCALE = 32768.0


@dataclass(frozen=True)
class Waveform:
    """Mono sampled signal with its sample rate."""

    samples: np.ndarray
    sample_rate: int = constants.SAMPLE_RATE

    def __post_init__(self) -> None:
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise InvalidInputError(f"Waveform must be one-dimensional, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise InvalidInputError("Waveform contains NaN or Inf samples")
        if self.sample_rate <= 0:
            raise InvalidInputError(f"Sample rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        """Length in seconds."""
        return len(self.samples) / self.sample_rate

    def scaled(self, gain: float) -> "Waveform":
        return Waveform(self.samples * gain, self.sample_rate)

    def segment(self, start: int, stop: int) -> "Waveform":
        return Waveform(self.samples[start:stop], self.sample_rate)


def resample(w: Waveform, sample_rate: int) -> Waveform:
    """Polyphase resampling to a new rate."""
    if sample_rate == w.sample_rate:
        return w
    ratio = Fraction(sample_rate, w.sample_rate)
    samples = resample_poly(w.samples, ratio.numerator, ratio.denominator)
    return Waveform(samples, sample_rate)


def read_wav(path: Path, *, sample_rate: int = constants.SAMPLE_RATE, resample_input: bool = False) -> Waveform:
    """
    Read a mono WAV file.

    Raises:
        FileNotFoundError: path is not a file
        InvalidInputError: multichannel audio, or a rate other than
            sample_rate without resample_input
    """
    if not path.is_file():
        raise FileNotFoundError(f"Not a file: {path}")
    samples, file_rate = sf.read(path, dtype="float64", always_2d=True)
    if samples.shape[1] != 1:
        raise InvalidInputError(f"'{path}' has {samples.shape[1]} channels, expected mono")
    w = Waveform(samples[:, 0], int(file_rate))
    if w.sample_rate != sample_rate:
        if not resample_input:
            raise InvalidInputError(
                f"'{path}' is sampled at {w.sample_rate} Hz, expected {sample_rate} Hz (pass the resample flag to convert)"
            )
        logger.info("resampling %s from %d Hz to %d Hz", path, w.sample_rate, sample_rate)
        w = resample(w, sample_rate)
    return w


def write_wav(path: Path, w: Waveform) -> Path:
    """Write a waveform as 16-bit PCM, creating parent directories."""
    path.parent.mkdir(parents=True, exist_ok=True)
    peak = float(np.max(np.abs(w.samples))) if len(w) else 0.0
    if peak >= 1.0:
        logger.warning("clipping %s: peak amplitude %.3f", path, peak)
    sf.write(path, np.clip(w.samples, -1.0, 1.0 - 1.0 / PCM_SCALE), w.sample_rate, subtype=PCM_SUBTYPE)
    return path


def quantize(samples: np.ndarray) -> np.ndarray:
    """Snap samples onto the 16-bit PCM grid used by write_wav."""
    clipped = np.clip(samples, -1.0, 1.0 - 1.0 / PCM_SCALE)
    return np.round(clipped * PCM_SCALE) / PCM_SCALE
