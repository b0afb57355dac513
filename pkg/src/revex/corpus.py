"""
Speaker-utterance store and noise sources for scene construction.

A corpus directory holds one sub-directory per speaker with that
speaker's utterances as WAV files. When no licensed corpus is at hand,
synthesize_corpus writes a stand-in of voiced, speaker-specific
utterances with the same layout.
"""

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import signal
from tqdm import tqdm

from revex import constants
from revex.audio import Waveform, read_wav, write_wav
from revex.errors import CorpusError

logger = logging.getLogger(__name__)

# speech-shaped noise: 2nd-order low-pass, -12 dB/octave above the corner
NOISE_CORNER_HZ = 500.0


@dataclass(frozen=True)
class Utterance:
    """One recording of a speaker."""

    speaker: str
    utterance_id: str
    path: Path


@lru_cache(maxsize=256)
def _load(path: Path, sample_rate: int, resample_input: bool) -> Waveform:
    return read_wav(path, sample_rate=sample_rate, resample_input=resample_input)


@dataclass
class SpeakerCorpus:
    """Utterances grouped by speaker id."""

    speakers: dict[str, list[Utterance]] = field(default_factory=dict)
    sample_rate: int = constants.SAMPLE_RATE
    resample_input: bool = False

    @classmethod
    def from_directory(cls, root: Path, sample_rate: int = constants.SAMPLE_RATE, resample_input: bool = False) -> "SpeakerCorpus":
        """
        Index <root>/<speaker>/*.wav.

        Raises:
            CorpusError: root is not a directory or holds fewer than two speakers
        """
        if not root.is_dir():
            raise CorpusError(f"Corpus directory '{root}' does not exist")
        speakers: dict[str, list[Utterance]] = {}
        for speaker_dir in sorted(p for p in root.iterdir() if p.is_dir()):
            utterances = [Utterance(speaker_dir.name, wav.stem, wav) for wav in sorted(speaker_dir.glob("*.wav"))]
            if utterances:
                speakers[speaker_dir.name] = utterances
        if len(speakers) < 2:
            raise CorpusError(f"Corpus '{root}' has {len(speakers)} speakers, at least 2 are needed")
        logger.info("indexed %d speakers from %s", len(speakers), root)
        return cls(speakers, sample_rate, resample_input)

    @property
    def speaker_ids(self) -> list[str]:
        return sorted(self.speakers)

    def utterances(self, speaker: str) -> list[Utterance]:
        try:
            return self.speakers[speaker]
        except KeyError as e:
            raise CorpusError(f"Unknown speaker '{speaker}'") from e

    def load(self, utterance: Utterance) -> Waveform:
        return _load(utterance.path, self.sample_rate, self.resample_input)


def _voiced_utterance(rng: np.random.Generator, pitch: float, formants: np.ndarray, duration: float, sample_rate: int) -> np.ndarray:
    """Glottal pulse train through formant resonators, gated into syllables."""
    n = int(duration * sample_rate)
    t = np.arange(n) / sample_rate
    # slow intonation contour with jitter
    contour = pitch * (1.0 + 0.08 * np.sin(2 * np.pi * rng.uniform(0.3, 0.8) * t + rng.uniform(0, 2 * np.pi)))
    contour *= 1.0 + 0.01 * rng.standard_normal(n)
    phase = np.cumsum(contour / sample_rate)
    excitation = np.diff(np.floor(phase), prepend=0.0)
    excitation += 0.02 * rng.standard_normal(n)
    speech = excitation
    for centre in formants:
        bandwidth = 60.0 + 0.05 * centre
        b, a = signal.iirpeak(centre, centre / bandwidth, fs=sample_rate)
        speech = speech + 2.0 * signal.lfilter(b, a, excitation)
    # syllable gating at ~4 Hz with occasional pauses
    syllable_rate = rng.uniform(3.0, 5.0)
    gate = np.clip(np.sin(2 * np.pi * syllable_rate * t + rng.uniform(0, 2 * np.pi)), 0.0, None) ** 0.5
    pauses = rng.random(int(duration * syllable_rate) + 1) < 0.15
    gate *= np.repeat(~pauses, int(np.ceil(n / len(pauses))))[:n]
    speech = signal.lfilter([1.0, -0.95], [1.0], speech * gate)
    return 0.1 * speech / (np.std(speech) + constants.EPSILON)


def synthesize_corpus(
    out_dir: Path,
    n_speakers: int = 8,
    n_utterances: int = 4,
    seed: int = 0,
    duration: tuple[float, float] = (2.5, 6.0),
    sample_rate: int = constants.SAMPLE_RATE,
    progress: bool = False,
) -> SpeakerCorpus:
    """
    Write a deterministic synthetic speaker corpus and index it.
    Each speaker has its own pitch range and formant set.
    """
    if n_speakers < 2 or n_utterances < 2:
        raise CorpusError("A synthetic corpus needs at least 2 speakers with 2 utterances each")
    rng = np.random.default_rng(seed)
    for speaker in tqdm(range(n_speakers), desc="Synthesizing speakers", disable=not progress):
        pitch = rng.uniform(85.0, 255.0)
        formants = np.sort(rng.uniform([300, 900, 2000], [900, 2200, 3400]))
        for index in range(n_utterances):
            length = rng.uniform(*duration)
            samples = _voiced_utterance(rng, pitch, formants, length, sample_rate)
            write_wav(out_dir / f"spk{speaker:03d}" / f"utt{index:03d}.wav", Waveform(samples, sample_rate))
    return SpeakerCorpus.from_directory(out_dir, sample_rate)


def speech_shaped_noise(rng: np.random.Generator, length: int, sample_rate: int = constants.SAMPLE_RATE) -> np.ndarray:
    """White noise through a 2nd-order low-pass at NOISE_CORNER_HZ."""
    sos = signal.butter(2, NOISE_CORNER_HZ, btype="lowpass", fs=sample_rate, output="sos")
    return signal.sosfilt(sos, rng.standard_normal(length))


@dataclass
class NoiseSource:
    """Noise segments from a directory of WAVs, or synthetic speech-shaped noise."""

    files: list[Path] = field(default_factory=list)
    sample_rate: int = constants.SAMPLE_RATE
    resample_input: bool = False

    @classmethod
    def from_directory(cls, root: Path | None, sample_rate: int = constants.SAMPLE_RATE, resample_input: bool = False) -> "NoiseSource":
        if root is None:
            return cls([], sample_rate)
        if not root.is_dir():
            raise CorpusError(f"Noise directory '{root}' does not exist")
        files = sorted(root.glob("*.wav"))
        if not files:
            raise CorpusError(f"Noise directory '{root}' holds no WAV files")
        return cls(files, sample_rate, resample_input)

    def segment(self, rng: np.random.Generator, length: int) -> np.ndarray:
        """A noise segment of exactly length samples."""
        if not self.files:
            return speech_shaped_noise(rng, length, self.sample_rate)
        path = self.files[int(rng.integers(len(self.files)))]
        noise = _load(path, self.sample_rate, self.resample_input).samples
        if len(noise) <= length:
            return np.resize(noise, length)
        start = int(rng.integers(len(noise) - length + 1))
        return noise[start : start + length]
