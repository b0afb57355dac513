"""
Time-frequency analysis and synthesis.

Square-root Hann analysis and synthesis windows at 50% overlap satisfy the
perfect-reconstruction condition, and frames are centred with half a frame
of reflect padding at both ends. The numpy functions are the reference
transform; the *_tensor functions compute the same frames in torch for the
model and losses.
"""

from dataclasses import dataclass

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view

from revex.audio import Waveform
from revex.errors import InvalidInputError

WINDOWS = ("sqrt_hann",)


@dataclass(frozen=True)
class StftConfig:
    """Frame size, hop and window of the STFT."""

    frame_size: int = 256
    hop: int = 128
    window: str = "sqrt_hann"

    def __post_init__(self) -> None:
        if self.window not in WINDOWS:
            raise InvalidInputError(f"Unknown window '{self.window}', expected one of {WINDOWS}")
        if self.frame_size <= 0 or self.frame_size % 2:
            raise InvalidInputError(f"frame_size must be a positive even number, got {self.frame_size}")
        if self.frame_size % self.hop or self.frame_size // self.hop != 2:
            # sqrt-Hann pairs are only COLA at 50% overlap
            raise InvalidInputError(f"hop must be frame_size/2 for a sqrt-Hann window, got {self.hop}")

    @property
    def n_bins(self) -> int:
        return self.frame_size // 2 + 1

    def n_frames(self, length: int) -> int:
        """Frame count produced for a signal of the given length."""
        return 1 + length // self.hop

    def analysis_window(self) -> np.ndarray:
        # periodic Hann
        n = np.arange(self.frame_size)
        return np.sqrt(0.5 - 0.5 * np.cos(2.0 * np.pi * n / self.frame_size))

    def tensor_window(self, dtype: torch.dtype = torch.float32, device: torch.device | None = None) -> torch.Tensor:
        return torch.sqrt(torch.hann_window(self.frame_size, periodic=True, dtype=dtype, device=device))


@dataclass(frozen=True)
class Spectrogram:
    """Complex bins indexed [frame, frequency] plus the source length."""

    bins: np.ndarray
    config: StftConfig
    length: int
    sample_rate: int

    def __post_init__(self) -> None:
        if self.bins.ndim != 2:
            raise InvalidInputError(f"Spectrogram bins must be 2-D [frames, bins], got {self.bins.shape}")

    @property
    def n_frames(self) -> int:
        return self.bins.shape[0]

    @property
    def n_bins(self) -> int:
        return self.bins.shape[1]

    def check_consistent(self) -> None:
        """Raise if the bin grid does not match the config and source length."""
        expected = (self.config.n_frames(self.length), self.config.n_bins)
        if self.bins.shape != expected:
            raise InvalidInputError(f"Spectrogram shape {self.bins.shape} does not match its config, expected {expected}")


@dataclass(frozen=True)
class RiFeature:
    """Real and imaginary planes, shape [2, frames, bins]."""

    planes: np.ndarray

    def __post_init__(self) -> None:
        if self.planes.ndim != 3 or self.planes.shape[0] != 2:
            raise InvalidInputError(f"RI feature must have shape [2, frames, bins], got {self.planes.shape}")


def stft(w: Waveform, c: StftConfig | None = None) -> Spectrogram:
    """Short-time Fourier transform of a waveform."""
    c = c or StftConfig()
    if len(w) < c.frame_size:
        raise InvalidInputError(f"Signal of {len(w)} samples is shorter than one frame ({c.frame_size})")
    pad = c.frame_size // 2
    padded = np.pad(w.samples, pad, mode="reflect")
    frames = sliding_window_view(padded, c.frame_size)[:: c.hop]
    bins = np.fft.rfft(frames * c.analysis_window(), axis=-1)
    return Spectrogram(bins, c, len(w), w.sample_rate)


def istft(s: Spectrogram) -> Waveform:
    """Overlap-add synthesis, the inverse of stft."""
    s.check_consistent()
    c = s.config
    window = c.analysis_window()
    frames = np.fft.irfft(s.bins, n=c.frame_size, axis=-1) * window
    padded_len = c.frame_size + c.hop * (s.n_frames - 1)
    signal = np.zeros(padded_len)
    envelope = np.zeros(padded_len)
    for n, frame in enumerate(frames):
        start = n * c.hop
        signal[start : start + c.frame_size] += frame
        envelope[start : start + c.frame_size] += window**2
    signal = np.divide(signal, envelope, out=np.zeros_like(signal), where=envelope > 1e-11)
    pad = c.frame_size // 2
    return Waveform(signal[pad : pad + s.length], s.sample_rate)


def to_ri(s: Spectrogram) -> RiFeature:
    return RiFeature(np.stack([s.bins.real, s.bins.imag]))


def from_ri(f: RiFeature, config: StftConfig, length: int, sample_rate: int) -> Spectrogram:
    """Rebuild a spectrogram from RI planes; the inverse of to_ri."""
    return Spectrogram(f.planes[0] + 1j * f.planes[1], config, length, sample_rate)


def spectral_energy(s: Spectrogram) -> float:
    """
    Parseval-consistent signal energy of a spectrogram.
    For a COLA window pair the frame energies sum to the waveform energy,
    and the half spectrum counts every bin except DC and Nyquist twice.
    """
    power = np.abs(s.bins) ** 2
    weights = np.full(s.n_bins, 2.0)
    weights[0] = weights[-1] = 1.0
    return float(np.sum(power * weights) / s.config.frame_size)


def stft_tensor(x: torch.Tensor, c: StftConfig) -> torch.Tensor:
    """Batched torch STFT, [batch, samples] -> complex [batch, frames, bins]."""
    spec = torch.stft(
        x,
        n_fft=c.frame_size,
        hop_length=c.hop,
        window=c.tensor_window(x.dtype, x.device),
        center=True,
        pad_mode="reflect",
        return_complex=True,
    )
    return spec.transpose(-1, -2)


def istft_tensor(spec: torch.Tensor, c: StftConfig, length: int) -> torch.Tensor:
    """Batched torch inverse STFT, complex [batch, frames, bins] -> [batch, length]."""
    window = c.tensor_window(spec.real.dtype, spec.device)
    return torch.istft(
        spec.transpose(-1, -2),
        n_fft=c.frame_size,
        hop_length=c.hop,
        window=window,
        center=True,
        length=length,
    )


def ri_from_complex(spec: torch.Tensor) -> torch.Tensor:
    """Complex [batch, frames, bins] -> real [batch, 2, frames, bins]."""
    return torch.stack([spec.real, spec.imag], dim=1)


def complex_from_ri(ri: torch.Tensor) -> torch.Tensor:
    """Real [batch, 2, frames, bins] -> complex [batch, frames, bins]."""
    if ri.dim() != 4 or ri.shape[1] != 2:
        raise InvalidInputError(f"RI tensor must have shape [batch, 2, frames, bins], got {tuple(ri.shape)}")
    return torch.complex(ri[:, 0], ri[:, 1])
