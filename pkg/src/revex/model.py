"""
Two-stage extraction network.

Each stage is a Siamese U-Net on real/imaginary STFT planes. Strided
convolutions shrink frequency only, so every frame survives to the
transformer bottleneck. The mixture frames are multiplied elementwise by
the frame-averaged reference embedding, decoded through transpose
convolutions with skips from the mixture path only, and refined by a
final transformer layer into a direct spectral estimate.

Stage 1 is applied n_iterations times with shared weights, each pass
consuming the previous estimate. Stage 2 dereverberates the final stage-1
estimate using the stage-1 reference embedding.
"""

import math
from dataclasses import asdict, dataclass, field

import torch
from torch import nn

from revex import constants
from revex.errors import InvalidInputError
from revex.spectral import StftConfig, complex_from_ri, istft_tensor, ri_from_complex, stft_tensor

MIN_FRAMES = 4


@dataclass(frozen=True)
class ModelConfig:
    """Network sizes. Each conv layer has a 3x3 kernel and frequency stride 2."""

    channels: tuple[int, ...] = (32, 64, 64, 128)
    embed_dim: int = 256
    enc_transformer_layers: int = 1
    dec_transformer_layers: int = 6
    n_iterations: int = 2
    n_heads: int = 4
    ff_multiplier: int = 4
    dropout: float = 0.0
    stft: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self) -> None:
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if not self.channels or min(self.channels) <= 0:
            raise InvalidInputError(f"channels must be positive, got {self.channels}")
        if self.n_iterations < 1:
            raise InvalidInputError(f"n_iterations must be at least 1, got {self.n_iterations}")
        if self.embed_dim % 2 or self.embed_dim % self.n_heads:
            raise InvalidInputError(f"embed_dim {self.embed_dim} must be even and divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidInputError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def freq_stride(self) -> int:
        return 2

    def freq_sizes(self) -> list[int]:
        """Frequency extent at the input of each conv layer, plus the bottleneck."""
        sizes = [self.stft.n_bins]
        for _ in self.channels:
            sizes.append((sizes[-1] - 1) // self.freq_stride + 1)
        return sizes

    @classmethod
    def micro(cls) -> "ModelConfig":
        """Smallest useful network, for gradient checks."""
        return cls(channels=(4, 8), embed_dim=8, dec_transformer_layers=1, n_heads=2, ff_multiplier=2)

    @classmethod
    def desk(cls) -> "ModelConfig":
        """Reduced network that trains on a CPU in minutes."""
        return cls(channels=(16, 32, 32, 64), embed_dim=64, dec_transformer_layers=2)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["channels"] = list(self.channels)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        stft = StftConfig(**data.pop("stft", {}))
        return cls(stft=stft, **data)


def sinusoidal_encoding(n_frames: int, dim: int, device: torch.device, dtype: torch.dtype) -> torch.Tensor:
    position = torch.arange(n_frames, device=device, dtype=dtype).unsqueeze(1)
    rate = torch.exp(torch.arange(0, dim, 2, device=device, dtype=dtype) * (-math.log(10000.0) / dim))
    encoding = torch.zeros(n_frames, dim, device=device, dtype=dtype)
    encoding[:, 0::2] = torch.sin(position * rate)
    encoding[:, 1::2] = torch.cos(position * rate)
    return encoding


def frame_mask(lengths: torch.Tensor | None, batch: int, n_frames: int, c: StftConfig, device: torch.device) -> torch.Tensor:
    """Boolean [batch, frames], True on frames covering real samples."""
    if lengths is None:
        return torch.ones(batch, n_frames, dtype=torch.bool, device=device)
    valid = 1 + lengths.to(device) // c.hop
    return torch.arange(n_frames, device=device).unsqueeze(0) < valid.unsqueeze(1)


class _Sequence(nn.Module):
    """Positional encoding then a pre-norm transformer encoder stack."""

    def __init__(self, cfg: ModelConfig, n_layers: int) -> None:
        super().__init__()
        layer = nn.TransformerEncoderLayer(
            d_model=cfg.embed_dim,
            nhead=cfg.n_heads,
            dim_feedforward=cfg.ff_multiplier * cfg.embed_dim,
            dropout=cfg.dropout,
            activation="gelu",
            batch_first=True,
            norm_first=True,
        )
        self.layers = nn.TransformerEncoder(layer, n_layers, norm=nn.LayerNorm(cfg.embed_dim), enable_nested_tensor=False)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x = x + sinusoidal_encoding(x.shape[1], x.shape[2], x.device, x.dtype)
        return self.layers(x, src_key_padding_mask=~mask)


class Encoder(nn.Module):
    """Conv stack over [batch, 2, frames, bins], then one embedding per frame."""

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.convs = nn.ModuleList()
        in_channels = 2
        for out_channels in cfg.channels:
            self.convs.append(
                nn.Sequential(
                    nn.Conv2d(in_channels, out_channels, 3, stride=(1, cfg.freq_stride), padding=1),
                    nn.BatchNorm2d(out_channels),
                    nn.ReLU(),
                )
            )
            in_channels = out_channels
        self.project = nn.Linear(cfg.channels[-1] * cfg.freq_sizes()[-1], cfg.embed_dim)
        self.sequence = _Sequence(cfg, cfg.enc_transformer_layers)

    def forward(self, ri: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        skips = []
        x = ri
        for conv in self.convs:
            x = conv(x)
            skips.append(x)
        batch, channels, frames, bins = x.shape
        frames_embedded = self.project(x.permute(0, 2, 1, 3).reshape(batch, frames, channels * bins))
        return self.sequence(frames_embedded, mask), skips


class Decoder(nn.Module):
    """Transformer stack, transpose convs with mixture skips, and a per-frame refinement."""

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.channels = cfg.channels
        sizes = cfg.freq_sizes()
        self.bottleneck_bins = sizes[-1]
        self.sequence = _Sequence(cfg, cfg.dec_transformer_layers)
        self.expand = nn.Linear(cfg.embed_dim, cfg.channels[-1] * sizes[-1])
        self.deconvs = nn.ModuleList()
        targets = [2, *cfg.channels[:-1]]
        for index in reversed(range(len(cfg.channels))):
            # even extents lose a bin on the way down
            extra = 1 if sizes[index] % 2 == 0 else 0
            deconv = nn.ConvTranspose2d(
                2 * cfg.channels[index],
                targets[index],
                3,
                stride=(1, cfg.freq_stride),
                padding=1,
                output_padding=(0, extra),
            )
            if index == 0:
                self.deconvs.append(deconv)
            else:
                self.deconvs.append(nn.Sequential(deconv, nn.BatchNorm2d(targets[index]), nn.ReLU()))
        n_bins = cfg.stft.n_bins
        self.refine_in = nn.Linear(2 * n_bins, cfg.embed_dim)
        self.refine = _Sequence(cfg, 1)
        self.refine_out = nn.Linear(cfg.embed_dim, 2 * n_bins)

    def forward(self, fused: torch.Tensor, skips: list[torch.Tensor], mask: torch.Tensor) -> torch.Tensor:
        batch, frames, _ = fused.shape
        x = self.expand(self.sequence(fused, mask))
        x = x.reshape(batch, frames, self.channels[-1], self.bottleneck_bins).permute(0, 2, 1, 3)
        for deconv, skip in zip(self.deconvs, reversed(skips), strict=True):
            if skip.shape != x.shape:
                raise InvalidInputError(f"Skip shape {tuple(skip.shape)} does not match decoder shape {tuple(x.shape)}")
            x = deconv(torch.cat([x, skip], dim=1))
        n_bins = x.shape[-1]
        flat = x.permute(0, 2, 1, 3).reshape(batch, frames, 2 * n_bins)
        refined = self.refine_out(self.refine(self.refine_in(flat), mask))
        return refined.reshape(batch, frames, 2, n_bins).permute(0, 2, 1, 3)


class SiameseUNet(nn.Module):
    """One stage: a shared encoder for mixture and reference, and a decoder."""

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)

    def encode(self, ri: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """
        Per-frame embeddings [batch, frames, embed_dim] and skip activations.

        Raises:
            InvalidInputError: not [batch, 2, frames, bins], or fewer than MIN_FRAMES frames
        """
        if ri.dim() != 4 or ri.shape[1] != 2:
            raise InvalidInputError(f"Encoder input must be [batch, 2, frames, bins], got {tuple(ri.shape)}")
        if ri.shape[2] < MIN_FRAMES:
            raise InvalidInputError(f"Input has {ri.shape[2]} frames, at least {MIN_FRAMES} are needed")
        return self.encoder(ri, mask)

    def embed_reference(self, ri: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """
        Encoder frames averaged over the valid frames, [batch, embed_dim].

        Raises:
            InvalidInputError: empty reference
        """
        if ri.shape[2] == 0 or not torch.all(mask.any(dim=1)):
            raise InvalidInputError("Reference is empty")
        frames, _ = self.encode(ri, mask)
        weights = mask.to(frames.dtype).unsqueeze(-1)
        return torch.sum(frames * weights, dim=1) / torch.sum(weights, dim=1)

    @staticmethod
    def fuse(frames: torch.Tensor, ref_embedding: torch.Tensor) -> torch.Tensor:
        if frames.shape[-1] != ref_embedding.shape[-1]:
            raise InvalidInputError(f"Frame width {frames.shape[-1]} does not match reference width {ref_embedding.shape[-1]}")
        return frames * ref_embedding.unsqueeze(1)

    def decode(self, fused: torch.Tensor, skips: list[torch.Tensor], mask: torch.Tensor) -> torch.Tensor:
        return self.decoder(fused, skips, mask)

    def forward(self, ri: torch.Tensor, ref_embedding: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        frames, skips = self.encode(ri, mask)
        return self.decode(self.fuse(frames, ref_embedding), skips, mask)


@dataclass
class ExtractionOutput:
    """Spectral estimates of both stages, their waveforms and embeddings."""

    stage1_outputs: list[torch.Tensor]
    stage2_output: torch.Tensor
    ref_embedding: torch.Tensor
    stage1_waves: list[torch.Tensor] = field(default_factory=list)
    stage2_wave: torch.Tensor | None = None
    anchor: torch.Tensor | None = None


def _rms(x: torch.Tensor, lengths: torch.Tensor | None) -> torch.Tensor:
    if lengths is None:
        energy = torch.mean(x**2, dim=-1)
    else:
        valid = torch.arange(x.shape[-1], device=x.device).unsqueeze(0) < lengths.unsqueeze(1)
        energy = torch.sum((x * valid) ** 2, dim=-1) / lengths.clamp(min=1)
    return torch.sqrt(energy + constants.EPSILON).unsqueeze(-1)


class TwoStageExtractor(nn.Module):
    """Iterated stage-1 extraction followed by stage-2 dereverberation."""

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.cfg = cfg
        self.stage1 = SiameseUNet(cfg)
        self.stage2 = SiameseUNet(cfg)

    def stage1_iterate(
        self, mix_ri: torch.Tensor, ref_ri: torch.Tensor, mask: torch.Tensor, ref_mask: torch.Tensor
    ) -> tuple[list[torch.Tensor], torch.Tensor]:
        """Estimates of every stage-1 pass; the reference is embedded once."""
        ref_embedding = self.stage1.embed_reference(ref_ri, ref_mask)
        estimates = []
        current = mix_ri
        for _ in range(self.cfg.n_iterations):
            current = self.stage1(current, ref_embedding, mask)
            estimates.append(current)
        return estimates, ref_embedding

    def stage2_dereverb(self, stage1_ri: torch.Tensor, ref_embedding: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        return self.stage2(stage1_ri, ref_embedding, mask)

    def anchor_embedding(self, estimate_ri: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """A stage-1 estimate passed back through the stage-1 encoder and averaged."""
        return self.stage1.embed_reference(estimate_ri, mask)

    def forward(
        self,
        mixture: torch.Tensor,
        reference: torch.Tensor,
        lengths: torch.Tensor | None = None,
        reference_lengths: torch.Tensor | None = None,
        with_anchor: bool = False,
    ) -> ExtractionOutput:
        """
        Waveforms in, estimates out. Inputs are [batch, samples]; each
        input is normalised by its RMS and the estimates are returned at
        the mixture's level.
        """
        if mixture.dim() != 2 or reference.dim() != 2 or mixture.shape[0] != reference.shape[0]:
            raise InvalidInputError(f"Expected [batch, samples] inputs, got {tuple(mixture.shape)} and {tuple(reference.shape)}")
        c = self.cfg.stft
        n_samples = mixture.shape[-1]
        level = _rms(mixture, lengths)
        mix_ri = ri_from_complex(stft_tensor(mixture / level, c))
        ref_ri = ri_from_complex(stft_tensor(reference / _rms(reference, reference_lengths), c))
        mask = frame_mask(lengths, mixture.shape[0], mix_ri.shape[2], c, mixture.device)
        ref_mask = frame_mask(reference_lengths, reference.shape[0], ref_ri.shape[2], c, reference.device)

        stage1, ref_embedding = self.stage1_iterate(mix_ri, ref_ri, mask, ref_mask)
        stage2 = self.stage2_dereverb(stage1[-1], ref_embedding, mask)

        def waveform(ri: torch.Tensor) -> torch.Tensor:
            return istft_tensor(complex_from_ri(ri), c, n_samples) * level

        return ExtractionOutput(
            stage1_outputs=stage1,
            stage2_output=stage2,
            ref_embedding=ref_embedding,
            stage1_waves=[waveform(ri) for ri in stage1],
            stage2_wave=waveform(stage2),
            anchor=self.anchor_embedding(stage1[-1], mask) if with_anchor else None,
        )
