"""
Scene construction: two reverberant speakers plus noise at a sampled SNR,
reference utterances convolved with the same RIR as their speaker, the
dynamic-truncation policy, manifests on disk and the training batch stream.
"""

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from scipy.signal import fftconvolve
from tqdm import tqdm
from tqdm.contrib.concurrent import process_map

from revex import constants
from revex.acoustics import Rir, RirCache, RoomSpec, generate_rir, sample_room
from revex.audio import Waveform, quantize, read_wav, write_wav
from revex.corpus import NoiseSource, SpeakerCorpus
from revex.errors import CorpusError, InvalidInputError, ManifestError, SceneTooShortError

logger = logging.getLogger(__name__)

SNR_RANGE_DB = (-6.0, 3.0)
SPEAKER_GAIN_DB = (-2.5, 2.5)
PEAK_LEVEL = 0.9
MIN_CROP_SECONDS = 2.0
MAX_CROP_SECONDS = 5.0

# roles whose samples are aligned with the mixture
ALIGNED_ROLES = (
    "mixture",
    "dry_desired",
    "reverberant_desired",
    "dry_interference",
    "reverberant_interference",
    "noise",
)
REFERENCE_ROLES = ("reference_desired", "reference_interference")
ROLES = ALIGNED_ROLES + REFERENCE_ROLES
SPLITS = ("train", "valid", "test")


@dataclass(frozen=True)
class Scene:
    """One training or evaluation example."""

    mixture: Waveform
    dry_desired: Waveform
    reverberant_desired: Waveform
    dry_interference: Waveform
    reverberant_interference: Waveform
    reference_desired: Waveform
    reference_interference: Waveform
    noise: Waveform
    room: RoomSpec
    snr_db: float
    seed: int
    scene_id: str = ""
    speakers: tuple[str, str] = ("", "")
    utterances: dict[str, str] = field(default_factory=dict)

    @property
    def sample_rate(self) -> int:
        return self.mixture.sample_rate

    @property
    def duration(self) -> float:
        return self.mixture.duration

    def waveform(self, role: str) -> Waveform:
        return getattr(self, role)

    def swapped(self) -> "Scene":
        """The same mixture with desired and interference roles exchanged."""
        return replace(
            self,
            dry_desired=self.dry_interference,
            reverberant_desired=self.reverberant_interference,
            dry_interference=self.dry_desired,
            reverberant_interference=self.reverberant_desired,
            reference_desired=self.reference_interference,
            reference_interference=self.reference_desired,
            speakers=(self.speakers[1], self.speakers[0]),
        )


def match_length(reference: Waveform, target_len: int) -> Waveform:
    """Truncate a longer reference; tile a shorter one, then truncate."""
    if len(reference) == 0:
        raise InvalidInputError("Cannot match the length of an empty reference")
    if target_len <= 0:
        raise InvalidInputError(f"Target length must be positive, got {target_len}")
    return Waveform(np.resize(reference.samples, target_len), reference.sample_rate)


def _convolve(samples: np.ndarray, taps: np.ndarray) -> np.ndarray:
    return fftconvolve(samples, taps)[: len(samples)]


def _power(x: np.ndarray) -> float:
    return float(np.mean(x**2))


def _pick_utterances(corpus: SpeakerCorpus, speaker: str, rng: np.random.Generator):
    utterances = corpus.utterances(speaker)
    if len(utterances) < 2:
        raise CorpusError(f"Speaker '{speaker}' has a single utterance, a different reference utterance is needed")
    mix_index, ref_index = rng.choice(len(utterances), size=2, replace=False)
    return utterances[int(mix_index)], utterances[int(ref_index)]


def _room_rirs(room: RoomSpec, seed: int, sample_rate: int, cache: RirCache | None) -> list[Rir]:
    rirs = []
    for index, role in enumerate(("desired", "interference")):
        rir = cache.get(seed, role) if cache is not None else None
        if rir is None:
            rir = generate_rir(room, room.source_position(index), sample_rate)
            if cache is not None:
                cache.put(seed, role, room, rir)
        rirs.append(rir)
    return rirs


def build_scene(
    corpus: SpeakerCorpus,
    seed: int,
    noise: NoiseSource | None = None,
    rir_cache: RirCache | None = None,
    scene_id: str = "",
) -> Scene:
    """
    Mix two reverberant speakers and noise; references are different
    utterances of each speaker convolved with that speaker's RIR.

    Raises:
        CorpusError: fewer than two speakers, or a drawn speaker has a single utterance
    """
    rng = np.random.default_rng(seed)
    noise = noise or NoiseSource(sample_rate=corpus.sample_rate)
    sample_rate = corpus.sample_rate
    if len(corpus.speaker_ids) < 2:
        raise CorpusError("A scene needs at least two speakers")
    speakers = [str(s) for s in rng.choice(corpus.speaker_ids, size=2, replace=False)]
    picks = [_pick_utterances(corpus, speaker, rng) for speaker in speakers]

    room_seed = int(rng.integers(2**31))
    room = sample_room(room_seed, n_sources=2)
    rirs = _room_rirs(room, room_seed, sample_rate, rir_cache)

    dry_sources = [corpus.load(mix_utt).samples for mix_utt, _ in picks]
    length = min(len(s) for s in dry_sources)  # 'min' policy
    reverberant = [_convolve(s, rir.taps)[:length] for s, rir in zip(dry_sources, rirs, strict=True)]
    direct = [_convolve(s, rir.direct_taps)[:length] for s, rir in zip(dry_sources, rirs, strict=True)]
    references = [
        match_length(Waveform(_convolve(corpus.load(ref_utt).samples, rir.taps), sample_rate), length).samples
        for (_, ref_utt), rir in zip(picks, rirs, strict=True)
    ]

    # interference level relative to the desired speaker
    relative_db = float(rng.uniform(*SPEAKER_GAIN_DB))
    gain = np.sqrt(_power(reverberant[0]) / max(_power(reverberant[1]), constants.EPSILON)) * 10 ** (relative_db / 20)
    reverberant[1], direct[1], references[1] = reverberant[1] * gain, direct[1] * gain, references[1] * gain

    speech = reverberant[0] + reverberant[1]
    snr_db = float(rng.uniform(*SNR_RANGE_DB))
    noise_samples = noise.segment(rng, length)
    noise_samples = noise_samples * np.sqrt(_power(speech) / (max(_power(noise_samples), constants.EPSILON) * 10 ** (snr_db / 10)))
    mixture = speech + noise_samples

    # one common gain keeps the mixture identity
    aligned = [mixture, direct[0], reverberant[0], direct[1], reverberant[1], noise_samples]
    peak = max(float(np.max(np.abs(x))) for x in aligned)
    level = PEAK_LEVEL / peak
    ref_peak = max(float(np.max(np.abs(x))) for x in references)
    ref_level = PEAK_LEVEL / ref_peak

    def wave(x: np.ndarray, scale: float = level) -> Waveform:
        return Waveform(x * scale, sample_rate)

    return Scene(
        mixture=wave(mixture),
        dry_desired=wave(direct[0]),
        reverberant_desired=wave(reverberant[0]),
        dry_interference=wave(direct[1]),
        reverberant_interference=wave(reverberant[1]),
        reference_desired=wave(references[0], ref_level),
        reference_interference=wave(references[1], ref_level),
        noise=wave(noise_samples),
        room=room,
        snr_db=snr_db,
        seed=seed,
        scene_id=scene_id,
        speakers=(speakers[0], speakers[1]),
        utterances={
            "desired": picks[0][0].utterance_id,
            "reference_desired": picks[0][1].utterance_id,
            "interference": picks[1][0].utterance_id,
            "reference_interference": picks[1][1].utterance_id,
        },
    )


def quantize_scene(scene: Scene) -> Scene:
    """
    Snap every signal to the 16-bit grid and rebuild the mixture as the
    exact sum of the snapped components, so the mixture identity survives
    writing to PCM files.
    """
    snapped = {role: Waveform(quantize(scene.waveform(role).samples), scene.sample_rate) for role in ROLES if role != "mixture"}
    mixture = snapped["reverberant_desired"].samples + snapped["reverberant_interference"].samples + snapped["noise"].samples
    return replace(scene, mixture=Waveform(mixture, scene.sample_rate), **snapped)


def dynamic_crop(
    scene: Scene,
    rng: np.random.Generator,
    length: int | None = None,
    min_seconds: float = MIN_CROP_SECONDS,
    max_seconds: float = MAX_CROP_SECONDS,
) -> Scene:
    """
    Crop every aligned role over one sample range of a random length in
    [min_seconds, max_seconds] and re-match the references to it.

    Raises:
        SceneTooShortError: the scene is shorter than min_seconds
    """
    total = len(scene.mixture)
    shortest = int(round(min_seconds * scene.sample_rate))
    if total < shortest:
        raise SceneTooShortError(f"Scene '{scene.scene_id}' lasts {scene.duration:.2f} s, below {min_seconds} s")
    if length is None:
        longest = min(int(round(max_seconds * scene.sample_rate)), total)
        length = int(rng.integers(shortest, longest + 1))
    if length > total:
        raise InvalidInputError(f"Crop of {length} samples exceeds scene length {total}")
    start = int(rng.integers(0, total - length + 1))
    cropped = {role: scene.waveform(role).segment(start, start + length) for role in ALIGNED_ROLES}
    refs = {role: match_length(scene.waveform(role), length) for role in REFERENCE_ROLES}
    return replace(scene, **cropped, **refs)


@dataclass(frozen=True)
class SceneRecord:
    """One manifest line."""

    scene_id: str
    split: str
    paths: dict[str, str]
    room: dict
    snr_db: float
    duration: float
    seed: int
    speakers: list[str] = field(default_factory=list)
    utterances: dict[str, str] = field(default_factory=dict)


@dataclass
class Manifest:
    """Scene records plus the directory their relative paths resolve against."""

    records: list[SceneRecord]
    root: Path

    def split(self, name: str) -> list[SceneRecord]:
        return [r for r in self.records if r.split == name]

    def write(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [json.dumps(asdict(r), sort_keys=True) for r in self.records]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    @classmethod
    def read(cls, path: Path, check_files: bool = True) -> "Manifest":
        """
        Read a JSON-lines manifest.

        Raises:
            ManifestError: unreadable file, bad record, duplicate id, or missing audio
        """
        if not path.is_file():
            raise ManifestError(f"Manifest '{path}' is not a file")
        records = []
        for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            try:
                records.append(SceneRecord(**json.loads(line)))
            except (json.JSONDecodeError, TypeError) as e:
                raise ManifestError(f"{path}:{number}: malformed record ({e})") from e
        manifest = cls(records, path.parent)
        manifest.validate(check_files)
        return manifest

    def validate(self, check_files: bool = True) -> None:
        ids = [r.scene_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ManifestError("Manifest scene ids are not unique")
        for record in self.records:
            if record.split not in SPLITS:
                raise ManifestError(f"Scene '{record.scene_id}' has unknown split '{record.split}'")
            if check_files:
                missing = [p for p in record.paths.values() if not (self.root / p).is_file()]
                if missing:
                    raise ManifestError(f"Scene '{record.scene_id}' references missing files: {missing}")


def load_scene(record: SceneRecord, root: Path, sample_rate: int = constants.SAMPLE_RATE) -> Scene:
    """Read a manifest record's audio back into a Scene."""
    waves = {role: read_wav(root / record.paths[role], sample_rate=sample_rate) for role in ROLES}
    return Scene(
        **waves,
        room=RoomSpec.from_dict(record.room),
        snr_db=record.snr_db,
        seed=record.seed,
        scene_id=record.scene_id,
        speakers=(record.speakers[0], record.speakers[1]) if len(record.speakers) == 2 else ("", ""),
        utterances=dict(record.utterances),
    )


@dataclass(frozen=True)
class DatasetConfig:
    """Scene counts per split and the master seed."""

    n_train: int = 200
    n_valid: int = 20
    n_test: int = 20
    seed: int = 0

    def counts(self) -> dict[str, int]:
        return {"train": self.n_train, "valid": self.n_valid, "test": self.n_test}


def scene_seed(master: int, split: str, index: int) -> int:
    """Independent per-scene seed derived from the master seed."""
    return int(np.random.SeedSequence([master, SPLITS.index(split), index]).generate_state(1)[0])


def _write_scene(job: tuple) -> SceneRecord:
    corpus, noise, cache_dir, out_dir, split, index, seed = job
    scene_id = f"{split}_{index:05d}"
    cache = RirCache(cache_dir) if cache_dir is not None else None
    scene = quantize_scene(build_scene(corpus, seed, noise, cache, scene_id))
    paths = {}
    for role in ROLES:
        relative = Path(split) / scene_id / f"{role}.wav"
        write_wav(out_dir / relative, scene.waveform(role))
        paths[role] = relative.as_posix()
    return SceneRecord(
        scene_id=scene_id,
        split=split,
        paths=paths,
        room=scene.room.to_dict(),
        snr_db=scene.snr_db,
        duration=scene.duration,
        seed=seed,
        speakers=list(scene.speakers),
        utterances=scene.utterances,
    )


def generate_corpus(
    cfg: DatasetConfig,
    corpus: SpeakerCorpus,
    out_dir: Path,
    noise: NoiseSource | None = None,
    rir_cache: Path | None = None,
    workers: int = 1,
    progress: bool = False,
) -> Manifest:
    """
    Build and write every scene of every split, then the manifest.
    Output is fully determined by cfg.seed.

    Raises:
        OSError: out_dir cannot be written
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    noise = noise or NoiseSource(sample_rate=corpus.sample_rate)
    jobs = [
        (corpus, noise, rir_cache, out_dir, split, index, scene_seed(cfg.seed, split, index))
        for split, count in cfg.counts().items()
        for index in range(count)
    ]
    if workers > 1:
        records = process_map(_write_scene, jobs, max_workers=workers, chunksize=1, desc="Generating scenes", disable=not progress)
    else:
        records = [_write_scene(job) for job in tqdm(jobs, desc="Generating scenes", disable=not progress)]
    manifest = Manifest(list(records), out_dir)
    manifest.write(out_dir / "manifest.jsonl")
    logger.info("wrote %d scenes to %s", len(records), out_dir)
    return manifest


def _as_tensor(items: list[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(items).astype(np.float32))


class SceneBatches(torch.utils.data.Dataset):
    """
    Item k is training batch k, drawn deterministically from (seed, k).
    A batch holds batch_size/2 scenes cropped to one shared random length,
    each mixture appearing twice: once per speaker as the desired role.
    partner[j] is the index of the same mixture with roles swapped.
    """

    def __init__(
        self,
        scenes: list[Scene],
        batch_size: int,
        seed: int,
        n_batches: int,
        min_seconds: float = MIN_CROP_SECONDS,
        max_seconds: float = MAX_CROP_SECONDS,
    ) -> None:
        if batch_size < 2 or batch_size % 2:
            raise InvalidInputError(f"batch_size must be even, got {batch_size}")
        shortest = min_seconds * constants.SAMPLE_RATE
        self.scenes = [s for s in scenes if len(s.mixture) >= shortest]
        skipped = len(scenes) - len(self.scenes)
        if skipped:
            logger.warning("skipping %d scenes shorter than %.1f s", skipped, min_seconds)
        if not self.scenes:
            raise SceneTooShortError("No scene is long enough for training crops")
        self.batch_size = batch_size
        self.seed = seed
        self.n_batches = n_batches
        self.min_seconds = min_seconds
        self.max_seconds = max_seconds

    def __len__(self) -> int:
        return self.n_batches

    def batch_seed(self, step: int) -> list[int]:
        return [self.seed, step]

    def __getitem__(self, step: int) -> dict[str, torch.Tensor]:
        rng = np.random.default_rng(self.batch_seed(step))
        n_pairs = self.batch_size // 2
        chosen = rng.choice(len(self.scenes), size=n_pairs, replace=len(self.scenes) < n_pairs)
        scenes = [self.scenes[int(i)] for i in chosen]
        rate = scenes[0].sample_rate
        shortest = int(round(self.min_seconds * rate))
        longest = min(int(round(self.max_seconds * rate)), min(len(s.mixture) for s in scenes))
        length = int(rng.integers(shortest, longest + 1))

        fields: dict[str, list[np.ndarray]] = {k: [] for k in ("mixture", "reference", "target_reverberant", "target_dry")}
        for scene in scenes:
            crop = dynamic_crop(scene, rng, length=length)
            for role_scene in (crop, crop.swapped()):
                fields["mixture"].append(role_scene.mixture.samples)
                fields["reference"].append(role_scene.reference_desired.samples)
                fields["target_reverberant"].append(role_scene.reverberant_desired.samples)
                fields["target_dry"].append(role_scene.dry_desired.samples)
        batch = {name: _as_tensor(items) for name, items in fields.items()}
        batch["lengths"] = torch.full((self.batch_size,), length, dtype=torch.long)
        batch["partner"] = torch.arange(self.batch_size) ^ 1
        batch["scene_index"] = torch.from_numpy(np.repeat(chosen, 2))
        batch["step"] = torch.tensor(step)
        return batch


def collate_examples(examples: list[dict[str, np.ndarray]]) -> dict[str, torch.Tensor]:
    """
    Zero-pad variable-length examples to the longest one. `lengths` holds
    the mixture lengths and `reference_lengths` those of the references.
    """
    batch = {}
    for name in examples[0]:
        longest = max(len(e[name]) for e in examples)
        batch[name] = _as_tensor([np.pad(e[name], (0, longest - len(e[name]))) for e in examples])
    batch["lengths"] = torch.tensor([len(e["mixture"]) for e in examples], dtype=torch.long)
    if "reference" in examples[0]:
        batch["reference_lengths"] = torch.tensor([len(e["reference"]) for e in examples], dtype=torch.long)
    return batch
