"""
Room impulse responses from the pyroomacoustics shoebox image-source
model, and the room and source sampling scheme used to build reverberant
scenes.

Walls share one energy absorption a, so each reflection scales the image
by sqrt(1 - a). Arrivals are placed with pyroomacoustics' 81-tap
Hann-windowed sinc fractional delay.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import pyroomacoustics as pra

from revex import constants
from revex.errors import InvalidInputError, MeasurementError

logger = logging.getLogger(__name__)

KERNEL_TAPS = 81
# images must cover this multiple of T60
COVERAGE = 1.2
# relative T60 error accepted by the absorption calibration
CALIBRATION_TOLERANCE = 0.05
MAX_CALIBRATION_STEPS = 8
MAX_DECAY = 20.0

# sampling ranges for room and source draws
ROOM_XY = (4.0, 8.0)
ROOM_Z = (2.5, 3.0)
T60_RANGE = (0.2, 0.6)
MIC_JITTER = 0.5
MIC_HEIGHT = 1.5
SOURCE_HEIGHT = 1.5
ANGLE_RANGE = (0.0, 180.0)
DISTANCE_RANGE = (0.5, 1.5)
WALL_MARGIN = 0.05


class AbsorptionFormula(str, Enum):
    """Inversion from T60 to a uniform wall absorption."""

    eyring = "eyring"
    sabine = "sabine"


@dataclass(frozen=True)
class SourcePlacement:
    """Source azimuth around the mic (degrees) and its distance (meters)."""

    angle: float
    distance: float


@dataclass(frozen=True)
class RoomSpec:
    """Shoebox geometry, reverberation time, mic and source placements."""

    dims: tuple[float, float, float]
    t60: float
    mic_pos: tuple[float, float, float]
    sources: tuple[SourcePlacement, ...] = field(default_factory=tuple)

    @property
    def source_angle(self) -> float:
        return self.sources[0].angle

    @property
    def source_distance(self) -> float:
        return self.sources[0].distance

    @property
    def volume(self) -> float:
        return math.prod(self.dims)

    @property
    def surface(self) -> float:
        hx, hy, hz = self.dims
        return 2.0 * (hx * hy + hx * hz + hy * hz)

    def source_position(self, index: int = 0) -> np.ndarray:
        """Cartesian position of a placement, in the mic's horizontal plane."""
        placement = self.sources[index]
        theta = math.radians(placement.angle)
        mx, my, _ = self.mic_pos
        return np.array(
            [mx + placement.distance * math.cos(theta), my + placement.distance * math.sin(theta), SOURCE_HEIGHT]
        )

    def contains(self, point: np.ndarray, margin: float = 0.0) -> bool:
        dims = np.asarray(self.dims)
        return bool(np.all(point >= margin) and np.all(point <= dims - margin))

    def to_dict(self) -> dict:
        """JSON-ready form."""
        return {
            "dims": list(self.dims),
            "t60": self.t60,
            "mic_pos": list(self.mic_pos),
            "sources": [asdict(s) for s in self.sources],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RoomSpec":
        return cls(
            dims=tuple(data["dims"]),
            t60=float(data["t60"]),
            mic_pos=tuple(data["mic_pos"]),
            sources=tuple(SourcePlacement(**s) for s in data["sources"]),
        )


@dataclass(frozen=True)
class Rir:
    """Impulse response taps with the index of the direct-path arrival."""

    taps: np.ndarray
    sample_rate: int
    direct_path_index: int
    direct_taps: np.ndarray | None = None

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.taps)):
            raise InvalidInputError("RIR contains NaN or Inf taps")


def _uniform(rng: np.random.Generator, bounds: tuple[float, float]) -> float:
    return float(rng.uniform(*bounds))


def _sample_placement(rng: np.random.Generator, dims, mic_pos) -> SourcePlacement:
    """Draw a placement, redrawing until the source sits inside the room."""
    while True:
        placement = SourcePlacement(_uniform(rng, ANGLE_RANGE), _uniform(rng, DISTANCE_RANGE))
        trial = RoomSpec(dims, 0.0, mic_pos, (placement,))
        if trial.contains(trial.source_position(), WALL_MARGIN):
            return placement


def sample_room(rng_seed: int, n_sources: int = 2) -> RoomSpec:
    """
    Draw room dimensions, T60, mic position and one placement per source.
    Deterministic per seed.
    """
    rng = np.random.default_rng(rng_seed)
    dims = (_uniform(rng, ROOM_XY), _uniform(rng, ROOM_XY), _uniform(rng, ROOM_Z))
    t60 = _uniform(rng, T60_RANGE)
    mic_pos = (
        dims[0] / 2 + _uniform(rng, (-MIC_JITTER, MIC_JITTER)),
        dims[1] / 2 + _uniform(rng, (-MIC_JITTER, MIC_JITTER)),
        MIC_HEIGHT,
    )
    sources = tuple(_sample_placement(rng, dims, mic_pos) for _ in range(n_sources))
    return RoomSpec(dims, t60, mic_pos, sources)


def wall_absorption(room: RoomSpec, formula: AbsorptionFormula = AbsorptionFormula.eyring) -> float:
    """Uniform energy absorption that the closed-form inversion gives for the room's T60."""
    if room.t60 <= 0.0:
        return 1.0
    try:
        sabine, _ = pra.inverse_sabine(room.t60, list(room.dims))
    except ValueError:
        # room too large for the requested decay
        return 1.0
    if formula == AbsorptionFormula.sabine:
        return min(float(sabine), 1.0)
    return 1.0 - math.exp(-float(sabine))


def _max_order(room: RoomSpec) -> int:
    if room.t60 <= 0.0:
        return 0
    return math.ceil(COVERAGE * room.t60 * constants.SPEED_OF_SOUND / min(room.dims))


def _simulate(
    room: RoomSpec, source_pos: np.ndarray, absorption: float, max_order: int, sample_rate: int, n_taps: int
) -> np.ndarray:
    """Shoebox image-source taps, with the fractional-delay filter's global delay removed."""
    shoebox = pra.ShoeBox(
        list(room.dims),
        fs=sample_rate,
        materials=pra.Material(absorption),
        max_order=max_order,
        air_absorption=False,
    )
    shoebox.add_source(list(source_pos))
    shoebox.add_microphone(np.asarray(room.mic_pos, dtype=np.float64))
    shoebox.compute_rir()
    taps = np.asarray(shoebox.rir[0][0], dtype=np.float64)[pra.constants.get("frac_delay_length") // 2 :]
    if len(taps) >= n_taps:
        return taps[:n_taps]
    return np.pad(taps, (0, n_taps - len(taps)))


def generate_rir(
    room: RoomSpec,
    source_pos: np.ndarray,
    sample_rate: int = constants.SAMPLE_RATE,
    formula: AbsorptionFormula = AbsorptionFormula.eyring,
) -> Rir:
    """
    Image-source impulse response from source_pos to the room's mic.

    The closed-form absorption is only a starting point: the decay rate
    -ln(1 - a) is rescaled by measured / requested T60 until the
    Schroeder-measured T60 is within CALIBRATION_TOLERANCE.

    Raises:
        InvalidInputError: source outside the room, or on the mic
    """
    source_pos = np.asarray(source_pos, dtype=np.float64)
    mic = np.asarray(room.mic_pos)
    if source_pos.shape != (3,) or not room.contains(source_pos):
        raise InvalidInputError(f"Source {source_pos} is not inside room {room.dims}")
    direct = float(np.linalg.norm(source_pos - mic))
    if direct < 1e-3:
        raise InvalidInputError("Source coincides with the microphone")

    direct_delay = direct / constants.SPEED_OF_SOUND * sample_rate
    n_taps = max(math.ceil(COVERAGE * room.t60 * sample_rate), math.ceil(direct_delay) + KERNEL_TAPS)
    direct_taps = _simulate(room, source_pos, 1.0, 0, sample_rate, n_taps)
    if room.t60 <= 0.0:
        return Rir(direct_taps, sample_rate, round(direct_delay), direct_taps)

    max_order = _max_order(room)
    decay = -math.log1p(-min(wall_absorption(room, formula), 1.0 - 1e-9))
    for attempt in range(1, MAX_CALIBRATION_STEPS + 1):
        absorption = 1.0 - math.exp(-decay)
        taps = _simulate(room, source_pos, absorption, max_order, sample_rate, n_taps)
        try:
            ratio = measure_t60(Rir(taps, sample_rate, round(direct_delay))) / room.t60
        except MeasurementError:
            # decay too slow to span the fit range inside n_taps
            ratio = 2.0
        logger.debug("rir calibration %d: absorption %.4f, T60 ratio %.3f", attempt, absorption, ratio)
        if abs(ratio - 1.0) <= CALIBRATION_TOLERANCE:
            break
        decay = min(decay * ratio, MAX_DECAY)
    else:
        logger.warning("T60 calibration stopped at ratio %.3f after %d steps", ratio, MAX_CALIBRATION_STEPS)
    return Rir(taps, sample_rate, round(direct_delay), direct_taps)


def schroeder_curve(r: Rir) -> np.ndarray:
    """Backward-integrated energy decay curve in dB, 0 dB at the first tap."""
    energy = np.cumsum(r.taps[::-1] ** 2)[::-1]
    if energy[0] <= 0.0:
        raise MeasurementError("RIR has no energy")
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(energy / energy[0])


def measure_t60(r: Rir, upper_db: float = -5.0, lower_db: float = -25.0, min_points: int = 8) -> float:
    """
    T60 extrapolated from a line fit to the Schroeder decay between
    upper_db and lower_db.

    Raises:
        MeasurementError: the curve does not span the fit range
    """
    edc = schroeder_curve(r)
    region = np.nonzero((edc <= upper_db) & (edc >= lower_db))[0]
    if edc.min() > lower_db or len(region) < min_points:
        raise MeasurementError(f"RIR decay does not cover {upper_db}..{lower_db} dB")
    t = region / r.sample_rate
    slope, _ = np.polyfit(t, edc[region], 1)
    if slope >= 0.0:
        raise MeasurementError("Energy decay curve is not decreasing")
    return float(-60.0 / slope)


class RirCache:
    """
    One .npy file of taps per (seed, role) with a JSON sidecar
    recording the room.
    """

    def __init__(self, directory: Path) -> None:
        self.directory = directory
        directory.mkdir(parents=True, exist_ok=True)

    def _stem(self, seed: int, role: str) -> Path:
        return self.directory / f"{seed}_{role}"

    def get(self, seed: int, role: str) -> Rir | None:
        stem = self._stem(seed, role)
        taps_path, meta_path = stem.with_suffix(".npy"), stem.with_suffix(".json")
        if not (taps_path.is_file() and meta_path.is_file()):
            return None
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        stored = np.load(taps_path)
        return Rir(stored[0], meta["sample_rate"], meta["direct_path_index"], stored[1])

    def put(self, seed: int, role: str, room: RoomSpec, rir: Rir) -> None:
        stem = self._stem(seed, role)
        direct = rir.direct_taps if rir.direct_taps is not None else np.zeros_like(rir.taps)
        np.save(stem.with_suffix(".npy"), np.stack([rir.taps, direct]))
        meta = {"room": room.to_dict(), "sample_rate": rir.sample_rate, "direct_path_index": rir.direct_path_index}
        stem.with_suffix(".json").write_text(json.dumps(meta, indent=2), encoding="utf-8")
