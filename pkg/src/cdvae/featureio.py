"""Feature archives, normalization, energy handling, F0 mapping, silence.

One utterance is stored as one binary archive per domain view:

    magic   4 bytes  b"CDVF"
    version u32      1
    domain  u8       0 = SP (spectral envelopes), 1 = MCC (mel-cepstra)
    T       u32      frame count
    D       u32      feature dimension
    frames  T*D f32  row-major
    energy  T   f32
    f0      T   f32

All integers and floats are little-endian. Frames in a corpus archive are
the raw features (SP rows not yet sum-normalized, MCC with the 0th
coefficient still in column 0); split_energy produces the network view.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import struct
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    CorruptArchiveError,
    DegenerateFrameError,
    DomainMismatchError,
    EmptyCorpusError,
    FormatError,
    InvalidF0Error,
    ShapeError,
)

MAGIC = b"CDVF"
FORMAT_VERSION = 1
DEFAULT_SILENCE_THRESHOLD_DB = 40.0
_ENERGY_DB_FLOOR = 1e-10


class Domain(enum.Enum):
    SP = 0
    MCC = 1

    @classmethod
    def from_name(cls, name: str) -> "Domain":
        try:
            return cls[name.upper()]
        except KeyError:
            raise DomainMismatchError(f"unknown domain name: {name!r}") from None


@dataclasses.dataclass(eq=False)
class FeatureSequence:
    """Frames [T x D] plus per-frame energy, F0 and a non-silence mask.

    silence_mask is True on frames considered speech; loaders default it to
    all-True unless asked to threshold the energy stream.
    """

    frames: np.ndarray
    domain: Domain
    energy: np.ndarray
    f0: np.ndarray
    silence_mask: np.ndarray
    utterance_id: str = ""
    speaker_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1 or self.frames.shape[1] < 1:
            raise ShapeError(f"frames must be [T x D] with T,D >= 1, got {self.frames.shape}")
        t = self.frames.shape[0]
        self.energy = np.asarray(self.energy)
        self.f0 = np.asarray(self.f0)
        self.silence_mask = np.asarray(self.silence_mask, dtype=bool)
        for name, arr in (("energy", self.energy), ("f0", self.f0), ("silence_mask", self.silence_mask)):
            if arr.shape != (t,):
                raise ShapeError(f"{name} must have shape ({t},), got {arr.shape}")
        if not np.isfinite(self.frames).all():
            raise CorruptArchiveError(f"non-finite frame values in {self.utterance_id or '<sequence>'}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_dims(self) -> int:
        return self.frames.shape[1]

    def replace(self, **kw) -> "FeatureSequence":
        return dataclasses.replace(self, **kw)


def make_sequence(frames, domain, energy=None, f0=None, silence_mask=None, utterance_id="", speaker_id=""):
    """Convenience constructor filling optional streams with neutral values."""
    frames = np.asarray(frames)
    t = frames.shape[0]
    if energy is None:
        energy = np.zeros(t)
    if f0 is None:
        f0 = np.zeros(t)
    if silence_mask is None:
        silence_mask = np.ones(t, dtype=bool)
    return FeatureSequence(frames, domain, energy, f0, silence_mask, utterance_id, speaker_id)


# ---------------------------------------------------------------------------
# archive I/O
# ---------------------------------------------------------------------------

def save_archive(seq: FeatureSequence, path) -> None:
    """Write one utterance view; float payloads are stored as float32."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    t, d = seq.frames.shape
    header = MAGIC + struct.pack("<IBII", FORMAT_VERSION, seq.domain.value, t, d)
    body = (
        np.ascontiguousarray(seq.frames, dtype="<f4").tobytes()
        + np.ascontiguousarray(seq.energy, dtype="<f4").tobytes()
        + np.ascontiguousarray(seq.f0, dtype="<f4").tobytes()
    )
    path.write_bytes(header + body)


def load_archive(path, utterance_id: str = "", speaker_id: str = "") -> FeatureSequence:
    """Read one archive; silence_mask comes back all-True."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 17:
        raise CorruptArchiveError(f"{path}: file shorter than the fixed header")
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    version, domain_byte, t, d = struct.unpack("<IBII", raw[4:17])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    try:
        domain = Domain(domain_byte)
    except ValueError:
        raise FormatError(f"{path}: unknown domain byte {domain_byte}") from None
    if t < 1 or d < 1:
        raise CorruptArchiveError(f"{path}: header claims T={t}, D={d}")
    expected = 17 + 4 * (t * d + 2 * t)
    if len(raw) != expected:
        raise CorruptArchiveError(f"{path}: expected {expected} bytes, found {len(raw)}")
    floats = np.frombuffer(raw, dtype="<f4", offset=17)
    frames = floats[: t * d].reshape(t, d).copy()
    energy = floats[t * d : t * d + t].copy()
    f0 = floats[t * d + t :].copy()
    if not utterance_id:
        utterance_id = path.stem
    return FeatureSequence(frames, domain, energy, f0, np.ones(t, dtype=bool), utterance_id, speaker_id)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

@dataclasses.dataclass(eq=False)
class NormalizationStats:
    domain: Domain
    minimum: np.ndarray  # [D]
    maximum: np.ndarray  # [D]

    @property
    def n_dims(self) -> int:
        return self.minimum.shape[0]


def fit_minmax(sequences, domain: Domain) -> NormalizationStats:
    """Per-dimension min/max over every frame of every sequence."""
    sequences = list(sequences)
    if not sequences:
        raise EmptyCorpusError("fit_minmax needs at least one sequence")
    d = sequences[0].n_dims
    lo = np.full(d, np.inf)
    hi = np.full(d, -np.inf)
    for seq in sequences:
        if seq.domain != domain:
            raise DomainMismatchError(f"{seq.utterance_id}: domain {seq.domain.name}, expected {domain.name}")
        if seq.n_dims != d:
            raise ShapeError(f"{seq.utterance_id}: D={seq.n_dims}, expected {d}")
        lo = np.minimum(lo, seq.frames.min(axis=0))
        hi = np.maximum(hi, seq.frames.max(axis=0))
    return NormalizationStats(domain, lo, hi)


def normalize(seq: FeatureSequence, stats: NormalizationStats) -> FeatureSequence:
    """Min-max scale each dimension to [0, 1]; degenerate dims land on 0.5."""
    _check_stats(seq, stats)
    span = stats.maximum - stats.minimum
    degenerate = span <= 0
    safe = np.where(degenerate, 1.0, span)
    scaled = (seq.frames.astype(np.float64) - stats.minimum) / safe
    scaled[:, degenerate] = 0.5
    return seq.replace(frames=scaled)


def denormalize(seq: FeatureSequence, stats: NormalizationStats) -> FeatureSequence:
    """Inverse of normalize; degenerate dims recover their constant value."""
    _check_stats(seq, stats)
    span = stats.maximum - stats.minimum
    degenerate = span <= 0
    raw = seq.frames.astype(np.float64) * np.where(degenerate, 0.0, span) + stats.minimum
    raw[:, degenerate] = stats.minimum[degenerate]
    return seq.replace(frames=raw)


def _check_stats(seq, stats):
    if seq.domain != stats.domain:
        raise DomainMismatchError(f"sequence domain {seq.domain.name} vs stats domain {stats.domain.name}")
    if seq.n_dims != stats.n_dims:
        raise ShapeError(f"sequence D={seq.n_dims} vs stats D={stats.n_dims}")


# ---------------------------------------------------------------------------
# energy handling
# ---------------------------------------------------------------------------

def split_energy(seq: FeatureSequence) -> FeatureSequence:
    """Factor the energy out of raw frames, producing the network view.

    SP: each row is scaled to unit sum and the row sum becomes the energy.
    MCC: column 0 moves to the energy stream and D drops by one.
    """
    if seq.domain == Domain.SP:
        sums = seq.frames.sum(axis=1, dtype=np.float64)
        if (sums <= 0).any() or not np.isfinite(sums).all():
            bad = int(np.argmin(sums))
            raise DegenerateFrameError(
                f"{seq.utterance_id or '<sequence>'}: SP row {bad} has nonpositive sum {sums[bad]!r}")
        frames = seq.frames / sums[:, None]
        return seq.replace(frames=frames, energy=sums)
    if seq.n_dims < 2:
        raise DegenerateFrameError("MCC sequence needs D >= 2 to split the 0th coefficient")
    energy = seq.frames[:, 0].astype(np.float64)
    return seq.replace(frames=seq.frames[:, 1:], energy=energy)


def merge_energy(seq: FeatureSequence, energy: np.ndarray | None = None) -> FeatureSequence:
    """Inverse of split_energy, using seq.energy unless an override is given."""
    e = np.asarray(seq.energy if energy is None else energy, dtype=np.float64)
    if e.shape != (seq.n_frames,):
        raise ShapeError(f"energy must have shape ({seq.n_frames},), got {e.shape}")
    if seq.domain == Domain.SP:
        return seq.replace(frames=seq.frames * e[:, None], energy=e)
    return seq.replace(frames=np.hstack([e[:, None], seq.frames]), energy=e)


# ---------------------------------------------------------------------------
# F0
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class F0Stats:
    """Mean and standard deviation of log-F0 over voiced frames."""

    mean: float
    std: float


def fit_f0_stats(sequences) -> F0Stats:
    voiced = []
    for seq in sequences:
        f0 = np.asarray(seq.f0, dtype=np.float64)
        _check_f0(f0, seq.utterance_id)
        voiced.append(f0[f0 > 0])
    if not voiced:
        raise EmptyCorpusError("fit_f0_stats needs at least one sequence")
    allv = np.concatenate(voiced)
    if allv.size == 0:
        raise EmptyCorpusError("no voiced frames in the corpus")
    logs = np.log(allv)
    return F0Stats(mean=float(logs.mean()), std=float(logs.std()))


def convert_f0(f0: np.ndarray, src: F0Stats, tgt: F0Stats) -> np.ndarray:
    """Log-linear mean-variance mapping; unvoiced frames (0) pass through."""
    f0 = np.asarray(f0, dtype=np.float64)
    _check_f0(f0)
    if src.std <= 0 or tgt.std <= 0:
        raise ConfigError(f"F0 stats need positive std, got src={src.std}, tgt={tgt.std}")
    out = np.zeros_like(f0)
    voiced = f0 > 0
    out[voiced] = np.exp((np.log(f0[voiced]) - src.mean) / src.std * tgt.std + tgt.mean)
    return out


def _check_f0(f0, who=""):
    if not np.isfinite(f0).all() or (f0 < 0).any():
        raise InvalidF0Error(f"{who or '<f0>'}: F0 must be finite and >= 0 (0 meaning unvoiced)")


# ---------------------------------------------------------------------------
# silence
# ---------------------------------------------------------------------------

def detect_silence(energy: np.ndarray, threshold_db: float = DEFAULT_SILENCE_THRESHOLD_DB) -> np.ndarray:
    """True where the frame is within threshold_db of the loudest frame.

    Works on the raw energy stream; 1e-10 floors the log argument so exact
    zeros stay finite.
    """
    energy = np.asarray(energy, dtype=np.float64)
    if energy.ndim != 1 or energy.size < 1:
        raise ShapeError(f"energy must be a nonempty vector, got shape {energy.shape}")
    if not np.isfinite(energy).all() or (energy < 0).any():
        raise DegenerateFrameError("energy must be finite and nonnegative")
    db = 10.0 * np.log10(energy + _ENERGY_DB_FLOOR)
    return db > db.max() - float(threshold_db)


# ---------------------------------------------------------------------------
# corpus manifest
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class UtteranceEntry:
    id: str
    speaker: str
    path: dict  # domain name -> relative archive path
    split: str  # train / val / test


@dataclasses.dataclass
class CorpusManifest:
    utterances: list
    parallel_groups: dict
    speakers: dict = dataclasses.field(default_factory=dict)  # id -> {"gender": "F"/"M", ...}
    root: Path = Path(".")

    def by_id(self, utterance_id: str) -> UtteranceEntry:
        for entry in self.utterances:
            if entry.id == utterance_id:
                return entry
        raise KeyError(f"utterance {utterance_id!r} not in manifest")

    def split(self, name: str) -> list:
        return [e for e in self.utterances if e.split == name]

    @property
    def speaker_ids(self) -> list:
        return sorted({e.speaker for e in self.utterances})


def save_manifest(manifest: CorpusManifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "utterances": [
            {"id": e.id, "speaker": e.speaker, "path": e.path, "split": e.split}
            for e in manifest.utterances
        ],
        "parallel_groups": manifest.parallel_groups,
        "speakers": manifest.speakers,
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_manifest(path) -> CorpusManifest:
    path = Path(path)
    doc = json.loads(path.read_text())
    utterances = [
        UtteranceEntry(u["id"], u["speaker"], dict(u["path"]), u["split"])
        for u in doc["utterances"]
    ]
    return CorpusManifest(
        utterances=utterances,
        parallel_groups={k: list(v) for k, v in doc.get("parallel_groups", {}).items()},
        speakers=doc.get("speakers", {}),
        root=path.parent,
    )


def load_utterance(
    manifest: CorpusManifest,
    utterance_id: str,
    domain: Domain,
    silence_threshold_db: float | None = DEFAULT_SILENCE_THRESHOLD_DB,
) -> FeatureSequence:
    """Load one view of one utterance, masking silence from its energy stream."""
    entry = manifest.by_id(utterance_id)
    try:
        rel = entry.path[domain.name]
    except KeyError:
        raise DomainMismatchError(f"utterance {utterance_id!r} has no {domain.name} view") from None
    seq = load_archive(manifest.root / rel, utterance_id=entry.id, speaker_id=entry.speaker)
    if seq.domain != domain:
        raise DomainMismatchError(f"{rel}: archive domain {seq.domain.name}, manifest says {domain.name}")
    if silence_threshold_db is not None:
        seq = seq.replace(silence_mask=detect_silence(seq.energy, silence_threshold_db))
    return seq
