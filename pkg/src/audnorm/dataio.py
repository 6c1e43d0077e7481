"""Corpus manifests, audio ingestion, and language-homogeneous batching.

A manifest is one JSON object per line with keys ``utterance_id``,
``language``, ``speaker_id`` (nullable), ``audio_path``, ``num_samples``,
``sample_rate``. Audio files are 16-bit PCM WAV. Everything is resampled
to 16 kHz at ingestion; ``speaker_id`` is carried for evaluation only and
must never be read by a training code path.
"""

from __future__ import annotations

import json
import logging
import math
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

logger = logging.getLogger(__name__)

TARGET_SAMPLE_RATE = 16000
DEFAULT_BATCH_SIZE = 16

__all__ = [
    "UtteranceRecord",
    "CorpusManifest",
    "ManifestError",
    "load_manifest",
    "save_manifest",
    "ingest_directory",
    "load_waveform",
    "save_waveform",
    "build_language_batches",
]


class ManifestError(ValueError):
    """Raised for malformed or inconsistent manifest content."""


@dataclass(frozen=True)
class UtteranceRecord:
    """One audio file. ``num_samples`` counts samples at the 16 kHz rate."""

    utterance_id: str
    language: str
    audio_path: Path
    num_samples: int
    sample_rate: int = TARGET_SAMPLE_RATE
    speaker_id: str | None = None  # evaluation bookkeeping only

    @property
    def duration_seconds(self) -> float:
        return self.num_samples / self.sample_rate


@dataclass
class CorpusManifest:
    name: str
    records: list[UtteranceRecord]
    missing_audio: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.records:
            raise ManifestError(f"manifest {self.name!r} has no records")

    @property
    def language_set(self) -> set[str]:
        return {r.language for r in self.records}

    def __len__(self) -> int:
        return len(self.records)


def _resampled_length(num_samples: int, sample_rate: int) -> int:
    if sample_rate == TARGET_SAMPLE_RATE:
        return num_samples
    g = math.gcd(TARGET_SAMPLE_RATE, sample_rate)
    up, down = TARGET_SAMPLE_RATE // g, sample_rate // g
    return int(math.ceil(num_samples * up / down))


def load_manifest(path: str | Path, name: str | None = None) -> CorpusManifest:
    """Load and validate a JSONL manifest.

    Records declared at a different sample rate are normalized to their
    16 kHz view (the rate and length the audio will have after ingestion).
    Records whose audio file is missing are kept but reported.
    """
    path = Path(path)
    records: list[UtteranceRecord] = []
    seen: dict[str, int] = {}
    missing: list[str] = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            try:
                utt = str(obj["utterance_id"])
                language = str(obj["language"])
                audio_path = Path(obj["audio_path"])
                num_samples = int(obj["num_samples"])
                sample_rate = int(obj["sample_rate"])
            except KeyError as exc:
                raise ManifestError(f"{path}:{lineno}: missing key {exc}") from exc
            if utt in seen:
                raise ManifestError(
                    f"{path}:{lineno}: duplicate utterance_id {utt!r} "
                    f"(first seen on line {seen[utt]})"
                )
            seen[utt] = lineno
            speaker = obj.get("speaker_id")
            record = UtteranceRecord(
                utterance_id=utt,
                language=language,
                audio_path=audio_path,
                num_samples=_resampled_length(num_samples, sample_rate),
                sample_rate=TARGET_SAMPLE_RATE,
                speaker_id=None if speaker is None else str(speaker),
            )
            if not audio_path.is_file():
                missing.append(utt)
            records.append(record)
    if missing:
        logger.warning(
            "manifest %s: %d records with missing audio files: %s",
            path, len(missing), ", ".join(missing[:10]),
        )
    return CorpusManifest(name or path.stem, records, missing_audio=missing)


def save_manifest(path: str | Path, manifest: CorpusManifest) -> None:
    with open(path, "w") as f:
        for r in manifest.records:
            f.write(json.dumps({
                "utterance_id": r.utterance_id,
                "language": r.language,
                "speaker_id": r.speaker_id,
                "audio_path": str(r.audio_path),
                "num_samples": r.num_samples,
                "sample_rate": r.sample_rate,
            }) + "\n")


def _read_wav_header(path: Path) -> tuple[int, int]:
    try:
        with wave.open(str(path), "rb") as w:
            return w.getnframes(), w.getframerate()
    except (wave.Error, EOFError, OSError) as exc:
        raise ManifestError(f"unreadable audio header in {path}: {exc}") from exc


def ingest_directory(
    audio_dir: str | Path, language: str, name: str | None = None
) -> CorpusManifest:
    """Build a manifest from every WAV file under a directory."""
    audio_dir = Path(audio_dir)
    records = []
    for wav in sorted(audio_dir.rglob("*.wav")):
        frames, rate = _read_wav_header(wav)
        records.append(UtteranceRecord(
            utterance_id=wav.stem,
            language=language,
            audio_path=wav,
            num_samples=_resampled_length(frames, rate),
            sample_rate=TARGET_SAMPLE_RATE,
        ))
    if not records:
        raise ManifestError(f"no WAV files found under {audio_dir}")
    ids = [r.utterance_id for r in records]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise ManifestError(f"duplicate utterance ids from file stems: {dupes}")
    return CorpusManifest(name or audio_dir.name, records)


def load_waveform(record: UtteranceRecord) -> np.ndarray:
    """Read 16-bit PCM audio as float64 in [-1, 1], resampled to 16 kHz."""
    try:
        with wave.open(str(record.audio_path), "rb") as w:
            if w.getsampwidth() != 2:
                raise ManifestError(
                    f"{record.audio_path}: expected 16-bit PCM, "
                    f"got sample width {w.getsampwidth()}"
                )
            rate = w.getframerate()
            channels = w.getnchannels()
            raw = w.readframes(w.getnframes())
    except (wave.Error, EOFError, OSError) as exc:
        raise ManifestError(
            f"unreadable audio for {record.utterance_id!r} at {record.audio_path}: {exc}"
        ) from exc
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if channels > 1:
        samples = samples.reshape(-1, channels).mean(axis=1)
    if rate != TARGET_SAMPLE_RATE:
        g = math.gcd(TARGET_SAMPLE_RATE, rate)
        samples = resample_poly(samples, TARGET_SAMPLE_RATE // g, rate // g)
    return samples


def save_waveform(path: str | Path, waveform: np.ndarray, sample_rate: int = TARGET_SAMPLE_RATE) -> None:
    """Write float audio in [-1, 1] as 16-bit PCM WAV."""
    clipped = np.clip(np.asarray(waveform, dtype=np.float64), -1.0, 1.0)
    pcm = (clipped * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())


def build_language_batches(
    manifest: CorpusManifest,
    batch_size: int = DEFAULT_BATCH_SIZE,
    seed: int = 0,
) -> list[list[UtteranceRecord]]:
    """Shuffle one epoch into language-homogeneous batches.

    Records are shuffled within each language and chunked; a trailing batch
    smaller than ``batch_size`` is kept per language. Batch order is then
    shuffled across languages. Deterministic given the seed.
    """
    if batch_size < 2:
        raise ValueError(f"batch_size must be >= 2 for contrastive training, got {batch_size}")
    rng = np.random.default_rng(seed)
    by_language: dict[str, list[UtteranceRecord]] = {}
    for r in manifest.records:
        by_language.setdefault(r.language, []).append(r)

    batches: list[list[UtteranceRecord]] = []
    for language in sorted(by_language):
        records = list(by_language[language])
        order = rng.permutation(len(records))
        shuffled = [records[i] for i in order]
        for start in range(0, len(shuffled), batch_size):
            batches.append(shuffled[start : start + batch_size])
    batch_order = rng.permutation(len(batches))
    return [batches[i] for i in batch_order]
