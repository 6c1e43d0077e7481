"""Corpus-level speaker normalization against a medoid style.

Every utterance of a corpus is encoded to a style vector; the embedding with
minimal mean Euclidean distance to all others (the medoid) becomes the shared
conversion target, and each utterance is re-decoded from its own content
means with that target style. The reconstruction condition ("rec") uses each
utterance's own style instead.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import CorpusManifest, UtteranceRecord, load_waveform, save_waveform
from .features import (
    CorpusNormStats,
    LogMelSpectrogram,
    compute_logmel_vc,
    denormalize_per_band,
    invert_logmel,
    load_feature,
    normalize_per_band,
    save_feature,
)
from .fvae import FVAE, StyleEmbedding, decode, encode_content, encode_style

logger = logging.getLogger(__name__)

__all__ = [
    "StyleTable",
    "extract_styles",
    "find_style_medoid",
    "convert_utterance",
    "ConversionSummary",
    "normalize_corpus",
]


@dataclass
class StyleTable:
    """Mapping utterance_id -> style embedding for one corpus."""

    entries: dict[str, StyleEmbedding]
    corpus: str = ""

    def __post_init__(self):
        dims = {e.vector.shape[0] for e in self.entries.values()}
        if len(dims) > 1:
            raise ValueError(f"inconsistent style dimensions in table: {sorted(dims)}")

    def __len__(self) -> int:
        return len(self.entries)

    def save(self, path: str | Path) -> None:
        """One line per utterance: id followed by the vector components."""
        with open(path, "w") as f:
            for utt in sorted(self.entries):
                vec = " ".join(f"{v:.17g}" for v in self.entries[utt].vector)
                f.write(f"{utt} {vec}\n")

    @classmethod
    def load(cls, path: str | Path, corpus: str = "") -> "StyleTable":
        entries = {}
        with open(path) as f:
            for line in f:
                parts = line.split()
                if not parts:
                    continue
                utt = parts[0]
                entries[utt] = StyleEmbedding(
                    vector=np.array([float(v) for v in parts[1:]]), utterance_id=utt
                )
        return cls(entries, corpus=corpus)


def vc_features(
    record: UtteranceRecord, stats: CorpusNormStats
) -> LogMelSpectrogram:
    """Normalized 80-band features of one utterance, computed from audio."""
    waveform = load_waveform(record)
    feat = compute_logmel_vc(waveform, utterance_id=record.utterance_id)
    return normalize_per_band(feat, stats)


def extract_styles(
    manifest: CorpusManifest,
    model: FVAE,
    stats: CorpusNormStats,
    feature_fn=None,
) -> StyleTable:
    """Style embedding of every utterance in the manifest.

    ``feature_fn(record)`` overrides the default audio -> normalized log-mel
    path (used with feature caches).
    """
    feature_fn = feature_fn or (lambda record: vc_features(record, stats))
    entries = {}
    for record in manifest.records:
        try:
            feat = feature_fn(record)
        except Exception as exc:
            raise RuntimeError(
                f"style extraction failed for {record.utterance_id!r}: {exc}"
            ) from exc
        entries[record.utterance_id] = encode_style(feat, model)
    return StyleTable(entries, corpus=manifest.name)


def find_style_medoid(table: StyleTable) -> str:
    """Utterance id whose style minimizes the mean distance to all styles.

    The zero self-distance is included (a constant shift of every mean).
    Exact ties go to the lexicographically smallest utterance id.
    """
    if not table.entries:
        raise ValueError("cannot take the medoid of an empty style table")
    ids = sorted(table.entries)
    vectors = np.stack([table.entries[u].vector for u in ids])
    sq = (vectors**2).sum(axis=1)
    gram = vectors @ vectors.T
    dist_sq = np.maximum(sq[:, None] + sq[None, :] - 2 * gram, 0.0)
    mean_dist = np.sqrt(dist_sq).mean(axis=1)
    # ids are sorted, so the first argmin is the lexicographic tie-break
    return ids[int(np.argmin(mean_dist))]


def convert_utterance(
    feat: LogMelSpectrogram,
    model: FVAE,
    mode: str,
    target_style: StyleEmbedding | None = None,
) -> LogMelSpectrogram:
    """Decode an utterance's content means with a chosen style.

    Mode "rec" re-encodes the utterance's own style (reconstruction);
    mode "vc" uses the supplied target (the corpus medoid). Content posterior
    means are used without sampling, and the frame count is preserved.
    """
    if mode not in ("rec", "vc"):
        raise ValueError(f"unknown conversion mode {mode!r}")
    content = encode_content(feat, model)
    if mode == "rec":
        style = encode_style(feat, model)
    else:
        if target_style is None:
            raise ValueError("vc mode requires a target style")
        style = target_style
    values = decode(content, style, model)
    return LogMelSpectrogram(
        values,
        utterance_id=feat.utterance_id,
        band_count=feat.band_count,
        hop_seconds=feat.hop_seconds,
        recipe=feat.recipe,
    )


@dataclass
class ConversionSummary:
    converted: list[str] = field(default_factory=list)
    cached: list[str] = field(default_factory=list)
    failed: dict[str, str] = field(default_factory=dict)
    medoid_id: str | None = None

    @property
    def ok(self) -> bool:
        return not self.failed


def normalize_corpus(
    manifest: CorpusManifest,
    model: FVAE,
    stats: CorpusNormStats,
    mode: str,
    output_dir: str | Path,
    style_table: StyleTable | None = None,
    synthesize_audio: bool = False,
    feature_fn=None,
) -> ConversionSummary:
    """Convert a whole corpus, caching one artifact per utterance.

    In "vc" mode all utterances share the medoid style of ``style_table``
    (extracted here when not given). Converted features are cached as
    ``<utterance_id>.npz`` in the raw log-mel domain; with
    ``synthesize_audio`` a Griffin-Lim waveform is written next to each.
    Per-utterance failures are collected and the run continues.
    """
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    feature_fn = feature_fn or (lambda record: vc_features(record, stats))
    summary = ConversionSummary()

    target_style = None
    if mode == "vc":
        if style_table is None:
            style_table = extract_styles(manifest, model, stats, feature_fn=feature_fn)
        summary.medoid_id = find_style_medoid(style_table)
        target_style = style_table.entries[summary.medoid_id]

    for record in manifest.records:
        utt = record.utterance_id
        feat_path = output_dir / f"{utt}.npz"
        wav_path = output_dir / f"{utt}.wav"
        if feat_path.exists() and (not synthesize_audio or wav_path.exists()):
            summary.cached.append(utt)
            continue
        try:
            feat = feature_fn(record)
            converted = convert_utterance(feat, model, mode, target_style=target_style)
            raw = denormalize_per_band(converted, stats)
            save_feature(feat_path, raw)
            if synthesize_audio:
                save_waveform(wav_path, invert_logmel(raw))
            summary.converted.append(utt)
        except Exception as exc:
            logger.warning("conversion failed for %s: %s", utt, exc)
            summary.failed[utt] = str(exc)
    if summary.failed:
        logger.warning(
            "conversion finished with %d failures out of %d utterances",
            len(summary.failed), len(manifest.records),
        )
    return summary


def checkpoint_hash(path: str | Path) -> str:
    """SHA-256 of a checkpoint file, for run metadata."""
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_converted_feature(output_dir: str | Path, utterance_id: str) -> LogMelSpectrogram:
    return load_feature(Path(output_dir) / f"{utterance_id}.npz")
