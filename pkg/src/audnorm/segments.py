"""Time-marked segment files and conversions to frame labels / boundaries.

The exchange format is one segment per line::

    utterance_id start_seconds duration_seconds label

Both discovered unit transcriptions and reference phone alignments use it.
Labels may be arbitrary strings (phone names) or integers (unit ids); the
metrics layer works on integers, so a shared vocabulary maps strings to ids.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .metrics import HOP_SECONDS, BoundarySet, FrameLabelSequence

__all__ = [
    "Segment",
    "read_segments",
    "write_segments",
    "label_vocabulary",
    "segments_to_frame_labels",
    "segments_to_boundaries",
    "labels_to_boundaries",
]


@dataclass
class Segment:
    utterance_id: str
    start: float
    duration: float
    label: str

    @property
    def end(self) -> float:
        return self.start + self.duration


def read_segments(path: str | Path) -> dict[str, list[Segment]]:
    """Read a segment file, grouped by utterance in file order."""
    by_utt: dict[str, list[Segment]] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            utt, start, dur, label = parts
            try:
                seg = Segment(utt, float(start), float(dur), label)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: bad time field: {exc}") from exc
            by_utt.setdefault(utt, []).append(seg)
    return by_utt


def write_segments(path: str | Path, segments: dict[str, list[Segment]]) -> None:
    with open(path, "w") as f:
        for utt in segments:
            for seg in segments[utt]:
                f.write(f"{seg.utterance_id} {seg.start:.3f} {seg.duration:.3f} {seg.label}\n")


def label_vocabulary(segments: dict[str, list[Segment]]) -> dict[str, int]:
    """Map segment labels to dense integer ids, sorted for determinism."""
    labels = sorted({seg.label for segs in segments.values() for seg in segs})
    return {label: i for i, label in enumerate(labels)}


def segments_to_frame_labels(
    segs: list[Segment],
    vocabulary: dict[str, int],
    num_frames: int | None = None,
    hop_seconds: float = HOP_SECONDS,
) -> FrameLabelSequence:
    """Sample the segment label active at each frame center on a fixed grid.

    Frames past the last segment end repeat the final label so that small
    duration round-offs do not fail downstream length checks.
    """
    if not segs:
        raise ValueError("cannot derive frame labels from an empty segment list")
    utt = segs[0].utterance_id
    end = max(seg.end for seg in segs)
    if num_frames is None:
        num_frames = max(1, int(round(end / hop_seconds)))
    centers = (np.arange(num_frames) + 0.5) * hop_seconds
    starts = np.array([seg.start for seg in segs])
    ids = np.array([vocabulary[seg.label] for seg in segs], dtype=np.int64)
    # Segments partition the utterance, so the active one at time t is the
    # last segment starting at or before t.
    idx = np.clip(np.searchsorted(starts, centers, side="right") - 1, 0, len(segs) - 1)
    return FrameLabelSequence(ids[idx], utterance_id=utt, hop_seconds=hop_seconds)


def segments_to_boundaries(
    segs: list[Segment], include_edges: bool = False
) -> BoundarySet:
    """Boundary times between consecutive segments of one utterance."""
    if not segs:
        raise ValueError("cannot derive boundaries from an empty segment list")
    utt = segs[0].utterance_id
    times = [seg.start for seg in segs[1:]]
    if include_edges:
        times = [segs[0].start] + times + [segs[-1].end]
    return BoundarySet(np.array(times), utterance_id=utt, includes_edges=include_edges)


def labels_to_boundaries(
    labels: FrameLabelSequence, include_edges: bool = False
) -> BoundarySet:
    """Boundaries at frame-label change points, in seconds."""
    arr = labels.labels
    change = np.nonzero(arr[1:] != arr[:-1])[0] + 1
    times = change * labels.hop_seconds
    if include_edges:
        times = np.concatenate([[0.0], times, [len(arr) * labels.hop_seconds]])
    return BoundarySet(times, utterance_id=labels.utterance_id, includes_edges=include_edges)
