"""Clustering and segmentation metrics over frame labels and boundaries.

Three measures: symmetric normalized mutual information (as a percentage),
frame-weighted cluster purity, and boundary F-score with a time collar.
All of them consume plain integer frame labels / boundary times, pooled
over a corpus.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

HOP_SECONDS = 0.01

__all__ = [
    "FrameLabelSequence",
    "BoundarySet",
    "ConfusionMatrix",
    "frame_confusion",
    "nmi",
    "cluster_purity",
    "boundary_fscore",
    "BoundaryScore",
]


@dataclass
class FrameLabelSequence:
    """Frame-wise integer labels for one utterance at a fixed hop."""

    labels: np.ndarray
    utterance_id: str
    hop_seconds: float = HOP_SECONDS

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1:
            raise ValueError("labels must be a 1-D sequence")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("labels must be non-negative")


@dataclass
class BoundarySet:
    """Inner segment boundaries of one utterance, in seconds.

    Utterance start/end boundaries are excluded by default since they are
    trivially shared between any two segmentations.
    """

    times: np.ndarray
    utterance_id: str
    includes_edges: bool = False

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        if self.times.ndim != 1:
            raise ValueError("boundary times must be a 1-D sequence")
        if self.times.size > 1 and not np.all(np.diff(self.times) > 0):
            raise ValueError(
                f"boundary times of {self.utterance_id!r} must be strictly increasing"
            )


@dataclass
class ConfusionMatrix:
    """Frame-count contingency table between hypothesis and reference labels."""

    counts: np.ndarray
    hyp_labels: list[int] = field(default_factory=list)
    ref_labels: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2:
            raise ValueError("counts must be a 2-D matrix")
        if (self.counts < 0).any():
            raise ValueError("counts must be non-negative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())


LENGTH_MISMATCH_TOLERANCE = 2  # frames; larger mismatches indicate misaligned inputs


def frame_confusion(
    hyp: list[FrameLabelSequence], ref: list[FrameLabelSequence]
) -> ConfusionMatrix:
    """Pool a corpus-level confusion matrix from per-utterance frame labels.

    ``hyp`` and ``ref`` are matched by ``utterance_id``. A length mismatch of
    up to 2 frames is tolerated by truncating to the shorter sequence.
    """
    ref_by_id = {r.utterance_id: r for r in ref}
    missing = [h.utterance_id for h in hyp if h.utterance_id not in ref_by_id]
    if missing:
        raise ValueError(f"no reference labels for utterances: {missing}")

    pairs = []
    for h in hyp:
        r = ref_by_id[h.utterance_id]
        diff = abs(len(h.labels) - len(r.labels))
        if diff > LENGTH_MISMATCH_TOLERANCE:
            raise ValueError(
                f"utterance {h.utterance_id!r}: hyp has {len(h.labels)} frames, "
                f"ref has {len(r.labels)} (mismatch > {LENGTH_MISMATCH_TOLERANCE})"
            )
        n = min(len(h.labels), len(r.labels))
        pairs.append((h.labels[:n], r.labels[:n]))

    hyp_all = np.concatenate([p[0] for p in pairs]) if pairs else np.empty(0, np.int64)
    ref_all = np.concatenate([p[1] for p in pairs]) if pairs else np.empty(0, np.int64)

    hyp_labels, hyp_idx = np.unique(hyp_all, return_inverse=True)
    ref_labels, ref_idx = np.unique(ref_all, return_inverse=True)
    counts = np.zeros((len(hyp_labels), len(ref_labels)), dtype=np.int64)
    np.add.at(counts, (hyp_idx, ref_idx), 1)
    return ConfusionMatrix(counts, list(hyp_labels), list(ref_labels))


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def nmi(cm: ConfusionMatrix) -> float:
    """Symmetric NMI in percent: 200 * I(U;P) / (H(U) + H(P)).

    Degenerate cases: when both labelings are single-class the entropies
    vanish and the labelings are trivially identical, so 100 is returned;
    zero mutual information with a positive denominator gives 0.
    """
    n = cm.total
    if n == 0:
        raise ValueError("empty confusion matrix")
    joint = cm.counts / n
    p_u = joint.sum(axis=1)
    p_p = joint.sum(axis=0)
    h_u = _entropy(p_u)
    h_p = _entropy(p_p)
    if h_u + h_p == 0.0:
        return 100.0
    mask = joint > 0
    outer = np.outer(p_u, p_p)
    mutual = float((joint[mask] * np.log(joint[mask] / outer[mask])).sum())
    return 200.0 * mutual / (h_u + h_p)


def cluster_purity(cm: ConfusionMatrix) -> float:
    """Frame-weighted cluster purity: sum_u max_p counts[u, p] / N."""
    n = cm.total
    if n == 0:
        raise ValueError("empty confusion matrix")
    return float(cm.counts.max(axis=1).sum()) / n


@dataclass
class BoundaryScore:
    precision: float
    recall: float
    fscore: float
    n_hyp: int
    n_ref: int
    n_matched: int


DEFAULT_COLLAR = 0.02  # seconds


def _match_boundaries(hyp_times: np.ndarray, ref_times: np.ndarray, collar: float) -> int:
    """Count one-to-one boundary matches within the collar.

    Both lists are traversed in time order with two pointers; each boundary
    is consumed by at most one match. For points on a line this greedy scan
    attains the maximum one-to-one matching, which also makes the count
    symmetric in its two arguments.
    """
    i = j = matched = 0
    while i < len(hyp_times) and j < len(ref_times):
        d = hyp_times[i] - ref_times[j]
        if abs(d) <= collar:
            matched += 1
            i += 1
            j += 1
        elif d < 0:
            i += 1
        else:
            j += 1
    return matched


def boundary_fscore(
    hyp: list[BoundarySet],
    ref: list[BoundarySet],
    collar: float = DEFAULT_COLLAR,
) -> BoundaryScore:
    """Precision/recall/F of hypothesized vs reference boundaries.

    Matches are one-to-one within ``±collar`` seconds, pooled over all
    utterances. Degenerate ratios (0/0) are defined as 0.
    """
    ref_by_id = {r.utterance_id: r for r in ref}
    missing = [h.utterance_id for h in hyp if h.utterance_id not in ref_by_id]
    if missing:
        raise ValueError(f"no reference boundaries for utterances: {missing}")

    n_hyp = n_ref = n_matched = 0
    for h in hyp:
        r = ref_by_id[h.utterance_id]
        n_hyp += len(h.times)
        n_ref += len(r.times)
        n_matched += _match_boundaries(h.times, r.times, collar)

    precision = n_matched / n_hyp if n_hyp else 0.0
    recall = n_matched / n_ref if n_ref else 0.0
    fscore = (
        2 * precision * recall / (precision + recall) if precision + recall else 0.0
    )
    return BoundaryScore(precision, recall, fscore, n_hyp, n_ref, n_matched)
