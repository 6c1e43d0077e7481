"""Log-mel feature extraction and mel-to-waveform inversion.

Two recipes share one framing (Blackman window, 400-sample window, 160-sample
shift, 512-point FFT at 16 kHz) so their frame grids align one-to-one:

* the conversion recipe: 80 log-mel bands, normalized per band with corpus
  statistics in a separate step;
* the unit-discovery recipe: 40 log-mel bands plus deltas and delta-deltas
  (120 maps), normalized per utterance and per map.

Inversion maps 80-band log-mel back to audio: non-negative least squares
against the filterbank recovers a linear-frequency power envelope, and
Griffin-Lim retrieves the phase.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import nnls

SAMPLE_RATE = 16000
WINDOW_LENGTH = 400
WINDOW_SHIFT = 160
FFT_SIZE = 512
HOP_SECONDS = WINDOW_SHIFT / SAMPLE_RATE
VC_BANDS = 80
AUD_BANDS = 40
MEL_FMIN = 0.0
MEL_FMAX = 8000.0
POWER_FLOOR = 1e-10
DELTA_WIDTH = 2
GRIFFIN_LIM_ITERATIONS = 60

__all__ = [
    "LogMelSpectrogram",
    "CorpusNormStats",
    "num_frames",
    "mel_filterbank",
    "mel_center_frequencies",
    "compute_logmel_vc",
    "compute_logmel_aud",
    "compute_deltas",
    "compute_norm_stats",
    "normalize_per_band",
    "denormalize_per_band",
    "invert_logmel",
    "save_feature",
    "load_feature",
]


@dataclass
class LogMelSpectrogram:
    """Time-frequency feature matrix, frames on the first axis."""

    values: np.ndarray
    utterance_id: str
    band_count: int
    hop_seconds: float = HOP_SECONDS
    recipe: str = "vc"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("feature matrix must be 2-D (frames x maps)")
        if not np.isfinite(self.values).all():
            raise ValueError(f"non-finite feature values in {self.utterance_id!r}")

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]


@dataclass
class CorpusNormStats:
    """Per-band mean and standard deviation over a training corpus."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ValueError("mean and std must be 1-D vectors of equal length")
        if (self.std <= 0).any():
            raise ValueError("std must be positive in every band")

    def save(self, path: str | Path) -> None:
        np.savez(path, mean=self.mean, std=self.std)

    @classmethod
    def load(cls, path: str | Path) -> "CorpusNormStats":
        data = np.load(path)
        return cls(mean=data["mean"], std=data["std"])


def num_frames(num_samples: int) -> int:
    """Unpadded frame count: 1 + floor((n - window) / shift)."""
    if num_samples < WINDOW_LENGTH:
        raise ValueError(f"waveform too short: {num_samples} < {WINDOW_LENGTH} samples")
    return 1 + (num_samples - WINDOW_LENGTH) // WINDOW_SHIFT


def _frame(waveform: np.ndarray) -> np.ndarray:
    """Slice a waveform into overlapping frames, dropping tail samples."""
    t = num_frames(len(waveform))
    idx = np.arange(WINDOW_LENGTH)[None, :] + WINDOW_SHIFT * np.arange(t)[:, None]
    return waveform[idx]


def _window() -> np.ndarray:
    # Periodic Blackman, matching the overlap-add synthesis in invert_logmel.
    return np.blackman(WINDOW_LENGTH + 1)[:-1]


def stft_power(waveform: np.ndarray) -> np.ndarray:
    """Power spectrogram (frames x FFT_SIZE//2+1) of a 16 kHz waveform."""
    frames = _frame(np.asarray(waveform, dtype=np.float64))
    spec = np.fft.rfft(frames * _window()[None, :], n=FFT_SIZE, axis=1)
    return np.abs(spec) ** 2


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_bands: int) -> np.ndarray:
    """Triangle peak frequencies in Hz for an n-band filterbank."""
    edges = np.linspace(hz_to_mel(MEL_FMIN), hz_to_mel(MEL_FMAX), n_bands + 2)
    return mel_to_hz(edges[1:-1])


def mel_filterbank(n_bands: int) -> np.ndarray:
    """Triangular mel filterbank (n_bands x FFT_SIZE//2+1), unit peak height."""
    edges_mel = np.linspace(hz_to_mel(MEL_FMIN), hz_to_mel(MEL_FMAX), n_bands + 2)
    edges_hz = mel_to_hz(edges_mel)
    fft_freqs = np.arange(FFT_SIZE // 2 + 1) * (SAMPLE_RATE / FFT_SIZE)
    lower = edges_hz[:-2, None]
    center = edges_hz[1:-1, None]
    upper = edges_hz[2:, None]
    up = (fft_freqs[None, :] - lower) / (center - lower)
    down = (upper - fft_freqs[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(up, down))


def compute_logmel_vc(waveform: np.ndarray, utterance_id: str = "") -> LogMelSpectrogram:
    """80-band log-mel features for the conversion model, unnormalized."""
    power = stft_power(waveform)
    mel_power = power @ mel_filterbank(VC_BANDS).T
    values = np.log(np.maximum(mel_power, POWER_FLOOR))
    return LogMelSpectrogram(values, utterance_id, band_count=VC_BANDS, recipe="vc")


def compute_deltas(values: np.ndarray, width: int = DELTA_WIDTH) -> np.ndarray:
    """Symmetric regression deltas over ±width frames with edge replication."""
    padded = np.pad(values, ((width, width), (0, 0)), mode="edge")
    denom = 2.0 * sum(n * n for n in range(1, width + 1))
    out = np.zeros_like(values)
    t = values.shape[0]
    for n in range(1, width + 1):
        out += n * (padded[width + n : width + n + t] - padded[width - n : width - n + t])
    return out / denom


def compute_logmel_aud(waveform: np.ndarray, utterance_id: str = "") -> LogMelSpectrogram:
    """40-band log-mel + deltas + delta-deltas, normalized per utterance."""
    power = stft_power(waveform)
    mel_power = power @ mel_filterbank(AUD_BANDS).T
    logmel = np.log(np.maximum(mel_power, POWER_FLOOR))
    return finish_aud_features(logmel, utterance_id)


def finish_aud_features(logmel: np.ndarray, utterance_id: str = "") -> LogMelSpectrogram:
    """Append delta maps to a 40-band log-mel matrix and normalize per map."""
    delta = compute_deltas(logmel)
    delta2 = compute_deltas(delta)
    stacked = np.concatenate([logmel, delta, delta2], axis=1)
    mean = stacked.mean(axis=0, keepdims=True)
    std = stacked.std(axis=0, keepdims=True)
    values = (stacked - mean) / np.maximum(std, 1e-8)
    return LogMelSpectrogram(
        values, utterance_id, band_count=stacked.shape[1], recipe="aud"
    )


def compute_norm_stats(feats: list[LogMelSpectrogram]) -> CorpusNormStats:
    """Per-band mean/std pooled over all frames of a feature list."""
    if not feats:
        raise ValueError("cannot compute statistics from an empty corpus")
    stacked = np.concatenate([f.values for f in feats], axis=0)
    std = stacked.std(axis=0)
    return CorpusNormStats(mean=stacked.mean(axis=0), std=np.maximum(std, 1e-8))


def normalize_per_band(
    feat: LogMelSpectrogram, stats: CorpusNormStats
) -> LogMelSpectrogram:
    """Zero-mean unit-variance normalization per band with corpus statistics."""
    if feat.values.shape[1] != stats.mean.shape[0]:
        raise ValueError(
            f"band count mismatch: features have {feat.values.shape[1]}, "
            f"stats have {stats.mean.shape[0]}"
        )
    values = (feat.values - stats.mean) / stats.std
    return LogMelSpectrogram(
        values, feat.utterance_id, feat.band_count, feat.hop_seconds, feat.recipe
    )


def denormalize_per_band(
    feat: LogMelSpectrogram, stats: CorpusNormStats
) -> LogMelSpectrogram:
    """Invert normalize_per_band."""
    if feat.values.shape[1] != stats.mean.shape[0]:
        raise ValueError(
            f"band count mismatch: features have {feat.values.shape[1]}, "
            f"stats have {stats.mean.shape[0]}"
        )
    values = feat.values * stats.std + stats.mean
    return LogMelSpectrogram(
        values, feat.utterance_id, feat.band_count, feat.hop_seconds, feat.recipe
    )


def _mel_to_linear_power(mel_power: np.ndarray, filterbank: np.ndarray) -> np.ndarray:
    """Per-frame non-negative least squares inversion of the filterbank."""
    out = np.zeros((mel_power.shape[0], filterbank.shape[1]))
    for t in range(mel_power.shape[0]):
        out[t], _ = nnls(filterbank, mel_power[t])
    return out


def _overlap_add(frames: np.ndarray, length: int) -> np.ndarray:
    """Weighted overlap-add with window-square normalization."""
    window = _window()
    signal = np.zeros(length)
    weight = np.zeros(length)
    for t in range(frames.shape[0]):
        start = t * WINDOW_SHIFT
        signal[start : start + WINDOW_LENGTH] += frames[t] * window
        weight[start : start + WINDOW_LENGTH] += window**2
    return signal / np.maximum(weight, 1e-10)


def _istft(spec: np.ndarray, length: int) -> np.ndarray:
    frames = np.fft.irfft(spec, n=FFT_SIZE, axis=1)[:, :WINDOW_LENGTH]
    return _overlap_add(frames, length)


def invert_logmel(
    feat: LogMelSpectrogram, iterations: int = GRIFFIN_LIM_ITERATIONS
) -> np.ndarray:
    """Reconstruct a 16 kHz waveform from raw (denormalized) 80-band log-mel.

    Pipeline: exponentiate, NNLS filterbank inversion to a linear power
    spectrum, square root to magnitude, Griffin-Lim phase retrieval with
    the analysis window configuration. Phase starts at zero, so the result
    is deterministic.
    """
    if not np.isfinite(feat.values).all():
        raise ValueError("non-finite log-mel input")
    filterbank = mel_filterbank(feat.band_count)
    mel_power = np.exp(feat.values)
    magnitude = np.sqrt(_mel_to_linear_power(mel_power, filterbank))

    length = WINDOW_LENGTH + WINDOW_SHIFT * (feat.num_frames - 1)
    spec = magnitude.astype(np.complex128)
    waveform = _istft(spec, length)
    for _ in range(iterations):
        re_spec = np.fft.rfft(_frame(waveform) * _window()[None, :], n=FFT_SIZE, axis=1)
        phase = re_spec / np.maximum(np.abs(re_spec), 1e-12)
        waveform = _istft(magnitude * phase, length)
    return waveform


def save_feature(path: str | Path, feat: LogMelSpectrogram) -> None:
    """Cache a feature matrix; reload is bit-exact."""
    np.savez(
        path,
        values=feat.values,
        utterance_id=feat.utterance_id,
        band_count=feat.band_count,
        hop_seconds=feat.hop_seconds,
        recipe=feat.recipe,
    )


def load_feature(path: str | Path) -> LogMelSpectrogram:
    data = np.load(path)
    return LogMelSpectrogram(
        values=data["values"],
        utterance_id=str(data["utterance_id"]),
        band_count=int(data["band_count"]),
        hop_seconds=float(data["hop_seconds"]),
        recipe=str(data["recipe"]),
    )
