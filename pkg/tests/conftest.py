"""Shared fixtures: synthetic speech-like audio and small corpora on disk."""

import json

import numpy as np
import pytest

from audnorm.dataio import save_waveform

SR = 16000


def speechlike(rng, seconds=1.0, tilt=0.0):
    """Harmonic signal with vibrato and an amplitude envelope.

    ``tilt`` adds a per-harmonic gain slope, a crude stand-in for a
    speaker-dependent spectral envelope.
    """
    n = int(seconds * SR)
    t = np.arange(n) / SR
    f0 = 110 * 2 ** rng.uniform(0, 1)
    vib = 1 + 0.02 * np.sin(2 * np.pi * rng.uniform(2, 5) * t)
    x = np.zeros(n)
    for k in range(1, 9):
        gain = rng.uniform(0.05, 0.3) / k * (10 ** (tilt * k / 20))
        x += gain * np.sin(2 * np.pi * k * f0 * vib * t + rng.uniform(0, 2 * np.pi))
    env = 0.4 + 0.6 * np.abs(np.sin(2 * np.pi * rng.uniform(1.5, 3.5) * t))
    x = x * env + 0.005 * rng.standard_normal(n)
    return 0.7 * x / np.max(np.abs(x))


def write_wav_corpus(directory, count=4, seconds=0.8, language="en", seed=0,
                     speaker_ids=None, prefix="utt"):
    """Write WAV files plus a manifest; returns the manifest path."""
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    manifest_path = directory / "manifest.jsonl"
    with open(manifest_path, "w") as f:
        for i in range(count):
            wav_path = directory / f"{prefix}{i:03d}.wav"
            x = speechlike(rng, seconds=seconds)
            save_waveform(wav_path, x)
            f.write(json.dumps({
                "utterance_id": f"{prefix}{i:03d}",
                "language": language,
                "speaker_id": None if speaker_ids is None else speaker_ids[i],
                "audio_path": str(wav_path),
                "num_samples": len(x),
                "sample_rate": SR,
            }) + "\n")
    return manifest_path


@pytest.fixture
def wav_corpus(tmp_path):
    return write_wav_corpus(tmp_path / "corpus", count=4, seconds=0.8)
