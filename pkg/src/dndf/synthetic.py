"""Synthetic datasets for smoke tests and demos."""

from pathlib import Path

import numpy as np
from scipy.signal import chirp

from .audio import write_wav

AUDIO_CLASSES = ("chirp", "noise", "sine2000", "sine440")


def gaussian_blobs(n, seed=0, spread=1.0, centers=((0.0, 0.0), (4.0, 0.0), (2.0, 3.5))):
    """``n`` points cycling through the classes, each a Gaussian around its center."""
    rng = np.random.default_rng(seed)
    centers = np.asarray(centers, dtype=np.float64)
    labels = np.arange(n) % len(centers)
    points = centers[labels] + rng.normal(scale=spread, size=(n, centers.shape[1]))
    return points, labels


def synth_clip(kind, sample_rate=16000, seconds=1.0, rng=None):
    """One clip of the given kind with random amplitude, phase and a little noise."""
    rng = rng if rng is not None else np.random.default_rng(0)
    t = np.arange(int(sample_rate * seconds)) / sample_rate
    amp = rng.uniform(0.2, 0.6)
    if kind == "sine440":
        x = amp * np.sin(2 * np.pi * 440 * t + rng.uniform(0, 2 * np.pi))
    elif kind == "sine2000":
        x = amp * np.sin(2 * np.pi * 2000 * t + rng.uniform(0, 2 * np.pi))
    elif kind == "noise":
        x = amp * rng.uniform(-1, 1, size=t.size)
    elif kind == "chirp":
        x = amp * chirp(t, f0=rng.uniform(200, 400), t1=seconds, f1=rng.uniform(5000, 7000))
    else:
        raise ValueError(f"unknown clip kind {kind!r}")
    x = x + 0.01 * rng.normal(size=t.size)
    return np.clip(x, -1, 1)


def write_audio_corpus(root, per_class, sample_rate=16000, seconds=1.0, seed=0, kinds=AUDIO_CLASSES):
    """Write ``per_class`` clips of each kind to ``root/<kind>/<kind>_NN.wav``."""
    rng = np.random.default_rng(seed)
    root = Path(root)
    paths = []
    for kind in kinds:
        d = root / kind
        d.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            p = d / f"{kind}_{i:02d}.wav"
            write_wav(p, synth_clip(kind, sample_rate, seconds, rng), sample_rate)
            paths.append(p)
    return paths
