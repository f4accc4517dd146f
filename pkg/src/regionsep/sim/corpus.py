"""Speech and noise pools.

``SyntheticCorpus`` generates speech-like and noise signals on demand from
(seed, item id), so scenes stay reproducible without any audio on disk.
``WavCorpus`` serves user-supplied WAV directories.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.signal import butter, lfilter, sosfilt

from ..dsp import read_wav
from .noise import CorpusError

__all__ = ["SyntheticCorpus", "WavCorpus", "synthetic_speech", "synthetic_noise", "NOISE_COLORS"]

NOISE_COLORS = ("white", "pink", "brown", "hum", "bandpass")


def synthetic_speech(num_samples: int, seed: int, sample_rate: int = 16000) -> np.ndarray:
    """Voiced harmonic bursts with a wandering pitch, formant tilt and unvoiced fricatives.

    Energy is sparse in time-frequency the way speech is, which is what the
    separation tests rely on.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(num_samples) / sample_rate
    f0_base = rng.uniform(90, 240)
    # slow pitch contour
    knots = rng.uniform(-0.15, 0.15, size=int(num_samples / sample_rate * 4) + 2)
    contour = np.interp(t, np.linspace(0, t[-1] if num_samples > 1 else 1, len(knots)), knots)
    f0 = f0_base * (1 + contour)
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    formants = rng.uniform([300, 900, 2200], [900, 2200, 3500])
    n_harm = int(min(40, (sample_rate / 2 - 200) // f0_base))
    voiced = np.zeros(num_samples)
    for h in range(1, n_harm + 1):
        fh = h * f0_base
        amp = sum(1.0 / (1 + ((fh - fm) / 150.0) ** 2) for fm in formants) + 0.02
        voiced += amp / h ** 0.5 * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
    # syllable envelope: on/off segments of 80-300 ms
    env = np.zeros(num_samples)
    kind = np.zeros(num_samples, dtype=int)
    pos = int(rng.integers(0, sample_rate // 10))
    first = None
    while pos < num_samples:
        seg = int(rng.uniform(0.08, 0.3) * sample_rate)
        roll = rng.uniform()
        if roll < 0.6:
            k = 1
        elif roll < 0.75:
            k = 2
        else:
            k = 0
        end = min(num_samples, pos + seg)
        win = np.hanning(end - pos + 2)[1:-1] if end - pos > 0 else np.zeros(0)
        env[pos:end] = win
        kind[pos:end] = k
        first = first or (pos, end)
        pos = end
    if first is not None and not np.any(kind == 1):
        # short clips can draw only pauses; voice the first segment
        kind[first[0]:first[1]] = 1
    fric = lfilter([1, -0.95], [1], rng.standard_normal(num_samples))
    sig = np.where(kind == 1, voiced, 0.0) + np.where(kind == 2, 0.3 * fric, 0.0)
    sig = sig * env
    rms = np.sqrt(np.mean(sig ** 2))
    return sig / rms * 0.05 if rms > 0 else sig


def synthetic_noise(num_samples: int, seed: int, color: str | None = None,
                    sample_rate: int = 16000) -> np.ndarray:
    rng = np.random.default_rng(seed)
    if color is None:
        color = NOISE_COLORS[int(rng.integers(len(NOISE_COLORS)))]
    w = rng.standard_normal(num_samples)
    if color == "white":
        sig = w
    elif color == "pink":
        # Kellet's economy pink filter
        sig = lfilter([0.049922035, -0.095993537, 0.050612699, -0.004408786],
                      [1, -2.494956002, 2.017265875, -0.522189400], w)
    elif color == "brown":
        sig = lfilter([1.0], [1, -0.98], w)
    elif color == "hum":
        t = np.arange(num_samples) / sample_rate
        f = rng.choice([50.0, 60.0])
        sig = sum(np.sin(2 * np.pi * f * k * t + rng.uniform(0, 2 * np.pi)) / k for k in range(1, 8))
        sig = sig + 0.1 * w
    elif color == "bandpass":
        lo = rng.uniform(200, 2000)
        sig = sosfilt(butter(4, [lo, min(lo * 3, 7500)], "band", fs=sample_rate, output="sos"), w)
    else:
        raise ValueError(f"unknown noise color {color!r}")
    sig = sig - sig.mean()
    return sig / np.sqrt(np.mean(sig ** 2)) * 0.05


def _item_seed(seed: int, tag: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), tag, int(index)]).generate_state(1)[0])


class SyntheticCorpus:
    """Unbounded deterministic pool; item ``i`` is fixed by (seed, i)."""

    kind = "synthetic"

    def __init__(self, seed: int = 0, num_speech: int = 1000, num_noise: int = 1000,
                 sample_rate: int = 16000):
        self.seed = int(seed)
        self.num_speech = num_speech
        self.num_noise = num_noise
        self.sample_rate = sample_rate

    def speech(self, index: int, num_samples: int) -> np.ndarray:
        return synthetic_speech(num_samples, _item_seed(self.seed, 1, index),
                                self.sample_rate)

    def noise(self, index: int, num_samples: int) -> np.ndarray:
        return synthetic_noise(num_samples, _item_seed(self.seed, 2, index),
                               sample_rate=self.sample_rate)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "seed": self.seed}


class WavCorpus:
    """WAV files under ``root/speech`` and ``root/noise`` (sorted by name)."""

    kind = "wav"

    def __init__(self, root, sample_rate: int = 16000):
        self.root = Path(root)
        self.sample_rate = sample_rate
        self.speech_files = sorted((self.root / "speech").glob("*.wav"))
        self.noise_files = sorted((self.root / "noise").glob("*.wav"))
        if not self.speech_files:
            raise CorpusError(f"no speech WAV files under {self.root / 'speech'}")
        self.num_speech = len(self.speech_files)
        self.num_noise = len(self.noise_files)
        self._cache: dict[Path, np.ndarray] = {}

    def _load(self, path: Path) -> np.ndarray:
        if path not in self._cache:
            sig, sr = read_wav(path)
            if sr != self.sample_rate:
                raise CorpusError(f"{path}: sample rate {sr}, expected {self.sample_rate}")
            self._cache[path] = sig[0]
        return self._cache[path]

    @staticmethod
    def _fit(sig: np.ndarray, n: int) -> np.ndarray:
        if sig.shape[-1] >= n:
            return sig[:n].copy()
        return np.tile(sig, int(np.ceil(n / sig.shape[-1])))[:n]

    def speech(self, index: int, num_samples: int) -> np.ndarray:
        return self._fit(self._load(self.speech_files[index % self.num_speech]), num_samples)

    def noise(self, index: int, num_samples: int) -> np.ndarray:
        if not self.noise_files:
            raise CorpusError(f"no noise WAV files under {self.root / 'noise'}")
        return self._fit(self._load(self.noise_files[index % self.num_noise]), num_samples)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "root": str(self.root)}
