"""STFT analysis/synthesis and WAV IO."""
from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.io import wavfile
from scipy.signal import get_window

__all__ = ["StftConfig", "Spectrogram", "stft", "istft", "read_wav", "write_wav"]


@dataclass(frozen=True)
class StftConfig:
    sample_rate: int = 16000
    window_len: int = 512
    hop: int = 128
    fft_size: int = 512

    def __post_init__(self):
        if self.window_len > self.fft_size:
            raise ValueError("window_len must not exceed fft_size")
        if self.window_len % 2:
            raise ValueError("window_len must be even")
        if self.hop <= 0 or 2 * self.hop > self.window_len:
            raise ValueError("hop must give at least 50% overlap")

    @property
    def num_bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def bin_hz(self) -> float:
        return self.sample_rate / self.fft_size

    @property
    def pad(self) -> int:
        return self.window_len // 2

    def freqs(self) -> np.ndarray:
        return np.arange(self.num_bins) * self.bin_hz

    def window(self) -> np.ndarray:
        # periodic Hann: constant overlap-add at 50% and 75% overlap
        win = get_window("hann", self.window_len, fftbins=True)
        lpad = (self.fft_size - self.window_len) // 2
        return np.pad(win, (lpad, self.fft_size - self.window_len - lpad))

    def num_frames(self, length: int) -> int:
        return (length + 2 * self.pad - self.fft_size) // self.hop + 1

    def to_dict(self) -> dict:
        return dict(sample_rate=self.sample_rate, window_len=self.window_len,
                    hop=self.hop, fft_size=self.fft_size)


@dataclass
class Spectrogram:
    """Complex STFT ``data`` shaped [..., frames, bins] (channels lead)."""

    data: np.ndarray
    config: StftConfig
    length: int

    def __post_init__(self):
        if self.data.shape[-1] != self.config.num_bins:
            raise ValueError(
                f"bin count {self.data.shape[-1]} does not match config ({self.config.num_bins})"
            )

    @property
    def num_channels(self) -> int:
        return self.data.shape[0] if self.data.ndim > 2 else 1

    @property
    def num_frames(self) -> int:
        return self.data.shape[-2]

    def channel(self, m: int) -> "Spectrogram":
        return Spectrogram(self.data[m], self.config, self.length)


def frame_signal(signal: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Reflect-pad and cut into windowed frames [..., frames, fft_size]."""
    x = np.asarray(signal, dtype=float)
    pad = [(0, 0)] * (x.ndim - 1) + [(cfg.pad, cfg.pad)]
    x = np.pad(x, pad, mode="reflect")
    frames = sliding_window_view(x, cfg.fft_size, axis=-1)[..., :: cfg.hop, :]
    return frames * cfg.window()


def stft(signal, cfg: StftConfig = StftConfig()) -> Spectrogram:
    """STFT of a waveform shaped [T] or [channels, T]."""
    x = np.asarray(signal, dtype=float)
    if x.size == 0 or x.shape[-1] == 0:
        raise ValueError("cannot transform an empty signal")
    if x.shape[-1] <= cfg.pad:
        raise ValueError(f"signal shorter than half a window ({cfg.pad} samples)")
    return Spectrogram(np.fft.rfft(frame_signal(x, cfg), axis=-1), cfg, x.shape[-1])


def ola_norm(cfg: StftConfig, num_frames: int) -> np.ndarray:
    """Summed squared synthesis window over the padded signal."""
    w2 = cfg.window() ** 2
    total = (num_frames - 1) * cfg.hop + cfg.fft_size
    acc = np.zeros(total)
    for t in range(num_frames):
        acc[t * cfg.hop: t * cfg.hop + cfg.fft_size] += w2
    return acc


def overlap_add(frames: np.ndarray, hop: int) -> np.ndarray:
    *lead, n_frames, n = frames.shape
    out = np.zeros((*lead, (n_frames - 1) * hop + n))
    for t in range(n_frames):
        out[..., t * hop: t * hop + n] += frames[..., t, :]
    return out


def istft(spec: Spectrogram, length: int | None = None) -> np.ndarray:
    """Inverse STFT by weighted overlap-add, normalized by the squared-window sum."""
    cfg = spec.config
    length = spec.length if length is None else length
    n_frames = spec.data.shape[-2]
    if cfg.num_frames(length) != n_frames:
        raise ValueError(
            f"{n_frames} frames inconsistent with length {length} under {cfg}"
        )
    frames = np.fft.irfft(spec.data, n=cfg.fft_size, axis=-1) * cfg.window()
    out = overlap_add(frames, cfg.hop)
    norm = ola_norm(cfg, n_frames)
    out = out / np.where(norm > 1e-10, norm, 1.0)
    return out[..., cfg.pad: cfg.pad + length]


# ---------------------------------------------------------------- WAV IO


def read_wav(path) -> tuple[np.ndarray, int]:
    """Return (signal [channels, T] float64, sample_rate)."""
    sr, data = wavfile.read(path)
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    else:
        x = data.astype(np.float64)
    x = x[:, None] if x.ndim == 1 else x
    return np.ascontiguousarray(x.T), int(sr)


def write_wav(path, signal, sample_rate: int = 16000, dtype: str = "float32") -> None:
    """Write [T] or [channels, T] atomically as PCM16 or float32."""
    x = np.asarray(signal, dtype=np.float64)
    x = x[None] if x.ndim == 1 else x
    if dtype == "float32":
        data = x.T.astype(np.float32)
    elif dtype == "pcm16":
        data = np.clip(np.round(x.T * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise ValueError(f"unsupported WAV sample format {dtype!r}")
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".wav.tmp")
    os.close(fd)
    try:
        wavfile.write(tmp, sample_rate, data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
