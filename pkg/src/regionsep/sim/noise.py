"""Diffuse and babble noise fields."""
from __future__ import annotations

import numpy as np
from scipy.signal import oaconvolve

from ..geometry import SPEED_OF_SOUND, MicArray, SourcePose
from .rir import RoomSpec, simulate_rir

__all__ = ["spherical_coherence", "make_isotropic_noise", "make_babble", "render",
           "CorpusError", "BABBLE_COUNT", "BABBLE_MIN_DISTANCE"]

BABBLE_COUNT = (10, 20)
BABBLE_MIN_DISTANCE = 1.5


class CorpusError(ValueError):
    pass


def spherical_coherence(freqs_hz, distance, v: float = SPEED_OF_SOUND):
    """sin(kd)/(kd) with k = 2*pi*f/v."""
    return np.sinc(2 * np.asarray(freqs_hz, dtype=float) * distance / v)


def make_isotropic_noise(num_samples: int, array: MicArray, seed: int,
                         sample_rate: int = 16000, v: float = SPEED_OF_SOUND) -> np.ndarray:
    """Unit-variance Gaussian noise with spherical-isotropic inter-channel coherence; [M, T].

    White noise is mixed per frequency bin by a factor C with C C^H equal to
    the coherence matrix.
    """
    rng = np.random.default_rng(seed)
    M = array.num_mics
    white = rng.standard_normal((M, num_samples))
    if M == 1:
        return white
    spec = np.fft.rfft(white, axis=-1)
    freqs = np.fft.rfftfreq(num_samples, 1.0 / sample_rate)
    pos = array.positions
    dist = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
    gamma = spherical_coherence(freqs[:, None, None], dist[None], v)  # [F, M, M]
    lam, vec = np.linalg.eigh(gamma)
    mix = vec * np.sqrt(np.maximum(lam, 0.0))[:, None, :]
    out = np.einsum("fij,jf->if", mix, spec)
    return np.fft.irfft(out, n=num_samples, axis=-1)


def render(signal: np.ndarray, filters: np.ndarray) -> np.ndarray:
    """Convolve a mono signal with [M, taps] filters, truncated to the signal length."""
    out = oaconvolve(signal[None, :], filters, axes=-1)
    return out[:, : signal.shape[-1]]


def _babble_pose(rng, room: RoomSpec, center: np.ndarray, margin: float):
    for _ in range(1000):
        p = rng.uniform(margin, np.asarray(room.dims) - margin)
        p[2] = rng.uniform(max(margin, 1.0), min(room.dims[2] - margin, 1.8))
        rel = p - center
        if np.linalg.norm(rel) >= BABBLE_MIN_DISTANCE:
            return SourcePose.from_cartesian(rel)
    raise ValueError(f"room {room.dims} leaves no babble position 1.5 m from the array")


def draw_babble_layout(room: RoomSpec, array_center, seed: int, count=None,
                       margin: float = 0.5) -> list[SourcePose]:
    """Speaker poses for a babble field, count drawn in [10, 20] unless given."""
    rng = np.random.default_rng(seed)
    if count is None:
        count = int(rng.integers(BABBLE_COUNT[0], BABBLE_COUNT[1] + 1))
    center = np.asarray(array_center, dtype=float)
    return [_babble_pose(rng, room, center, margin) for _ in range(count)]


def make_babble(room: RoomSpec, array_center, array: MicArray, waveforms, seed: int,
                num_samples: int, poses=None, margin: float = 0.5) -> tuple[np.ndarray, list[SourcePose]]:
    """Sum of individually reverberated speakers at least 1.5 m from the array.

    ``waveforms`` is a sequence of mono signals, one per speaker; at least 10
    are required. Returns the [M, T] field and the speaker poses.
    """
    waveforms = list(waveforms)
    if len(waveforms) < BABBLE_COUNT[0]:
        raise CorpusError(f"babble needs at least {BABBLE_COUNT[0]} speaker waveforms, got {len(waveforms)}")
    rng = np.random.default_rng(seed)
    if poses is None:
        poses = draw_babble_layout(room, array_center, int(rng.integers(2**31)), margin=margin)
    if len(poses) > len(waveforms):
        raise CorpusError(f"{len(poses)} babble speakers but only {len(waveforms)} waveforms")
    out = np.zeros((array.num_mics, num_samples))
    for i, pose in enumerate(poses):
        if pose.distance < BABBLE_MIN_DISTANCE:
            raise ValueError(f"babble speaker {i} at {pose.distance:.2f} m is closer than 1.5 m")
        sig = _fit_length(waveforms[i], num_samples)
        rir = simulate_rir(room, array_center, array, pose, seed=int(rng.integers(2**31)))
        out += render(sig, rir.filters)
    return out, list(poses)


def _fit_length(sig: np.ndarray, n: int) -> np.ndarray:
    sig = np.asarray(sig, dtype=float)
    if sig.shape[-1] >= n:
        return sig[:n]
    reps = int(np.ceil(n / sig.shape[-1]))
    return np.tile(sig, reps)[:n]
