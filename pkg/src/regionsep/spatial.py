"""Inter-channel phase/level differences and direction features."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dsp import Spectrogram, StftConfig
from .geometry import SPEED_OF_SOUND, MicPair, tdoa_distance
from .tensorio import write_tensors

__all__ = [
    "FeaturePack",
    "ipd",
    "ild",
    "tpd",
    "tpd_bins",
    "pair_phasors",
    "direction_feature",
    "direction_features_from_phasors",
    "compute_features",
    "dump_features",
]

ILD_FLOOR = 1e-8


def _split(spec, pairs):
    data = spec.data if isinstance(spec, Spectrogram) else np.asarray(spec)
    i1 = [p.p1 for p in pairs]
    i2 = [p.p2 for p in pairs]
    # channel axis is the one preceding [frames, bins]
    return np.take(data, i1, axis=-3), np.take(data, i2, axis=-3)


def _wrap_pi(x):
    """Wrap radians to (-pi, pi]."""
    out = np.mod(x + np.pi, 2 * np.pi) - np.pi
    return np.where(out <= -np.pi, out + 2 * np.pi, out)


def ipd(spec, pairs: Sequence[MicPair]) -> np.ndarray:
    """Phase difference angle(Y_p1) - angle(Y_p2), wrapped to (-pi, pi]; [..., P, T, F]."""
    y1, y2 = _split(spec, pairs)
    return _wrap_pi(np.angle(y1) - np.angle(y2))


def ild(spec, pairs: Sequence[MicPair]) -> np.ndarray:
    """Level difference in dB with magnitudes floored at 1e-8; [..., P, T, F]."""
    y1, y2 = _split(spec, pairs)
    a1 = np.maximum(np.abs(y1), ILD_FLOOR)
    a2 = np.maximum(np.abs(y2), ILD_FLOOR)
    return 20.0 * np.log10(a1 / a2)


def tpd(pair: MicPair, azimuth, elevation, freq_hz, v: float = SPEED_OF_SOUND):
    """Theoretical phase difference 2*pi*f*tdoa/v (radians) at physical frequency."""
    if v <= 0:
        raise ValueError("sound speed must be positive")
    return 2 * np.pi * np.asarray(freq_hz, dtype=float) * tdoa_distance(pair, azimuth, elevation) / v


def tpd_bins(pairs: Sequence[MicPair], azimuth, elevation, cfg: StftConfig,
             v: float = SPEED_OF_SOUND) -> np.ndarray:
    """TPD per pair and STFT bin, [P, F], via bin/fft_size times the delay in samples."""
    k = np.arange(cfg.num_bins)
    delay = np.array([tdoa_distance(p, azimuth, elevation) for p in pairs]) * cfg.sample_rate / v
    return 2 * np.pi * (k[None, :] / cfg.fft_size) * delay[:, None]


def pair_phasors(spec, pairs: Sequence[MicPair]) -> np.ndarray:
    """Unit phasors exp(j*IPD) per pair and bin; zero-magnitude bins map to 1."""
    y1, y2 = _split(spec, pairs)
    cross = y1 * np.conj(y2)
    mag = np.abs(cross)
    # bins where either channel is zero have IPD 0, matching ipd()
    return np.where(mag > 0, cross / np.where(mag > 0, mag, 1.0), 1.0 + 0j)


def direction_features_from_phasors(phasors: np.ndarray, steer_tpd: np.ndarray,
                                    normalize: bool = False) -> np.ndarray:
    """Sum over pairs of <e^IPD, e^TPD> for N hypotheses.

    phasors: [..., P, T, F] complex; steer_tpd: [N, P, F] radians.
    Returns [..., N, T, F].
    """
    # 2-vector inner product: cos(ipd)cos(tpd) + sin(ipd)sin(tpd)
    # batched over f as [..., F, T, 2P] @ [F, 2P, N]
    steer = np.concatenate([np.cos(steer_tpd), np.sin(steer_tpd)], axis=-2)
    x = np.concatenate([phasors.real, phasors.imag], axis=-3)
    x = np.moveaxis(x, -3, -1)  # [..., T, F, 2P]
    x = np.swapaxes(x, -3, -2)  # [..., F, T, 2P]
    v = np.matmul(x, np.transpose(steer, (2, 1, 0)))  # [..., F, T, N]
    v = np.moveaxis(v, -1, -3)  # [..., N, F, T]
    v = np.swapaxes(v, -2, -1)
    if normalize:
        v = v / steer_tpd.shape[-2]
    return v


def direction_feature(spec, pairs: Sequence[MicPair], azimuth, elevation=0.0,
                      v: float = SPEED_OF_SOUND, normalize: bool = False) -> np.ndarray:
    """Direction feature V(t, f) for one hypothesized direction; [..., T, F].

    ``azimuth`` may also be a 1-D array, giving [..., N, T, F].
    """
    cfg = spec.config
    az = np.atleast_1d(np.asarray(azimuth, dtype=float))
    steer = np.stack([tpd_bins(pairs, a, elevation, cfg, v) for a in az])
    out = direction_features_from_phasors(pair_phasors(spec, pairs), steer, normalize)
    return out[..., 0, :, :] if np.ndim(azimuth) == 0 else out


@dataclass
class FeaturePack:
    ipd: np.ndarray
    ild: np.ndarray
    pairs: list[MicPair]

    def __post_init__(self):
        if self.ipd.shape != self.ild.shape:
            raise ValueError("ipd and ild shapes differ")


def compute_features(spec: Spectrogram, pairs: Sequence[MicPair]) -> FeaturePack:
    return FeaturePack(ipd(spec, pairs), ild(spec, pairs), list(pairs))


def dump_features(path, pack: FeaturePack, cfg: StftConfig) -> Path:
    """Write the tensors to ``path`` and a JSON sidecar next to it."""
    path = Path(path)
    pairs = [[p.p1, p.p2] for p in pack.pairs]
    config_hash = hashlib.sha256(
        json.dumps({"stft": cfg.to_dict(), "pairs": pairs}, sort_keys=True).encode()
    ).hexdigest()[:16]
    meta = {
        "shapes": {"ipd": list(pack.ipd.shape), "ild": list(pack.ild.shape)},
        "pairs": pairs,
        "stft": cfg.to_dict(),
        "config_hash": config_hash,
    }
    write_tensors(path, {"ipd": pack.ipd, "ild": pack.ild}, meta)
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps(meta, indent=2))
    return sidecar
