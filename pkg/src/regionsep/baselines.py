"""Classical and oracle beamformers: delay-and-sum, IRM-MVDR, CSM-MVDR.

All functions work on multichannel STFTs ``[M, T, F]`` and return the
single-channel beamformed STFT ``[T, F]`` at reference-channel scale.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsp import Spectrogram, StftConfig, istft, stft
from .geometry import SPEED_OF_SOUND, MicArray, direction_vector

__all__ = [
    "SpatialCovariance", "SingularCovarianceError", "steering_vector", "das_beamform",
    "ideal_ratio_mask", "covariance_from_mask", "covariance_from_target", "mvdr_weights",
    "apply_weights", "irm_mvdr", "csm_mvdr", "beamform_waveform", "LOADING",
]

LOADING = 1e-6


class SingularCovarianceError(ArithmeticError):
    pass


@dataclass
class SpatialCovariance:
    target: np.ndarray  # [F, M, M]
    noise: np.ndarray  # [F, M, M]

    def __post_init__(self):
        for name in ("target", "noise"):
            r = getattr(self, name)
            if r.ndim != 3 or r.shape[1] != r.shape[2]:
                raise ValueError(f"{name} covariance must be [F, M, M], got {r.shape}")
            if np.max(np.abs(r - np.conj(np.swapaxes(r, 1, 2))), initial=0.0) > 1e-10 * max(1.0, np.abs(r).max(initial=0.0)):
                raise ValueError(f"{name} covariance is not Hermitian")


def steering_vector(array: MicArray, azimuth, elevation, cfg: StftConfig, ref: int = 0,
                    v: float = SPEED_OF_SOUND) -> np.ndarray:
    """Plane-wave steering [F, M] relative to mic ``ref`` (d_ref = 1)."""
    u = direction_vector(azimuth, elevation)
    # a mic closer to the source hears the wave earlier by (p_m - p_ref).u / v
    lead = (array.positions - array.positions[ref]) @ u / v
    omega = 2 * np.pi * cfg.freqs()
    return np.exp(1j * omega[:, None] * lead[None, :])


def das_beamform(spec: Spectrogram, array: MicArray, azimuth, elevation=0.0, ref: int = 0,
                 v: float = SPEED_OF_SOUND) -> np.ndarray:
    """Average of the channels phase-aligned to the reference mic; [T, F]."""
    if spec.num_channels != array.num_mics:
        raise ValueError(f"spectrogram has {spec.num_channels} channels, array has {array.num_mics}")
    d = steering_vector(array, azimuth, elevation, spec.config, ref, v)  # [F, M]
    return np.einsum("fm,mtf->tf", np.conj(d), spec.data) / array.num_mics


def ideal_ratio_mask(target_ref: np.ndarray, noise_ref: np.ndarray) -> np.ndarray:
    """|S| / (|S| + |N|) per bin; 0 where both vanish."""
    s, n = np.abs(target_ref), np.abs(noise_ref)
    den = s + n
    return np.divide(s, den, out=np.zeros_like(s), where=den > 0)


def _outer(x: np.ndarray, weight: np.ndarray | None = None) -> np.ndarray:
    """Sum over frames of (w) x x^H; x [M, T, F] -> [F, M, M]."""
    if weight is not None:
        x = x * np.sqrt(weight)[None]
    return np.einsum("mtf,ntf->fmn", x, np.conj(x))


def covariance_from_mask(mixture: np.ndarray, mask: np.ndarray) -> SpatialCovariance:
    """Mask-weighted target covariance and (1 - mask)-weighted noise covariance."""
    mask = np.clip(np.asarray(mask, dtype=float), 0.0, 1.0)
    return SpatialCovariance(_outer(mixture, mask), _outer(mixture, 1.0 - mask))


def covariance_from_target(mixture: np.ndarray, target: np.ndarray) -> SpatialCovariance:
    """Covariances from the target image and the residual mixture - target."""
    return SpatialCovariance(_outer(target), _outer(mixture - target))


def mvdr_weights(cov: SpatialCovariance, ref: int = 0, loading: float = LOADING) -> np.ndarray:
    """w(f) = Rn^-1 d / (d^H Rn^-1 d) with d the principal target eigenvector, d_ref = 1.

    Frequencies without target energy get w = 0. Diagonal loading is
    ``loading`` times trace(Rs + Rn) / M, so a noise-free scene stays solvable.
    """
    rs, rn = cov.target, cov.noise
    num_f, m, _ = rs.shape
    w = np.zeros((num_f, m), dtype=complex)
    total = np.real(np.trace(rs, axis1=1, axis2=2) + np.trace(rn, axis1=1, axis2=2))
    for f in range(num_f):
        if np.real(np.trace(rs[f])) <= 0:
            continue
        _, vecs = np.linalg.eigh(rs[f])
        d = vecs[:, -1]
        if abs(d[ref]) < 1e-12:
            continue
        d = d / d[ref]
        r = rn[f] + loading * total[f] / m * np.eye(m)
        try:
            rd = np.linalg.solve(r, d)
        except np.linalg.LinAlgError as exc:
            raise SingularCovarianceError(f"noise covariance singular at bin {f}") from exc
        den = np.vdot(d, rd)
        if not np.isfinite(den) or abs(den) == 0:
            raise SingularCovarianceError(f"degenerate MVDR denominator at bin {f}")
        w[f] = rd / den
    return w


def apply_weights(w: np.ndarray, mixture: np.ndarray) -> np.ndarray:
    """w^H y per bin; w [F, M], mixture [M, T, F] -> [T, F]."""
    return np.einsum("fm,mtf->tf", np.conj(w), mixture)


def irm_mvdr(spec: Spectrogram, mask: np.ndarray, ref: int = 0) -> np.ndarray:
    return apply_weights(mvdr_weights(covariance_from_mask(spec.data, mask), ref), spec.data)


def csm_mvdr(spec: Spectrogram, target: np.ndarray, ref: int = 0) -> np.ndarray:
    """``target`` is the multichannel target STFT [M, T, F]."""
    return apply_weights(mvdr_weights(covariance_from_target(spec.data, target), ref), spec.data)


def beamform_waveform(system: str, mixture: np.ndarray, cfg: StftConfig = StftConfig(), *,
                      array: MicArray | None = None, directions=(), source_images=(), ref: int = 0):
    """Waveform-level baseline output, summed over in-region sources.

    ``directions``: (azimuth, elevation) per in-region source, for ``das``.
    ``source_images``: multichannel [M, L] target image per in-region source,
    for the oracle MVDRs; the noise for each run is the mixture minus that image.
    With no in-region sources the output is zero, as with an all-zero oracle mask.
    """
    spec = stft(mixture, cfg)
    out = np.zeros(spec.data.shape[1:], dtype=complex)
    if system == "das":
        for az, el in directions:
            out += das_beamform(spec, array, az, el, ref)
    elif system in ("irm-mvdr", "csm-mvdr"):
        for img in source_images:
            s = stft(img, cfg).data
            if system == "irm-mvdr":
                mask = ideal_ratio_mask(s[ref], spec.data[ref] - s[ref])
                out += irm_mvdr(spec, mask, ref)
            else:
                out += csm_mvdr(spec, s, ref)
    else:
        raise ValueError(f"unknown baseline {system!r}")
    return istft(Spectrogram(out, cfg, spec.length))
