"""Conical and ring queries built from the direction (A) and distance (D) models."""
from __future__ import annotations

from typing import Callable, Union

import numpy as np

from ..dsp import Spectrogram, StftConfig, istft, stft
from ..geometry import QueryRegion
from .model import BandSplitModel

__all__ = ["SCHEMES", "masker", "compose_conical", "ring_extract", "spherical_extract"]

SCHEMES = ("A&D", "D->A", "A->D")

# (multichannel waveform [M, L], query) -> complex mask [T', F]
MaskFn = Callable[[np.ndarray, QueryRegion], np.ndarray]


def masker(model: Union[BandSplitModel, MaskFn]) -> MaskFn:
    if isinstance(model, BandSplitModel):
        return lambda x, q: model.forward(x, q).mask_complex()[0]
    return model


def _apply_all(spec: Spectrogram, mask: np.ndarray) -> np.ndarray:
    """Mask every channel and return the multichannel waveform."""
    return istft(Spectrogram(spec.data * mask, spec.config, spec.length))


def compose_conical(a_model, d_model, mixture: np.ndarray, query: QueryRegion,
                    scheme: str = "A->D", cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Extract a conical region with an angular model and a distance model.

    ``A&D`` keeps, per bin, whichever masked reference spectrum has the smaller
    magnitude. The cascades mask all channels with the first model and run
    the second model on the resulting multichannel waveform.
    """
    if query.variant != "conical":
        raise ValueError(f"compose_conical needs a conical query, got {query.variant}")
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; choose from {SCHEMES}")
    fa, fd = masker(a_model), masker(d_model)
    q_a = QueryRegion.angular(query.az_low, query.az_high, query.el_low, query.el_high)
    q_d = QueryRegion.spherical(query.dist_high)
    x = np.asarray(mixture, dtype=float)
    spec = stft(x, cfg)
    if scheme == "A&D":
        za = spec.data[0] * fa(x, q_a)
        zd = spec.data[0] * fd(x, q_d)
        z = np.where(np.abs(za) <= np.abs(zd), za, zd)
        return istft(Spectrogram(z, cfg, spec.length))
    first, second = ((fd, q_d), (fa, q_a)) if scheme == "D->A" else ((fa, q_a), (fd, q_d))
    stage1 = _apply_all(spec, first[0](x, first[1]))
    spec2 = stft(stage1, cfg)
    return istft(Spectrogram(spec2.data[0] * second[0](stage1, second[1]), cfg, spec2.length))


def spherical_extract(d_model, mixture: np.ndarray, radius: float,
                      cfg: StftConfig = StftConfig()) -> np.ndarray:
    x = np.asarray(mixture, dtype=float)
    if isinstance(d_model, BandSplitModel):
        return d_model.extract(x, QueryRegion.spherical(radius))
    spec = stft(x, cfg)
    mask = d_model(x, QueryRegion.spherical(radius))
    return istft(Spectrogram(spec.data[0] * mask, cfg, spec.length))


def ring_extract(d_model, mixture: np.ndarray, inner: float, outer: float,
                 cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Sources with inner < d <= outer as output(outer) - output(inner)."""
    QueryRegion.ring(inner, outer)  # validates the radii
    return spherical_extract(d_model, mixture, outer, cfg) - spherical_extract(d_model, mixture, inner, cfg)
