"""Direction sampling within a query, band layouts, view aggregation and
distance embeddings."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .autodiff import Tensor, as_tensor, concat, lstm, stack, tanh
from .dsp import StftConfig
from .geometry import MicPair, QueryRegion, tdoa_distance, wrap_deg

log = logging.getLogger(__name__)

__all__ = [
    "SamplingStrategy", "BandLayout", "RegionDescriptor",
    "sample_directions", "build_band_layout", "tdoa_sort_order",
    "AGG_METHODS", "descriptor_dim", "init_aggregator", "aggregate",
    "init_deg", "deg_forward", "DEG_RANGE",
]

AGG_METHODS = ("concat", "tac", "taa", "rnn", "rnn-loop")
DEG_RANGE = (0.2, 2.0)


@dataclass(frozen=True)
class SamplingStrategy:
    kind: str  # "interval" (degrees) or "number"
    value: float

    def __post_init__(self):
        if self.kind == "interval":
            if not self.value > 0:
                raise ValueError("sampling interval must be positive")
        elif self.kind == "number":
            if self.value < 2 or int(self.value) != self.value:
                raise ValueError("fixed-number sampling needs an integer N >= 2")
        else:
            raise ValueError(f"unknown sampling strategy {self.kind!r}")

    @classmethod
    def parse(cls, text: str) -> "SamplingStrategy":
        """'interval:15' or 'number:8'."""
        kind, _, val = text.partition(":")
        return cls(kind, float(val))

    def __str__(self):
        v = int(self.value) if self.value == int(self.value) else self.value
        return f"{self.kind}:{v}"


def sample_directions(region: QueryRegion, strategy: SamplingStrategy) -> np.ndarray:
    """Azimuths (degrees) sampled across the query's azimuth window."""
    if not region.has_direction:
        raise ValueError(f"{region.variant} query has no azimuth window")
    low, width = region.az_low, region.azimuth_width
    if strategy.kind == "number":
        n = int(strategy.value)
        offsets = np.arange(n) * (width / (n - 1))
    else:
        n = int(math.floor(width / strategy.value + 1e-9)) + 1
        offsets = np.arange(n) * strategy.value
    out = low + offsets
    # keep unwrapped values when the window does not cross +-180
    return out if out.max() <= 180.0 else wrap_deg(out)


def tdoa_sort_order(azimuths, pairs: Sequence[MicPair], elevation: float = 0.0) -> np.ndarray:
    """Stable order of views by pair-averaged far-field TDOA."""
    key = np.mean([tdoa_distance(p, azimuths, elevation) for p in pairs], axis=0)
    return np.argsort(np.atleast_1d(key), kind="stable")


# ------------------------------------------------------------------ bands

_SCHEMES_HZ = {
    "bs1": [100.0] * 10 + [200.0] * 12 + [500.0] * 8,
    "bs2": [200.0] * 5 + [500.0] * 6 + [1000.0] * 4,
    "toy4": [500.0, 1000.0, 2500.0],
    "full": [],
}


@dataclass(frozen=True)
class BandLayout:
    starts: tuple[int, ...]
    num_bins: int

    def __post_init__(self):
        s = self.starts
        if not s or s[0] != 0:
            raise ValueError("band layout must start at bin 0")
        if any(b <= a for a, b in zip(s, s[1:])):
            raise ValueError(f"band starts must increase strictly (overlap or empty band): {s}")
        if s[-1] >= self.num_bins:
            raise ValueError("band start beyond the last bin")

    @property
    def num_bands(self) -> int:
        return len(self.starts)

    @property
    def bounds(self) -> list[tuple[int, int]]:
        ends = list(self.starts[1:]) + [self.num_bins]
        return list(zip(self.starts, ends))

    @property
    def widths(self) -> list[int]:
        return [b - a for a, b in self.bounds]

    @classmethod
    def from_widths(cls, widths: Sequence[int], num_bins: int) -> "BandLayout":
        widths = [int(w) for w in widths]
        if any(w <= 0 for w in widths):
            raise ValueError("band widths must be positive")
        if sum(widths) != num_bins:
            raise ValueError(f"band widths sum to {sum(widths)}, expected {num_bins} (gap or overlap)")
        return cls(tuple(int(v) for v in np.cumsum([0] + widths[:-1])), num_bins)

    def to_dict(self) -> dict:
        return {"starts": list(self.starts), "num_bins": self.num_bins}


def build_band_layout(scheme, cfg: StftConfig = StftConfig()) -> BandLayout:
    """Named scheme ('bs1', 'bs2', 'toy4', 'full'), a list of Hz bandwidths, or
    an explicit dict {'widths': [bins...]}.

    Bandwidths accumulate to boundary frequencies, each rounded to the nearest
    bin; the last band absorbs the remainder up to and including Nyquist.
    """
    F = cfg.num_bins
    if isinstance(scheme, Mapping):
        return BandLayout.from_widths(scheme["widths"], F)
    if isinstance(scheme, str):
        try:
            widths_hz = _SCHEMES_HZ[scheme]
        except KeyError:
            raise ValueError(f"unknown band scheme {scheme!r}") from None
    else:
        widths_hz = [float(w) for w in scheme]
    edges = np.cumsum(widths_hz)
    bins = [int(math.floor(e / cfg.bin_hz + 0.5)) for e in edges]
    starts = [0] + [b for b in bins if b < F - 1]
    return BandLayout(tuple(starts), F)


# ------------------------------------------------------------ aggregation


def descriptor_dim(method: str, n_views: int, bandwidth: int, P: int) -> int:
    return {
        "concat": n_views * bandwidth,
        "tac": n_views * P,
        "taa": P,
        "rnn": P,
        "rnn-loop": 2 * P,
    }[method]


@dataclass
class RegionDescriptor:
    """Per-band descriptors, each [..., T, D_k]."""

    bands: list[Tensor]
    method: str

    @property
    def dims(self) -> list[int]:
        return [b.shape[-1] for b in self.bands]


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_linear(rng, n_in, n_out, prefix, out: dict) -> None:
    out[f"{prefix}.w"] = _uniform(rng, (n_out, n_in), n_in)
    out[f"{prefix}.b"] = _uniform(rng, (n_out,), n_in)


def init_lstm(rng, n_in, hidden, prefix, out: dict) -> None:
    out[f"{prefix}.w_in"] = _uniform(rng, (4 * hidden, n_in), hidden)
    out[f"{prefix}.w_rec"] = _uniform(rng, (4 * hidden, hidden), hidden)
    out[f"{prefix}.b"] = _uniform(rng, (4 * hidden,), hidden)


def linear(x, p: Mapping[str, Tensor], prefix: str) -> Tensor:
    return as_tensor(x) @ p[f"{prefix}.w"].swapaxes(0, 1) + p[f"{prefix}.b"]


def run_lstm(x, p: Mapping[str, Tensor], prefix: str, reverse: bool = False) -> Tensor:
    return lstm(as_tensor(x), p[f"{prefix}.w_in"], p[f"{prefix}.w_rec"], p[f"{prefix}.b"], reverse)


def init_aggregator(method: str, layout: BandLayout, P: int, rng: np.random.Generator,
                    prefix: str = "agg") -> dict[str, np.ndarray]:
    if method not in AGG_METHODS:
        raise ValueError(f"unknown aggregation method {method!r}")
    params: dict[str, np.ndarray] = {}
    for k, bw in enumerate(layout.widths):
        if method in ("tac", "taa"):
            init_linear(rng, bw, P, f"{prefix}.{k}.fc1", params)
            init_linear(rng, P, P, f"{prefix}.{k}.fc2", params)
        elif method in ("rnn", "rnn-loop"):
            init_lstm(rng, bw, P, f"{prefix}.{k}.lstm", params)
    return params


def _aggregate_band(views: Tensor, method: str, p, prefix: str) -> Tensor:
    """views: [B, N, T, BW] -> [B, T, D]."""
    B, N, T, BW = views.shape
    if method == "concat":
        return views.transpose(0, 2, 1, 3).reshape(B, T, N * BW)
    if method in ("tac", "taa"):
        h = tanh(linear(views, p, f"{prefix}.fc1"))
        h = linear(h, p, f"{prefix}.fc2")  # [B, N, T, P]
        if method == "taa":
            return h.mean(axis=1)
        return h.transpose(0, 2, 1, 3).reshape(B, T, -1)
    if method == "rnn-loop":
        views = concat([views, views[:, :1]], axis=1)
        N += 1
    seq = views.transpose(0, 2, 1, 3).reshape(B * T, N, BW)
    out = run_lstm(seq, p, f"{prefix}.lstm")  # [B*T, N, P]
    if method == "rnn":
        return out[:, -1].reshape(B, T, -1)
    return concat([out[:, -2], out[:, -1]], axis=-1).reshape(B, T, -1)


def aggregate(features, method: str, params: Mapping, layout: BandLayout,
              prefix: str = "agg") -> RegionDescriptor:
    """Aggregate sampled direction features into per-band region descriptors.

    ``features`` is [B, N, T, F] (or [N, T, F]) with views already in the
    intended order (TDOA-sorted for the recurrent methods).
    """
    if method not in AGG_METHODS:
        raise ValueError(f"unknown aggregation method {method!r}")
    feats = as_tensor(features)
    if feats.ndim == 3:
        feats = feats.reshape(1, *feats.shape)
    if feats.shape[-1] != layout.num_bins:
        raise ValueError("feature bins do not match the band layout")
    p = {k: as_tensor(v) for k, v in params.items()}
    bands = []
    for k, (lo, hi) in enumerate(layout.bounds):
        pre = f"{prefix}.{k}"
        if method in ("tac", "taa"):
            if p[f"{pre}.fc1.w"].shape[1] != hi - lo:
                raise ValueError(f"band {k}: aggregator expects {p[f'{pre}.fc1.w'].shape[1]} bins, got {hi - lo}")
        elif method in ("rnn", "rnn-loop"):
            if p[f"{pre}.lstm.w_in"].shape[1] != hi - lo:
                raise ValueError(f"band {k}: aggregator expects {p[f'{pre}.lstm.w_in'].shape[1]} bins, got {hi - lo}")
        bands.append(_aggregate_band(feats[..., lo:hi], method, p, pre))
    return RegionDescriptor(bands, method)


# ------------------------------------------------------- distance embedding


def init_deg(layout: BandLayout, P: int, rng: np.random.Generator, hidden: int = 32,
             prefix: str = "deg") -> dict[str, np.ndarray]:
    params: dict[str, np.ndarray] = {}
    for k in range(layout.num_bands):
        init_linear(rng, 1, hidden, f"{prefix}.{k}.fc1", params)
        init_linear(rng, hidden, hidden, f"{prefix}.{k}.fc2", params)
        init_linear(rng, hidden, P, f"{prefix}.{k}.fc3", params)
    return params


def clamp_distance(d: float) -> float:
    if not math.isfinite(d):
        raise ValueError(f"distance must be finite, got {d}")
    lo, hi = DEG_RANGE
    if not lo <= d <= hi:
        log.warning("distance %.3f m outside [%.1f, %.1f]; clamped", d, lo, hi)
        return min(max(d, lo), hi)
    return d


def deg_forward(d, params: Mapping, layout: BandLayout, prefix: str = "deg") -> list[Tensor]:
    """Per-band embeddings E_k(d), each [B, P] for distances ``d`` (scalar, [B] or Tensor)."""
    if isinstance(d, Tensor):
        if not np.all(np.isfinite(d.value)):
            raise ValueError("distance must be finite")
        x = d.reshape(-1, 1)
    else:
        vals = [clamp_distance(float(v)) for v in np.atleast_1d(d)]
        x = Tensor(np.array(vals)[:, None])
    p = {k: as_tensor(v) for k, v in params.items()}
    out = []
    for k in range(layout.num_bands):
        h = tanh(linear(x, p, f"{prefix}.{k}.fc1"))
        h = tanh(linear(h, p, f"{prefix}.{k}.fc2"))
        out.append(linear(h, p, f"{prefix}.{k}.fc3"))
    return out
