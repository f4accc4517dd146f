"""Multi-channel band-split RNN conditioned on a query region.

Variant A is conditioned on sampled direction features aggregated into a
region descriptor; variant D on a distance embedding. Both estimate a
complex mask for the reference microphone.

Layout of one forward pass::

    STFT -> per band: [spectral | IPD or ILD | region] -> norm -> FC -> sum   [B, K, T, H]
         -> R x (temporal LSTM residual, band BiLSTM residual)
         -> per band mask MLP with GLU -> complex mask -> iSTFT
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from ..autodiff import Tensor, as_tensor, concat, istft_op, sigmoid, sqrt, stack, tanh
from ..dsp import StftConfig, stft
from ..geometry import SPEED_OF_SOUND, MicArray, QueryRegion, enumerate_pairs, make_pair
from ..region import (
    AGG_METHODS, BandLayout, SamplingStrategy, aggregate, build_band_layout, deg_forward,
    descriptor_dim, init_aggregator, init_deg, init_linear, init_lstm, linear, run_lstm,
    sample_directions, tdoa_sort_order,
)
from ..spatial import direction_features_from_phasors, ild, pair_phasors, tpd_bins

__all__ = ["ModelConfig", "PRESETS", "preset", "BandSplitModel", "ForwardOutput",
           "band_split_fuse", "QueryMismatch"]

BN_MOMENTUM = 0.9
NORM_EPS = 1e-5


class QueryMismatch(ValueError):
    """Query variant not supported by the model variant."""


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "A"
    R: int = 2
    H: int = 8
    P: int = 4
    bands: str | tuple = "toy4"
    array: str | dict = "circ8_5cm"
    pairs: str | tuple = "all"
    aggregation: str = "rnn-loop"
    sampling: str = "number:8"
    spatial: tuple = ()
    normalize_direction: bool = True
    fft_size: int = 512
    hop: int = 128
    sample_rate: int = 16000
    sound_speed: float = SPEED_OF_SOUND
    deg_hidden: int = 32

    def __post_init__(self):
        if self.variant not in ("A", "D"):
            raise ValueError(f"model variant must be 'A' or 'D', got {self.variant!r}")
        for name in ("R", "H", "P"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.aggregation not in AGG_METHODS:
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        strat = SamplingStrategy.parse(self.sampling)
        if self.variant == "A" and self.aggregation in ("concat", "tac") and strat.kind != "number":
            raise ValueError(f"{self.aggregation} aggregation needs a fixed-number sampling strategy")
        if isinstance(self.bands, list):
            object.__setattr__(self, "bands", tuple(self.bands))
        if not isinstance(self.pairs, str):
            # a mic-index subset, or explicit (p1, p2) pairs
            object.__setattr__(self, "pairs", tuple(
                tuple(int(i) for i in p) if isinstance(p, (list, tuple)) else int(p) for p in self.pairs))
        if not self.spatial:
            object.__setattr__(self, "spatial", ("ipd",) if self.variant == "A" else ("ild",))
        object.__setattr__(self, "spatial", tuple(self.spatial))
        for s in self.spatial:
            if s not in ("ipd", "ild"):
                raise ValueError(f"unknown spatial input {s!r}")

    @property
    def stft(self) -> StftConfig:
        return StftConfig(self.sample_rate, self.fft_size, self.hop, self.fft_size)

    @property
    def mic_array(self) -> MicArray:
        return MicArray.preset(self.array) if isinstance(self.array, str) else MicArray.from_dict(self.array)

    @property
    def pair_list(self):
        arr = self.mic_array
        if not isinstance(self.pairs, str) and self.pairs and isinstance(self.pairs[0], tuple):
            return [make_pair(arr, a, b) for a, b in self.pairs]
        return enumerate_pairs(arr, self.pairs)

    @property
    def strategy(self) -> SamplingStrategy:
        return SamplingStrategy.parse(self.sampling)

    @property
    def layout(self) -> BandLayout:
        scheme = list(self.bands) if isinstance(self.bands, tuple) else self.bands
        return build_band_layout(scheme, self.stft)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bands"] = list(self.bands) if isinstance(self.bands, tuple) else self.bands
        if not isinstance(self.pairs, str):
            d["pairs"] = [list(p) if isinstance(p, tuple) else p for p in self.pairs]
        d["spatial"] = list(self.spatial)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        d = dict(d)
        for k in ("bands", "spatial"):
            if isinstance(d.get(k), list):
                d[k] = tuple(d[k])
        return cls(**d)


PRESETS = {
    "bsrnn-m": dict(R=8, H=48, P=16, bands="bs1"),
    "bsrnn-s": dict(R=8, H=36, P=16, bands="bs1"),
    "bsrnn-xs": dict(R=6, H=32, P=16, bands="bs2"),
    "bsrnn-xxs": dict(R=5, H=24, P=16, bands="bs2"),
    "bsrnn-xxxs": dict(R=4, H=16, P=12, bands="bs2"),
    "toy": dict(R=2, H=8, P=4, bands="toy4"),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown model preset {name!r}; known: {sorted(PRESETS)}")
    return ModelConfig(**{**PRESETS[name], **overrides})


# ------------------------------------------------------------- primitives

def _init_norm(n, prefix, out: dict, shape=None):
    shape = (n,) if shape is None else shape
    out[f"{prefix}.g"] = np.ones(shape)
    out[f"{prefix}.b"] = np.zeros(shape)


def batch_norm(x: Tensor, p, buffers: dict, prefix: str, axes: tuple, training: bool,
               update: bool) -> Tensor:
    """Normalize over ``axes``; per-batch statistics in training, running ones otherwise."""
    if training:
        mu = x.mean(axis=axes, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        xhat = xc / sqrt(var + NORM_EPS)
        if update:
            m = BN_MOMENTUM
            buffers[f"{prefix}.mean"] = m * buffers[f"{prefix}.mean"] + (1 - m) * mu.value.reshape(-1)
            buffers[f"{prefix}.var"] = m * buffers[f"{prefix}.var"] + (1 - m) * var.value.reshape(-1)
    else:
        mean = buffers[f"{prefix}.mean"]
        std = np.sqrt(buffers[f"{prefix}.var"] + NORM_EPS)
        xhat = (x - mean) / std
    return xhat * p[f"{prefix}.g"] + p[f"{prefix}.b"]


def layer_norm(x: Tensor, p, prefix: str, axes: tuple) -> Tensor:
    mu = x.mean(axis=axes, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    return xc / sqrt(var + NORM_EPS) * p[f"{prefix}.g"] + p[f"{prefix}.b"]


def _band_flatten(x: np.ndarray, lo: int, hi: int) -> np.ndarray:
    """[B, C, T, F] -> [B, T, C * (hi - lo)] for one band."""
    b = x[..., lo:hi]
    B, C, T, W = b.shape
    return b.transpose(0, 2, 1, 3).reshape(B, T, C * W)


# --------------------------------------------------------------- fusion

def band_split_fuse(spec_bands: Sequence, spatial_bands: Sequence, region_bands: Sequence,
                    params: Mapping, buffers: dict, variant: str, training: bool = False,
                    update_stats: bool = False) -> Tensor:
    """Sum of per-band projections of the spectral, spatial and region paths; [B, K, T, H].

    spec_bands[k]: [B, T, 2*BW_k] (re/im of the reference channel);
    spatial_bands[k]: [B, T, D_sp] or None; region_bands[k]: [B, T, D_k]
    (variant A) or [B, P] distance embeddings (variant D, no normalization).
    """
    K = len(spec_bands)
    if len(region_bands) != K or (spatial_bands and len(spatial_bands) != K):
        raise ValueError("band counts of the fusion paths differ")
    out = []
    for k in range(K):
        x = as_tensor(spec_bands[k])
        if x.shape[-1] != params[f"in.spec.{k}.fc.w"].shape[1]:
            raise ValueError(f"band {k}: spectral input width {x.shape[-1]} does not match the layout")
        h = linear(batch_norm(x, params, buffers, f"in.spec.{k}.bn", (0, 1), training, update_stats),
                   params, f"in.spec.{k}.fc")
        if spatial_bands:
            s = as_tensor(spatial_bands[k])
            h = h + linear(batch_norm(s, params, buffers, f"in.sp.{k}.bn", (0, 1), training, update_stats),
                           params, f"in.sp.{k}.fc")
        r = as_tensor(region_bands[k])
        if variant == "A":
            r = batch_norm(r, params, buffers, f"in.reg.{k}.bn", (0, 1), training, update_stats)
            h = h + linear(r, params, f"in.reg.{k}.fc")
        else:
            # distance embeddings skip normalization; broadcast over frames
            e = linear(r, params, f"in.reg.{k}.fc")
            h = h + e.reshape(e.shape[0], 1, e.shape[1])
        out.append(h)
    return stack(out, axis=1)


@dataclass
class ForwardOutput:
    estimate: Tensor  # [B, L]
    mask: Tensor  # [B, 2, T', F] (re, im)
    masked: Tensor  # [B, 2, T', F]
    length: int
    extras: dict = field(default_factory=dict)

    def mask_complex(self) -> np.ndarray:
        return self.mask.value[:, 0] + 1j * self.mask.value[:, 1]


class BandSplitModel:
    """Parameters, normalization buffers and the forward pass."""

    def __init__(self, config: ModelConfig, seed: int = 0, params=None, buffers=None):
        self.config = config
        self.layout = config.layout
        self.pairs = config.pair_list
        if params is None:
            params, buffers = self._init(np.random.default_rng(seed))
        self.params: dict[str, np.ndarray] = {k: np.asarray(v, dtype=float) for k, v in params.items()}
        self.buffers: dict[str, np.ndarray] = {k: np.asarray(v, dtype=float) for k, v in (buffers or {}).items()}
        self._check_shapes()

    # ---------------------------------------------------------- structure
    def _spatial_dim(self, bw: int) -> int:
        n = len(self.pairs)
        return sum(2 * n * bw if s == "ipd" else n * bw for s in self.config.spatial)

    def _region_dim(self, bw: int) -> int:
        c = self.config
        if c.variant == "D":
            return c.P
        n_views = int(c.strategy.value) if c.strategy.kind == "number" else 1
        return descriptor_dim(c.aggregation, n_views, bw, c.P)

    def _init(self, rng):
        c, H = self.config, self.config.H
        p: dict[str, np.ndarray] = {}
        buf: dict[str, np.ndarray] = {}

        def bn(n, prefix):
            _init_norm(n, prefix, p)
            buf[f"{prefix}.mean"] = np.zeros(n)
            buf[f"{prefix}.var"] = np.ones(n)

        for k, bw in enumerate(self.layout.widths):
            bn(2 * bw, f"in.spec.{k}.bn")
            init_linear(rng, 2 * bw, H, f"in.spec.{k}.fc", p)
            if c.spatial:
                d = self._spatial_dim(bw)
                bn(d, f"in.sp.{k}.bn")
                init_linear(rng, d, H, f"in.sp.{k}.fc", p)
            d = self._region_dim(bw)
            if c.variant == "A":
                bn(d, f"in.reg.{k}.bn")
            init_linear(rng, d, H, f"in.reg.{k}.fc", p)
        if c.variant == "A":
            p.update(init_aggregator(c.aggregation, self.layout, c.P, rng))
        else:
            p.update(init_deg(self.layout, c.P, rng, hidden=c.deg_hidden))
        K = self.layout.num_bands
        for r in range(c.R):
            bn(H, f"blk.{r}.t.bn")
            init_lstm(rng, H, 2 * H, f"blk.{r}.t.lstm", p)
            init_linear(rng, 2 * H, H, f"blk.{r}.t.fc", p)
            _init_norm(None, f"blk.{r}.b.ln", p, shape=(K, H))
            init_lstm(rng, H, 2 * H, f"blk.{r}.b.fw", p)
            init_lstm(rng, H, 2 * H, f"blk.{r}.b.bw", p)
            init_linear(rng, 4 * H, H, f"blk.{r}.b.fc", p)
        for k, bw in enumerate(self.layout.widths):
            _init_norm(H, f"mask.{k}.ln", p)
            init_linear(rng, H, 4 * H, f"mask.{k}.fc1", p)
            init_linear(rng, 4 * H, 4 * bw, f"mask.{k}.fc2", p)
        return p, buf

    def _check_shapes(self):
        ref, _ = self._init(np.random.default_rng(0))
        missing = set(ref) - set(self.params)
        extra = set(self.params) - set(ref)
        if missing or extra:
            raise ValueError(f"parameter names do not match the config: missing {sorted(missing)[:3]}, "
                             f"unexpected {sorted(extra)[:3]}")
        for k, v in ref.items():
            if self.params[k].shape != v.shape:
                raise ValueError(f"parameter {k}: shape {self.params[k].shape}, expected {v.shape}")
            if not np.all(np.isfinite(self.params[k])):
                raise ValueError(f"parameter {k} is not finite")

    def param_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad) for k, v in self.params.items()}

    # ----------------------------------------------------------- features
    def check_query(self, query: QueryRegion):
        if self.config.variant == "A" and query.variant != "angular":
            raise QueryMismatch(f"an A-variant model takes angular queries, got {query.variant}")
        if self.config.variant == "D" and query.variant != "spherical":
            raise QueryMismatch(f"a D-variant model takes spherical queries, got {query.variant}")

    def front_end(self, mixture: np.ndarray) -> dict:
        """STFT and query-independent spatial inputs (numpy)."""
        cfg = self.config
        mix = np.asarray(mixture, dtype=float)
        if mix.ndim == 2:
            mix = mix[None]
        if mix.shape[1] != cfg.mic_array.num_mics:
            raise ValueError(f"mixture has {mix.shape[1]} channels, model expects {cfg.mic_array.num_mics}")
        if mix.shape[-1] < cfg.fft_size // 2 + 1:
            raise ValueError("mixture shorter than one STFT frame")
        spec = stft(mix, cfg.stft)
        Y = spec.data  # [B, M, T', F]
        phasors = pair_phasors(Y, self.pairs)  # [B, P, T', F]
        feats = {"Y": Y, "phasors": phasors, "length": mix.shape[-1]}
        sp = []
        for s in cfg.spatial:
            if s == "ipd":
                sp.append(np.concatenate([phasors.real, phasors.imag], axis=1))
            else:
                sp.append(ild(Y, self.pairs))
        feats["spatial"] = np.concatenate(sp, axis=1) if sp else None
        return feats

    def direction_views(self, feats: dict, query: QueryRegion) -> np.ndarray:
        """Sampled direction features [B, N, T', F] in aggregation order."""
        cfg = self.config
        az = sample_directions(query, cfg.strategy)
        if cfg.aggregation in ("rnn", "rnn-loop"):
            az = az[tdoa_sort_order(az, self.pairs)]
        steer = np.stack([tpd_bins(self.pairs, a, 0.0, cfg.stft, cfg.sound_speed) for a in az])
        return direction_features_from_phasors(feats["phasors"], steer, cfg.normalize_direction)

    # ------------------------------------------------------------ forward
    def forward(self, mixture, queries, params: Mapping[str, Tensor] | None = None,
                training: bool = False, update_stats: bool = False, distances=None,
                feats: dict | None = None) -> ForwardOutput:
        """Run the model on [B, M, L] (or [M, L]) mixtures with one query per item.

        ``distances`` optionally overrides the D-variant thresholds with a
        Tensor (used for gradients with respect to d).
        """
        cfg = self.config
        feats = feats if feats is not None else self.front_end(mixture)
        Y = feats["Y"]
        B = Y.shape[0]
        if isinstance(queries, QueryRegion):
            queries = [queries] * B
        if len(queries) != B:
            raise ValueError(f"{len(queries)} queries for a batch of {B}")
        for q in queries:
            self.check_query(q)
        p = params if params is not None else self.tensors()
        layout = self.layout
        yref = Y[:, 0]
        spec_bands = [np.concatenate([yref.real[..., lo:hi], yref.imag[..., lo:hi]], axis=-1)
                      for lo, hi in layout.bounds]
        spatial = feats["spatial"]
        spatial_bands = [_band_flatten(spatial, lo, hi) for lo, hi in layout.bounds] if spatial is not None else []

        if cfg.variant == "A":
            agg_params = {k: v for k, v in p.items() if k.startswith("agg.")}
            per_item = []
            for b, q in enumerate(queries):
                views = self.direction_views({"phasors": feats["phasors"][b:b + 1]}, q)
                per_item.append(aggregate(views, cfg.aggregation, agg_params, layout).bands)
            region_bands = [per_item[0][k] if B == 1 else concat([it[k] for it in per_item], axis=0)
                            for k in range(layout.num_bands)]
        else:
            d = distances if distances is not None else np.array([q.dist_high for q in queries])
            region_bands = deg_forward(d, {k: v for k, v in p.items() if k.startswith("deg.")}, layout)

        h = band_split_fuse(spec_bands, spatial_bands, region_bands, p, self.buffers, cfg.variant,
                            training, update_stats)
        h = self._blocks(h, p, training, update_stats)
        mask = self._mask(h, p)  # [B, 2, T', F]
        yr, yi = Y[:, 0].real, Y[:, 0].imag
        mr, mi = mask[:, 0], mask[:, 1]
        masked = stack([mr * yr - mi * yi, mr * yi + mi * yr], axis=1)
        est = istft_op(masked, cfg.stft, feats["length"])
        return ForwardOutput(est, mask, masked, feats["length"])

    def _blocks(self, h: Tensor, p, training: bool, update: bool) -> Tensor:
        H = self.config.H
        B, K, T, _ = h.shape
        for r in range(self.config.R):
            # temporal modeling, causal
            x = batch_norm(h, p, self.buffers, f"blk.{r}.t.bn", (0, 1, 2), training, update)
            y = run_lstm(x.reshape(B * K, T, H), p, f"blk.{r}.t.lstm")
            h = h + linear(y, p, f"blk.{r}.t.fc").reshape(B, K, T, H)
            # band modeling within each frame
            hb = h.transpose(0, 2, 1, 3)  # [B, T, K, H]
            x = layer_norm(hb, p, f"blk.{r}.b.ln", (2, 3)).reshape(B * T, K, H)
            y = concat([run_lstm(x, p, f"blk.{r}.b.fw"), run_lstm(x, p, f"blk.{r}.b.bw", reverse=True)], axis=-1)
            hb = hb + linear(y, p, f"blk.{r}.b.fc").reshape(B, T, K, H)
            h = hb.transpose(0, 2, 1, 3)
        return h

    def _mask(self, h: Tensor, p) -> Tensor:
        outs = []
        for k, bw in enumerate(self.layout.widths):
            x = layer_norm(h[:, k], p, f"mask.{k}.ln", (2,))
            x = tanh(linear(x, p, f"mask.{k}.fc1"))
            x = linear(x, p, f"mask.{k}.fc2")  # [B, T, 4 BW]
            g = x[..., : 2 * bw] * sigmoid(x[..., 2 * bw:])
            B, T = g.shape[0], g.shape[1]
            outs.append(g.reshape(B, T, 2, bw))
        m = concat(outs, axis=-1)  # [B, T, 2, F]
        return m.transpose(0, 2, 1, 3)

    # ------------------------------------------------------------- helpers
    def extract(self, mixture: np.ndarray, query: QueryRegion) -> np.ndarray:
        """Inference for a single [M, L] mixture; returns the [L] estimate."""
        out = self.forward(mixture, query)
        return out.estimate.value[0]

    def copy(self) -> "BandSplitModel":
        return BandSplitModel(self.config, params={k: v.copy() for k, v in self.params.items()},
                              buffers={k: v.copy() for k, v in self.buffers.items()})
