"""Small scene families for smoke training and ablations.

``narrow_family``: two speakers at fixed positions, anechoic, independent
white sensor noise. Angular examples pick an azimuth window holding one
speaker (Q = 1) or neither (Q = 0); spherical examples pick a distance
threshold below, between or beyond the two speakers (Q = 0, 1, 2).
"""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from ..geometry import MicArray, QueryRegion, SourcePose, region_contains, wrap_deg
from .corpus import SyntheticCorpus
from .noise import render
from .rir import RoomSpec, simulate_rir
from .scene import REF_MIC, LEVEL_RMS, get_profile, mix_scene, random_scene

__all__ = ["NARROW_POSITIONS", "NARROW_POSITIONS_DIST", "narrow_family", "scene_examples"]

NARROW_POSITIONS = (SourcePose(40.0, 0.0, 1.0), SourcePose(-80.0, 0.0, 1.2))
NARROW_POSITIONS_DIST = (SourcePose(40.0, 0.0, 0.5), SourcePose(-80.0, 0.0, 1.5))


def _window_containing(rng, az: float, width_range=(30.0, 90.0)) -> QueryRegion:
    width = rng.uniform(*width_range)
    low = float(wrap_deg(az - rng.uniform(0.1, 0.9) * width))
    return QueryRegion.angular(low, float(wrap_deg(low + width)))


def _window_avoiding(rng, poses, width_range=(30.0, 90.0)) -> QueryRegion:
    for _ in range(1000):
        width = rng.uniform(*width_range)
        low = rng.uniform(-180.0, 180.0)
        q = QueryRegion.angular(low, float(wrap_deg(low + width)))
        if not any(region_contains(q, p) for p in poses):
            return q
    raise RuntimeError("no empty query window")


def _radius_for(rng, q: int, positions) -> QueryRegion:
    d = sorted(p.distance for p in positions)
    edges = [0.2, d[0], d[1], max(2.0, d[1] + 0.3)]
    lo, hi = edges[q], edges[q + 1]
    # keep clear of the speakers so Q is unambiguous
    return QueryRegion.spherical(rng.uniform(lo + 0.05 * (q > 0), hi - 0.05))


def narrow_family(seed: int, count: int, duration_s: float = 1.0, array: MicArray | None = None,
                  positions=None, snr_db=(10.0, 20.0), sir_db=(-3.0, 3.0),
                  q0_fraction: float = 0.3, sample_rate: int = 16000, kind: str = "angular"):
    """Return a list of ``Example`` from the narrow family; seeds fix everything."""
    from ..network.train import Example

    if kind not in ("angular", "spherical"):
        raise ValueError(f"narrow family kind must be angular or spherical, got {kind!r}")
    if positions is None:
        positions = NARROW_POSITIONS if kind == "angular" else NARROW_POSITIONS_DIST
    array = array or MicArray.preset("circ8_5cm")
    rng = np.random.default_rng(seed)
    corpus = SyntheticCorpus(seed)
    room = RoomSpec((6.0, 5.0, 3.0), 0.0, sample_rate)
    center = (3.0, 2.5, 1.2)
    filters = [simulate_rir(room, center, array, p).filters for p in positions]
    n = int(round(duration_s * sample_rate))
    out = []
    for i in range(count):
        images = []
        for j, f in enumerate(filters):
            images.append(render(corpus.speech(2 * i + j, n), f))
        e0 = np.sum(images[0][REF_MIC] ** 2)
        for j in range(1, len(images)):
            ej = np.sum(images[j][REF_MIC] ** 2)
            images[j] *= np.sqrt(e0 / ej * 10 ** (-rng.uniform(*sir_db) / 10))
        speech = np.sum(images, axis=0)
        noise = rng.standard_normal(speech.shape)
        noise *= np.sqrt(np.sum(speech[REF_MIC] ** 2) / np.sum(noise[REF_MIC] ** 2)
                         * 10 ** (-rng.uniform(*snr_db) / 10))
        mixture = speech + noise
        empty = rng.uniform() < q0_fraction
        if kind == "spherical":
            query = _radius_for(rng, 0 if empty else int(rng.integers(1, 3)), positions)
        elif empty:
            query = _window_avoiding(rng, positions)
        else:
            query = _window_containing(rng, positions[int(rng.integers(len(positions)))].azimuth)
        inside = [region_contains(query, p) for p in positions]
        target = np.zeros(n)
        for img, flag in zip(images, inside):
            if flag:
                target = target + img[REF_MIC]
        q = sum(inside)
        scale = LEVEL_RMS / np.sqrt(np.mean(mixture[REF_MIC] ** 2))
        out.append(Example(mixture * scale, target * scale, query, int(q), name=f"narrow-{seed}-{i}"))
    return out


def scene_examples(seed: int, count: int, duration_s: float = 1.0, profile="angular", **overrides):
    """Fixed examples drawn from a scene profile (name or SimProfile) at a fixed duration."""
    from ..network.train import Example

    overrides["duration_s"] = (duration_s, duration_s)
    prof = get_profile(profile, **overrides) if isinstance(profile, str) else replace(profile, **overrides)
    corpus = SyntheticCorpus(seed)
    out = []
    for i in range(count):
        spec = random_scene(prof, seed * 100003 + i)
        mix = mix_scene(spec, corpus)
        out.append(Example(mix.mixture, mix.target, spec.query, spec.q, name=f"{prof.name}-{spec.seed}"))
    return out
