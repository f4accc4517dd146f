"""Scene sampling, mixing and target construction.

A scene is drawn from a named profile by :func:`random_scene`; it stores only
geometry and draws, so it serializes to one JSON line. :func:`mix_scene`
renders it against a corpus. The mixture is

    y^m = sum_c x_c^m + n^m

and the target is the direct path plus early reflections, at the reference
microphone, of exactly the speakers inside the query region.
"""
from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..geometry import MicArray, QueryRegion, SourcePose, count_inside, region_contains, wrap_deg
from .noise import draw_babble_layout, make_babble, make_isotropic_noise, render
from .rir import RoomSpec, simulate_rir, split_direct_early

__all__ = [
    "REF_MIC", "NoisePreset", "NOISE_PRESETS", "SimProfile", "PROFILES", "get_profile",
    "SpeechDraw", "NoiseDraw", "SceneSpec", "SceneMix", "random_scene", "mix_scene",
    "write_manifest", "read_manifest", "PlacementError",
]

REF_MIC = 0
LEVEL_RMS = 0.05


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class NoisePreset:
    """``train``: [1, 4] directional or isotropic noises with inter-noise SIR and one
    global SNR. ``appendix``: per-type counts and per-type SNR ranges."""

    name: str
    count: tuple[int, int] = (1, 4)
    isotropic_prob: float = 0.25
    noise_sir: tuple[float, float] = (-15.0, 15.0)
    snr: tuple[float, float] = (5.0, 15.0)
    directional_count: tuple[int, int] = (0, 2)
    directional_snr: tuple[float, float] = (6.0, 15.0)
    isotropic_count: tuple[int, int] = (0, 1)
    isotropic_snr: tuple[float, float] = (8.0, 15.0)
    babble_snr: tuple[float, float] = (20.0, 40.0)

    @property
    def per_type(self) -> bool:
        return self.name == "appendix"


NOISE_PRESETS = {
    "train": NoisePreset("train"),
    "appendix": NoisePreset("appendix"),
    "none": NoisePreset("none", count=(0, 0)),
}


@dataclass(frozen=True)
class SimProfile:
    name: str
    region: str
    q_proportions: tuple[float, float, float]
    room_min: tuple[float, float, float] = (3.0, 3.0, 2.5)
    room_max: tuple[float, float, float] = (10.0, 8.0, 4.0)
    t60: tuple[float, float] = (0.05, 0.7)
    speakers: tuple[int, int] = (1, 2)
    speech_sir: tuple[float, float] = (-6.0, 6.0)
    noise: str = "train"
    duration_s: tuple[float, float] = (4.0, 6.0)
    width_deg: tuple[float, float] = (30.0, 90.0)
    dist_threshold: tuple[float, float] = (0.2, 2.0)
    source_distance: tuple[float, float] = (0.1, 4.0)
    source_elevation: tuple[float, float] = (-20.0, 40.0)
    array: str | dict = "circ8_5cm"  # preset name or MicArray.to_dict()
    wall_margin: float = 0.5
    sample_rate: int = 16000

    def __post_init__(self):
        if self.region not in ("angular", "spherical", "conical"):
            raise ValueError(f"profile region must be angular, spherical or conical, got {self.region!r}")
        p = np.asarray(self.q_proportions, dtype=float)
        if p.shape != (3,) or np.any(p < 0) or abs(p.sum() - 1) > 1e-6:
            raise ValueError(f"Q proportions must be three non-negative numbers summing to 1, got {self.q_proportions}")
        if self.noise not in NOISE_PRESETS:
            raise ValueError(f"unknown noise preset {self.noise!r}")
        if not 1 <= self.speakers[0] <= self.speakers[1] <= 2:
            raise ValueError("speaker count range must lie in [1, 2]")
        if p[2] > 0 and self.speakers[1] < 2:
            raise ValueError("Q=2 needs two speakers")
        if not 30.0 <= self.width_deg[0] <= self.width_deg[1] <= 90.0:
            raise ValueError("angle window widths must lie in [30, 90] degrees")
        if not 0.2 <= self.dist_threshold[0] <= self.dist_threshold[1] <= 2.0:
            raise ValueError("distance thresholds must lie in [0.2, 2.0] m")

    @property
    def mic_array(self) -> MicArray:
        return MicArray.preset(self.array) if isinstance(self.array, str) else MicArray.from_dict(self.array)

    def to_dict(self) -> dict:
        d = {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}
        return d


PROFILES = {
    "angular": SimProfile("angular", "angular", (0.27, 0.65, 0.08)),
    "spherical": SimProfile("spherical", "spherical", (0.10, 0.45, 0.45)),
    "conical": SimProfile("conical", "conical", (0.10, 0.45, 0.45)),
    # appendix room presets
    "angular-g": SimProfile("angular-g", "angular", (0.27, 0.65, 0.08), room_max=(8.0, 6.0, 4.0),
                            noise="appendix"),
    "angular-3": SimProfile("angular-3", "angular", (0.27, 0.65, 0.08), room_min=(5.0, 5.0, 3.0),
                            room_max=(12.0, 10.0, 4.0), t60=(0.05, 0.4), noise="appendix"),
}


def get_profile(name: str, **overrides) -> SimProfile:
    if name not in PROFILES:
        raise KeyError(f"unknown profile {name!r}; known: {sorted(PROFILES)}")
    prof = PROFILES[name]
    return replace(prof, **overrides) if overrides else prof


@dataclass(frozen=True)
class SpeechDraw:
    pose: SourcePose
    corpus_index: int
    sir_db: float  # first speaker over this one, dB (E0 / Ei)
    rir_seed: int

    def to_dict(self) -> dict:
        return {"pose": _pose_dict(self.pose), "corpus_index": self.corpus_index,
                "sir_db": self.sir_db, "rir_seed": self.rir_seed}

    @classmethod
    def from_dict(cls, d: dict) -> "SpeechDraw":
        return cls(SourcePose(**d["pose"]), int(d["corpus_index"]), float(d["sir_db"]), int(d["rir_seed"]))


@dataclass(frozen=True)
class NoiseDraw:
    """One noise component. ``level_db`` is the SIR to the first noise for the
    ``train`` preset and the component SNR for the ``appendix`` preset."""

    kind: str  # directional | isotropic | babble
    level_db: float
    seed: int
    pose: SourcePose | None = None
    corpus_index: int = 0
    babble_poses: tuple[SourcePose, ...] = ()
    babble_indices: tuple[int, ...] = ()

    def to_dict(self) -> dict:
        return {"kind": self.kind, "level_db": self.level_db, "seed": self.seed,
                "pose": _pose_dict(self.pose) if self.pose else None,
                "corpus_index": self.corpus_index,
                "babble_poses": [_pose_dict(p) for p in self.babble_poses],
                "babble_indices": list(self.babble_indices)}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseDraw":
        return cls(d["kind"], float(d["level_db"]), int(d["seed"]),
                   SourcePose(**d["pose"]) if d.get("pose") else None, int(d.get("corpus_index", 0)),
                   tuple(SourcePose(**p) for p in d.get("babble_poses", [])),
                   tuple(int(i) for i in d.get("babble_indices", [])))


def _pose_dict(p: SourcePose) -> dict:
    return {"azimuth": p.azimuth, "elevation": p.elevation, "distance": p.distance}


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    profile: str
    room: RoomSpec
    array: MicArray
    array_center: tuple[float, float, float]
    query: QueryRegion
    speech: tuple[SpeechDraw, ...]
    noises: tuple[NoiseDraw, ...]
    noise_preset: str
    snr_db: float | None
    num_samples: int
    wall_margin: float = 0.5

    def __post_init__(self):
        if not 1 <= len(self.speech) <= 2:
            raise ValueError(f"scene needs 1 or 2 speakers, got {len(self.speech)}")
        center = np.asarray(self.array_center)
        if not all(self.room.contains(center + m, self.wall_margin) for m in self.array.positions):
            raise ValueError("array closer than the wall margin")
        for s in self.speech:
            if not self.room.contains(center + s.pose.to_cartesian(), self.wall_margin):
                raise ValueError("speaker closer than the wall margin")

    @property
    def q(self) -> int:
        return count_inside(self.query, [s.pose for s in self.speech])

    @property
    def c(self) -> int:
        return len(self.speech)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "profile": self.profile, "room": self.room.to_dict(),
            "array": self.array.to_dict(), "array_center": list(self.array_center),
            "query": self.query.to_dict(), "speech": [s.to_dict() for s in self.speech],
            "noises": [n.to_dict() for n in self.noises], "noise_preset": self.noise_preset,
            "snr_db": self.snr_db, "num_samples": self.num_samples, "wall_margin": self.wall_margin,
            "Q": self.q, "C": self.c,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        r = d["room"]
        return cls(
            seed=int(d["seed"]), profile=d["profile"],
            room=RoomSpec(tuple(r["dims"]), float(r["t60"]), int(r.get("sample_rate", 16000))),
            array=MicArray.from_dict(d["array"]), array_center=tuple(d["array_center"]),
            query=QueryRegion.from_dict(d["query"]),
            speech=tuple(SpeechDraw.from_dict(s) for s in d["speech"]),
            noises=tuple(NoiseDraw.from_dict(n) for n in d["noises"]),
            noise_preset=d["noise_preset"], snr_db=d["snr_db"], num_samples=int(d["num_samples"]),
            wall_margin=float(d.get("wall_margin", 0.5)),
        )


@dataclass
class SceneMix:
    mixture: np.ndarray  # [M, T]
    target: np.ndarray  # [T] reference channel
    target_mc: np.ndarray  # [M, T] direct+early of in-region speakers
    speech_images: list[np.ndarray]  # reverberant [M, T] per speaker, scaled
    noise_images: list[np.ndarray]
    metadata: dict = field(default_factory=dict)
    early_images: list = field(default_factory=list)  # direct+early [M, T] per speaker


# ---------------------------------------------------------------- sampling

def _draw_query(rng, prof: SimProfile) -> QueryRegion:
    width = rng.uniform(*prof.width_deg)
    az_low = rng.uniform(-180.0, 180.0)
    az_high = float(wrap_deg(az_low + width))
    dist = rng.uniform(*prof.dist_threshold)
    if prof.region == "angular":
        return QueryRegion.angular(az_low, az_high)
    if prof.region == "spherical":
        return QueryRegion.spherical(dist)
    return QueryRegion.conical(az_low, az_high, dist)


def _propose_pose(rng, prof: SimProfile, query: QueryRegion, inside: bool) -> SourcePose:
    dlo, dhi = prof.source_distance
    if inside and query.has_direction:
        az = wrap_deg(query.az_low + rng.uniform(0.0, query.azimuth_width))
    else:
        az = rng.uniform(-180.0, 180.0)
    if inside and query.has_distance:
        d = rng.uniform(dlo, min(dhi, query.dist_high))
    elif not inside and query.variant == "spherical":
        d = rng.uniform(max(dlo, query.dist_high), max(dhi, query.dist_high + 0.1))
    else:
        d = rng.uniform(dlo, dhi)
    el = rng.uniform(*prof.source_elevation)
    return SourcePose(float(az), float(el), float(d))


def _place(rng, prof, query, room, center, inside: bool, tries: int = 100):
    for _ in range(tries):
        pose = _propose_pose(rng, prof, query, inside)
        if region_contains(query, pose) != inside:
            continue
        if room.contains(center + pose.to_cartesian(), prof.wall_margin):
            return pose
    return None


def _free_pose(rng, room, center, margin, min_dist=0.3):
    for _ in range(1000):
        p = rng.uniform(margin, np.asarray(room.dims) - margin)
        rel = p - center
        if np.linalg.norm(rel) >= min_dist:
            return SourcePose.from_cartesian(rel)
    raise PlacementError("no free noise position")


def random_scene(profile: SimProfile | str, seed: int) -> SceneSpec:
    """Draw a scene; Q follows the profile proportions by rejection sampling on placements."""
    prof = get_profile(profile) if isinstance(profile, str) else profile
    rng = np.random.default_rng(seed)
    array = prof.mic_array
    q = int(rng.choice(3, p=np.asarray(prof.q_proportions, dtype=float)))
    c = 2 if q == 2 else int(rng.integers(max(q, prof.speakers[0]), prof.speakers[1] + 1))
    query = _draw_query(rng, prof)
    fs = prof.sample_rate
    num_samples = int(round(rng.uniform(*prof.duration_s) * fs))
    inside_flags = [True] * q + [False] * (c - q)
    rng.shuffle(inside_flags)
    ap = array.aperture / 2 + prof.wall_margin
    for _attempt in range(1000):
        dims = rng.uniform(prof.room_min, prof.room_max)
        t60 = float(rng.uniform(*prof.t60)) if prof.t60[1] > 0 else 0.0
        room = RoomSpec(tuple(float(x) for x in dims), t60, fs)
        zmax = min(1.6, dims[2] - ap)
        center = np.array([rng.uniform(ap, dims[0] - ap), rng.uniform(ap, dims[1] - ap),
                           rng.uniform(min(0.7, zmax), zmax)])
        poses = [_place(rng, prof, query, room, center, f) for f in inside_flags]
        if all(p is not None for p in poses):
            break
    else:
        raise PlacementError(f"could not place {c} speakers with Q={q} for profile {prof.name}")

    speech = []
    for i, pose in enumerate(poses):
        sir = 0.0 if i == 0 else float(rng.uniform(*prof.speech_sir))
        speech.append(SpeechDraw(pose, int(rng.integers(1 << 30)), sir, int(rng.integers(1 << 31))))

    preset = NOISE_PRESETS[prof.noise]
    noises, snr = [], None
    if preset.per_type:
        for _ in range(int(rng.integers(preset.directional_count[0], preset.directional_count[1] + 1))):
            noises.append(NoiseDraw("directional", float(rng.uniform(*preset.directional_snr)),
                                    int(rng.integers(1 << 31)),
                                    _free_pose(rng, room, center, prof.wall_margin),
                                    int(rng.integers(1 << 30))))
        for _ in range(int(rng.integers(preset.isotropic_count[0], preset.isotropic_count[1] + 1))):
            noises.append(NoiseDraw("isotropic", float(rng.uniform(*preset.isotropic_snr)),
                                    int(rng.integers(1 << 31))))
        bseed = int(rng.integers(1 << 31))
        bposes = draw_babble_layout(room, center, bseed, margin=prof.wall_margin)
        noises.append(NoiseDraw("babble", float(rng.uniform(*preset.babble_snr)), bseed,
                                babble_poses=tuple(bposes),
                                babble_indices=tuple(int(rng.integers(1 << 30)) for _ in bposes)))
    else:
        n = int(rng.integers(preset.count[0], preset.count[1] + 1))
        has_iso = False
        for i in range(n):
            level = 0.0 if i == 0 else float(rng.uniform(*preset.noise_sir))
            if not has_iso and rng.uniform() < preset.isotropic_prob:
                has_iso = True
                noises.append(NoiseDraw("isotropic", level, int(rng.integers(1 << 31))))
            else:
                noises.append(NoiseDraw("directional", level, int(rng.integers(1 << 31)),
                                        _free_pose(rng, room, center, prof.wall_margin),
                                        int(rng.integers(1 << 30))))
        if n:
            snr = float(rng.uniform(*preset.snr))
    return SceneSpec(int(seed), prof.name, room, array, tuple(float(x) for x in center), query,
                     tuple(speech), tuple(noises), preset.name, snr, num_samples, prof.wall_margin)


# ------------------------------------------------------------------ mixing

def _energy(x: np.ndarray) -> float:
    return float(np.sum(np.asarray(x, dtype=float) ** 2))


def _check_energy(e: float, what: str):
    if not e > 0:
        raise ValueError(f"zero-energy source: {what}")


def mix_scene(spec: SceneSpec, corpus, level_rms: float | None = LEVEL_RMS) -> SceneMix:
    """Render a scene. SIR/SNR are realized exactly on the reference channel."""
    T = spec.num_samples
    center = spec.array_center
    images, early_images = [], []
    for i, s in enumerate(spec.speech):
        sig = corpus.speech(s.corpus_index, T)
        _check_energy(_energy(sig), f"speech {i}")
        rir = simulate_rir(spec.room, center, spec.array, s.pose, seed=s.rir_seed)
        early, _late = split_direct_early(rir)
        images.append(render(sig, rir.filters))
        early_images.append(render(sig, early.filters))
    e0 = _energy(images[0][REF_MIC])
    _check_energy(e0, "speech 0 image")
    for i in range(1, len(images)):
        ei = _energy(images[i][REF_MIC])
        _check_energy(ei, f"speech {i} image")
        g = math.sqrt(e0 / (ei * 10 ** (spec.speech[i].sir_db / 10)))
        images[i] *= g
        early_images[i] *= g
    speech_sum = np.sum(images, axis=0)
    e_speech = _energy(speech_sum[REF_MIC])

    noise_images = []
    for j, n in enumerate(spec.noises):
        if n.kind == "directional":
            sig = corpus.noise(n.corpus_index, T)
            _check_energy(_energy(sig), f"noise {j}")
            rir = simulate_rir(spec.room, center, spec.array, n.pose, seed=n.seed)
            img = render(sig, rir.filters)
        elif n.kind == "isotropic":
            img = make_isotropic_noise(T, spec.array, n.seed, spec.room.sample_rate)
        elif n.kind == "babble":
            sigs = [corpus.speech(k, T) for k in n.babble_indices]
            img, _ = make_babble(spec.room, center, spec.array, sigs, n.seed, T, poses=n.babble_poses)
        else:
            raise ValueError(f"unknown noise kind {n.kind!r}")
        _check_energy(_energy(img[REF_MIC]), f"noise {j} image")
        noise_images.append(img)

    if spec.noise_preset == "appendix":
        for j, n in enumerate(spec.noises):
            noise_images[j] *= math.sqrt(e_speech / (_energy(noise_images[j][REF_MIC]) * 10 ** (n.level_db / 10)))
    elif noise_images:
        n0 = _energy(noise_images[0][REF_MIC])
        for j in range(1, len(noise_images)):
            noise_images[j] *= math.sqrt(n0 / (_energy(noise_images[j][REF_MIC]) * 10 ** (spec.noises[j].level_db / 10)))
        total = _energy(np.sum(noise_images, axis=0)[REF_MIC])
        g = math.sqrt(e_speech / (total * 10 ** (spec.snr_db / 10)))
        for img in noise_images:
            img *= g

    noise_sum = np.sum(noise_images, axis=0) if noise_images else np.zeros_like(speech_sum)
    mixture = speech_sum + noise_sum
    inside = [region_contains(spec.query, s.pose) for s in spec.speech]
    target_mc = np.zeros_like(mixture)
    for flag, e in zip(inside, early_images):
        if flag:
            target_mc = target_mc + e

    scale = 1.0
    if level_rms is not None:
        scale = level_rms / math.sqrt(np.mean(mixture[REF_MIC] ** 2))
        peak = np.max(np.abs(mixture)) * scale
        if peak > 0.99:
            scale *= 0.99 / peak
    for img in images:
        img *= scale
    for img in noise_images:
        img *= scale
    for img in early_images:
        img *= scale
    mixture = mixture * scale
    target_mc = target_mc * scale
    meta = spec.to_dict()
    meta.update({"in_region": inside, "scale": scale, "ref_mic": REF_MIC})
    return SceneMix(mixture, target_mc[REF_MIC].copy(), target_mc, images, noise_images, meta,
                    early_images)


# ---------------------------------------------------------------- manifest

def write_manifest(path, records) -> None:
    """JSON-lines, one scene per line, written atomically."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def read_manifest(path) -> list[dict]:
    out = []
    for i, line in enumerate(Path(path).read_text().splitlines(), 1):
        if line.strip():
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{i}: invalid JSON line: {exc.msg}") from None
    return out
