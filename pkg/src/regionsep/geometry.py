"""Array geometry, source coordinates, microphone pairs and query regions.

Conventions: the array frame is centered on the array, azimuth 0 points
along +x and grows toward +y, elevation is measured from the xy plane.
"""
from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SPEED_OF_SOUND = 343.0

__all__ = [
    "SPEED_OF_SOUND",
    "MicArray",
    "MicPair",
    "SourcePose",
    "QueryRegion",
    "enumerate_pairs",
    "tdoa_distance",
    "region_contains",
    "parse_query",
    "format_query",
    "QueryParseError",
    "wrap_deg",
    "direction_vector",
]


def wrap_deg(angle):
    """Wrap degrees into [-180, 180)."""
    return (np.asarray(angle, dtype=float) + 180.0) % 360.0 - 180.0


def direction_vector(azimuth, elevation):
    """Unit vector(s) toward (azimuth, elevation) in degrees; shape [..., 3]."""
    az = np.deg2rad(np.asarray(azimuth, dtype=float))
    el = np.deg2rad(np.asarray(elevation, dtype=float))
    az, el = np.broadcast_arrays(az, el)
    return np.stack(
        [np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1
    )


@dataclass(frozen=True)
class MicArray:
    positions: np.ndarray
    layout: str = "custom"

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError(f"positions must be [M, 3], got {pos.shape}")
        if pos.shape[0] < 2:
            raise ValueError("a microphone array needs at least 2 microphones")
        if not np.all(np.isfinite(pos)):
            raise ValueError("microphone positions must be finite")
        dist = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
        np.fill_diagonal(dist, np.inf)
        if dist.min() <= 1e-6:
            raise ValueError("two microphones coincide")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)

    def __eq__(self, other):
        if not isinstance(other, MicArray):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.positions, other.positions)

    def __hash__(self):
        return hash((self.layout, self.positions.tobytes()))

    @property
    def num_mics(self) -> int:
        return self.positions.shape[0]

    @property
    def aperture(self) -> float:
        pos = self.positions
        return float(np.linalg.norm(pos[:, None] - pos[None], axis=-1).max())

    @classmethod
    def circular(cls, num_mics: int = 8, diameter: float = 0.05) -> "MicArray":
        ang = 2 * np.pi * np.arange(num_mics) / num_mics
        r = diameter / 2
        pos = np.stack([r * np.cos(ang), r * np.sin(ang), np.zeros(num_mics)], -1)
        return cls(pos, "circular")

    @classmethod
    def linear(cls, num_mics: int = 8, aperture: float = 0.225) -> "MicArray":
        x = np.linspace(-aperture / 2, aperture / 2, num_mics)
        pos = np.stack([x, np.zeros(num_mics), np.zeros(num_mics)], -1)
        return cls(pos, "linear")

    @classmethod
    def preset(cls, name: str) -> "MicArray":
        try:
            factory = _PRESETS[name]
        except KeyError:
            raise ValueError(
                f"unknown array preset {name!r}; choose from {sorted(_PRESETS)}"
            ) from None
        return factory()

    @classmethod
    def from_text(cls, path) -> "MicArray":
        """Read one 'x y z' line per microphone (meters); '#' starts a comment."""
        rows = []
        for line in Path(path).read_text().splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                rows.append([float(v) for v in line.replace(",", " ").split()])
        return cls(np.array(rows), "custom")

    def subset(self, indices: Sequence[int]) -> "MicArray":
        idx = list(indices)
        if len(set(idx)) != len(idx):
            raise ValueError("duplicate microphone index in subset")
        return MicArray(self.positions[idx], self.layout)

    def to_dict(self) -> dict:
        return {"layout": self.layout, "positions": self.positions.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "MicArray":
        return cls(np.array(d["positions"]), d.get("layout", "custom"))


_PRESETS = {
    "circ8_5cm": lambda: MicArray.circular(8, 0.05),
    "lin8_22.5cm": lambda: MicArray.linear(8, 0.225),
}


@dataclass(frozen=True)
class MicPair:
    p1: int
    p2: int
    spacing: float
    axis: tuple[float, float, float]

    def __post_init__(self):
        if self.p1 == self.p2:
            raise ValueError("a microphone pair needs two distinct microphones")

    def reversed(self) -> "MicPair":
        return MicPair(self.p2, self.p1, self.spacing, tuple(-a for a in self.axis))


def make_pair(array: MicArray, p1: int, p2: int) -> MicPair:
    vec = array.positions[p1] - array.positions[p2]
    spacing = float(np.linalg.norm(vec))
    return MicPair(int(p1), int(p2), spacing, tuple(float(v) for v in vec / spacing))


def enumerate_pairs(array: MicArray, selection="all") -> list[MicPair]:
    """All unordered pairs (p1 < p2) over ``selection`` ("all" or mic indices)."""
    if isinstance(selection, str):
        if selection != "all":
            raise ValueError(f"unknown pair selection {selection!r}")
        idx = list(range(array.num_mics))
    else:
        idx = [int(i) for i in selection]
        if len(set(idx)) != len(idx):
            raise ValueError(f"duplicate microphone index in selection {idx}")
        bad = [i for i in idx if not 0 <= i < array.num_mics]
        if bad:
            raise ValueError(f"microphone indices out of range: {bad}")
        idx = sorted(idx)
    return [make_pair(array, a, b) for a, b in itertools.combinations(idx, 2)]


def tdoa_distance(pair: MicPair, azimuth, elevation=0.0):
    """Far-field path difference (m) by which the wavefront reaches p1 before p2.

    Equals spacing * cos(azimuth relative to the pair axis) * cos(elevation) for
    pairs lying in the horizontal plane; the dot product generalizes it.
    """
    return pair.spacing * (direction_vector(azimuth, elevation) @ np.asarray(pair.axis))


@dataclass(frozen=True)
class SourcePose:
    azimuth: float
    elevation: float
    distance: float

    def __post_init__(self):
        if not -180.0 <= self.azimuth <= 180.0:
            raise ValueError(f"azimuth {self.azimuth} outside [-180, 180]")
        if not -90.0 <= self.elevation <= 90.0:
            raise ValueError(f"elevation {self.elevation} outside [-90, 90]")
        if not self.distance > 0:
            raise ValueError(f"distance must be positive, got {self.distance}")

    def to_cartesian(self) -> np.ndarray:
        return self.distance * direction_vector(self.azimuth, self.elevation)

    @classmethod
    def from_cartesian(cls, xyz) -> "SourcePose":
        x, y, z = (float(v) for v in xyz)
        d = math.sqrt(x * x + y * y + z * z)
        az = math.degrees(math.atan2(y, x))
        el = math.degrees(math.asin(max(-1.0, min(1.0, z / d))))
        return cls(az, el, d)


VARIANTS = ("angular", "spherical", "conical", "ring")


@dataclass(frozen=True)
class QueryRegion:
    """A query region. ``az_low > az_high`` denotes a window wrapping through 180."""

    variant: str
    az_low: float = -180.0
    az_high: float = 180.0
    el_low: float = -90.0
    el_high: float = 90.0
    dist_low: float = 0.0
    dist_high: float = math.inf

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown region variant {self.variant!r}")
        if not self.el_low <= self.el_high:
            raise ValueError("elevation window must satisfy low <= high")
        if not 0.0 <= self.dist_low <= self.dist_high:
            raise ValueError("distance window must satisfy 0 <= low <= high")
        if self.variant == "ring" and not self.dist_low > 0:
            raise ValueError("a ring query needs a positive inner radius")
        if self.variant in ("spherical", "ring") and self.azimuth_width < 360.0:
            raise ValueError(f"{self.variant} queries span the full azimuth range")
        if self.variant in ("spherical", "conical") and self.dist_low != 0.0:
            raise ValueError(f"{self.variant} queries start at distance 0")
        if self.variant == "angular" and (self.dist_low, self.dist_high) != (0.0, math.inf):
            raise ValueError("angular queries do not restrict distance")

    @classmethod
    def angular(cls, az_low, az_high, el_low=-90.0, el_high=90.0) -> "QueryRegion":
        return cls("angular", float(az_low), float(az_high), el_low, el_high)

    @classmethod
    def spherical(cls, radius) -> "QueryRegion":
        return cls("spherical", dist_high=float(radius))

    @classmethod
    def conical(cls, az_low, az_high, radius, el_low=-90.0, el_high=90.0):
        return cls("conical", float(az_low), float(az_high), el_low, el_high, 0.0, float(radius))

    @classmethod
    def ring(cls, inner, outer) -> "QueryRegion":
        return cls("ring", dist_low=float(inner), dist_high=float(outer))

    @property
    def azimuth_width(self) -> float:
        width = self.az_high - self.az_low
        if width >= 360.0:
            return 360.0
        return width % 360.0 if width < 0 else width

    @property
    def has_direction(self) -> bool:
        return self.variant in ("angular", "conical")

    @property
    def has_distance(self) -> bool:
        return self.variant in ("spherical", "conical", "ring")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        if math.isinf(d["dist_high"]):
            d["dist_high"] = None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "QueryRegion":
        d = dict(d)
        if d.get("dist_high") is None:
            d["dist_high"] = math.inf
        return cls(**d)


def _azimuth_inside(az_low: float, width: float, azimuth: float, tol: float = 1e-9) -> bool:
    if width >= 360.0:
        return True
    offset = (azimuth - az_low) % 360.0
    return offset <= width + tol or offset >= 360.0 - tol


def region_contains(region: QueryRegion, pose: SourcePose) -> bool:
    if not _azimuth_inside(region.az_low, region.azimuth_width, pose.azimuth):
        return False
    if not region.el_low <= pose.elevation <= region.el_high:
        return False
    if region.variant == "ring":
        # same membership as sphere(outer) minus sphere(inner)
        return region.dist_low < pose.distance <= region.dist_high
    return region.dist_low <= pose.distance <= region.dist_high


def count_inside(region: QueryRegion, poses: Iterable[SourcePose]) -> int:
    return sum(region_contains(region, p) for p in poses)


# ------------------------------------------------------------ query strings

class QueryParseError(ValueError):
    def __init__(self, text: str, pos: int, message: str):
        self.text, self.pos = text, pos
        super().__init__(f"{message} at position {pos} in {text!r}\n  {text}\n  {' ' * pos}^")


_NUMBER = re.compile(r"[+-]?(?:\d+(?:\.\d+)?|\.\d+)(?:[eE][+-]?\d+)?")


class _Scanner:
    def __init__(self, text: str):
        self.text, self.pos = text, 0

    def fail(self, message: str, pos: int | None = None):
        raise QueryParseError(self.text, self.pos if pos is None else pos, message)

    def literal(self, token: str) -> None:
        if not self.text.startswith(token, self.pos):
            self.fail(f"expected {token!r}")
        self.pos += len(token)

    def peek(self, token: str) -> bool:
        return self.text.startswith(token, self.pos)

    def number(self) -> float:
        m = _NUMBER.match(self.text, self.pos)
        if not m:
            self.fail("expected a number")
        self.pos = m.end()
        return float(m.group())

    def interval(self) -> tuple[float, float, int]:
        start = self.pos
        lo = self.number()
        self.literal("..")
        return lo, self.number(), start

    def end(self) -> None:
        if self.pos != len(self.text):
            self.fail("unexpected trailing text")


def parse_query(text: str) -> QueryRegion:
    """Parse a region query string.

    Forms: ``az:LO..HI[,el:LO..HI]``, ``dist:0..R``, ``dist:A..B`` (A > 0 gives
    a ring), ``cone:az:LO..HI[,el:LO..HI],dist:0..R`` and ``ring:A..B``.
    Angles in degrees, distances in meters.
    """
    s = _Scanner(text.strip())

    def build(start, fn, *args):
        try:
            return fn(*args)
        except ValueError as exc:
            s.fail(str(exc), start)

    def elevation():
        if s.peek(",el:"):
            s.literal(",el:")
            lo, hi, _ = s.interval()
            return lo, hi
        return -90.0, 90.0

    if s.peek("az:"):
        s.literal("az:")
        lo, hi, start = s.interval()
        el = elevation()
        s.end()
        return build(start, QueryRegion.angular, lo, hi, *el)
    if s.peek("dist:"):
        s.literal("dist:")
        lo, hi, start = s.interval()
        s.end()
        if lo == 0:
            return build(start, QueryRegion.spherical, hi)
        return build(start, QueryRegion.ring, lo, hi)
    if s.peek("ring:"):
        s.literal("ring:")
        lo, hi, start = s.interval()
        s.end()
        return build(start, QueryRegion.ring, lo, hi)
    if s.peek("cone:"):
        s.literal("cone:az:")
        lo, hi, start = s.interval()
        el = elevation()
        s.literal(",dist:")
        d_lo, d_hi, d_start = s.interval()
        s.end()
        if d_lo != 0:
            s.fail("a cone starts at distance 0", d_start)
        return build(start, QueryRegion.conical, lo, hi, d_hi, *el)
    s.fail("expected one of 'az:', 'dist:', 'cone:', 'ring:'")


def _num(x: float) -> str:
    r = repr(float(x))
    return r[:-2] if r.endswith(".0") else r


def format_query(q: QueryRegion) -> str:
    """Inverse of ``parse_query``."""
    el = "" if (q.el_low, q.el_high) == (-90.0, 90.0) else f",el:{_num(q.el_low)}..{_num(q.el_high)}"
    if q.variant == "angular":
        return f"az:{_num(q.az_low)}..{_num(q.az_high)}{el}"
    if q.variant == "spherical":
        return f"dist:0..{_num(q.dist_high)}"
    if q.variant == "ring":
        return f"ring:{_num(q.dist_low)}..{_num(q.dist_high)}"
    return f"cone:az:{_num(q.az_low)}..{_num(q.az_high)}{el},dist:0..{_num(q.dist_high)}"
