"""Shoebox room impulse responses by the image-source method.

Wall reflection coefficients are frequency independent and solved from
Eyring's formula for the requested T60. Image sources arriving within the
early window get windowed-sinc fractional delays; later images are rounded
to the nearest sample.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import butter, sosfilt

from ..geometry import SPEED_OF_SOUND, MicArray, SourcePose

__all__ = ["RoomSpec", "Rir", "simulate_rir", "split_direct_early", "measure_t60",
           "fractional_delay_kernel", "GeometryError"]

FD_TAPS = 81
EARLY_WINDOW_S = (0.006, 0.050)
HIGHPASS_HZ = 50.0


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class RoomSpec:
    dims: tuple[float, float, float]
    t60: float
    sample_rate: int = 16000

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(float(d) for d in self.dims))
        if len(self.dims) != 3 or min(self.dims) <= 0:
            raise ValueError(f"room dimensions must be three positive lengths, got {self.dims}")
        # t60 == 0 selects the anechoic limit
        if self.t60 != 0.0 and not 0.05 <= self.t60 <= 0.7:
            raise ValueError(f"T60 {self.t60} outside [0.05, 0.7] s")

    @property
    def volume(self) -> float:
        L, W, H = self.dims
        return L * W * H

    @property
    def surface(self) -> float:
        L, W, H = self.dims
        return 2 * (L * W + L * H + W * H)

    def eyring_coefficient(self, v: float = SPEED_OF_SOUND) -> float:
        """Pressure reflection coefficient from Eyring's formula."""
        if self.t60 == 0.0:
            return 0.0
        k = 24 * math.log(10) / v
        return math.exp(-0.5 * k * self.volume / (self.surface * self.t60))

    def reflection_coefficient(self, v: float = SPEED_OF_SOUND, distance: float = 1.0) -> float:
        """Reflection coefficient whose image-source decay matches ``t60``.

        ``distance`` is the source-receiver distance, which sets the
        direct-to-reverberant ratio seen by the Schroeder fit. Starts from
        Eyring and corrects for the slower-than-exponential decay
        of a shoebox image lattice, where near-axial paths hit fewer walls.
        """
        if self.t60 == 0.0:
            return 0.0
        a0 = -math.log(self.eyring_coefficient(v))
        lo, hi = math.log(a0) - 3.0, math.log(a0) + 3.0
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            if _lattice_t60(self.dims, math.exp(mid), v, 1.2 * self.t60, max(distance, 0.05)) > self.t60:
                lo = mid
            else:
                hi = mid
        return math.exp(-math.exp(0.5 * (lo + hi)))

    def contains(self, point, margin: float = 0.0) -> bool:
        p = np.asarray(point, dtype=float)
        return bool(np.all(p >= margin) and np.all(p <= np.asarray(self.dims) - margin))

    def to_dict(self) -> dict:
        return {"dims": list(self.dims), "t60": self.t60, "sample_rate": self.sample_rate}


@dataclass
class Rir:
    filters: np.ndarray  # [M, taps]
    peaks: np.ndarray  # direct-path sample index per channel
    sample_rate: int = 16000

    def __post_init__(self):
        if not np.all(np.isfinite(self.filters)):
            raise ValueError("RIR contains non-finite values")
        if np.any(self.peaks < 0) or np.any(self.peaks >= self.filters.shape[-1]):
            raise ValueError("direct-path peak outside the filter")


def _fibonacci_sphere(n: int = 2000) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1 - 2 * i / n
    phi = np.pi * (3 - math.sqrt(5)) * i
    r = np.sqrt(1 - z * z)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], -1)


_SPHERE = _fibonacci_sphere(1000)


def _lattice_t60(dims, a: float, v: float, length_s: float, distance: float,
                 fit_db=(-5.0, -25.0)) -> float:
    """Schroeder T60 of the image lattice energy envelope for reflection coefficient exp(-a).

    An image at distance c*t in direction u has undergone about c*t*g(u)
    reflections with g(u) = sum_i |u_i| / L_i; images arrive at a rate that
    makes the reverberant energy per second c / (4 pi V) times the mean of
    exp(-2 a c t g). Its backward integral has a closed form, to which the
    direct-path energy at ``distance`` is added.
    """
    dims = np.asarray(dims, dtype=float)
    g = np.abs(_SPHERE) @ (1.0 / dims)
    t0 = distance / v
    t = np.linspace(t0, length_s, 200)
    rate = 2 * a * v * g[:, None]
    tail = np.mean((np.exp(-rate * t) - np.exp(-rate * length_s)) / rate, axis=0)
    edc = v / (4 * np.pi * np.prod(dims)) * tail
    edc[0] += 1.0 / (4 * np.pi * distance) ** 2
    edc_db = 10 * np.log10(np.maximum(edc / edc[0], 1e-300))
    sel = (edc_db <= fit_db[0]) & (edc_db >= fit_db[1])
    if sel.sum() < 2:
        return math.inf if edc_db[-2] > fit_db[1] else 0.0
    slope = np.polyfit(t[sel], edc_db[sel], 1)[0]
    return -60.0 / slope


def fractional_delay_kernel(frac: np.ndarray, taps: int = FD_TAPS) -> np.ndarray:
    """Hann-windowed sinc taps for delays ``frac`` in [0, 1); shape [len(frac), taps].

    Tap j sits at integer offset j - taps // 2 from the integer delay.
    """
    half = taps // 2
    offs = np.arange(-half, half + 1)[None, :] - np.asarray(frac, dtype=float)[:, None]
    win = 0.5 * (1 + np.cos(np.pi * offs / (half + 1)))
    return np.sinc(offs) * win


def _axis_images(src: float, length: float, center: float, radius: float):
    """Image coordinates and reflection counts along one axis."""
    n_max = int(np.ceil(radius / (2 * length))) + 1
    n = np.arange(-n_max, n_max + 1)
    pos = np.concatenate([src + 2 * n * length, -src + 2 * n * length])
    refl = np.concatenate([2 * np.abs(n), np.abs(n - 1) + np.abs(n)])
    keep = np.abs(pos - center) <= radius
    return pos[keep], refl[keep]


def simulate_rir(room: RoomSpec, array_center, array: MicArray, source,
                 seed: int = 0, v: float = SPEED_OF_SOUND, jitter: float = 0.05,
                 highpass_hz: float = HIGHPASS_HZ) -> Rir:
    """Multichannel RIR from ``source`` to the array placed at ``array_center``.

    ``source`` is a room-frame position or a :class:`SourcePose` relative to
    the array center. ``jitter`` displaces reflected image sources randomly
    (meters, seeded) to break up the regular image lattice; the direct path
    is never displaced.
    """
    fs = room.sample_rate
    center = np.asarray(array_center, dtype=float)
    mics = center + array.positions
    src = center + source.to_cartesian() if isinstance(source, SourcePose) else np.asarray(source, float)
    for name, pts in (("source", src[None]), ("microphone", mics)):
        if not all(room.contains(p) for p in pts):
            raise GeometryError(f"{name} position outside the room {room.dims}")
    dist0 = np.linalg.norm(mics - src, axis=1)
    beta = room.reflection_coefficient(v, float(dist0.mean()))
    direct = dist0 / v * fs
    half = FD_TAPS // 2
    taps = int(np.ceil(direct.max() + 1.2 * room.t60 * fs)) + half + 2
    radius = (taps + half) / fs * v + array.aperture
    width = taps + 2 * half + 1
    early_end = direct + EARLY_WINDOW_S[1] * fs + 2 * half
    filters = np.zeros((array.num_mics, width))
    rng = np.random.default_rng(seed)
    offsets = np.arange(-half, half + 1)

    def render(images, refl):
        gain = beta ** refl if beta > 0 else (refl == 0).astype(float)
        for m in range(array.num_mics):
            dist = np.linalg.norm(images - mics[m], axis=1)
            delay = dist / v * fs
            ok = delay < taps
            delay, amp = delay[ok], gain[ok] / (4 * np.pi * dist[ok])
            near = delay <= early_end[m]
            # fractional delays near the direct path, rounded ones for the late field
            d_int = np.floor(delay[near]).astype(int)
            kern = fractional_delay_kernel(delay[near] - d_int) * amp[near][:, None]
            idx = (d_int[:, None] + offsets + half).ravel()
            filters[m] += np.bincount(idx, kern.ravel(), minlength=width)
            late = np.rint(delay[~near]).astype(int) + half
            filters[m] += np.bincount(late, amp[~near], minlength=width)

    if beta == 0.0:
        render(src[None], np.zeros(1, dtype=int))
    else:
        ax = [_axis_images(src[i], room.dims[i], center[i], radius) for i in range(3)]
        yy, zz = np.meshgrid(ax[1][0], ax[2][0], indexing="ij")
        ry, rz = np.meshgrid(ax[1][1], ax[2][1], indexing="ij")
        yz = np.stack([yy.ravel(), zz.ravel()], -1)
        ryz = (ry + rz).ravel()
        for x, rx in zip(*ax[0]):
            # one slab of constant x keeps memory bounded
            d2 = (x - center[0]) ** 2 + np.sum((yz - center[1:]) ** 2, axis=1)
            sel = d2 <= radius * radius
            images = np.column_stack([np.full(sel.sum(), x), yz[sel]])
            refl = rx + ryz[sel]
            if jitter > 0:
                disp = rng.uniform(-jitter, jitter, size=images.shape)
                disp[refl == 0] = 0.0
                images = images + disp
            render(images, refl)
    # drop the acausal lead-in reserved for kernel tails
    out = filters[:, half:half + taps].copy()
    if beta > 0 and highpass_hz > 0:
        out = sosfilt(butter(2, highpass_hz, "high", fs=fs, output="sos"), out, axis=-1)
    return Rir(out, np.rint(direct).astype(int), fs)


def split_direct_early(rir: Rir, window_s=EARLY_WINDOW_S) -> tuple[Rir, Rir]:
    """Partition a RIR into [peak - 6 ms, peak + 50 ms] and the remainder."""
    fs = rir.sample_rate
    pre, post = int(round(window_s[0] * fs)), int(round(window_s[1] * fs))
    n = np.arange(rir.filters.shape[-1])[None, :]
    mask = (n >= rir.peaks[:, None] - pre) & (n <= rir.peaks[:, None] + post)
    early = np.where(mask, rir.filters, 0.0)
    late = np.where(mask, 0.0, rir.filters)
    return Rir(early, rir.peaks.copy(), fs), Rir(late, rir.peaks.copy(), fs)


def measure_t60(h: np.ndarray, fs: int, fit_db=(-5.0, -25.0)) -> float:
    """T60 from the Schroeder backward-integrated decay, line fit over ``fit_db``."""
    h = np.asarray(h, dtype=float)
    edc = np.cumsum((h * h)[::-1])[::-1]
    edc_db = 10 * np.log10(edc / edc[0] + 1e-300)
    hi, lo = fit_db
    i0 = int(np.argmax(edc_db <= hi))
    i1 = int(np.argmax(edc_db <= lo))
    if i1 <= i0:
        raise ValueError("decay curve does not span the fit range")
    t = np.arange(i0, i1) / fs
    slope = np.polyfit(t, edc_db[i0:i1], 1)[0]
    return -60.0 / slope
