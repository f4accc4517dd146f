"""Minimal reverse-mode differentiation over numpy arrays.

Operations record themselves on the active :class:`Tape` only when some input
requires a gradient, so inference runs through the same code with no
bookkeeping. Sequence-heavy pieces (LSTM, STFT, inverse STFT) are single
fused primitives with hand-written adjoints to keep the tape short.
"""
from __future__ import annotations

import numpy as np

from .dsp import StftConfig, frame_signal, ola_norm, overlap_add

__all__ = [
    "Tensor", "Tape", "NumericalError", "as_tensor",
    "concat", "stack", "tanh", "sigmoid", "log", "sqrt", "abs_", "exp",
    "lstm", "stft_op", "istft_op", "no_record",
]


class NumericalError(FloatingPointError):
    """Raised when a gradient or loss turns non-finite."""


_TAPES: list["Tape"] = []


class Tape:
    """Records differentiable operations executed inside ``with Tape():``."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)

    def backward(self, loss: "Tensor", leaves: dict[str, "Tensor"] | None = None) -> dict[str, np.ndarray]:
        """Propagate d(loss)/d(node) through the record; return leaf gradients by name."""
        if loss.value.size != 1:
            raise ValueError("backward needs a scalar loss")
        if not np.isfinite(loss.value).all():
            raise NumericalError(f"non-finite loss {loss.value}")
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            g = node.grad
            if g is None or node._back is None:
                continue
            for parent, pg in zip(node._parents, node._back(g)):
                if pg is None or not parent.requires_grad:
                    continue
                parent.grad = pg if parent.grad is None else parent.grad + pg
        grads = {}
        for name, leaf in (leaves or {}).items():
            g = np.zeros_like(leaf.value) if leaf.grad is None else leaf.grad
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient in parameter block {name!r}")
            grads[name] = g
        return grads


class no_record:
    """Context manager suspending all active tapes."""

    def __enter__(self):
        self._saved = list(_TAPES)
        _TAPES.clear()

    def __exit__(self, *exc):
        _TAPES.extend(self._saved)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value, parents, back) -> "Tensor":
    out = Tensor(value)
    if _TAPES and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._back = back
        _TAPES[-1].nodes.append(out)
    return out


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_back")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=float)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._back = None

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    # arithmetic -------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        sa, sb = self.shape, other.shape
        return _make(self.value + other.value, (self, other),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        sa, sb = self.shape, other.shape
        return _make(self.value - other.value, (self, other),
                     lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __neg__(self):
        return _make(-self.value, (self,), lambda g: (-g,))

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self.value, other.value
        return _make(a * b, (self, other),
                     lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self.value, other.value
        return _make(a / b, (self, other),
                     lambda g: (_unbroadcast(g / b, a.shape),
                                _unbroadcast(-g * a / (b * b), b.shape)))

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self.value, other.value
        return _make(a @ b, (self, other),
                     lambda g: (_unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape),
                                _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)))

    def __rmatmul__(self, other):
        return as_tensor(other) @ self

    def __getitem__(self, idx):
        shape = self.shape
        advanced = any(isinstance(i, (list, np.ndarray)) for i in
                       (idx if isinstance(idx, tuple) else (idx,)))

        def back(g):
            full = np.zeros(shape)
            if advanced:
                np.add.at(full, idx, g)
            else:
                full[idx] += g
            return (full,)

        return _make(self.value[idx], (self,), back)

    # shape ------------------------------------------------------------
    def reshape(self, *shape):
        old = self.shape
        return _make(self.value.reshape(*shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        inv = np.argsort(axes)
        return _make(self.value.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    def swapaxes(self, a, b):
        return _make(np.swapaxes(self.value, a, b), (self,), lambda g: (np.swapaxes(g, a, b),))

    def expand(self, shape):
        old = self.shape
        return _make(np.broadcast_to(self.value, shape).copy(), (self,),
                     lambda g: (_unbroadcast(g, old),))

    # reductions -------------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return _make(self.value.sum(axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None, keepdims=False):
        n = self.value.size if axis is None else np.prod(
            [self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis, keepdims) * (1.0 / n)


# elementwise functions ---------------------------------------------------


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.value)
    return _make(y, (x,), lambda g: (g * (1 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1 + np.tanh(0.5 * x.value))
    return _make(y, (x,), lambda g: (g * y * (1 - y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.value)
    return _make(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    v = x.value
    return _make(np.log(v), (x,), lambda g: (g / v,))


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.value)
    return _make(y, (x,), lambda g: (g / (2 * y),))


def abs_(x: Tensor) -> Tensor:
    v = x.value
    return _make(np.abs(v), (x,), lambda g: (g * np.sign(v),))


def concat(xs, axis=-1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([x.value for x in xs], axis=axis), tuple(xs),
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(xs, axis=0) -> Tensor:
    xs = [as_tensor(x) for x in xs]

    def back(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([x.value for x in xs], axis=axis), tuple(xs), back)


# fused LSTM ---------------------------------------------------------------


def _sig(z):
    return 0.5 * (1 + np.tanh(0.5 * z))


def lstm(x: Tensor, w_in: Tensor, w_rec: Tensor, bias: Tensor, reverse: bool = False) -> Tensor:
    """Single-layer LSTM over axis 1 of ``x`` [B, L, D]; returns hidden states [B, L, H].

    Gate order (input, forget, cell, output); zero initial state. ``reverse``
    runs the recurrence from the last step to the first.
    """
    xv = x.value[:, ::-1] if reverse else x.value
    B, L, _ = xv.shape
    H = w_rec.shape[1]
    W, U = w_in.value, w_rec.value
    zx = xv @ W.T + bias.value  # [B, L, 4H]
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    hs = np.empty((L, B, H))
    cs = np.empty((L, B, H))
    gates = np.empty((L, B, 4 * H))
    for t in range(L):
        z = zx[:, t] + h @ U.T
        a = np.empty_like(z)
        a[:, :2 * H] = _sig(z[:, :2 * H])
        a[:, 2 * H:3 * H] = np.tanh(z[:, 2 * H:3 * H])
        a[:, 3 * H:] = _sig(z[:, 3 * H:])
        c = a[:, H:2 * H] * c + a[:, :H] * a[:, 2 * H:3 * H]
        h = a[:, 3 * H:] * np.tanh(c)
        hs[t], cs[t], gates[t] = h, c, a
    out = hs.transpose(1, 0, 2)
    if reverse:
        out = out[:, ::-1]

    def back(g):
        g = g[:, ::-1] if reverse else g
        dz_all = np.empty((L, B, 4 * H))
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        for t in range(L - 1, -1, -1):
            a = gates[t]
            i, f, gg, o = a[:, :H], a[:, H:2 * H], a[:, 2 * H:3 * H], a[:, 3 * H:]
            tc = np.tanh(cs[t])
            c_prev = cs[t - 1] if t > 0 else np.zeros((B, H))
            dh = g[:, t] + dh_next
            dc = dh * o * (1 - tc * tc) + dc_next
            dz = np.empty((B, 4 * H))
            dz[:, :H] = dc * gg * i * (1 - i)
            dz[:, H:2 * H] = dc * c_prev * f * (1 - f)
            dz[:, 2 * H:3 * H] = dc * i * (1 - gg * gg)
            dz[:, 3 * H:] = dh * tc * o * (1 - o)
            dc_next = dc * f
            dh_next = dz @ U
            dz_all[t] = dz
        G = 4 * H
        dU = dz_all[1:].reshape(-1, G).T @ hs[:-1].reshape(-1, H)
        dzx = dz_all.transpose(1, 0, 2)  # [B, L, 4H]
        dW = dzx.reshape(-1, G).T @ xv.reshape(B * L, -1)
        db = dz_all.sum(axis=(0, 1))
        dx = dzx @ W
        if reverse:
            dx = dx[:, ::-1]
        return dx, dW, dU, db

    return _make(np.ascontiguousarray(out), (x, w_in, w_rec, bias), back)


# STFT primitives -----------------------------------------------------------


def _reflect_index(length: int, pad: int) -> np.ndarray:
    idx = np.arange(-pad, length + pad)
    idx = np.abs(idx)
    over = idx >= length
    idx[over] = 2 * (length - 1) - idx[over]
    return idx


def _frame_adjoint(g_frames: np.ndarray, hop: int) -> np.ndarray:
    return overlap_add(g_frames, hop)


def stft_op(x: Tensor, cfg: StftConfig) -> Tensor:
    """STFT of waveform(s) [..., T] as a real tensor [..., 2, frames, bins] (re, im)."""
    length = x.shape[-1]
    spec = np.fft.rfft(frame_signal(x.value, cfg), axis=-1)
    out = np.stack([spec.real, spec.imag], axis=-3)
    n = cfg.fft_size
    scale = np.full(cfg.num_bins, 0.5)
    scale[0] = 1.0
    scale[-1] = 1.0 if n % 2 == 0 else 0.5
    win = cfg.window()
    ridx = _reflect_index(length, cfg.pad)

    def back(g):
        G = (g[..., 0, :, :] + 1j * g[..., 1, :, :]) * scale
        d_frames = n * np.fft.irfft(G, n=n, axis=-1) * win
        d_ola = _frame_adjoint(d_frames, cfg.hop)
        lead = d_ola.shape[:-1]
        d_pad = np.zeros(lead + (ridx.size,))
        d_pad[..., : d_ola.shape[-1]] = d_ola
        flat = d_pad.reshape(-1, ridx.size)
        dx = np.stack([np.bincount(ridx, weights=row, minlength=length) for row in flat])
        return (dx.reshape(*lead, length),)

    return _make(out, (x,), back)


def istft_op(z: Tensor, cfg: StftConfig, length: int) -> Tensor:
    """Inverse STFT of a real tensor [..., 2, frames, bins] to waveform(s) [..., length]."""
    n = cfg.fft_size
    n_frames = z.shape[-2]
    if cfg.num_frames(length) != n_frames:
        raise ValueError(f"{n_frames} frames inconsistent with length {length}")
    spec = z.value[..., 0, :, :] + 1j * z.value[..., 1, :, :]
    win = cfg.window()
    norm = ola_norm(cfg, n_frames)
    norm = np.where(norm > 1e-10, norm, 1.0)
    frames = np.fft.irfft(spec, n=n, axis=-1) * win
    out = (overlap_add(frames, cfg.hop) / norm)[..., cfg.pad: cfg.pad + length]
    c = np.full(cfg.num_bins, 2.0)
    c[0] = 1.0
    if n % 2 == 0:
        c[-1] = 1.0

    def back(g):
        full = np.zeros(g.shape[:-1] + (norm.size,))
        full[..., cfg.pad: cfg.pad + length] = g
        full = full / norm
        idx = np.arange(n_frames)[:, None] * cfg.hop + np.arange(n)[None, :]
        g_frames = full[..., idx] * win
        G = np.fft.rfft(g_frames, axis=-1) * (c / n)
        G.imag[..., 0] = 0.0
        if n % 2 == 0:
            G.imag[..., -1] = 0.0
        return (np.stack([G.real, G.imag], axis=-3),)

    return _make(out, (z,), back)
