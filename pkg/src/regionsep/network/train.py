"""Loss, optimizer, gradient checking and the training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from ..autodiff import NumericalError, Tape, Tensor, abs_, as_tensor, log, no_record, stack, stft_op
from ..dsp import StftConfig
from ..geometry import QueryRegion
from .model import BandSplitModel

log_ = logging.getLogger(__name__)

__all__ = ["LAMBDA", "SNR_CAP", "item_loss", "batch_loss", "snr_db", "AdamW", "lr_at",
           "Example", "Dataset", "TrainState", "train", "gradient_check", "loss_value"]

LAMBDA = 0.01
SNR_CAP = 60.0


def snr_db(reference: np.ndarray, estimate: np.ndarray) -> float:
    ref = np.asarray(reference, dtype=float)
    r = float(np.sum((ref - estimate) ** 2))
    e = float(np.sum(ref ** 2))
    if e == 0:
        raise ValueError("SNR needs a nonzero reference")
    if r <= e * 10 ** (-SNR_CAP / 10):
        return SNR_CAP
    return 10 * math.log10(e / r)


def item_loss(estimate: Tensor, target: np.ndarray, q: int, cfg: StftConfig,
              lam: float = LAMBDA) -> Tensor:
    """Q = 0: lam * (|Re Z| + |Im Z|) summed over bins of the estimate's STFT.
    Q > 0: negative SNR, floored at -60 dB."""
    estimate = as_tensor(estimate)
    target = np.asarray(target, dtype=float)
    if estimate.shape != target.shape:
        raise ValueError(f"estimate {estimate.shape} and target {target.shape} lengths differ")
    if q == 0:
        return abs_(stft_op(estimate, cfg)).sum() * lam
    e = float(np.sum(target ** 2))
    if e == 0:
        raise ValueError("Q > 0 with a zero-energy target")
    diff = estimate - target
    r = (diff * diff).sum()
    if r.value <= e * 10 ** (-SNR_CAP / 10):
        return Tensor(-SNR_CAP)
    return (log(r) - math.log(e)) * (10 / math.log(10))


def batch_loss(estimates: Tensor, targets: np.ndarray, qs: Sequence[int], cfg: StftConfig,
               lam: float = LAMBDA) -> Tensor:
    """Mean of per-item losses over the batch axis."""
    losses = [item_loss(estimates[b], targets[b], int(q), cfg, lam) for b, q in enumerate(qs)]
    return stack(losses).mean()


def lr_at(step: int, base_lr: float = 1e-3, steps_per_epoch: int = 1000, decay: float = 0.98,
          every_epochs: int = 2) -> float:
    epoch = step // max(1, steps_per_epoch)
    return base_lr * decay ** (epoch // every_epochs)


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01, clip_norm: float | None = None):
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float | None = None):
        lr = self.lr if lr is None else lr
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient in parameter block {name!r}")
        if self.clip_norm is not None:
            total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if total > self.clip_norm:
                grads = {k: g * (self.clip_norm / total) for k, g in grads.items()}
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, g in grads.items():
            p = params[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            p *= 1 - lr * self.weight_decay
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> tuple[dict, dict]:
        meta = {"t": self.t, "lr": self.lr, "betas": list(self.betas), "eps": self.eps,
                "weight_decay": self.weight_decay, "clip_norm": self.clip_norm}
        tensors = {f"opt.m/{k}": v for k, v in self.m.items()}
        tensors.update({f"opt.v/{k}": v for k, v in self.v.items()})
        return meta, tensors

    @classmethod
    def from_state(cls, meta: dict, tensors: dict) -> "AdamW":
        opt = cls(meta["lr"], meta["betas"], meta["eps"], meta["weight_decay"], meta.get("clip_norm"))
        opt.t = int(meta["t"])
        for k, v in tensors.items():
            if k.startswith("opt.m/"):
                opt.m[k[6:]] = v.copy()
            elif k.startswith("opt.v/"):
                opt.v[k[6:]] = v.copy()
        return opt


# ------------------------------------------------------------------ data

@dataclass
class Example:
    mixture: np.ndarray  # [M, L]
    target: np.ndarray  # [L]
    query: QueryRegion
    q: int
    name: str = ""


class Dataset:
    """Fixed list of equal-length examples with cached query-independent features."""

    def __init__(self, examples: Sequence[Example], model: BandSplitModel):
        if not examples:
            raise ValueError("empty dataset")
        lengths = {e.mixture.shape[-1] for e in examples}
        if len(lengths) != 1:
            raise ValueError(f"examples must share one length, got {sorted(lengths)}")
        self.examples = list(examples)
        self._feats = [model.front_end(e.mixture) for e in self.examples]

    def __len__(self):
        return len(self.examples)

    def batch(self, idx: Sequence[int]):
        f0 = self._feats
        feats = {
            "Y": np.concatenate([f0[i]["Y"] for i in idx]),
            "phasors": np.concatenate([f0[i]["phasors"] for i in idx]),
            "spatial": None if f0[0]["spatial"] is None else np.concatenate([f0[i]["spatial"] for i in idx]),
            "length": f0[0]["length"],
        }
        ex = [self.examples[i] for i in idx]
        return feats, np.stack([e.target for e in ex]), [e.query for e in ex], [e.q for e in ex]


def batch_indices(seed: int, step: int, n: int, batch_size: int) -> np.ndarray:
    """Batch for ``step``: a function of (seed, step) only, so resuming is exact."""
    rng = np.random.default_rng([seed, step])
    return rng.choice(n, size=batch_size, replace=batch_size > n)


@dataclass
class TrainState:
    step: int = 0
    history: list = field(default_factory=list)  # (step, loss, lr)


def train(model: BandSplitModel, data: Dataset, steps: int, seed: int, batch_size: int = 4,
          optimizer: AdamW | None = None, state: TrainState | None = None,
          steps_per_epoch: int = 1000, base_lr: float = 1e-3, lam: float = LAMBDA,
          on_step: Callable[[TrainState, float], None] | None = None) -> tuple[AdamW, TrainState]:
    """Run ``steps`` optimizer steps from ``state.step``."""
    opt = optimizer or AdamW(lr=base_lr)
    state = state or TrainState()
    stft_cfg = model.config.stft
    end = state.step + steps
    while state.step < end:
        idx = batch_indices(seed, state.step, len(data), batch_size)
        feats, targets, queries, qs = data.batch(idx)
        params = model.tensors(requires_grad=True)
        with Tape() as tape:
            out = model.forward(None, queries, params=params, training=True, update_stats=True, feats=feats)
            loss = batch_loss(out.estimate, targets, qs, stft_cfg, lam)
        grads = tape.backward(loss, params)
        lr = lr_at(state.step, base_lr, steps_per_epoch)
        opt.step(model.params, grads, lr)
        state.step += 1
        value = float(loss.value)
        state.history.append((state.step, value, lr))
        if on_step is not None:
            on_step(state, value)
    return opt, state


# --------------------------------------------------------- gradient check

def loss_value(model: BandSplitModel, feats, targets, queries, qs, params=None, distances=None) -> float:
    with no_record():
        out = model.forward(None, queries, params=params, training=True, feats=feats, distances=distances)
        return float(batch_loss(out.estimate, targets, qs, model.config.stft).value)


def gradient_check(model: BandSplitModel, feats, targets, queries, qs,
                   eps: Sequence[float] = (1e-4, 1e-5, 1e-6),
                   entries: int = 2, seed: int = 0, blocks: Iterable[str] | None = None,
                   check_distance: bool = False) -> dict[str, float]:
    """Relative error between analytic and central-difference gradients per block.

    Each block is probed along one random unit direction and at ``entries``
    single coordinates; the worst relative error over probes is reported.
    Each probe uses the best of the step sizes in ``eps``: small steps suffer
    roundoff, large ones can straddle the kinks of |x| in the Q = 0 loss,
    while a wrong gradient disagrees at every step size.
    """
    rng = np.random.default_rng(seed)
    params = model.tensors(requires_grad=True)
    dist = None
    if check_distance:
        dist = Tensor(np.array([q.dist_high for q in queries]), requires_grad=True)
    with Tape() as tape:
        out = model.forward(None, queries, params=params, training=True, feats=feats, distances=dist)
        loss = batch_loss(out.estimate, targets, qs, model.config.stft)
    leaves = dict(params)
    if dist is not None:
        leaves["distance"] = dist
    grads = tape.backward(loss, leaves)
    base = {k: v.copy() for k, v in model.params.items()}

    def evaluate(name, delta):
        if name == "distance":
            d = Tensor(dist.value + delta)
            return loss_value(model, feats, targets, queries, qs, distances=d)
        p = {k: Tensor(v) for k, v in base.items()}
        p[name] = Tensor(base[name] + delta)
        return loss_value(model, feats, targets, queries, qs, params=p)

    errors = {}
    names = list(blocks) if blocks is not None else list(grads)
    for name in names:
        g = grads[name]
        shape = g.shape
        probes = []
        u = rng.standard_normal(shape)
        probes.append(u / np.linalg.norm(u))
        for flat in rng.choice(g.size, size=min(entries, g.size), replace=False):
            e = np.zeros(g.size)
            e[flat] = 1.0
            probes.append(e.reshape(shape))
        worst = 0.0
        for u in probes:
            analytic = float(np.sum(g * u))
            best = math.inf
            for h in eps:
                numeric = (evaluate(name, h * u) - evaluate(name, -h * u)) / (2 * h)
                scale = max(abs(analytic), abs(numeric))
                best = min(best, 0.0 if scale < 1e-9 else abs(analytic - numeric) / scale)
                if best < 1e-6:
                    break
            worst = max(worst, best)
        errors[name] = worst
    return errors
