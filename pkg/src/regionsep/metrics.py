"""SI-SDR, SNR and Q=0 energy decay, plus per-utterance reports."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

__all__ = ["SDR_CAP", "DECAY_CAP", "sdr", "snr", "energy_decay", "EvalRow", "rows_to_csv", "summarize", "summary_json"]

SDR_CAP = 60.0
DECAY_CAP = 80.0


def _pair(reference, estimate):
    s = np.asarray(reference, dtype=float)
    e = np.asarray(estimate, dtype=float)
    if s.shape != e.shape:
        raise ValueError(f"reference {s.shape} and estimate {e.shape} differ in shape")
    if not np.any(s):
        raise ValueError("reference is all zeros")
    return s, e


def _ratio_db(num: float, den: float, cap: float) -> float:
    if num == 0:
        return -cap
    if den <= num * 10 ** (-cap / 10):
        return cap
    if num <= den * 10 ** (-cap / 10):
        return -cap
    return 10 * math.log10(num / den)


def sdr(reference, estimate) -> float:
    """Scale-invariant SDR in dB, clipped to [-60, 60]."""
    s, e = _pair(reference, estimate)
    alpha = float(np.dot(e, s) / np.dot(s, s))
    proj = alpha * s
    return _ratio_db(float(np.sum(proj ** 2)), float(np.sum((proj - e) ** 2)), SDR_CAP)


def snr(reference, estimate) -> float:
    s, e = _pair(reference, estimate)
    return _ratio_db(float(np.sum(s ** 2)), float(np.sum((s - e) ** 2)), SDR_CAP)


def energy_decay(mixture_ref, estimate) -> float:
    """10 log10(sum y^2 / sum z^2), capped at 80 dB."""
    y = np.asarray(mixture_ref, dtype=float)
    z = np.asarray(estimate, dtype=float)
    ey = float(np.sum(y ** 2))
    if ey == 0:
        raise ValueError("mixture is all zeros")
    ez = float(np.sum(z ** 2))
    if ez <= ey * 10 ** (-DECAY_CAP / 10):
        return DECAY_CAP
    return 10 * math.log10(ey / ez)


@dataclass
class EvalRow:
    scene: str
    q: int
    sdr: float | None = None  # Q > 0
    sdr_mixture: float | None = None
    decay: float | None = None  # Q = 0

    @property
    def improvement(self) -> float | None:
        if self.sdr is None or self.sdr_mixture is None:
            return None
        return self.sdr - self.sdr_mixture


def _fmt(v):
    return "" if v is None else f"{v:.4f}"


CSV_FIELDS = ["scene", "Q", "sdr_db", "sdr_mixture_db", "sdr_improvement_db", "decay_db", "stoi", "pesq"]


def rows_to_csv(rows: Iterable[EvalRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in rows:
        w.writerow([r.scene, r.q, _fmt(r.sdr), _fmt(r.sdr_mixture), _fmt(r.improvement), _fmt(r.decay),
                    "n/a", "n/a"])
    return buf.getvalue()


def _stats(values):
    if not values:
        return None
    a = np.asarray(values, dtype=float)
    return {"mean": float(a.mean()), "std": float(a.std()), "n": int(a.size)}


def summarize(rows: Iterable[EvalRow], system: str = "") -> dict:
    """Group by Q: decay for Q=0, SDR and improvement for Q>0."""
    rows = list(rows)
    out = {"system": system, "count": len(rows), "groups": {}}
    for q in sorted({r.q for r in rows}):
        sel = [r for r in rows if r.q == q]
        if q == 0:
            out["groups"]["Q=0"] = {"decay_db": _stats([r.decay for r in sel])}
        else:
            out["groups"][f"Q={q}"] = {
                "sdr_db": _stats([r.sdr for r in sel]),
                "sdr_improvement_db": _stats([r.improvement for r in sel if r.improvement is not None]),
            }
    out["stoi"] = out["pesq"] = "n/a"
    return out


def summary_json(rows: Iterable[EvalRow], system: str = "") -> str:
    return json.dumps(summarize(rows, system), indent=2)
