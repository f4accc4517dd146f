import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from regionsep.metrics import (
    CSV_FIELDS,
    DECAY_CAP,
    SDR_CAP,
    EvalRow,
    energy_decay,
    rows_to_csv,
    sdr,
    snr,
    summarize,
    summary_json,
)


def test_sdr_examples(rng):
    s = rng.standard_normal(1000)
    assert sdr(s, s) == SDR_CAP
    assert sdr(s, 2 * s) == SDR_CAP
    e = rng.standard_normal(1000)
    e -= e @ s / (s @ s) * s
    e *= np.sqrt(np.sum(s ** 2) / 10 / np.sum(e ** 2))
    assert sdr(s, s + e) == pytest.approx(10.0, abs=1e-9)


def test_sdr_floor_and_errors(rng):
    s = rng.standard_normal(100)
    assert sdr(s, np.zeros(100)) == -SDR_CAP
    with pytest.raises(ValueError):
        sdr(np.zeros(10), np.ones(10))
    with pytest.raises(ValueError):
        sdr(np.ones(10), np.ones(11))


@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100), st.floats(-100, -0.01))
def test_sdr_scale_invariant(seed, a, b):
    g = np.random.default_rng(seed)
    s, e = g.standard_normal((2, 200))
    base = sdr(s, e)
    assert sdr(s, a * e) == pytest.approx(base, abs=1e-6)
    assert sdr(a * s, e) == pytest.approx(base, abs=1e-6)
    assert -SDR_CAP <= sdr(s, b * e) <= SDR_CAP


def test_snr_not_scale_invariant():
    s = np.ones(10)
    assert snr(s, 0.9 * s) == pytest.approx(20.0)
    assert snr(s, 2 * s) == pytest.approx(0.0)


def test_energy_decay_examples(rng):
    y = rng.standard_normal(500)
    assert energy_decay(y, y) == 0.0
    assert energy_decay(y, 0.1 * y) == pytest.approx(20.0)
    assert energy_decay(y, np.zeros(500)) == DECAY_CAP
    with pytest.raises(ValueError):
        energy_decay(np.zeros(5), np.zeros(5))


def test_csv_and_summary():
    rows = [EvalRow("a", 0, decay=30.0), EvalRow("b", 1, 10.0, 4.0), EvalRow("c", 1, 12.0, 2.0),
            EvalRow("d", 2, 8.0, 5.0)]
    table = list(csv.DictReader(io.StringIO(rows_to_csv(rows))))
    assert list(table[0]) == CSV_FIELDS
    assert table[1]["sdr_improvement_db"] == "6.0000"
    assert table[0]["sdr_db"] == "" and table[0]["stoi"] == "n/a"
    summ = summarize(rows, "model")
    assert summ["groups"]["Q=0"]["decay_db"]["mean"] == 30.0
    assert summ["groups"]["Q=1"]["sdr_improvement_db"] == {"mean": 8.0, "std": 2.0, "n": 2}
    assert set(summ["groups"]) == {"Q=0", "Q=1", "Q=2"}
    assert json.loads(summary_json(rows, "model")) == summ
