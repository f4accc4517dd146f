import sys

import numpy as np
import pytest
from hypothesis import given, strategies as st

from regionsep.autodiff import NumericalError, Tensor
from regionsep.dsp import StftConfig
from regionsep.geometry import QueryRegion
from regionsep.network.checkpoint import load_checkpoint, save_checkpoint
from regionsep.network.model import BandSplitModel, preset
from regionsep.network.train import (
    SNR_CAP,
    AdamW,
    Dataset,
    Example,
    TrainState,
    batch_indices,
    gradient_check,
    item_loss,
    lr_at,
    snr_db,
    train,
)

CFG = StftConfig()


def test_loss_examples(rng):
    z = rng.standard_normal(2000)
    assert float(item_loss(Tensor(np.zeros(2000)), np.zeros(2000), 0, CFG).value) == 0.0
    assert float(item_loss(Tensor(z), z, 1, CFG).value) == -SNR_CAP
    e = rng.standard_normal(2000)
    e *= np.sqrt(np.sum(z ** 2) / 100 / np.sum(e ** 2))
    assert float(item_loss(Tensor(z + e), z, 1, CFG).value) == pytest.approx(-20.0, abs=1e-9)


def test_q0_loss_is_weighted_spectral_l1(rng):
    x = rng.standard_normal(2000)
    from regionsep.dsp import stft
    spec = stft(x).data
    expect = 0.01 * (np.abs(spec.real).sum() + np.abs(spec.imag).sum())
    assert float(item_loss(Tensor(x), np.zeros(2000), 0, CFG).value) == pytest.approx(expect, rel=1e-12)
    assert float(item_loss(Tensor(x), np.zeros(2000), 0, CFG, lam=1e-3).value) == pytest.approx(expect / 10)


def test_loss_errors(rng):
    with pytest.raises(ValueError):
        item_loss(Tensor(np.zeros(10)), np.zeros(11), 1, CFG)
    with pytest.raises(ValueError):
        item_loss(Tensor(np.ones(2000)), np.zeros(2000), 1, CFG)


def test_snr_db():
    z = np.ones(100)
    assert snr_db(z, z) == SNR_CAP
    assert snr_db(z, 0.9 * z) == pytest.approx(20.0)


def test_adamw_zero_gradient_is_pure_decay():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    AdamW(lr=0.1, weight_decay=0.01).step(p, {"w": np.zeros(3)})
    np.testing.assert_allclose(p["w"], np.array([1.0, -2.0, 3.0]) * (1 - 0.1 * 0.01))


def test_adamw_first_step_moves_by_lr():
    p = {"w": np.zeros(3)}
    AdamW(lr=0.1, weight_decay=0.0).step(p, {"w": np.array([2.0, -5.0, 0.5])})
    np.testing.assert_allclose(p["w"], [-0.1, 0.1, -0.1], rtol=1e-6)


def test_adamw_rejects_nonfinite():
    with pytest.raises(NumericalError, match="'w'"):
        AdamW().step({"w": np.zeros(2)}, {"w": np.array([1.0, np.nan])})


def test_adamw_clipping():
    p = {"w": np.zeros(2)}
    opt = AdamW(lr=1.0, weight_decay=0.0, clip_norm=1.0)
    opt.step(p, {"w": np.array([30.0, 40.0])})
    np.testing.assert_allclose(opt.m["w"], 0.1 * np.array([0.6, 0.8]))


def test_lr_schedule():
    assert lr_at(0) == 1e-3
    assert lr_at(1999, steps_per_epoch=1000) == 1e-3
    assert lr_at(2000, steps_per_epoch=1000) == pytest.approx(0.98e-3)
    assert lr_at(4000, steps_per_epoch=1000) == pytest.approx(0.98 ** 2 * 1e-3)


@given(st.integers(0, 1000), st.integers(0, 10**6))
def test_batch_indices_depend_only_on_seed_and_step(seed, step):
    a = batch_indices(seed, step, 16, 4)
    assert np.array_equal(a, batch_indices(seed, step, 16, 4))
    assert len(set(a.tolist())) == 4 and a.max() < 16


def _examples(rng, n=6, L=1600):
    out = []
    for i in range(n):
        q = i % 2
        x = rng.standard_normal((8, L)) * 0.1
        target = x[0] * 0.5 if q else np.zeros(L)
        out.append(Example(x, target, QueryRegion.angular(-30 + 10 * i, 40 + 10 * i), q))
    return out


def test_dataset_validation(rng):
    m = BandSplitModel(preset("toy"))
    with pytest.raises(ValueError):
        Dataset([], m)
    ex = _examples(rng, 2)
    ex[1] = Example(np.zeros((8, 2000)), np.zeros(2000), ex[1].query, 0)
    with pytest.raises(ValueError):
        Dataset(ex, m)


def test_resume_is_bit_exact(tmp_path, rng):
    ex = _examples(rng)
    m1 = BandSplitModel(preset("toy"), seed=0)
    opt1, st1 = train(m1, Dataset(ex, m1), 4, seed=9, batch_size=2)

    m2 = BandSplitModel(preset("toy"), seed=0)
    opt2, st2 = train(m2, Dataset(ex, m2), 2, seed=9, batch_size=2)
    save_checkpoint(tmp_path / "c", m2, opt2, st2.step)
    m3, opt3, step, _ = load_checkpoint(tmp_path / "c")
    _, st3 = train(m3, Dataset(ex, m3), 2, seed=9, batch_size=2, optimizer=opt3, state=TrainState(step))
    assert st3.step == 4
    assert [h[1] for h in st3.history] == [h[1] for h in st1.history[2:]]
    for k in m1.params:
        np.testing.assert_array_equal(m3.params[k], m1.params[k])


def test_training_reduces_loss_on_tiny_set(rng):
    ex = _examples(rng, 4)
    m = BandSplitModel(preset("toy"), seed=0)
    _, st = train(m, Dataset(ex, m), 30, seed=0, batch_size=4, base_lr=3e-3)
    losses = [h[1] for h in st.history]
    assert np.mean(losses[-5:]) < np.mean(losses[:5])


@pytest.mark.parametrize("variant", ["A", "D"])
def test_gradient_check_subset(variant, rng):
    m = BandSplitModel(preset("toy", variant=variant), seed=1)
    x = rng.standard_normal((2, 8, 1200)) * 0.1
    qs = ([QueryRegion.angular(-30, 40)] * 2 if variant == "A" else [QueryRegion.spherical(0.9)] * 2)
    targets = np.stack([0.05 * rng.standard_normal(1200), np.zeros(1200)])
    blocks = [k for k in m.params if k.startswith(("mask.1", "blk.1.b", "agg.2", "deg.0", "in.reg.3"))]
    errs = gradient_check(m, m.front_end(x), targets, qs, [1, 0], blocks=blocks, entries=1)
    assert errs and max(errs.values()) < 1e-4


def test_gradient_check_flags_wrong_gradient(rng, monkeypatch):
    tr = sys.modules["regionsep.network.train"]  # the package re-exports train()
    m = BandSplitModel(preset("toy"), seed=1)
    x = rng.standard_normal((1, 8, 1200)) * 0.1
    real_backward = tr.Tape.backward

    def broken(self, loss, leaves=None):
        grads = real_backward(self, loss, leaves)
        grads["mask.0.fc2.b"] = grads["mask.0.fc2.b"] * 1.5
        return grads

    monkeypatch.setattr(tr.Tape, "backward", broken)
    errs = gradient_check(m, m.front_end(x), 0.05 * rng.standard_normal((1, 1200)),
                          [QueryRegion.angular(0, 60)], [1], blocks=["mask.0.fc2.b"], entries=1)
    assert errs["mask.0.fc2.b"] > 0.1
