"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py`` or ``python3 tests/test_acceptance.py``.
Criterion 6 trains two toy models and takes about 12 minutes.
"""
import math
import sys
import time

import numpy as np
import pytest

from regionsep.baselines import SpatialCovariance, das_beamform, irm_mvdr, mvdr_weights
from regionsep.dsp import Spectrogram, StftConfig, istft, stft
from regionsep.geometry import MicArray, QueryRegion, SourcePose, enumerate_pairs, make_pair, wrap_deg
from regionsep.metrics import energy_decay, sdr
from regionsep.network.compose import ring_extract
from regionsep.network.model import BandSplitModel, preset
from regionsep.network.train import Dataset, gradient_check, train
from regionsep.region import (
    AGG_METHODS,
    BandLayout,
    SamplingStrategy,
    aggregate,
    build_band_layout,
    init_aggregator,
    sample_directions,
)
from regionsep.sim import PROFILES, RoomSpec, get_profile, measure_t60, mix_scene, random_scene, simulate_rir
from regionsep.sim.corpus import SyntheticCorpus
from regionsep.sim.scene import REF_MIC
from regionsep.sim.toy import narrow_family, scene_examples
from regionsep.spatial import direction_feature, ipd

CFG = StftConfig()
ANECHOIC = RoomSpec((6, 5, 3), 0.0)
CENTER = (3.0, 2.5, 1.2)


def report(n, ok, detail):
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}", flush=True)
    return ok


def image(signal, array, pose, room=ANECHOIC, seed=0):
    rir = simulate_rir(room, CENTER, array, pose, seed=seed)
    return np.stack([np.convolve(signal, h)[: signal.size] for h in rir.filters])


# ---------------------------------------------------------------- 1

def check_dsp():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst_rt = worst_lin = 0.0
    for _ in range(100):
        n = int(rng.integers(2000, 32000))
        x = rng.standard_normal(n)
        y = istft(stft(x))
        worst_rt = max(worst_rt, np.linalg.norm(y - x) / np.linalg.norm(x))
        z = rng.standard_normal(n)
        a, b = rng.standard_normal(2)
        lhs = stft(a * x + b * z).data
        rhs = a * stft(x).data + b * stft(z).data
        worst_lin = max(worst_lin, np.abs(lhs - rhs).max() / np.abs(rhs).max())
    elapsed = time.perf_counter() - t0
    ok = worst_rt < 1e-6 and worst_lin < 1e-9 and elapsed < 10
    return ok, f"round trip {worst_rt:.1e} (<1e-6), linearity {worst_lin:.1e} (<1e-9), {elapsed:.1f} s (<10)"


# ---------------------------------------------------------------- 2

def check_spatial():
    rng = np.random.default_rng(2)
    arr = MicArray.circular(8, 0.05)
    pairs = enumerate_pairs(arr)
    grid = np.arange(-180, 180, 5.0)
    hits = 0
    for _ in range(50):
        az = rng.uniform(-180, 180)
        pose = SourcePose(az, 0.0, rng.uniform(0.5, 2.0))
        x = image(rng.standard_normal(8000), arr, pose)
        v = direction_feature(stft(x), pairs, grid).mean(axis=(1, 2))
        hits += abs(wrap_deg(grid[np.argmax(v)] - az)) <= 5.0

    # integer-delay comb: tones on every 4th bin, so leakage stays off the active bins
    bins = np.arange(4, 256, 4)
    phases = rng.uniform(0, 2 * np.pi, bins.size)

    def comb(delay):
        t = np.arange(8000) - delay
        return np.cos(2 * np.pi * bins[:, None] * t[None] / CFG.fft_size + phases[:, None]).sum(0)

    pair = [make_pair(MicArray.circular(2, 0.1), 0, 1)]
    ipd_err = 0.0
    for n in (-3, -1, 1, 2, 5):
        phase = ipd(stft(np.stack([comb(0), comb(n)])), pair)[0][3:-3, bins]
        expect = 2 * np.pi * bins * n / CFG.fft_size
        ipd_err = max(ipd_err, np.abs(np.angle(np.exp(1j * (phase - expect[None])))).max())
    ok = hits >= 48 and ipd_err < 1e-3
    return ok, f"argmax within 5 deg in {hits}/50 (>=48), IPD delay error {ipd_err:.1e} rad (<1e-3)"


# ---------------------------------------------------------------- 3

def expected_dim(method, n, bw, p):
    return {"concat": n * bw, "tac": n * p, "taa": p, "rnn": p, "rnn-loop": 2 * p}[method]


def _sig(z):
    return 1.0 / (1.0 + math.exp(-z))


def lstm_oracle(seq, w_in, w_rec, b):
    H = w_rec.shape[1]
    h, c = [0.0] * H, [0.0] * H
    for x in seq:
        z = [sum(w_in[g][d] * x[d] for d in range(len(x))) + sum(w_rec[g][j] * h[j] for j in range(H)) + b[g]
             for g in range(4 * H)]
        c = [_sig(z[H + j]) * c[j] + _sig(z[j]) * math.tanh(z[2 * H + j]) for j in range(H)]
        h_prev = h
        h = [_sig(z[3 * H + j]) * math.tanh(c[j]) for j in range(H)]
    return np.array(h_prev), np.array(h)


def check_region():
    rng = np.random.default_rng(3)
    layout = build_band_layout("toy4")
    P, N, T = 6, 5, 4
    dims_ok = True
    for method in AGG_METHODS:
        params = init_aggregator(method, layout, P, rng)
        desc = aggregate(rng.standard_normal((2, N, T, 257)), method, params, layout)
        dims_ok &= desc.dims == [expected_dim(method, N, bw, P) for bw in layout.widths]

    worst = 0.0
    for k in range(1000):
        lo, width = rng.uniform(-180, 180), rng.uniform(1, 359)
        hi = lo + width if lo + width <= 180 else lo + width - 360
        q = QueryRegion.angular(lo, hi)
        if k % 2:
            step = float(rng.uniform(1, 30))
            out = sample_directions(q, SamplingStrategy("interval", step))
            n = math.floor(q.azimuth_width / step + 1e-9) + 1
            expect = np.arange(n) * step
        else:
            n = int(rng.integers(2, 13))
            out = sample_directions(q, SamplingStrategy("number", n))
            expect = q.azimuth_width * np.arange(n) / (n - 1)
        if len(out) != len(expect):
            worst = np.inf
            break
        err = np.abs(wrap_deg(out - lo - expect))
        worst = max(worst, err.max())

    rnn_err = 0.0
    layout2 = BandLayout.from_widths([3, 254], 257)
    for method in ("rnn", "rnn-loop"):
        params = init_aggregator(method, layout2, 4, rng)
        feats = rng.standard_normal((1, 3, 2, 257))
        got = aggregate(feats, method, params, layout2).bands[0].value
        w_in, w_rec, b = (params[f"agg.0.lstm.{n}"] for n in ("w_in", "w_rec", "b"))
        for t in range(2):
            seq = list(feats[0, :, t, :3])
            if method == "rnn-loop":
                seq.append(seq[0])
            prev, last = lstm_oracle(seq, w_in, w_rec, b)
            expect = last if method == "rnn" else np.concatenate([prev, last])
            rnn_err = max(rnn_err, np.abs(got[0, t] - expect).max())
    ok = dims_ok and worst < 1e-6 and rnn_err < 1e-9
    return ok, (f"aggregation dims {'match' if dims_ok else 'MISMATCH'} for {len(AGG_METHODS)} methods, "
                f"sampling error {worst:.1e} deg over 1000 windows, RNN oracle {rnn_err:.1e} (<1e-9)")


# ---------------------------------------------------------------- 4

def db(x):
    return 10 * np.log10(np.sum(np.asarray(x) ** 2))


def check_simulation():
    t60_errs = []
    for dims in ((4, 3.5, 2.6), (6, 5, 3), (9, 7, 3.5)):
        for t60 in (0.2, 0.4, 0.6):
            rir = simulate_rir(RoomSpec(dims, t60), (dims[0] / 2, dims[1] / 2, 1.3), MicArray.circular(2, 0.05),
                               SourcePose(30, 0, 1.2), seed=3)
            t60_errs.append(abs(measure_t60(rir.filters[0], 16000) / t60 - 1))

    corpus = SyntheticCorpus(0)
    prof = get_profile("angular", duration_s=(1.0, 1.0))
    level_err, checked = 0.0, 0
    for seed in range(400):
        spec = random_scene(prof, seed)
        if spec.c != 2 or spec.snr_db is None:
            continue
        mix = mix_scene(spec, corpus)
        speech = sum(mix.speech_images)[REF_MIC]
        noise = sum(mix.noise_images)[REF_MIC]
        level_err = max(level_err, abs(db(speech) - db(noise) - spec.snr_db))
        sir = db(mix.speech_images[0][REF_MIC]) - db(mix.speech_images[1][REF_MIC])
        level_err = max(level_err, abs(sir - spec.speech[1].sir_db))
        checked += 1
        if checked == 10:
            break

    a = mix_scene(random_scene(prof, 7), SyntheticCorpus(0))
    b = mix_scene(random_scene(prof, 7), SyntheticCorpus(0))
    same = np.array_equal(a.mixture, b.mixture) and np.array_equal(a.target, b.target)

    q_err = 0.0
    for name in ("angular", "spherical", "conical"):
        counts = np.zeros(3)
        for seed in range(10000):
            counts[random_scene(PROFILES[name], seed).q] += 1
        q_err = max(q_err, np.abs(counts / 10000 - PROFILES[name].q_proportions).max())
    ok = max(t60_errs) <= 0.2 and level_err < 0.01 and checked == 10 and same and q_err <= 0.03
    return ok, (f"T60 worst {100 * max(t60_errs):.1f}% (<=20%), SNR/SIR worst {level_err:.1e} dB (<0.01), "
                f"seeded mix {'bit-exact' if same else 'DIFFERS'}, Q proportions worst {100 * q_err:.2f} points (<=3)")


# ---------------------------------------------------------------- 5

def check_gradients():
    rng = np.random.default_rng(5)
    t0 = time.perf_counter()
    worst, blocks = 0.0, 0
    for variant, queries in (("A", [QueryRegion.angular(-30, 40), QueryRegion.angular(100, 170)]),
                             ("D", [QueryRegion.spherical(0.8), QueryRegion.spherical(1.5)])):
        model = BandSplitModel(preset("toy", variant=variant), seed=1)
        x = rng.standard_normal((2, 8, 2000)) * 0.1
        targets = np.stack([rng.standard_normal(2000) * 0.05, np.zeros(2000)])
        errs = gradient_check(model, model.front_end(x), targets, queries, [1, 0],
                              check_distance=(variant == "D"))
        missing = set(model.params) - set(errs)
        if missing:
            return False, f"toy {variant}: blocks not checked: {sorted(missing)[:3]}"
        worst = max(worst, max(errs.values()))
        blocks += len(errs)
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 300
    return ok, f"{blocks} parameter blocks, worst relative error {worst:.1e} (<1e-4), {elapsed:.0f} s (<300)"


# ---------------------------------------------------------------- 6

def check_learning():
    model = BandSplitModel(preset("toy"), seed=0)
    data = Dataset(scene_examples(0, 16, duration_s=1.0, profile="angular"), model)
    _, state = train(model, data, 200, seed=0, batch_size=4)
    loss = np.array([h[1] for h in state.history])
    start, end = loss[:20].mean(), loss[-20:].mean()
    reduction = (start - end) / abs(start)

    # narrow family: 4-mic circle, H=16, 2k steps; spectral-term weight calibrated for toy scale
    arr = MicArray.circular(4, 0.05)
    narrow = BandSplitModel(preset("toy", H=16, array=arr.to_dict()), seed=0)
    train(narrow, Dataset(narrow_family(1, 256, duration_s=1.0, array=arr), narrow), 2000, seed=0,
          batch_size=4, lam=1e-3)
    improvements, decays = [], []
    for e in narrow_family(2, 48, duration_s=1.0, array=arr):
        est = narrow.extract(e.mixture, e.query)
        if e.q == 0:
            decays.append(energy_decay(e.mixture[0], est))
        else:
            improvements.append(sdr(e.target, est) - sdr(e.target, e.mixture[0]))
    sdri, decay = float(np.mean(improvements)), float(np.mean(decays))
    ok = reduction >= 0.3 and sdri >= 3 and decay >= 15
    return ok, (f"smoke loss {start:.2f} -> {end:.2f} ({100 * reduction:.0f}% of |start|, >=30%), "
                f"narrow SDRi {sdri:.2f} dB (>=3), Q=0 decay {decay:.1f} dB (>=15)")


# ---------------------------------------------------------------- 7

def check_baselines():
    rng = np.random.default_rng(7)
    M, F = 6, 9
    a = rng.standard_normal((F, M, 40)) + 1j * rng.standard_normal((F, M, 40))
    b = rng.standard_normal((F, M, 60)) + 1j * rng.standard_normal((F, M, 60))
    rs = a @ np.conj(np.swapaxes(a, 1, 2))
    rn = b @ np.conj(np.swapaxes(b, 1, 2))
    w = mvdr_weights(SpatialCovariance(rs, rn), ref=2)
    constraint = 0.0
    for f in range(F):
        d = np.linalg.eigh(rs[f])[1][:, -1]
        constraint = max(constraint, abs(np.vdot(w[f], d / d[2]) - 1))

    x = rng.standard_normal((8, 16000))
    spec = stft(x)
    y = istft(Spectrogram(irm_mvdr(spec, np.zeros(spec.data.shape[1:])), CFG, spec.length))
    decay = energy_decay(x[0], y)

    arr = MicArray.circular(8, 0.05)
    src = image(rng.standard_normal(32000), arr, SourcePose(40, 0, 1.5))
    noise = rng.standard_normal(src.shape) * src[0].std()
    mixed = stft(src + noise)
    out = istft(Spectrogram(das_beamform(mixed, arr, 40), CFG, mixed.length))
    sig_out = istft(Spectrogram(das_beamform(stft(src), arr, 40), CFG, mixed.length))
    snr_in = 10 * np.log10(np.sum(src[0] ** 2) / np.sum(noise[0] ** 2))
    gain = 10 * np.log10(np.sum(sig_out ** 2) / np.sum((out - sig_out) ** 2)) - snr_in
    ok = constraint < 1e-9 and decay > 60 and abs(gain - 10 * np.log10(8)) <= 1
    return ok, (f"|w^H d - 1| {constraint:.1e} (<1e-9), zero-mask decay {decay:.0f} dB (>60), "
                f"DAS gain {gain:.2f} dB (9.03 +- 1)")


# ---------------------------------------------------------------- 8

PAPER_PARAMS = {"bsrnn-m": 3.00, "bsrnn-xxxs": 0.43}


def check_params():
    parts, ok = [], True
    for name, paper in PAPER_PARAMS.items():
        ours = BandSplitModel(preset(name)).param_count() / 1e6
        rel = ours / paper - 1
        ok &= abs(rel) <= 0.10
        parts.append(f"{name} {ours:.3f}M vs {paper:.2f}M ({100 * rel:+.1f}%)")
    return ok, ", ".join(parts) + " (+-10%)"


# ---------------------------------------------------------------- 9

def check_ring():
    rng = np.random.default_rng(9)
    model = BandSplitModel(preset("toy", variant="D"), seed=2)
    x = rng.standard_normal((8, 8000)) * 0.1
    ring = ring_extract(model, x, 0.6, 1.5)
    expect = model.extract(x, QueryRegion.spherical(1.5)) - model.extract(x, QueryRegion.spherical(0.6))
    ok = np.array_equal(ring, expect)
    return ok, f"ring 0.6..1.5 m vs two-pass subtraction: max difference {np.abs(ring - expect).max():.1e} (bit-exact)"


CHECKS = [check_dsp, check_spatial, check_region, check_simulation, check_gradients,
          check_learning, check_baselines, check_params, check_ring]


@pytest.mark.parametrize("n", range(1, len(CHECKS) + 1))
def test_criterion(n, capsys):
    ok, detail = CHECKS[n - 1]()
    with capsys.disabled():
        print()
        report(n, ok, detail)
    assert ok, detail


if __name__ == "__main__":
    results = [report(n, *check()) for n, check in enumerate(CHECKS, 1)]
    sys.exit(0 if all(results) else 1)
