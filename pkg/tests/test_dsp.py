import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from regionsep.dsp import Spectrogram, StftConfig, istft, ola_norm, read_wav, stft, write_wav

CFG = StftConfig()


def rel_err(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def test_default_config():
    assert CFG.num_bins == 257
    assert CFG.bin_hz == 31.25
    assert CFG.num_frames(16000) == 16000 // 128 + 1


def test_config_validation():
    with pytest.raises(ValueError):
        StftConfig(window_len=1024, fft_size=512)
    with pytest.raises(ValueError):
        StftConfig(hop=300)
    with pytest.raises(ValueError):
        StftConfig(window_len=511)


def test_impulse_frame_zero():
    x = np.zeros(4000)
    x[0] = 1.0
    spec = stft(x)
    # reflect padding puts the impulse at the frame center, where the window is 1
    w = CFG.window()
    expect = np.fft.rfft(np.eye(512)[256] * w)
    np.testing.assert_allclose(spec.data[0], expect, atol=1e-12)
    np.testing.assert_allclose(np.abs(spec.data[0]), w[256], atol=1e-12)


def test_sinusoid_peak_bin():
    t = np.arange(16000) / 16000
    spec = stft(np.sin(2 * np.pi * 1000 * t))
    assert np.argmax(np.abs(spec.data).mean(axis=0)) == round(1000 / 31.25) == 32


def test_multichannel_matches_single(rng):
    x = rng.standard_normal((8, 3000))
    multi = stft(x)
    assert multi.num_channels == 8
    for m in range(8):
        np.testing.assert_array_equal(multi.data[m], stft(x[m]).data)


def test_roundtrip_white_noise(rng):
    x = rng.standard_normal(16000)
    assert rel_err(istft(stft(x)), x) < 1e-6


def test_roundtrip_chirp():
    t = np.arange(16000) / 16000
    x = np.sin(2 * np.pi * (100 * t + 1900 * t ** 2)) * (0.5 + 0.5 * np.sin(2 * np.pi * 3 * t))
    assert rel_err(istft(stft(x)), x) < 1e-6


def test_zero_spectrogram_inverts_to_zero():
    spec = Spectrogram(np.zeros((2, CFG.num_frames(2000), 257), complex), CFG, 2000)
    assert not istft(spec).any()


def test_cola_normalizer_flat_in_interior():
    norm = ola_norm(CFG, 50)
    interior = norm[512:-512]
    np.testing.assert_allclose(interior, interior[0], rtol=1e-12)


def test_errors():
    with pytest.raises(ValueError):
        stft(np.zeros(0))
    with pytest.raises(ValueError):
        stft(np.zeros(100))
    spec = stft(np.ones(2000))
    with pytest.raises(ValueError):
        istft(spec, length=5000)
    with pytest.raises(ValueError):
        Spectrogram(np.zeros((3, 10)), CFG, 100)


@given(st.integers(300, 5000), st.integers(0, 2**31 - 1))
def test_roundtrip_any_length(n, seed):
    x = np.random.default_rng(seed).standard_normal((2, n))
    out = istft(stft(x))
    assert out.shape == x.shape
    assert rel_err(out, x) < 1e-6


@given(arrays(float, 1000, elements=st.floats(-1, 1)), arrays(float, 1000, elements=st.floats(-1, 1)),
       st.floats(-3, 3), st.floats(-3, 3))
def test_linearity(x, y, a, b):
    lhs = stft(a * x + b * y).data
    rhs = a * stft(x).data + b * stft(y).data
    assert np.max(np.abs(lhs - rhs)) <= 1e-9 * max(1.0, np.max(np.abs(rhs)))


@pytest.mark.parametrize("dtype, tol", [("float32", 1e-7), ("pcm16", 1 / 32768)])
def test_wav_roundtrip(tmp_path, rng, dtype, tol):
    x = rng.uniform(-0.9, 0.9, (3, 1000))
    path = tmp_path / "a.wav"
    write_wav(path, x, 16000, dtype)
    y, sr = read_wav(path)
    assert sr == 16000 and y.shape == x.shape
    np.testing.assert_allclose(y, x, atol=tol)
    assert [p.name for p in tmp_path.iterdir()] == ["a.wav"]
