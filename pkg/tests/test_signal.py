"""Analysis/synthesis contracts: frame law, filterbank, phase recovery, files."""

import numpy as np
import pytest

from s2st.errors import ConfigError, DataError, FormatError
from s2st.signal import (
    LOG_FLOOR,
    MelConfig,
    analyze,
    griffin_lim,
    hz_to_mel,
    istft,
    load_mel,
    mel_filterbank,
    mel_to_audio,
    mel_to_hz,
    mel_to_magnitude,
    read_wav,
    save_mel,
    stft,
    write_wav,
)

CFG = MelConfig(sample_rate=16000, n_mels=32, fmin=125.0, fmax=7600.0,
                frame_ms=25.0, hop_ms=10.0)


def speechy(n=16000, seed=0):
    """Harmonic stack with a slow envelope; enough structure for mel tests."""
    rng = np.random.default_rng(seed)
    t = np.arange(n) / CFG.sample_rate
    x = np.zeros_like(t)
    for k in range(1, 20):
        x += (1.0 / k) * np.sin(2 * np.pi * 130 * k * t + rng.uniform(0, 6))
    x *= 0.5 + 0.5 * np.sin(2 * np.pi * 2.3 * t) ** 2
    x += 0.001 * rng.standard_normal(n)
    return 0.8 * x / np.abs(x).max()


def test_config_derived_sizes():
    assert CFG.frame_length == 400
    assert CFG.hop_length == 160
    assert CFG.n_fft == 512
    out = MelConfig(sample_rate=24000, n_mels=128, fmin=20.0, fmax=12000.0,
                    frame_ms=50.0, hop_ms=12.5)
    assert out.frame_length == 1200
    assert out.hop_length == 300
    assert out.n_fft == 2048


def test_config_rejects_bad_band():
    with pytest.raises(ConfigError):
        MelConfig(sample_rate=16000, fmax=9000.0)


def test_frame_count_law():
    # T = ceil(n / hop) for any length
    for n in (1, 159, 160, 161, 1600, 1601, 12345):
        T = stft(np.zeros(max(n, 2)), CFG).shape[0]
        assert T == -(-max(n, 2) // CFG.hop_length), n


def test_istft_inverts_stft():
    x = speechy()
    xr = istft(stft(x, CFG), CFG, len(x))
    np.testing.assert_allclose(xr, x, atol=1e-9)


def test_mel_scale_oracles():
    # 2595 * log10(1 + f/700): fixed point near 1 kHz, zero at DC
    assert abs(hz_to_mel(1000.0) - 1000.0) < 0.5
    assert hz_to_mel(0.0) == 0.0
    np.testing.assert_allclose(mel_to_hz(hz_to_mel([125.0, 760.0, 7600.0])),
                               [125.0, 760.0, 7600.0], rtol=1e-10)


def test_filterbank_geometry():
    fb = mel_filterbank(CFG)
    assert fb.shape == (32, CFG.n_fft // 2 + 1)
    assert np.all(fb >= 0)
    assert np.all(fb.max(axis=1) > 0.5)
    assert np.all(fb.max(axis=1) <= 1.0)
    # peaks strictly ordered in frequency
    peaks = fb.argmax(axis=1)
    assert np.all(np.diff(peaks) > 0)
    # nothing responds outside the analysis band
    bin_hz = np.arange(fb.shape[1]) * CFG.sample_rate / CFG.n_fft
    assert fb[:, bin_hz < 125.0].sum() == 0
    assert fb[:, bin_hz > 7600.0].sum() == 0


def test_pure_tone_lands_in_expected_channel():
    fb = mel_filterbank(CFG)
    rng = np.random.default_rng(2)
    for _ in range(8):
        f = rng.uniform(300, 6000)
        t = np.arange(8000) / CFG.sample_rate
        lm = analyze(np.sin(2 * np.pi * f * t), CFG)
        hot = int(np.median(lm[2:-2].argmax(axis=1)))
        k = round(f * CFG.n_fft / CFG.sample_rate)
        expected = int(fb[:, k].argmax())
        assert abs(hot - expected) <= 1, (f, hot, expected)


def test_analyze_floor_and_dtype():
    lm = analyze(np.zeros(1600), CFG)
    assert lm.dtype == np.float32
    np.testing.assert_allclose(lm, np.log(LOG_FLOOR), atol=1e-6)


def test_mel_roundtrip_matrix_is_local_and_mass_preserving():
    fb = mel_filterbank(CFG)
    w = fb / np.maximum(fb.sum(axis=1, keepdims=True), 1e-12)
    a = fb @ w.T
    rowsum = a.sum(axis=1)
    assert np.all(rowsum > 0.8) and np.all(rowsum < 1.05)
    off = a - np.diag(np.diag(a))
    assert np.all(np.diag(a) > 2.5 * off.max(axis=1))


def test_mel_inversion_error_on_speech_like_signal():
    # calibrated bound: triangle-overlap smoothing costs ~0.12 nats on
    # harmonic content; anything far above that means a broken inverse
    x = speechy()
    lm = analyze(x, CFG).astype(np.float64)
    mel2 = mel_to_magnitude(lm, CFG) @ mel_filterbank(CFG).T
    err = np.abs(np.log(np.maximum(mel2, LOG_FLOOR)) - lm)
    assert err.mean() < 0.3


def test_griffin_lim_convergence_curve():
    x = speechy(8000)
    mag = np.abs(stft(x, CFG))
    wav, curve = griffin_lim(mag, CFG, n_iters=30, seed=0)
    assert len(wav) == mag.shape[0] * CFG.hop_length
    assert len(curve) == 30
    # non-increasing within least-squares round-off
    assert all(b <= a + 1e-6 for a, b in zip(curve, curve[1:]))
    assert curve[-1] < 0.5 * curve[0]


def test_griffin_lim_seeded_determinism():
    mag = np.abs(stft(speechy(4000), CFG))
    w1, c1 = griffin_lim(mag, CFG, n_iters=5, seed=3)
    w2, c2 = griffin_lim(mag, CFG, n_iters=5, seed=3)
    np.testing.assert_array_equal(w1, w2)
    assert c1 == c2


def test_griffin_lim_rejects_nonfinite():
    mag = np.abs(stft(speechy(2000), CFG))
    mag[3, 4] = np.nan
    with pytest.raises(DataError):
        griffin_lim(mag, CFG, n_iters=2)


def test_mel_to_audio_reanalysis():
    # full vocoder loop keeps the coarse log-mel structure (calibrated)
    x = speechy()
    lm = analyze(x, CFG)
    wav = mel_to_audio(lm, CFG, n_iters=40, seed=0)
    lm2 = analyze(wav.astype(np.float64), CFG)
    T = min(len(lm), len(lm2))
    assert np.abs(lm2[:T] - lm[:T]).mean() < 1.2


def test_wav_roundtrip(tmp_path):
    x = speechy(5000)
    p = tmp_path / "a.wav"
    write_wav(p, x, 16000)
    y, sr = read_wav(p)
    assert sr == 16000 and y.dtype == np.float32
    # write scales by 32767, read by 1/32768: worst case |x|/32768 + half an LSB
    np.testing.assert_allclose(y, x, atol=1e-4)


def test_wav_rejects_wrong_format(tmp_path):
    import wave

    p = tmp_path / "st.wav"
    with wave.open(str(p), "wb") as f:
        f.setnchannels(2)
        f.setsampwidth(2)
        f.setframerate(8000)
        f.writeframes(b"\x00" * 400)
    with pytest.raises(FormatError):
        read_wav(p)


def test_mel_file_roundtrip(tmp_path):
    lm = analyze(speechy(4000), CFG)
    p = tmp_path / "x.mel"
    save_mel(p, lm, CFG)
    lm2, cfg2 = load_mel(p)
    np.testing.assert_array_equal(lm2, lm)
    assert cfg2 == CFG


def test_mel_file_bad_magic(tmp_path):
    p = tmp_path / "x.mel"
    p.write_bytes(b"NOTMEL" + b"\x00" * 64)
    with pytest.raises(FormatError):
        load_mel(p)


def test_mel_file_truncated(tmp_path):
    lm = analyze(speechy(4000), CFG)
    p = tmp_path / "x.mel"
    save_mel(p, lm, CFG)
    blob = p.read_bytes()
    p.write_bytes(blob[: len(blob) // 3])
    with pytest.raises(FormatError):
        load_mel(p)


def test_mel_config_text_roundtrip():
    cfg2 = MelConfig.from_text(CFG.to_text())
    assert cfg2 == CFG
    with pytest.raises(FormatError):
        MelConfig.from_text("sample_rate=16000\nbogus=1\n")
