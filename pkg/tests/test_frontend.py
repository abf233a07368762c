import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hcasr.errors import ConfigError, DataError
from hcasr.frontend import (
    LOG_FLOOR,
    AudioBuffer,
    AugmentPolicy,
    FrontendOptions,
    NoisePolicy,
    SpecAugmentPolicy,
    compute_fbank,
    compute_spectrogram,
    extract_streams,
    hz_to_mel,
    measured_snr_db,
    mel_filterbank,
    mix_noise,
    noise_gain,
    num_frames,
    pink_noise,
    read_ftmx,
    read_wav,
    spec_augment,
    speed_perturb,
    white_noise,
    write_ftmx,
    write_wav,
)


def tone(freq, n=16000, amp=1.0):
    return AudioBuffer(amp * np.sin(2 * np.pi * freq * np.arange(n) / 16000))


# -- shapes and values ---------------------------------------------------------


def test_zero_second_of_audio_gives_98_frames():
    audio = AudioBuffer(np.zeros(16000))
    spec = compute_spectrogram(audio)
    fbank = compute_fbank(audio)
    assert spec.frames.shape == (98, 201)
    assert np.all(spec.frames == 0.0)
    assert fbank.frames.shape == (98, 80)
    assert np.all(fbank.frames == math.log(1e-10))


def test_single_window():
    assert compute_spectrogram(AudioBuffer(np.ones(400))).frames.shape == (1, 201)


def test_too_short_and_wrong_rate():
    with pytest.raises(DataError, match="too short"):
        compute_fbank(AudioBuffer(np.zeros(399)))
    with pytest.raises(DataError, match="sample rate"):
        compute_spectrogram(AudioBuffer(np.zeros(8000), sample_rate_hz=8000))


def test_bin_aligned_sine_rectangular_window():
    spec = compute_spectrogram(tone(1000.0), FrontendOptions(window="rectangular")).frames
    assert np.all(spec.argmax(axis=1) == 25)
    off = np.delete(spec, 25, axis=1)
    assert off.max() < 1e-9 * spec[:, 25].min()


def test_mel_scale_values():
    assert hz_to_mel(0.0) == 0.0
    assert abs(hz_to_mel(700.0) - 781.17) < 0.01
    assert hz_to_mel(700.0) == pytest.approx(2595 * math.log10(2), abs=1e-12)


def test_mel_filterbank_shape_and_coverage():
    w = mel_filterbank()
    assert w.shape == (201, 80)
    assert np.all(w >= 0)
    # every filter has support, peaks at most 1
    assert np.all(w.max(axis=0) > 0)
    assert np.all(w.max(axis=0) <= 1.0 + 1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(min_value=400, max_value=40000))
def test_frame_count_formula(n):
    feat = compute_spectrogram(AudioBuffer(np.zeros(n)))
    assert feat.num_frames == 1 + (n - 400) // 160 == num_frames(n)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_fbank_polarity_invariant(seed):
    x = np.random.default_rng(seed).uniform(-1, 1, 2000)
    a = compute_fbank(AudioBuffer(x)).frames
    b = compute_fbank(AudioBuffer(-x)).frames
    np.testing.assert_array_equal(a, b)


def test_optional_normalization_zero_mean():
    x = np.random.default_rng(0).normal(size=8000)
    f = compute_fbank(AudioBuffer(x), FrontendOptions(normalize=True))
    assert f.normalized and f.fill_value == 0.0
    np.testing.assert_allclose(f.frames.mean(axis=0), 0.0, atol=1e-10)


# -- SpecAugment ---------------------------------------------------------------


def fbank_98():
    return compute_fbank(AudioBuffer(np.random.default_rng(1).normal(size=16000) * 0.1))


def test_specaugment_zero_policy_is_identity():
    feat = fbank_98()
    out = spec_augment(feat, SpecAugmentPolicy(0, 15, 0, 20), np.random.default_rng(0))
    np.testing.assert_array_equal(out.frames, feat.frames)


def test_specaugment_single_freq_mask_area():
    feat = fbank_98()
    rng = np.random.default_rng(3)
    for _ in range(20):
        out, mask = spec_augment(feat, SpecAugmentPolicy(1, 15, 0, 20), rng, return_mask=True)
        width = int(mask.any(axis=0).sum())
        changed = out.frames != feat.frames
        assert changed.sum() == 98 * width
        assert np.all(out.frames[mask] == LOG_FLOOR)


def test_specaugment_deterministic_given_seed():
    feat = fbank_98()
    pol = SpecAugmentPolicy(2, 15, 2, 20)
    a = spec_augment(feat, pol, np.random.default_rng(42)).frames
    b = spec_augment(feat, pol, np.random.default_rng(42)).frames
    assert a.tobytes() == b.tobytes()


def test_specaugment_spectrogram_fill_is_zero():
    feat = compute_spectrogram(AudioBuffer(np.random.default_rng(0).normal(size=16000)))
    out, mask = spec_augment(feat, SpecAugmentPolicy(2, 15, 2, 20), np.random.default_rng(0),
                             return_mask=True)
    assert np.all(out.frames[mask] == 0.0)


def test_specaugment_width_invariants():
    feat = fbank_98()
    with pytest.raises(ConfigError):
        spec_augment(feat, SpecAugmentPolicy(1, 80, 0, 0), np.random.default_rng(0))
    with pytest.raises(ConfigError):
        spec_augment(feat, SpecAugmentPolicy(0, 0, 1, 98), np.random.default_rng(0))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 3), st.integers(0, 3))
def test_specaugment_only_masked_cells_change(seed, nf, nt):
    feat = fbank_98()
    out, mask = spec_augment(feat, SpecAugmentPolicy(nf, 15, nt, 20), np.random.default_rng(seed),
                             return_mask=True)
    np.testing.assert_array_equal(out.frames[~mask], feat.frames[~mask])
    assert np.all(out.frames[mask] == LOG_FLOOR)


# -- speed perturbation ----------------------------------------------------------


def test_speed_identity_and_lengths():
    x = np.random.default_rng(0).normal(size=16000)
    np.testing.assert_array_equal(speed_perturb(AudioBuffer(x), 1.0).samples, x)
    assert len(speed_perturb(AudioBuffer(x), 1.1)) == 14545
    assert len(speed_perturb(AudioBuffer(x), 0.9)) == 17778


def test_speed_factor_range():
    with pytest.raises(ConfigError):
        speed_perturb(AudioBuffer(np.zeros(1000)), 2.5)
    with pytest.raises(ConfigError):
        speed_perturb(AudioBuffer(np.zeros(1000)), 0.4)


def test_speed_scales_pitch():
    y = speed_perturb(tone(1000.0), 1.1)
    spec = compute_spectrogram(y).frames.mean(axis=0)
    assert abs(spec.argmax() * 40.0 - 1100.0) <= 40.0


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([0.8, 0.9, 1.1, 1.25]))
def test_speed_round_trip(seed, f):
    # band-limited so that the slower rate cannot alias
    rng = np.random.default_rng(seed)
    t = np.arange(16000) / 16000
    x = sum(rng.uniform(0.1, 1) * np.sin(2 * np.pi * rng.uniform(100, 3000) * t + rng.uniform(0, 6))
            for _ in range(5))
    back = speed_perturb(speed_perturb(AudioBuffer(x), f), 1 / f).samples
    n = min(len(back), len(x)) - 200  # edge transients of the polyphase filter
    err = np.linalg.norm(back[200:n] - x[200:n]) / np.linalg.norm(x[200:n])
    assert err <= 0.05


# -- noise ----------------------------------------------------------------------


def test_noise_gain_formula():
    assert noise_gain(1.0, 1.0, 0.0) == 1.0
    assert noise_gain(1.0, 1.0, 10.0) == pytest.approx(10 ** -0.5, abs=1e-12)
    assert noise_gain(1.0, 1.0, 10.0) == pytest.approx(0.3162, abs=1e-4)


def test_mix_noise_60db_is_nearly_clean():
    rng = np.random.default_rng(0)
    x = AudioBuffer(rng.normal(size=8000))
    y = mix_noise(x, white_noise(8000, rng), 60.0, rng)
    assert np.linalg.norm(y.samples - x.samples) / np.linalg.norm(x.samples) <= 0.002


def test_mix_noise_degenerate_inputs():
    rng = np.random.default_rng(0)
    with pytest.raises(DataError):
        mix_noise(AudioBuffer(np.ones(100)), AudioBuffer(np.zeros(100)), 10.0, rng)
    with pytest.raises(DataError):
        mix_noise(AudioBuffer(np.zeros(100)), AudioBuffer(np.ones(100)), 10.0, rng)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-5, 30), st.integers(100, 3000), st.integers(50, 5000))
def test_mix_noise_hits_requested_snr(seed, snr, n, n_noise):
    rng = np.random.default_rng(seed)
    x = AudioBuffer(rng.normal(size=n))
    noise = pink_noise(n_noise, rng) if seed % 2 else white_noise(n_noise, rng)
    y = mix_noise(x, noise, snr, rng)
    assert abs(measured_snr_db(x.samples, y.samples) - snr) <= 0.01


def test_augment_order_and_determinism():
    x = AudioBuffer(np.random.default_rng(0).normal(size=16000) * 0.1)
    pol = AugmentPolicy(SpecAugmentPolicy(), (0.9, 1.1), NoisePolicy(), rng_seed=5)
    a = extract_streams(x, None, pol, np.random.default_rng(5))
    b = extract_streams(x, None, pol, np.random.default_rng(5))
    assert a[0].frames.tobytes() == b[0].frames.tobytes()
    assert a[1].frames.shape[0] == a[0].frames.shape[0]
    assert a[0].frames.shape[0] in (num_frames(14545), num_frames(17778))


# -- file formats ---------------------------------------------------------------


def test_ftmx_round_trip(tmp_path):
    feat = fbank_98()
    write_ftmx(tmp_path / "a.ftmx", feat)
    back = read_ftmx(tmp_path / "a.ftmx")
    assert back.kind == feat.kind
    assert back.frames.tobytes() == feat.frames.tobytes()
    raw = (tmp_path / "a.ftmx").read_bytes()
    assert raw[:4] == b"FTMX" and len(raw) == 4 + 4 + 1 + 4 + 4 + 98 * 80 * 8


def test_ftmx_rejects_garbage(tmp_path):
    (tmp_path / "x").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(DataError):
        read_ftmx(tmp_path / "x")


def test_wav_round_trip(tmp_path):
    x = np.random.default_rng(0).uniform(-0.9, 0.9, 1600)
    write_wav(tmp_path / "a.wav", AudioBuffer(x))
    back = read_wav(tmp_path / "a.wav")
    assert back.sample_rate_hz == 16000
    assert np.max(np.abs(back.samples - x)) <= 0.5 / 32768
