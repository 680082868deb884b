import math
import wave

import numpy as np
import pytest
from scipy.io import wavfile

from dndf import audio
from dndf.audio import AudioClip, AugmentPolicy, FrontendConfig, MelFeature
from dndf.errors import DataError, IngestionError, InvalidInputError


def sine(freq, rate, seconds=1.0, amp=0.5):
    t = np.arange(int(rate * seconds)) / rate
    return amp * np.sin(2 * np.pi * freq * t)


def htk_centers(rate, bands):
    top = 2595 * math.log10(1 + rate / 2 / 700)
    return [700 * (10 ** (top * (i + 1) / (bands + 1) / 2595) - 1) for i in range(bands)]


# --- ingestion ------------------------------------------------------------


def test_load_identity_at_matching_rate(tmp_path):
    x = sine(440, 48000, 0.1)
    path = tmp_path / "a.wav"
    wavfile.write(path, 48000, x.astype(np.float32))
    clip = audio.load_and_resample(path, 48000)
    np.testing.assert_array_equal(clip.samples, x.astype(np.float32).astype(np.float64))


def test_load_zero_clip_stays_zero(tmp_path):
    path = tmp_path / "z.wav"
    wavfile.write(path, 44100, np.zeros(4410, dtype=np.int16))
    clip = audio.load_and_resample(path, 16000)
    assert clip.sample_rate == 16000
    assert np.all(clip.samples == 0)


def test_resampled_sine_keeps_its_peak(tmp_path):
    path = tmp_path / "s.wav"
    wavfile.write(path, 48000, sine(440, 48000).astype(np.float32))
    clip = audio.load_and_resample(path, 16000)
    assert len(clip.samples) == 16000
    mag = audio.stft_magnitude(clip.samples).mean(axis=0)
    bin_hz = 16000 / 1024
    assert abs(np.argmax(mag) * bin_hz - 440) <= bin_hz


@pytest.mark.parametrize("dtype,scale", [(np.int16, 32767), (np.int32, 2**31 - 1), (np.float32, 1.0)])
def test_load_sample_formats(tmp_path, dtype, scale):
    x = sine(300, 8000, 0.05)
    path = tmp_path / "f.wav"
    wavfile.write(path, 8000, (x * scale).astype(dtype))
    np.testing.assert_allclose(audio.load_and_resample(path, 8000).samples, x, atol=1e-4)


def test_load_24_bit_pcm(tmp_path):
    x = sine(300, 8000, 0.05)
    ints = np.round(x * (2**23 - 1)).astype(np.int32)
    raw = b"".join(int(v).to_bytes(3, "little", signed=True) for v in ints)
    path = tmp_path / "p24.wav"
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(3)
        w.setframerate(8000)
        w.writeframes(raw)
    np.testing.assert_allclose(audio.load_and_resample(path, 8000).samples, x, atol=1e-6)


def test_stereo_is_averaged(tmp_path):
    left = sine(300, 8000, 0.05)
    right = np.zeros_like(left)
    path = tmp_path / "st.wav"
    wavfile.write(path, 8000, np.stack([left, right], axis=1).astype(np.float32))
    np.testing.assert_allclose(audio.load_and_resample(path, 8000).samples, left / 2, atol=1e-7)


def test_unreadable_file(tmp_path):
    path = tmp_path / "bad.wav"
    path.write_bytes(b"ID3 this is an mp3, honest")
    with pytest.raises(IngestionError):
        audio.load_and_resample(path, 16000)


def test_audio_clip_validation():
    with pytest.raises(InvalidInputError):
        AudioClip(np.zeros(0), 16000)
    with pytest.raises(InvalidInputError):
        AudioClip(np.zeros(10), 0)


# --- log-mel --------------------------------------------------------------


def test_silence_hits_the_floor():
    feat = audio.stft_logmel(AudioClip(np.zeros(4000), 16000), FrontendConfig(16000))
    assert np.all(feat.values == math.log(1e-10))


def test_one_kilohertz_band_holds_the_maximum():
    feat = audio.stft_logmel(AudioClip(sine(1000, 48000, 0.5), 48000))
    centers = htk_centers(48000, 64)
    band = int(np.argmin([abs(c - 1000) for c in centers]))
    assert np.all(np.argmax(feat.values, axis=1) == band)


def test_ten_seconds_at_48k_gives_1497_frames():
    # 1 + floor((480000 - 1024) / 320) = 1 + 1496 = 1497
    assert audio.frame_count(480000) == 1497
    feat = audio.stft_logmel(AudioClip(np.random.default_rng(0).normal(size=480000) * 0.1, 48000))
    assert feat.values.shape == (1497, 64)
    assert np.all(np.isfinite(feat.values))


def test_frame_count_formula_exhaustive():
    x = np.zeros(5000)
    for n in range(1024, 5001):
        expected = 1 + (n - 1024) // 320
        assert audio.frame_count(n) == expected
        assert audio.stft_magnitude(x[:n]).shape[0] == expected


def test_too_short_clip():
    with pytest.raises(InvalidInputError):
        audio.stft_logmel(AudioClip(np.zeros(1023), 16000))


def test_hann_window_is_periodic():
    x = np.ones(1024)
    n = np.arange(1024)
    window = 0.5 - 0.5 * np.cos(2 * np.pi * n / 1024)
    spec = audio.stft_magnitude(x)
    assert spec[0, 0] == pytest.approx(window.sum(), rel=1e-12)


def test_filterbank_triangles():
    fb = audio.mel_filterbank(48000, 1024, 64)
    assert fb.shape == (64, 513)
    assert np.all(fb >= 0)
    edges = [0.0] + htk_centers(48000, 64) + [24000.0]
    freqs = np.fft.rfftfreq(1024, 1 / 48000)
    for b in range(64):
        row = fb[b]
        outside = (freqs <= edges[b]) | (freqs >= edges[b + 2])
        assert np.all(row[outside] == 0)
        nz = row[row > 0]
        if len(nz) > 1:
            peak = int(np.argmax(nz))
            assert np.all(np.diff(nz[: peak + 1]) >= 0) and np.all(np.diff(nz[peak:]) <= 0)


def test_filterbank_partition_of_unity_between_centers():
    centers = htk_centers(48000, 64)
    f = np.linspace(centers[0], centers[-1], 5000)
    total = audio.mel_response(f, 48000, 64).sum(axis=0)
    assert np.all((total >= 0.999) & (total <= 1.001))


def test_logmel_deterministic():
    clip = AudioClip(np.random.default_rng(1).normal(size=3000), 16000)
    a = audio.stft_logmel(clip, FrontendConfig(16000))
    b = audio.stft_logmel(clip, FrontendConfig(16000))
    np.testing.assert_array_equal(a.values, b.values)


# --- SpecAugment ----------------------------------------------------------


def test_no_masks_is_identity(rng):
    x = rng.normal(size=(30, 16))
    np.testing.assert_array_equal(audio.spec_augment(x, AugmentPolicy.none(), seed=1), x)


def test_full_height_frequency_mask(rng):
    x = rng.normal(size=(30, 16))
    policy = AugmentPolicy(freq_masks=1, freq_max=16, time_masks=0, time_max=0, freq_min=16)
    out = audio.spec_augment(x, policy, seed=0)
    assert np.all(out == x.mean())


def test_forced_band_mask_covers_whole_rows(rng):
    x = rng.normal(size=(30, 16))
    policy = AugmentPolicy(freq_masks=1, freq_max=4, time_masks=0, time_max=0, freq_min=4)
    out = audio.spec_augment(x, policy, seed=5)
    masked = np.all(out == x.mean(), axis=0)
    assert masked.sum() == 4


def test_spec_augment_deterministic_and_local(rng):
    x = rng.normal(size=(40, 64))
    a = audio.spec_augment(x, AugmentPolicy(), seed=42)
    b = audio.spec_augment(x, AugmentPolicy(), seed=42)
    np.testing.assert_array_equal(a, b)
    assert a.shape == x.shape
    changed = a != x
    assert np.all(a[changed] == x.mean())


def test_spec_augment_clamps_oversized_masks(rng):
    x = rng.normal(size=(5, 4))
    out = audio.spec_augment(x, AugmentPolicy(3, 100, 3, 100), seed=0)
    assert out.shape == x.shape


def test_spec_augment_accepts_mel_feature(rng):
    feat = MelFeature(rng.normal(size=(20, 8)), 16000)
    out = audio.spec_augment(feat, AugmentPolicy(), seed=0)
    assert isinstance(out, MelFeature) and out.values.shape == (20, 8)


def test_augment_policy_parse():
    assert AugmentPolicy.parse("none") == AugmentPolicy.none()
    assert AugmentPolicy.parse("default") == AugmentPolicy()
    assert AugmentPolicy.parse("1,4,2,10") == AugmentPolicy(1, 4, 2, 10)
    with pytest.raises(ValueError):
        AugmentPolicy.parse("1,2")


# --- feature files --------------------------------------------------------


def test_feature_file_roundtrip(tmp_path, rng):
    feat = MelFeature(rng.normal(size=(12, 64)), 16000)
    path = tmp_path / "x.feat"
    audio.save_feature(path, feat)
    raw = path.read_bytes()
    assert raw[:4] == b"DNDF"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == 12
    assert int.from_bytes(raw[12:16], "little") == 64
    assert int.from_bytes(raw[16:20], "little") == 16000
    assert len(raw) == 20 + 12 * 64 * 4
    back = audio.load_feature(path)
    np.testing.assert_array_equal(back.values, audio.quantize(feat.values))
    assert back.sample_rate == 16000


def test_feature_file_errors(tmp_path):
    path = tmp_path / "bad.feat"
    path.write_bytes(b"NOPE" + bytes(16))
    with pytest.raises(DataError):
        audio.load_feature(path)
    path.write_bytes(b"DNDF" + (1).to_bytes(4, "little") + (2).to_bytes(4, "little") * 2 + bytes(4))
    with pytest.raises(DataError):
        audio.load_feature(path)
