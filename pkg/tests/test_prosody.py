import math

import numpy as np
import pytest

from prosody_tts import prosody as pe
from prosody_tts.errors import AlignmentError, ConfigurationError, DegenerateCorpusError, ParseError
from prosody_tts.prosody import AlignmentSegment, FrameFeatures, NormStats

SR = 16000


def sine(freq, seconds=0.5, amp=0.5, sr=SR):
    t = np.arange(int(seconds * sr)) / sr
    return amp * np.sin(2 * np.pi * freq * t)


def interior(n_frames, frame_len=pe.FRAME_LEN, hop=pe.HOP):
    # frames whose window lies fully inside the signal
    margin = math.ceil(frame_len / hop / 2) + 1
    return slice(margin, n_frames - margin)


# --- f0 ------------------------------------------------------------------------

def test_sine_220_is_voiced_within_2hz():
    f0, voiced = pe.estimate_f0(sine(220.0), SR)
    sl = interior(len(f0))
    assert voiced[sl].all()
    assert np.max(np.abs(f0[sl] - 220.0)) < 2.0


@pytest.mark.parametrize("freq", [95.0, 150.0, 310.0])
def test_other_pitches_tracked(freq):
    f0, voiced = pe.estimate_f0(sine(freq), SR)
    sl = interior(len(f0))
    assert voiced[sl].all()
    assert np.max(np.abs(f0[sl] - freq)) < 2.0


def test_silence_is_unvoiced():
    f0, voiced = pe.estimate_f0(np.zeros(8000), SR)
    assert not voiced.any()
    np.testing.assert_array_equal(f0, 0)


def test_white_noise_mostly_unvoiced():
    noise = np.random.default_rng(7).uniform(-0.1, 0.1, SR)
    _, voiced = pe.estimate_f0(noise, SR)
    assert voiced.mean() <= 0.10


def test_f0_invariant_and_edge_cases():
    f0, voiced = pe.estimate_f0(sine(180.0), SR)
    np.testing.assert_array_equal(f0 > 0, voiced)
    f0, voiced = pe.estimate_f0(np.zeros(0), SR)
    assert len(f0) == 0 and len(voiced) == 0
    with pytest.raises(ConfigurationError):
        pe.estimate_f0(sine(100.0), SR, fmin=400.0, fmax=60.0)
    with pytest.raises(ConfigurationError):
        pe.estimate_f0(sine(100.0), SR, fmax=9000.0)


# --- energy -------------------------------------------------------------------------

def test_frame_energy_zero_and_constant():
    np.testing.assert_array_equal(pe.frame_energy(np.zeros(4096)), 0)
    rms = pe.frame_energy(np.full(8192, -0.3))
    np.testing.assert_allclose(rms[interior(len(rms))], 0.3, rtol=1e-12)


def test_frame_energy_sine_closed_form():
    amp = 0.8
    rms = pe.frame_energy(sine(220.0, amp=amp))  # 1024 samples span ~14 periods
    sl = interior(len(rms))
    assert np.all(np.abs(rms[sl] - amp / math.sqrt(2)) < 0.02 * amp / math.sqrt(2))


def test_frame_count_is_ceil_of_hops():
    assert len(pe.frame_energy(np.ones(1000), 1024, 256)) == 4
    assert len(pe.frame_energy(np.ones(1024), 1024, 256)) == 4


# --- mel ------------------------------------------------------------------------------

def test_mel_of_silence_is_floor():
    mel = pe.mel_spectrogram(np.zeros(4096), SR, n_fft=1024, hop=256, n_mels=20)
    np.testing.assert_array_equal(mel, math.log(1e-5))


@pytest.mark.parametrize("n", [1024, 1025, 1279, 1280, 5000])
def test_mel_frame_count(n):
    mel = pe.mel_spectrogram(np.zeros(n), SR, n_fft=1024, hop=256, n_mels=8)
    assert mel.shape == (1 + (n - 1024) // 256, 8)


def test_mel_sine_peaks_at_nearest_channel():
    n_mels, fmax = 40, 8000.0
    # centres recomputed from the HTK formula directly
    top = 2595.0 * math.log10(1 + fmax / 700.0)
    centres = [700.0 * (10 ** (top * (i + 1) / (n_mels + 1) / 2595.0) - 1) for i in range(n_mels)]
    expected = int(np.argmin([abs(c - 440.0) for c in centres]))
    mel = pe.mel_spectrogram(sine(440.0, seconds=0.3), SR, n_fft=1024, hop=256, n_mels=n_mels, fmax=fmax)
    assert np.all(mel.argmax(axis=1) == expected)


def test_mel_config_errors():
    with pytest.raises(ConfigurationError):
        pe.mel_spectrogram(np.zeros(2048), n_fft=1000)
    with pytest.raises(ConfigurationError):
        pe.mel_spectrogram(np.zeros(2048), n_mels=3)
    with pytest.raises(ConfigurationError):
        pe.mel_spectrogram(np.zeros(2048), fmin=5000, fmax=4000)


# --- rendered-mel front end ----------------------------------------------------------

def render_frames(layout, f0, voiced, energy, rng=None):
    k = layout.pitch_channels
    c = np.arange(layout.n_mels, dtype=np.float64)
    rows = []
    for hz, v, e in zip(f0, voiced, energy):
        row = np.full(layout.n_mels, math.log(e))
        if v:
            row[:k] = 1.0 - layout.curvature * (c[:k] - layout.position(hz)) ** 2
        else:
            row[:k] = 0.0
        rows.append(row)
    return np.array(rows)


def test_mel_pitch_layout_recovers_pitch_and_energy():
    layout = pe.MelPitchLayout.for_n_mels(20)
    f0 = np.array([80.0, 120.0, 200.0, 350.0, 0.0])
    voiced = f0 > 0
    energy = np.array([0.5, 1.0, 2.0, 0.1, 0.3])
    feats = pe.mel_frame_features(render_frames(layout, f0, voiced, energy), layout)
    np.testing.assert_array_equal(feats.voiced, voiced)
    np.testing.assert_allclose(feats.f0_hz[voiced], f0[voiced], rtol=1e-9)
    assert feats.f0_hz[~voiced].tolist() == [0.0]
    np.testing.assert_allclose(feats.energy_rms, energy, rtol=1e-12)


def test_mel_pitch_layout_needs_room():
    with pytest.raises(ConfigurationError):
        pe.MelPitchLayout.for_n_mels(6)


# --- phone aggregation ------------------------------------------------------------------

def frames_of(f0, energy=None):
    f0 = np.asarray(f0, dtype=np.float64)
    energy = np.ones_like(f0) if energy is None else np.asarray(energy, dtype=np.float64)
    return FrameFeatures(f0, f0 > 0, energy)


def test_unvoiced_phone_convention():
    out = pe.aggregate_to_phone(frames_of([0, 0, 0]), [AlignmentSegment("s", 0, 3)])
    assert out.vuv[0] == 0 and out.lf0[0] == 0


def test_constant_f0_phone():
    out = pe.aggregate_to_phone(frames_of([220] * 4), [AlignmentSegment("a", 0, 4)])
    assert out.lf0[0] == pytest.approx(math.log(220))


def test_mixed_segment_hand_aggregation():
    frames = frames_of([200, 0, 200, 0, 200], energy=[1, 2, 3, 4, 5])
    out = pe.aggregate_to_phone(frames, [AlignmentSegment("a", 0, 5)])
    assert out.lf0[0] == pytest.approx(math.log(200))
    assert out.voiced_fraction[0] == pytest.approx(0.6)
    assert out.vuv[0] == 1
    assert out.duration[0] == 5
    assert out.energy[0] == pytest.approx(3.0)


def test_durations_sum_to_span():
    segs = [AlignmentSegment("a", 2, 5), AlignmentSegment("b", 5, 6), AlignmentSegment("c", 6, 11)]
    out = pe.aggregate_to_phone(frames_of([100] * 12), segs)
    assert out.duration.sum() == 11 - 2


def test_alignment_errors_name_utterance():
    with pytest.raises(AlignmentError, match="utt7"):
        pe.aggregate_to_phone(frames_of([100] * 3), [AlignmentSegment("a", 0, 4)], "utt7")
    with pytest.raises(AlignmentError, match="utt8"):
        pe.aggregate_to_phone(frames_of([100] * 6),
                              [AlignmentSegment("a", 0, 2), AlignmentSegment("b", 3, 4)], "utt8")
    with pytest.raises(AlignmentError):
        AlignmentSegment("a", 3, 3)


# --- normalization ---------------------------------------------------------------------

def test_two_phone_duration_zscore():
    raw = np.array([[math.log(100), 1, 4, 1.0], [math.log(200), 1, 16, 2.0]])
    stats, normed = pe.normalize_global({"u": raw})
    np.testing.assert_allclose(normed["u"][:, 2], [-1.0, 1.0], atol=1e-12)
    # log 4 and log 16 straddle log 8 symmetrically
    assert stats.dur_mean == pytest.approx(math.log(8))


def test_normalized_lf0_moments_and_unvoiced_rows():
    rng = np.random.default_rng(0)
    corpus = {}
    for u in range(5):
        p = 9
        vuv = (rng.uniform(size=p) > 0.3).astype(float)
        lf0 = np.where(vuv > 0, rng.normal(5, 0.3, p), 0.0)
        corpus[f"u{u}"] = np.stack([lf0, vuv, rng.integers(2, 20, p), rng.uniform(0.1, 2, p)], axis=1)
    stats, normed = pe.normalize_global(corpus)
    allz = np.concatenate(list(normed.values()))
    voiced = allz[:, 1] == 1
    assert abs(allz[voiced, 0].mean()) < 1e-6
    assert abs(allz[voiced, 0].std() - 1) < 1e-4
    assert np.all(allz[~voiced, 0] == 0) and np.all(allz[~voiced, 1] == 0)
    for utt, raw in corpus.items():
        np.testing.assert_allclose(stats.denormalize(normed[utt]), raw, atol=1e-5)


def test_degenerate_corpus_rejected():
    with pytest.raises(DegenerateCorpusError):
        pe.normalize_global({"u": np.array([[5.0, 1, 4, 1.0], [0.0, 0, 6, 2.0]])})
    with pytest.raises(DegenerateCorpusError):
        pe.normalize_global({"u": np.array([[5.0, 1, 4, 1.0], [5.2, 1, 4, 2.0]])})


# --- file formats ----------------------------------------------------------------------

def test_alignment_file_round_trip(tmp_path):
    segs = [AlignmentSegment("p3", 0, 4), AlignmentSegment("p0", 4, 9)]
    pe.write_alignment(tmp_path / "a.align", "0007", segs, 9)
    assert (tmp_path / "a.align").read_text().splitlines()[0] == "#utt 0007 frames=9"
    assert pe.read_alignment(tmp_path / "a.align") == ("0007", 9, segs)


def test_prosody_file_round_trip(tmp_path):
    vals = np.array([[0.123456, 1, -0.5, 2.25], [0, 0, 1.000001, -3]])
    pe.write_prosody(tmp_path / "a.pros", "x", ["p1", "p2"], vals, norm="raw")
    utt, norm, phones, back = pe.read_prosody(tmp_path / "a.pros")
    assert (utt, norm, phones) == ("x", "raw", ["p1", "p2"])
    np.testing.assert_array_equal(back, vals)
    assert "p1 0.123456 1.0 -0.5 2.25" in (tmp_path / "a.pros").read_text()


def test_prosody_file_is_bit_exact_for_float32(tmp_path):
    vals = np.random.default_rng(3).standard_normal((7, 4)).astype(np.float32)
    pe.write_prosody(tmp_path / "a.pros", "x", [f"p{i}" for i in range(7)], vals)
    back = pe.read_prosody(tmp_path / "a.pros")[3].astype(np.float32)
    assert back.tobytes() == vals.tobytes()


def test_prosody_file_parse_errors(tmp_path):
    bad = tmp_path / "b.pros"
    bad.write_text("#utt x norm=global\np1 0 1 2\n")
    with pytest.raises(ParseError, match="line 2"):
        pe.read_prosody(bad)
    bad.write_text("#utt x frames=3\n")
    with pytest.raises(ParseError):
        pe.read_prosody(bad)


def test_norm_stats_file_round_trip(tmp_path):
    stats = NormStats(5.1, 0.3, 2.0, 0.45, 0.7, 0.2)
    pe.write_norm_stats(tmp_path / "n.txt", stats)
    assert len((tmp_path / "n.txt").read_text().split()) == 6
    assert pe.read_norm_stats(tmp_path / "n.txt") == stats
