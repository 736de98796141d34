"""Frame-level pitch/energy extraction and phone-level prosody vectors.

Two front ends feed :func:`aggregate_to_phone`:

* waveforms, through :func:`estimate_f0` (normalized autocorrelation) and
  :func:`frame_energy`;
* rendered log-mel frames, through :func:`mel_frame_features`, which reads
  pitch from a parabolic peak in the lowest channels (see
  :class:`MelPitchLayout`) and energy from the mean of the rest.

Phone features are then z-scored corpus-wide by :func:`normalize_global`.
The feature order everywhere is ``[lf0, vuv, dur, energy]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import AlignmentError, ConfigurationError, DegenerateCorpusError, ParseError

SAMPLE_RATE = 16000
FRAME_LEN = 1024
HOP = 256
VOICING_THRESHOLD = 0.45
SILENCE_RMS = 1e-3
LOG_FLOOR = 1e-5
FEATURES = ("lf0", "vuv", "dur", "energy")


@dataclass(frozen=True)
class AlignmentSegment:
    phone: str
    start_frame: int
    end_frame: int

    def __post_init__(self):
        if not 0 <= self.start_frame < self.end_frame:
            raise AlignmentError(f"segment {self.phone} [{self.start_frame}, {self.end_frame}) is empty or negative")

    @property
    def duration(self) -> int:
        return self.end_frame - self.start_frame


@dataclass
class FrameFeatures:
    f0_hz: np.ndarray
    voiced: np.ndarray
    energy_rms: np.ndarray

    def __post_init__(self):
        self.f0_hz = np.asarray(self.f0_hz, dtype=np.float64)
        self.voiced = np.asarray(self.voiced, dtype=bool)
        self.energy_rms = np.asarray(self.energy_rms, dtype=np.float64)
        if not len(self.f0_hz) == len(self.voiced) == len(self.energy_rms):
            raise ValueError("frame feature arrays differ in length")

    def __len__(self) -> int:
        return len(self.f0_hz)


@dataclass
class PhoneFeatures:
    """Raw per-phone features of one utterance, before normalization."""
    lf0: np.ndarray              # mean log-Hz over voiced frames, 0 if none
    vuv: np.ndarray              # 1 if voiced fraction >= 0.5
    voiced_fraction: np.ndarray
    duration: np.ndarray         # frames
    energy: np.ndarray           # mean frame rms

    def matrix(self) -> np.ndarray:
        return np.stack([self.lf0, self.vuv, self.duration, self.energy], axis=1).astype(np.float64)

    def __len__(self) -> int:
        return len(self.lf0)


@dataclass(frozen=True)
class NormStats:
    lf0_mean: float
    lf0_std: float
    dur_mean: float
    dur_std: float
    energy_mean: float
    energy_std: float

    def normalize(self, raw: np.ndarray) -> np.ndarray:
        """Raw ``[P, 4]`` (log-Hz, vuv, frames, rms) to z-scored prosody vectors."""
        raw = np.asarray(raw, dtype=np.float64)
        out = np.empty_like(raw)
        voiced = raw[:, 1] >= 0.5
        out[:, 0] = np.where(voiced, (raw[:, 0] - self.lf0_mean) / self.lf0_std, 0.0)
        out[:, 1] = raw[:, 1]
        out[:, 2] = (np.log(raw[:, 2]) - self.dur_mean) / self.dur_std
        out[:, 3] = (raw[:, 3] - self.energy_mean) / self.energy_std
        return out

    def denormalize(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        out = np.empty_like(z)
        voiced = z[:, 1] >= 0.5
        out[:, 0] = np.where(voiced, z[:, 0] * self.lf0_std + self.lf0_mean, 0.0)
        out[:, 1] = z[:, 1]
        out[:, 2] = np.exp(z[:, 2] * self.dur_std + self.dur_mean)
        out[:, 3] = z[:, 3] * self.energy_std + self.energy_mean
        return out

    def as_tuple(self) -> tuple[float, ...]:
        return (self.lf0_mean, self.lf0_std, self.dur_mean, self.dur_std, self.energy_mean, self.energy_std)


# --- waveform front end -------------------------------------------------------------

def frame_signal(samples: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    """Frames centred on hop slots: frame t is centred at ``t*hop + hop/2``.

    There are ``ceil(len / hop)`` frames; samples outside the signal are zero.
    """
    if frame_len < 1 or hop < 1:
        raise ConfigurationError("frame_len and hop must be positive")
    samples = np.asarray(samples, dtype=np.float64)
    n = math.ceil(len(samples) / hop)
    if n == 0:
        return np.zeros((0, frame_len))
    left = frame_len // 2 - hop // 2
    padded = np.zeros(left + n * hop + frame_len)
    padded[left:left + len(samples)] = samples
    idx = np.arange(n)[:, None] * hop + np.arange(frame_len)[None, :]
    return padded[idx]


def frame_energy(samples: np.ndarray, frame_len: int = FRAME_LEN, hop: int = HOP) -> np.ndarray:
    frames = frame_signal(samples, frame_len, hop)
    return np.sqrt(np.mean(frames ** 2, axis=1)) if len(frames) else np.zeros(0)


def _nccf(frames: np.ndarray, max_lag: int) -> np.ndarray:
    """Normalized cross-correlation of each frame with its own lagged copy."""
    n = frames.shape[1]
    nfft = 1 << (2 * n - 1).bit_length()
    spec = np.fft.rfft(frames, nfft)
    r = np.fft.irfft(spec * np.conj(spec), nfft)[:, :max_lag + 1]
    energy = np.cumsum(frames ** 2, axis=1)
    total = energy[:, -1:]
    lags = np.arange(max_lag + 1)
    head = energy[:, n - 1 - lags]                                   # sum x[0 .. n-1-lag]^2
    tail = total - np.concatenate([np.zeros((len(frames), 1)), energy[:, :max_lag]], axis=1)
    denom = np.sqrt(np.maximum(head * tail, 0))
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(denom > 1e-12, r / np.where(denom > 0, denom, 1), 0.0)


def estimate_f0(samples: np.ndarray, sample_rate: int = SAMPLE_RATE, frame_len: int = FRAME_LEN,
                hop: int = HOP, fmin: float = 60.0, fmax: float = 400.0,
                voicing_threshold: float = VOICING_THRESHOLD,
                silence_rms: float = SILENCE_RMS) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame (f0_hz, voiced) by normalized autocorrelation.

    The pitch lag is the shortest local NCCF maximum within 90% of the best
    one (guards against picking a multiple of the period), refined by a
    parabola through its neighbours. Unvoiced frames report f0 = 0.
    """
    if not 0 < fmin < fmax < sample_rate / 2:
        raise ConfigurationError(f"need 0 < fmin < fmax < sample_rate/2, got fmin={fmin} fmax={fmax}")
    frames = frame_signal(samples, frame_len, hop)
    if len(frames) == 0:
        return np.zeros(0), np.zeros(0, dtype=bool)
    rms = np.sqrt(np.mean(frames ** 2, axis=1))
    frames = frames - frames.mean(axis=1, keepdims=True)
    lag_min = max(2, int(math.floor(sample_rate / fmax)))
    lag_max = min(frame_len - 2, int(math.ceil(sample_rate / fmin)))
    nccf = _nccf(frames, lag_max + 1)
    f0 = np.zeros(len(frames))
    voiced = np.zeros(len(frames), dtype=bool)
    for i, row in enumerate(nccf):
        seg = row[lag_min:lag_max + 1]
        inner = seg[1:-1]
        peaks = np.flatnonzero((inner >= seg[:-2]) & (inner > seg[2:])) + 1
        if peaks.size == 0:
            continue
        best = seg[peaks].max()
        if best < voicing_threshold or rms[i] < silence_rms:
            continue
        k = int(peaks[np.argmax(seg[peaks] >= 0.9 * best)])
        a, b, c = seg[k - 1], seg[k], seg[k + 1]
        denom = a - 2 * b + c
        shift = 0.5 * (a - c) / denom if denom != 0 else 0.0
        f0[i] = sample_rate / (lag_min + k + shift)
        voiced[i] = True
    return f0, voiced


def waveform_frame_features(samples: np.ndarray, sample_rate: int = SAMPLE_RATE,
                            frame_len: int = FRAME_LEN, hop: int = HOP, **f0_kwargs) -> FrameFeatures:
    f0, voiced = estimate_f0(samples, sample_rate, frame_len, hop, **f0_kwargs)
    return FrameFeatures(f0, voiced, frame_energy(samples, frame_len, hop))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    """Triangular filters with unit peaks on the HTK mel scale, shape [n_mels, n_fft//2 + 1]."""
    points = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lower, center, upper = points[:-2, None], points[1:-1, None], points[2:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def mel_spectrogram(samples: np.ndarray, sample_rate: int = SAMPLE_RATE, n_fft: int = 1024,
                    hop: int = HOP, n_mels: int = 80, fmin: float = 0.0,
                    fmax: float | None = None) -> np.ndarray:
    """Natural-log mel magnitudes, shape [T, n_mels], frames start at t*hop without padding."""
    fmax = sample_rate / 2 if fmax is None else fmax
    if n_fft < 2 or n_fft & (n_fft - 1):
        raise ConfigurationError(f"n_fft must be a power of two, got {n_fft}")
    if n_mels < 4:
        raise ConfigurationError(f"n_mels must be >= 4, got {n_mels}")
    if not 0 <= fmin < fmax <= sample_rate / 2:
        raise ConfigurationError(f"need 0 <= fmin < fmax <= sample_rate/2, got {fmin}, {fmax}")
    samples = np.asarray(samples, dtype=np.float64)
    n_frames = 0 if len(samples) < n_fft else 1 + (len(samples) - n_fft) // hop
    fb = mel_filterbank(sample_rate, n_fft, n_mels, fmin, fmax)
    if n_frames == 0:
        return np.zeros((0, n_mels))
    idx = np.arange(n_frames)[:, None] * hop + np.arange(n_fft)[None, :]
    window = np.hanning(n_fft + 1)[:-1]
    mag = np.abs(np.fft.rfft(samples[idx] * window, axis=1))
    return np.log(np.maximum(mag @ fb.T, LOG_FLOOR))


# --- mel front end for rendered corpora -----------------------------------------------

@dataclass(frozen=True)
class MelPitchLayout:
    """How pitch and energy are laid out in a rendered log-mel frame.

    The lowest ``pitch_channels`` channels hold ``level - curvature * (c - pos)^2``
    for voiced frames (flat for unvoiced ones), where ``pos`` maps log-f0
    linearly onto ``[1, pitch_channels - 2]``. The remaining channels average
    to ``log(energy)``.
    """
    n_mels: int
    pitch_channels: int
    f_lo: float = 60.0
    f_hi: float = 400.0
    curvature: float = 0.25
    voicing_threshold: float = 0.5

    @classmethod
    def for_n_mels(cls, n_mels: int) -> "MelPitchLayout":
        if n_mels < 8:
            raise ConfigurationError("the mel pitch layout needs n_mels >= 8")
        return cls(n_mels, max(4, (3 * n_mels) // 10))

    def position(self, f0_hz) -> np.ndarray:
        frac = (np.log(f0_hz) - math.log(self.f_lo)) / (math.log(self.f_hi) - math.log(self.f_lo))
        return 1.0 + frac * (self.pitch_channels - 3)

    def f0_from_position(self, pos) -> np.ndarray:
        frac = (np.asarray(pos, dtype=np.float64) - 1.0) / (self.pitch_channels - 3)
        return np.exp(math.log(self.f_lo) + frac * (math.log(self.f_hi) - math.log(self.f_lo)))


def mel_frame_features(mel: np.ndarray, layout: MelPitchLayout | None = None) -> FrameFeatures:
    """Read per-frame pitch, voicing and energy back out of a rendered log-mel.

    A least-squares parabola over the pitch channels gives curvature (voicing
    when at least ``voicing_threshold`` of the rendered curvature) and vertex
    position (pitch).
    """
    mel = np.asarray(mel, dtype=np.float64)
    layout = layout or MelPitchLayout.for_n_mels(mel.shape[1])
    k = layout.pitch_channels
    c = np.arange(k, dtype=np.float64)
    design = np.stack([c ** 2, c, np.ones(k)], axis=1)
    coef, *_ = np.linalg.lstsq(design, mel[:, :k].T, rcond=None)
    a = -coef[0]
    voiced = a >= layout.voicing_threshold * layout.curvature
    with np.errstate(divide="ignore", invalid="ignore"):
        pos = np.where(voiced, coef[1] / (2 * np.where(voiced, a, 1.0)), 0.0)
    lo, hi = layout.position(layout.f_lo), layout.position(layout.f_hi)
    f0 = np.where(voiced, layout.f0_from_position(np.clip(pos, lo, hi)), 0.0)
    energy = np.exp(mel[:, k:].mean(axis=1))
    return FrameFeatures(f0, voiced, energy)


# --- phone level ------------------------------------------------------------------------

def aggregate_to_phone(frames: FrameFeatures, alignment: Sequence[AlignmentSegment],
                       utt_id: str = "?") -> PhoneFeatures:
    if not alignment:
        raise AlignmentError(f"utterance {utt_id}: empty alignment")
    prev_end = alignment[0].start_frame
    for seg in alignment:
        if seg.start_frame != prev_end:
            raise AlignmentError(f"utterance {utt_id}: segment {seg.phone} starts at {seg.start_frame}, "
                                 f"expected {prev_end}")
        prev_end = seg.end_frame
    if prev_end > len(frames):
        raise AlignmentError(f"utterance {utt_id}: alignment ends at frame {prev_end} "
                             f"but only {len(frames)} frames exist")
    n = len(alignment)
    lf0, vuv, frac, dur, energy = (np.zeros(n) for _ in range(5))
    for i, seg in enumerate(alignment):
        sl = slice(seg.start_frame, seg.end_frame)
        v = frames.voiced[sl]
        frac[i] = v.mean()
        vuv[i] = 1.0 if frac[i] >= 0.5 else 0.0
        if v.any() and vuv[i]:
            lf0[i] = np.log(frames.f0_hz[sl][v]).mean()
        dur[i] = seg.duration
        energy[i] = frames.energy_rms[sl].mean()
    return PhoneFeatures(lf0, vuv, frac, dur, energy)


def normalize_global(corpus: Mapping[str, PhoneFeatures | np.ndarray]) -> tuple[NormStats, dict[str, np.ndarray]]:
    """Corpus-wide z-scores; lf0 statistics come from voiced phones only."""
    raws = {utt: (f.matrix() if isinstance(f, PhoneFeatures) else np.asarray(f, dtype=np.float64))
            for utt, f in corpus.items()}
    if not raws:
        raise DegenerateCorpusError("empty corpus")
    stacked = np.concatenate(list(raws.values()), axis=0)
    voiced = stacked[:, 1] >= 0.5
    if voiced.sum() < 2:
        raise DegenerateCorpusError("fewer than two voiced phones in the corpus")
    lf0 = stacked[voiced, 0]
    logdur = np.log(stacked[:, 2])
    energy = stacked[:, 3]
    stats = NormStats(float(lf0.mean()), float(lf0.std()), float(logdur.mean()), float(logdur.std()),
                      float(energy.mean()), float(energy.std()))
    for name, std in (("lf0", stats.lf0_std), ("duration", stats.dur_std), ("energy", stats.energy_std)):
        if not std > 0:
            raise DegenerateCorpusError(f"{name} has zero variance across the corpus")
    return stats, {utt: stats.normalize(raw) for utt, raw in raws.items()}


# --- text formats ---------------------------------------------------------------------------

def write_alignment(path: str | Path, utt_id: str, segments: Sequence[AlignmentSegment],
                    n_frames: int) -> None:
    lines = [f"#utt {utt_id} frames={n_frames}"]
    lines += [f"{s.phone} {s.start_frame} {s.end_frame}" for s in segments]
    Path(path).write_text("\n".join(lines) + "\n")


def _header(line: str, path, expected_key: str) -> tuple[str, str]:
    parts = line.split()
    if len(parts) != 3 or parts[0] != "#utt" or not parts[2].startswith(expected_key + "="):
        raise ParseError(f"{path}: bad header {line!r}", 1)
    return parts[1], parts[2].split("=", 1)[1]


def read_alignment(path: str | Path) -> tuple[str, int, list[AlignmentSegment]]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ParseError(f"{path}: empty alignment file", 1)
    utt, frames = _header(lines[0], path, "frames")
    segments = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        try:
            segments.append(AlignmentSegment(parts[0], int(parts[1]), int(parts[2])))
        except (IndexError, ValueError):
            raise ParseError(f"{path}: expected '<phone> <start> <end>', got {line!r}", lineno) from None
    return utt, int(frames), segments


def write_prosody(path: str | Path, utt_id: str, phones: Sequence[str], values: np.ndarray,
                  norm: str = "global") -> None:
    if norm not in ("global", "raw"):
        raise ValueError(f"norm must be global or raw, got {norm!r}")
    # shortest repr round-trips exactly, so a dumped file can be fed back bit for bit
    values = np.asarray(values, dtype=np.float64)
    lines = [f"#utt {utt_id} norm={norm}"]
    lines += [f"{ph} " + " ".join(repr(float(v)) for v in row) for ph, row in zip(phones, values)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_prosody(path: str | Path) -> tuple[str, str, list[str], np.ndarray]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ParseError(f"{path}: empty prosody file", 1)
    utt, norm = _header(lines[0], path, "norm")
    phones, rows = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ParseError(f"{path}: expected '<phone> <lf0> <vuv> <dur> <energy>', got {line!r}", lineno)
        try:
            rows.append([float(x) for x in parts[1:]])
        except ValueError:
            raise ParseError(f"{path}: non-numeric prosody value in {line!r}", lineno) from None
        phones.append(parts[0])
    return utt, norm, phones, np.array(rows, dtype=np.float64).reshape(-1, 4)


def write_norm_stats(path: str | Path, stats: NormStats) -> None:
    Path(path).write_text(" ".join(repr(v) for v in stats.as_tuple()) + "\n")


def read_norm_stats(path: str | Path) -> NormStats:
    parts = Path(path).read_text().split()
    if len(parts) != 6:
        raise ParseError(f"{path}: expected 6 numbers, got {len(parts)}", 1)
    return NormStats(*(float(p) for p in parts))
