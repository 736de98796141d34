"""Deterministic synthetic corpus with closed-form prosody and timbre oracles.

Each utterance is a phone sequence rendered straight to log-mel frames laid
out as :class:`~prosody_tts.prosody.MelPitchLayout` describes. Per phone:

* pitch: ``log(speaker base) + style contour(position) + phone offset``,
  drawn as a parabola in the low channels (flat when the phone is unvoiced);
* duration: phone base length times a style multiplier of position;
* energy: the mean of the envelope channels, which also carry a phone
  template and the speaker's spectral tilt and formant offset.

Durations and energies do not depend on the speaker, so two speakers saying
the same text in the same style share both sequences exactly.
"""
from __future__ import annotations

import math
import struct
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .config import SyntheticSpec, format_section, section_from_text
from .errors import ConfigurationError, IntegrityError, ParseError
from .prosody import (AlignmentSegment, MelPitchLayout, NormStats, aggregate_to_phone, mel_frame_features,
                      normalize_global, read_alignment, read_prosody, write_alignment, write_prosody)

MEL_MAGIC = b"MEL0"
META_HEADER = "#corpus prosody-tts v1"
STYLE_CORR_LIMIT = 0.5
UNVOICED_SHARE = 0.2


def phone_symbol(i: int) -> str:
    return f"p{i}"


@dataclass
class StyleTemplate:
    """Prosody pattern of one style as functions of the phone index ``i``."""
    pitch_amp: float
    pitch_freq: float
    pitch_phase: float
    pitch_slope: float
    dur_amp: float
    dur_freq: float
    dur_phase: float
    energy_amp: float
    energy_freq: float
    energy_phase: float

    def pitch(self, i: np.ndarray) -> np.ndarray:
        return self.pitch_amp * np.sin(self.pitch_freq * i + self.pitch_phase) + self.pitch_slope * i

    def duration_multiplier(self, i: np.ndarray) -> np.ndarray:
        return np.exp(self.dur_amp * np.sin(self.dur_freq * i + self.dur_phase))

    def energy(self, i: np.ndarray) -> np.ndarray:
        return self.energy_amp * np.sin(self.energy_freq * i + self.energy_phase)


@dataclass
class SpeakerTimbre:
    base_pitch_hz: float
    tilt: float
    formant: np.ndarray    # zero-mean offset over the envelope channels


@dataclass
class Utterance:
    utt_id: str
    speaker: int
    style: int
    phones: np.ndarray      # int ids
    mel: np.ndarray         # [T, n_mels] float32
    alignment: list[AlignmentSegment]
    oracle: np.ndarray      # raw [P, 4]: log-Hz, vuv, frames, energy

    @property
    def symbols(self) -> list[str]:
        return [phone_symbol(p) for p in self.phones]


class SyntheticWorld:
    """All randomly drawn constants of a spec: phones, speakers and styles."""

    def __init__(self, spec: SyntheticSpec):
        spec.validate()
        self.spec = spec
        self.layout = MelPitchLayout.for_n_mels(spec.n_mels)
        n_env = spec.n_mels - self.layout.pitch_channels
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
        n_unvoiced = int(round(UNVOICED_SHARE * spec.n_phones)) if spec.n_phones > 2 else 0
        self.voiced = np.ones(spec.n_phones, dtype=bool)
        self.voiced[spec.n_phones - n_unvoiced:] = False
        self.base_duration = rng.integers(3, 8, spec.n_phones)
        self.phone_pitch = rng.normal(0.0, 0.02, spec.n_phones)
        self.phone_energy = rng.normal(0.0, 0.1, spec.n_phones)
        templates = rng.normal(0.0, 0.6, (spec.n_phones, n_env))
        self.envelopes = templates - templates.mean(axis=1, keepdims=True)
        self.speakers = []
        for s in range(spec.n_speakers):
            frac = s / (spec.n_speakers - 1) if spec.n_speakers > 1 else 0.5
            formant = rng.normal(0.0, 0.25, n_env)
            self.speakers.append(SpeakerTimbre(150.0 + 10.0 * frac, 0.1 * (2 * frac - 1),
                                               formant - formant.mean()))
        self.styles = self._draw_styles(rng)

    def _draw_styles(self, rng) -> list[StyleTemplate]:
        text = np.flatnonzero(self.voiced)[:8]
        for _ in range(1000):
            styles = []
            for k in range(self.spec.n_styles):
                scale = 0.12 if k == 0 else 0.3
                styles.append(StyleTemplate(
                    pitch_amp=scale * rng.uniform(0.7, 1.0), pitch_freq=rng.uniform(0.5, 1.6),
                    pitch_phase=rng.uniform(0, 2 * np.pi), pitch_slope=rng.uniform(-0.02, 0.02),
                    dur_amp=(0.15 if k == 0 else 0.4) * rng.uniform(0.7, 1.0), dur_freq=rng.uniform(0.5, 1.6),
                    dur_phase=rng.uniform(0, 2 * np.pi),
                    energy_amp=(0.15 if k == 0 else 0.4) * rng.uniform(0.7, 1.0),
                    energy_freq=rng.uniform(0.5, 1.6), energy_phase=rng.uniform(0, 2 * np.pi)))
            self.styles = styles
            contours = [self.oracle(text, 0, k)[:, 0] for k in range(self.spec.n_styles)]
            if len(contours) < 2 or np.max(np.abs(np.triu(np.corrcoef(contours), 1))) < STYLE_CORR_LIMIT:
                return styles
        raise ConfigurationError("could not draw mutually distinguishable style templates")

    def oracle(self, phones: Sequence[int], speaker: int, style: int) -> np.ndarray:
        """Raw phone-level prosody ``[P, 4]`` (log-Hz, vuv, frames, rms)."""
        phones = np.asarray(phones, dtype=np.int64)
        i = np.arange(len(phones), dtype=np.float64)
        st, spk = self.styles[style], self.speakers[speaker]
        voiced = self.voiced[phones]
        lf0 = math.log(spk.base_pitch_hz) + st.pitch(i) + self.phone_pitch[phones]
        dur = np.maximum(2, np.rint(self.base_duration[phones] * st.duration_multiplier(i)))
        energy = np.exp(math.log(0.2) + st.energy(i) + self.phone_energy[phones])
        return np.stack([np.where(voiced, lf0, 0.0), voiced.astype(np.float64), dur, energy], axis=1)

    def render(self, phones: Sequence[int], speaker: int, oracle: np.ndarray) -> tuple[np.ndarray, list]:
        lay = self.layout
        k = lay.pitch_channels
        spk = self.speakers[speaker]
        env_c = np.arange(self.spec.n_mels - k, dtype=np.float64)
        timbre = spk.tilt * (env_c - env_c.mean()) + spk.formant
        pitch_c = np.arange(k, dtype=np.float64)
        rows, segments, start = [], [], 0
        for ph, (lf0, vuv, dur, energy) in zip(phones, oracle):
            row = np.empty(self.spec.n_mels)
            if vuv >= 0.5:
                row[:k] = 1.0 - lay.curvature * (pitch_c - lay.position(math.exp(lf0))) ** 2
            else:
                row[:k] = -1.0
            row[k:] = math.log(energy) + self.envelopes[ph] + timbre
            n = int(dur)
            rows.append(np.repeat(row[None], n, axis=0))
            segments.append(AlignmentSegment(phone_symbol(int(ph)), start, start + n))
            start += n
        return np.concatenate(rows).astype(np.float32), segments

    def make_utterance(self, utt_id: str, phones, speaker: int, style: int) -> Utterance:
        oracle = self.oracle(phones, speaker, style)
        mel, segments = self.render(phones, speaker, oracle)
        return Utterance(utt_id, speaker, style, np.asarray(phones, dtype=np.int64), mel, segments, oracle)

    def sample_text(self, *key: int) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence([self.spec.seed, *key]))
        n = int(rng.integers(self.spec.min_phones, self.spec.max_phones + 1))
        return rng.integers(0, self.spec.n_phones, n)

    def waveform(self, utt: Utterance) -> np.ndarray:
        """Harmonic (voiced) or noise (unvoiced) audio whose frame rms follows the oracle."""
        sr, hop = self.spec.sample_rate, self.spec.hop
        rng = np.random.default_rng(np.random.SeedSequence([self.spec.seed, 2, int(utt.utt_id)]))
        pieces, phase = [], 0.0
        for lf0, vuv, dur, energy in utt.oracle:
            n = int(dur) * hop
            if vuv >= 0.5:
                f0 = math.exp(lf0)
                t = np.arange(n)
                sig = sum(np.sin(h * (phase + 2 * np.pi * f0 * t / sr)) / h for h in (1, 2, 3))
                phase += 2 * np.pi * f0 * n / sr
            else:
                sig = rng.uniform(-1, 1, n)
            pieces.append(sig * energy / np.sqrt(np.mean(sig ** 2)))
        return np.concatenate(pieces)


# --- corpus files ------------------------------------------------------------------------------

def write_mel(path: str | Path, mel: np.ndarray) -> None:
    mel = np.ascontiguousarray(mel, dtype="<f4")
    Path(path).write_bytes(MEL_MAGIC + struct.pack("<II", *mel.shape) + mel.tobytes())


def read_mel(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != MEL_MAGIC:
        raise IntegrityError(f"{path}: not a mel file (magic {blob[:4]!r})", 0)
    if len(blob) < 12:
        raise IntegrityError(f"{path}: truncated header", len(blob))
    t, m = struct.unpack("<II", blob[4:12])
    if len(blob) != 12 + 4 * t * m:
        raise IntegrityError(f"{path}: payload is {len(blob) - 12} bytes, header says {4 * t * m}", len(blob))
    return np.frombuffer(blob, dtype="<f4", offset=12).reshape(t, m).astype(np.float32)


def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int) -> None:
    pcm = np.clip(np.rint(np.asarray(samples) * 32767), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    with wave.open(str(path), "rb") as w:
        if w.getsampwidth() != 2 or w.getnchannels() != 1:
            raise ConfigurationError(f"{path}: only mono 16-bit wav is supported")
        data = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
        return data.astype(np.float64) / 32767, w.getframerate()


@dataclass
class CorpusEntry:
    utt_id: str
    speaker: int
    style: int
    phones: list[str]


@dataclass
class Corpus:
    root: Path
    spec: SyntheticSpec | None
    inventory: list[str]
    entries: list[CorpusEntry]

    def phone_ids(self, symbols: Sequence[str]) -> np.ndarray:
        index = {p: i for i, p in enumerate(self.inventory)}
        missing = [s for s in symbols if s not in index]
        if missing:
            raise ConfigurationError(f"phones {missing} are not in the corpus inventory")
        return np.array([index[s] for s in symbols], dtype=np.int64)

    def mel(self, entry: CorpusEntry) -> np.ndarray:
        return read_mel(self.root / f"utt_{entry.utt_id}.mel")

    def alignment(self, entry: CorpusEntry) -> list[AlignmentSegment]:
        return read_alignment(self.root / f"utt_{entry.utt_id}.align")[2]

    def oracle(self, entry: CorpusEntry) -> np.ndarray:
        return read_prosody(self.root / f"utt_{entry.utt_id}.pros")[3]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[CorpusEntry]:
        return iter(self.entries)


def _write_meta(root: Path, spec: SyntheticSpec, entries: Sequence[Utterance], split: str) -> None:
    lines = [META_HEADER, f"split {split}", "inventory " + " ".join(phone_symbol(i) for i in range(spec.n_phones))]
    lines += [f"spec {line}" for line in format_section(spec).splitlines()]
    lines += [f"utt {u.utt_id} {u.speaker} {u.style} " + " ".join(u.symbols) for u in entries]
    (root / "meta.txt").write_text("\n".join(lines) + "\n")


def _write_utterance(root: Path, world: SyntheticWorld, utt: Utterance) -> None:
    write_mel(root / f"utt_{utt.utt_id}.mel", utt.mel)
    write_alignment(root / f"utt_{utt.utt_id}.align", utt.utt_id, utt.alignment, len(utt.mel))
    write_prosody(root / f"utt_{utt.utt_id}.pros", utt.utt_id, utt.symbols, utt.oracle, norm="raw")
    if world.spec.with_audio:
        write_wav(root / f"utt_{utt.utt_id}.wav", world.waveform(utt), world.spec.sample_rate)


def training_utterances(world: SyntheticWorld) -> list[Utterance]:
    out, idx = [], 0
    for spk, styles in world.spec.cell_list():
        for sty in styles:
            for _ in range(world.spec.utts_per_cell):
                out.append(world.make_utterance(f"{idx:06d}", world.sample_text(1, idx), spk, sty))
                idx += 1
    return out


def test_utterances(world: SyntheticWorld) -> list[Utterance]:
    """Held-out texts, each rendered for every (speaker, style) pair as oracle reference."""
    out = []
    for j in range(world.spec.test_utts):
        text = world.sample_text(3, j)
        for spk in range(world.spec.n_speakers):
            for sty in range(world.spec.n_styles):
                idx = (j * world.spec.n_speakers + spk) * world.spec.n_styles + sty
                out.append(world.make_utterance(f"{idx:06d}", text, spk, sty))
    return out


def gen_corpus(spec: SyntheticSpec, out: str | Path) -> tuple[Path, Path]:
    """Write the training corpus to ``out`` and the test set to ``out/test``."""
    world = SyntheticWorld(spec)
    root = Path(out)
    test_root = root / "test"
    test_root.mkdir(parents=True, exist_ok=True)
    for split, where, utts in (("train", root, training_utterances(world)), ("test", test_root, test_utterances(world))):
        for utt in utts:
            _write_utterance(where, world, utt)
        _write_meta(where, spec, utts, split)
    return root, test_root


def load_corpus(root: str | Path) -> Corpus:
    root = Path(root)
    path = root / "meta.txt"
    if not path.exists():
        raise ConfigurationError(f"{root} has no meta.txt")
    lines = path.read_text().splitlines()
    if not lines or lines[0] != META_HEADER:
        raise ParseError(f"{path}: missing {META_HEADER!r} header", 1)
    inventory, spec_lines, entries = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        kind, _, rest = line.partition(" ")
        if kind == "inventory":
            inventory = rest.split()
        elif kind == "spec":
            spec_lines.append(rest)
        elif kind == "utt":
            parts = rest.split()
            try:
                entries.append(CorpusEntry(parts[0], int(parts[1]), int(parts[2]), parts[3:]))
            except (IndexError, ValueError):
                raise ParseError(f"{path}: bad utterance line {line!r}", lineno) from None
        elif kind != "split":
            raise ParseError(f"{path}: unknown record {kind!r}", lineno)
    spec = section_from_text(SyntheticSpec, "\n".join(spec_lines)) if spec_lines else None
    return Corpus(root, spec, inventory, entries)


def extract_corpus_prosody(corpus: Corpus) -> dict[str, np.ndarray]:
    """Raw phone-level prosody of every utterance, read back from its mel and alignment."""
    layout = MelPitchLayout.for_n_mels(corpus.spec.n_mels) if corpus.spec else None
    out = {}
    for entry in corpus:
        frames = mel_frame_features(corpus.mel(entry), layout)
        out[entry.utt_id] = aggregate_to_phone(frames, corpus.alignment(entry), entry.utt_id).matrix()
    return out


@dataclass
class TrainingItem:
    utt_id: str
    phones: np.ndarray
    speaker: int
    style: int
    mel: np.ndarray
    prosody: np.ndarray    # normalized [P, 4]

    def as_tuple(self):
        return (self.phones, self.speaker, self.style, self.mel, self.prosody)


def prepare_training_data(corpus: Corpus, stats: NormStats | None = None) -> tuple[NormStats, list[TrainingItem]]:
    """Extract, normalize (fitting stats unless given) and pair prosody with mels."""
    raw = extract_corpus_prosody(corpus)
    if stats is None:
        stats, normed = normalize_global(raw)
    else:
        normed = {u: stats.normalize(r) for u, r in raw.items()}
    items = [TrainingItem(e.utt_id, corpus.phone_ids(e.phones), e.speaker, e.style, corpus.mel(e),
                          normed[e.utt_id].astype(np.float32)) for e in corpus]
    return stats, items
