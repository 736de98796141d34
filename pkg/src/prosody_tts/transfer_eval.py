"""Cross-speaker transfer and the objective evaluation suite.

Transfer runs in three steps on one encoder pass:

1. combine the text encoding with the source speaker and style, predict
   prosody and run it through the aggregation CNN;
2. combine the same encoding with the target speaker and the step-1 style
   vector;
3. add the step-1 aggregation features to the step-2 state and decode.

Evaluation extracts phone-level prosody from generated mels (a Viterbi
aligner locates the phones, :mod:`prosody_tts.prosody` reads the frames)
and compares it to reference contours.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tc
from .corpus import Corpus, CorpusEntry
from .errors import AlignmentError, ConfigurationError, InputError
from .model import DecoderOutput, ProsodyTTS
from .prosody import (AlignmentSegment, MelPitchLayout, NormStats, aggregate_to_phone,
                      mel_frame_features)
from .tensor import Tensor

REPORT_COLUMNS = ("Lf0_Corr", "Dur_Corr", "Energy_Corr", "Lf0_RMSE")
MIN_PAIRS = 3


@dataclass(frozen=True)
class TransferRequest:
    spk_src: int
    sty_src: int
    spk_tgt: int
    phonemes: tuple[int, ...]

    def validate(self, model: ProsodyTTS) -> None:
        cfg = model.config
        if not self.phonemes:
            raise InputError("transfer needs at least one phone")
        for name, value, limit in (("spk_src", self.spk_src, cfg.n_speakers), ("spk_tgt", self.spk_tgt, cfg.n_speakers),
                                   ("sty_src", self.sty_src, cfg.n_styles)):
            if not 0 <= value < limit:
                raise InputError(f"{name} {value} outside table of size {limit}")


def transfer(model: ProsodyTTS, req: TransferRequest, max_frames: int | None = None,
             prosody=None) -> tuple[DecoderOutput, np.ndarray]:
    """Source-style prosody, target-speaker voice. Returns (output, fed prosody [P, 4]).

    ``prosody`` replaces the step-1 prediction (the control path).
    """
    req.validate(model)
    with tc.no_grad():
        enc = model.encode_text(np.asarray(req.phonemes, dtype=np.int64))
        source = model.combine_speaker_style(enc, req.spk_src, req.sty_src)
        predicted = model.prosody_bottleneck(source)
        fed = predicted if prosody is None else Tensor(
            np.asarray(prosody, dtype=predicted.dtype).reshape(predicted.shape))
        features = model.aggregation_features(fed, source.phone_mask)
        target = model.combine_speaker_style(enc, req.spk_tgt, style_vec=source.style_vec)
        out = model.decode(model.aggregate_prosody(target, None, features), max_frames=max_frames)
    return out, fed.data[0].copy()


# --- metrics --------------------------------------------------------------------------------

def _pearson(a: np.ndarray, b: np.ndarray) -> float | None:
    if len(a) < MIN_PAIRS:
        return None
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    if den == 0:
        return None
    return float(np.clip((a @ b) / den, -1.0, 1.0))


def _pair(pred, ref) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 4)
    ref = np.asarray(ref, dtype=np.float64).reshape(-1, 4)
    if pred.shape != ref.shape:
        raise InputError(f"prosody sequences differ in length: {len(pred)} vs {len(ref)}")
    return pred, ref


def mutually_voiced(pred, ref) -> np.ndarray:
    return (np.clip(pred[:, 1], 0, 1) >= 0.5) & (np.clip(ref[:, 1], 0, 1) >= 0.5)


def prosody_correlation(pred, ref) -> dict[str, float | None]:
    """Per-feature Pearson r for one utterance; ``None`` where undefined.

    lf0 uses phones voiced in both sequences, duration and energy use all.
    """
    pred, ref = _pair(pred, ref)
    both = mutually_voiced(pred, ref)
    return {"lf0": _pearson(pred[both, 0], ref[both, 0]),
            "dur": _pearson(pred[:, 2], ref[:, 2]),
            "energy": _pearson(pred[:, 3], ref[:, 3])}


def lf0_rmse(pred, ref) -> float | None:
    pred, ref = _pair(pred, ref)
    both = mutually_voiced(pred, ref)
    if not both.any():
        return None
    return float(np.sqrt(np.mean((pred[both, 0] - ref[both, 0]) ** 2)))


@dataclass
class ProsodyMetricReport:
    lf0_corr: float | None
    dur_corr: float | None
    energy_corr: float | None
    lf0_rmse: float | None
    n_utterances: int
    n_used: dict[str, int] = field(default_factory=dict)
    domain: str = "z-scored log-f0, mutually voiced phones"

    def values(self) -> tuple:
        return (self.lf0_corr, self.dur_corr, self.energy_corr, self.lf0_rmse)


def _mean(xs: list[float]) -> float | None:
    return float(np.mean(xs)) if xs else None


def metric_report(pairs: Sequence[tuple[np.ndarray, np.ndarray]], pooled: bool = False) -> ProsodyMetricReport:
    """Corpus metrics: per-utterance values macro-averaged (or pooled over phones)."""
    if not pairs:
        raise InputError("no utterances to score")
    pairs = [_pair(p, r) for p, r in pairs]
    if pooled:
        pred = np.concatenate([p for p, _ in pairs])
        ref = np.concatenate([r for _, r in pairs])
        corr = prosody_correlation(pred, ref)
        rmse = lf0_rmse(pred, ref)
        used = {k: int(v is not None) for k, v in corr.items()}
        return ProsodyMetricReport(corr["lf0"], corr["dur"], corr["energy"], rmse, len(pairs), used,
                                   "z-scored log-f0, mutually voiced phones, pooled")
    per = {"lf0": [], "dur": [], "energy": [], "rmse": []}
    for p, r in pairs:
        for k, v in prosody_correlation(p, r).items():
            if v is not None:
                per[k].append(v)
        rmse = lf0_rmse(p, r)
        if rmse is not None:
            per["rmse"].append(rmse)
    return ProsodyMetricReport(_mean(per["lf0"]), _mean(per["dur"]), _mean(per["energy"]), _mean(per["rmse"]),
                               len(pairs), {k: len(v) for k, v in per.items()})


def _fmt(v) -> str:
    return "NA" if v is None else f"{v:.4f}"


def format_report(rows: Sequence[tuple[str, ProsodyMetricReport]],
                  accuracy: Sequence[tuple[str, float, int]] = ()) -> str:
    lines = ["model_name " + " ".join(REPORT_COLUMNS)]
    lines += [f"{name} " + " ".join(_fmt(v) for v in rep.values()) for name, rep in rows]
    if accuracy:
        lines += ["", "model_name accuracy_percent n_cases"]
        lines += [f"{name} {acc:.2f} {n}" for name, acc, n in accuracy]
    return "\n".join(lines) + "\n"


# --- speaker classifier ----------------------------------------------------------------------

class SpeakerClassifier:
    """Six 1-D conv layers over frames, a GRU over what remains, and a linear softmax head.

    Channels double at every stride-2 layer (layers 2, 4 and 6), starting
    from ``base_channels``.
    """

    N_CONV = 6

    def __init__(self, n_mels: int, n_speakers: int, base_channels: int = 16, hidden: int = 32, seed: int = 0):
        if n_speakers < 2:
            raise ConfigurationError("a speaker classifier needs at least two speakers")
        self.n_mels, self.n_speakers, self.hidden = n_mels, n_speakers, hidden
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        c_in = n_mels
        self.channels, self.strides = [], []
        for i in range(self.N_CONV):
            stride = 2 if i % 2 == 1 else 1
            c_out = base_channels * 2 ** ((i + 1) // 2)
            self._add(f"conv{i}.w", self._uniform(rng, (3, c_in, c_out), 3 * c_in))
            self._add(f"conv{i}.b", np.zeros(c_out))
            self.channels.append(c_out)
            self.strides.append(stride)
            c_in = c_out
        for gate in ("z", "r", "h"):
            self._add(f"gru.{gate}.wx", self._uniform(rng, (c_in, hidden), c_in))
            self._add(f"gru.{gate}.wh", self._uniform(rng, (hidden, hidden), hidden))
            self._add(f"gru.{gate}.b", np.zeros(hidden))
        self._add("fc.w", self._uniform(rng, (hidden, n_speakers), hidden))
        self._add("fc.b", np.zeros(n_speakers))

    @staticmethod
    def _uniform(rng, shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, shape)

    def _add(self, name, value):
        self.params[name] = Tensor(np.asarray(value, dtype=np.float32), requires_grad=True, name=name)

    @property
    def min_frames(self) -> int:
        return 2 ** sum(1 for s in self.strides if s == 2)

    def logits(self, mel) -> Tensor:
        """``mel`` [T, M] or [B, T, M] to logits [B, n_speakers]."""
        x = mel if isinstance(mel, Tensor) else Tensor(np.asarray(mel, dtype=np.float32))
        if x.ndim == 2:
            x = tc.reshape(x, (1,) + x.shape)
        if x.shape[1] < self.min_frames:
            raise InputError(f"{x.shape[1]} frames is below the classifier's minimum of {self.min_frames}")
        p = self.params
        for i, stride in enumerate(self.strides):
            x = tc.relu(tc.conv1d(x, p[f"conv{i}.w"], p[f"conv{i}.b"]))
            if stride == 2:
                x = tc.getitem(x, (slice(None), slice(None, None, 2)))
        bsz = x.shape[0]
        h = Tensor(np.zeros((bsz, self.hidden), dtype=np.float32))
        for t in range(x.shape[1]):
            xt = tc.getitem(x, (slice(None), t))
            z = tc.sigmoid(tc.add(tc.linear(xt, p["gru.z.wx"], p["gru.z.b"]), tc.matmul(h, p["gru.z.wh"])))
            r = tc.sigmoid(tc.add(tc.linear(xt, p["gru.r.wx"], p["gru.r.b"]), tc.matmul(h, p["gru.r.wh"])))
            cand = tc.tanh(tc.add(tc.linear(xt, p["gru.h.wx"], p["gru.h.b"]),
                                  tc.matmul(tc.mul(r, h), p["gru.h.wh"])))
            h = tc.add(h, tc.mul(z, tc.sub(cand, h)))
        return tc.linear(h, p["fc.w"], p["fc.b"])

    def probabilities(self, mel) -> np.ndarray:
        with tc.no_grad():
            return tc._softmax(self.logits(mel).data.astype(np.float64))


def train_speaker_classifier(examples: Sequence[tuple[np.ndarray, int]], n_speakers: int, n_mels: int,
                             steps: int = 300, batch_size: int = 16, crop: int = 32, lr: float = 3e-3,
                             seed: int = 0) -> SpeakerClassifier:
    """Cross-entropy training on random equal-length crops of ``(mel, speaker)`` pairs."""
    speakers = {int(s) for _, s in examples}
    if len(speakers) < 2:
        raise ConfigurationError(f"speaker classifier needs >= 2 speakers, corpus has {sorted(speakers)}")
    clf = SpeakerClassifier(n_mels, n_speakers, seed=seed)
    rng = np.random.default_rng(seed)
    names = sorted(clf.params)
    m = {n: np.zeros_like(clf.params[n].data) for n in names}
    v = {n: np.zeros_like(clf.params[n].data) for n in names}
    for step in range(1, steps + 1):
        idx = rng.integers(0, len(examples), batch_size)
        length = min(crop, min(len(examples[i][0]) for i in idx))
        batch = []
        for i in idx:
            mel = examples[i][0]
            start = rng.integers(0, len(mel) - length + 1)
            batch.append(mel[start:start + length])
        labels = np.array([examples[i][1] for i in idx])
        for t in clf.params.values():
            t.grad = None
        with tc.Tape():
            loss = tc.cross_entropy(clf.logits(np.stack(batch)), labels)
            tc.backward(loss)
        for n in names:
            g = clf.params[n].grad
            m[n] = 0.9 * m[n] + 0.1 * g
            v[n] = 0.999 * v[n] + 0.001 * g * g
            upd = lr * (m[n] / (1 - 0.9 ** step)) / (np.sqrt(v[n] / (1 - 0.999 ** step)) + 1e-8)
            clf.params[n].data = (clf.params[n].data - upd).astype(np.float32)
    return clf


def classify_speaker(mel, clf: SpeakerClassifier) -> tuple[int, float]:
    probs = clf.probabilities(mel)[0]
    k = int(np.argmax(probs))
    return k, float(probs[k])


# --- aligner for generated speech ---------------------------------------------------------------

class PhoneAligner:
    """Monotonic segmental alignment of mel frames to a known phone sequence.

    A segment's cost is its envelope mismatch (frame mean removed) against a
    per-(speaker, phone) template averaged over an aligned corpus, plus its
    spread around its own mean on all channels. The template term finds the
    phones; the spread term places boundaries between repeats of one phone,
    where only pitch and energy change.
    """

    def __init__(self, layout: MelPitchLayout, spread_weight: float = 1.0):
        self.layout = layout
        self.spread_weight = spread_weight
        self.templates: dict[tuple[int, int], np.ndarray] = {}
        self.phone_templates: dict[int, np.ndarray] = {}
        self.speaker_offsets: dict[int, np.ndarray] = {}

    def _shape(self, mel: np.ndarray) -> np.ndarray:
        env = np.asarray(mel, dtype=np.float64)[:, self.layout.pitch_channels:]
        return env - env.mean(axis=1, keepdims=True)

    @classmethod
    def fit(cls, corpus: Corpus, layout: MelPitchLayout | None = None) -> "PhoneAligner":
        layout = layout or MelPitchLayout.for_n_mels(corpus.spec.n_mels)
        aligner = cls(layout)
        sums: dict[tuple[int, int], list] = {}
        for entry in corpus:
            shape = aligner._shape(corpus.mel(entry))
            for pid, seg in zip(corpus.phone_ids(entry.phones), corpus.alignment(entry)):
                acc = sums.setdefault((entry.speaker, int(pid)), [0.0, 0])
                acc[0] = acc[0] + shape[seg.start_frame:seg.end_frame].sum(axis=0)
                acc[1] += seg.duration
        by_phone: dict[int, list] = {}
        for (spk, pid), (total, n) in sorted(sums.items()):
            aligner.templates[(spk, pid)] = total / n
            by_phone.setdefault(pid, []).append(total / n)
        aligner.phone_templates = {pid: np.mean(ts, axis=0) for pid, ts in by_phone.items()}
        # unseen (speaker, phone) pairs: phone average plus the speaker's mean deviation from it
        offsets: dict[int, list] = {}
        for (spk, pid), t in aligner.templates.items():
            offsets.setdefault(spk, []).append(t - aligner.phone_templates[pid])
        aligner.speaker_offsets = {spk: np.mean(d, axis=0) for spk, d in offsets.items()}
        return aligner

    def _template(self, speaker: int, pid: int) -> np.ndarray:
        if (speaker, pid) in self.templates:
            return self.templates[(speaker, pid)]
        if pid in self.phone_templates:
            return self.phone_templates[pid] + self.speaker_offsets.get(speaker, 0.0)
        raise AlignmentError(f"no template for phone {pid}")

    def align(self, mel: np.ndarray, phones: Sequence[int], speaker: int,
              symbols: Sequence[str] | None = None) -> list[AlignmentSegment]:
        shape = self._shape(mel)
        n_frames, n_phones = len(shape), len(phones)
        if n_frames < n_phones:
            raise AlignmentError(f"{n_frames} frames cannot hold {n_phones} phones")
        temps = np.stack([self._template(speaker, int(p)) for p in phones])
        cost = ((shape[:, None, :] - temps[None]) ** 2).sum(axis=-1)        # [T, P]
        full = np.asarray(mel, dtype=np.float64)
        c_cost = np.vstack([np.zeros((1, n_phones)), np.cumsum(cost, axis=0)])
        c1 = np.vstack([np.zeros((1, full.shape[1])), np.cumsum(full, axis=0)])
        c2 = np.concatenate([[0.0], np.cumsum((full ** 2).sum(axis=1))])
        # acc[j, b]: best cost of phones 0..j covering frames [0, b)
        acc = np.full((n_phones, n_frames + 1), np.inf)
        back = np.zeros((n_phones, n_frames + 1), dtype=np.int64)
        prev = np.full(n_frames + 1, np.inf)
        prev[0] = 0.0
        for j in range(n_phones):
            for end in range(j + 1, n_frames - (n_phones - 1 - j) + 1):
                starts = np.arange(j, end)
                n = (end - starts).astype(np.float64)
                seg_sum = c1[end] - c1[starts]
                spread = (c2[end] - c2[starts]) - (seg_sum ** 2).sum(axis=1) / n
                total = prev[starts] + (c_cost[end, j] - c_cost[starts, j]) + self.spread_weight * spread
                k = int(np.argmin(total))
                acc[j, end], back[j, end] = total[k], starts[k]
            prev = acc[j]
        bounds = [n_frames]
        for j in range(n_phones - 1, -1, -1):
            bounds.append(int(back[j, bounds[-1]]))
        bounds = bounds[::-1]
        symbols = symbols or [f"p{int(p)}" for p in phones]
        return [AlignmentSegment(symbols[i], bounds[i], bounds[i + 1]) for i in range(n_phones)]


def extract_output_prosody(mel: np.ndarray, phones: Sequence[int], speaker: int, aligner: PhoneAligner,
                           stats: NormStats) -> np.ndarray:
    """Normalized [P, 4] prosody read from a generated mel."""
    segments = aligner.align(mel, phones, speaker)
    frames = mel_frame_features(mel, aligner.layout)
    return stats.normalize(aggregate_to_phone(frames, segments).matrix())


# --- evaluation ---------------------------------------------------------------------------------

@dataclass
class TestText:
    phones: np.ndarray
    entries: dict[tuple[int, int], CorpusEntry]


def group_test_texts(corpus: Corpus) -> list[TestText]:
    """Test entries grouped by text, each text keyed by (speaker, style)."""
    groups: dict[tuple, TestText] = {}
    for entry in corpus:
        key = tuple(entry.phones)
        text = groups.setdefault(key, TestText(corpus.phone_ids(entry.phones), {}))
        text.entries.setdefault((entry.speaker, entry.style), entry)
    return list(groups.values())


def reference_prosody(corpus: Corpus, entry: CorpusEntry, stats: NormStats, source: str = "oracle") -> np.ndarray:
    if source == "oracle":
        return stats.normalize(corpus.oracle(entry))
    if source == "extracted":
        frames = mel_frame_features(corpus.mel(entry), MelPitchLayout.for_n_mels(corpus.mel(entry).shape[1]))
        return stats.normalize(aggregate_to_phone(frames, corpus.alignment(entry), entry.utt_id).matrix())
    raise ConfigurationError(f"unknown reference source {source!r}")


@dataclass
class StyleResult:
    style: int
    report: ProsodyMetricReport
    control: ProsodyMetricReport
    beats_target_neutral: float    # fraction of texts
    beats_other_styles: float
    n_texts: int


@dataclass
class EvaluationResult:
    styles: list[StyleResult]
    transfer_accuracy: float
    synthesis_accuracy: float
    n_transfer: int
    n_synthesis: int
    truncated: int

    def report_text(self) -> str:
        rows = []
        for s in self.styles:
            rows.append((f"transfer_style{s.style}", s.report))
            rows.append((f"control_style{s.style}", s.control))
        acc = [("transfer_to_target", 100 * self.transfer_accuracy, self.n_transfer),
               ("synthesis_target", 100 * self.synthesis_accuracy, self.n_synthesis)]
        return format_report(rows, acc)


def evaluate(model: ProsodyTTS, test: Corpus, stats: NormStats, aligner: PhoneAligner,
             classifier: SpeakerClassifier | None = None, source_speaker: int = 0, target_speaker: int = 1,
             styles: Sequence[int] | None = None, reference: str = "oracle", neutral_style: int = 0,
             max_texts: int | None = None, seed: int = 0) -> EvaluationResult:
    """Transfer every test text from the source speaker's styles to the target speaker and score it.

    For each style the control run feeds a different style id (a fixed
    derangement) and is scored against the same reference.
    """
    texts = group_test_texts(test)[:max_texts]
    if not texts:
        raise InputError("empty test set")
    n_styles = model.config.n_styles
    styles = [s for s in range(n_styles) if s != neutral_style] if styles is None else list(styles)
    rng = np.random.default_rng(seed)
    results = []
    transferred_mels, truncated = [], 0
    for style in styles:
        others = [s for s in range(n_styles) if s != style]
        control_style = int(rng.choice(others)) if others else style
        pairs, control_pairs = [], []
        beats_neutral = beats_others = 0
        for text in texts:
            req = TransferRequest(source_speaker, style, target_speaker, tuple(int(p) for p in text.phones))
            out, _ = transfer(model, req)
            truncated += out.truncated
            mel = out.mel.data[0]
            transferred_mels.append(mel)
            got = extract_output_prosody(mel, text.phones, target_speaker, aligner, stats)
            ref = reference_prosody(test, text.entries[(source_speaker, style)], stats, reference)
            pairs.append((got, ref))
            mine = prosody_correlation(got, ref)["lf0"]
            neutral = prosody_correlation(
                got, reference_prosody(test, text.entries[(target_speaker, neutral_style)], stats, reference))["lf0"]
            rivals = [prosody_correlation(got, reference_prosody(test, text.entries[(source_speaker, s)], stats,
                                                                 reference))["lf0"] for s in others]
            if mine is not None:
                beats_neutral += neutral is None or mine > neutral
                beats_others += all(r is None or mine > r for r in rivals)
            creq = TransferRequest(source_speaker, control_style, target_speaker, req.phonemes)
            cout, _ = transfer(model, creq)
            control_pairs.append((extract_output_prosody(cout.mel.data[0], text.phones, target_speaker, aligner,
                                                         stats), ref))
        results.append(StyleResult(style, metric_report(pairs), metric_report(control_pairs),
                                   beats_neutral / len(texts), beats_others / len(texts), len(texts)))
    transfer_hits = synth_hits = 0
    n_synth = 0
    if classifier is not None:
        transfer_hits = sum(classify_speaker(m, classifier)[0] == target_speaker for m in transferred_mels)
        for text in texts:
            out, _ = model.synthesize(text.phones, target_speaker, neutral_style)
            truncated += out.truncated
            synth_hits += classify_speaker(out.mel.data[0], classifier)[0] == target_speaker
            n_synth += 1
    return EvaluationResult(results, transfer_hits / max(len(transferred_mels), 1),
                            synth_hits / max(n_synth, 1), len(transferred_mels), n_synth, truncated)


def write_report(path: str | Path, text: str) -> None:
    Path(path).write_text(text)
