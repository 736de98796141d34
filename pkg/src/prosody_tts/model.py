"""Transformer TTS with speaker/style conditioning and a phone-level prosody bottleneck.

Data flow for one batch::

    phones -> encode_text -> combine_speaker_style -> prosody_bottleneck -> [P, 4]
                                     |                                        |
                                     +------------ aggregate_prosody <--------+
                                                        |
                                                      decode -> mel, stop

Every stage returns a :class:`ConditionedEncoderState` tagged with its stage,
and each consumer checks the tag. All tensors carry a leading batch axis;
single utterances use a batch of one.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tc
from .config import PARAM_GROUPS, PROSODY_DIM, ModelConfig
from .errors import ConfigurationError, ContractError, InputError
from .loss import LossBreakdown, compute_loss, stop_labels
from .tensor import Tensor

STAGES = ("text_only", "speaker_style_combined", "fully_aggregated")


class ModelParams:
    """Named parameter tensors, each belonging to exactly one group.

    The group is the first dotted component of the name.
    """

    def __init__(self, tensors: dict[str, Tensor] | None = None):
        self.tensors: dict[str, Tensor] = {}
        for name, t in (tensors or {}).items():
            self.add(name, t)

    def add(self, name: str, value) -> Tensor:
        group = name.split(".", 1)[0]
        if group not in PARAM_GROUPS:
            raise ConfigurationError(f"parameter {name!r} is not in a known group")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        t._tracked = True
        t.name = name
        self.tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return sorted(self.tensors)

    @staticmethod
    def group_of(name: str) -> str:
        return name.split(".", 1)[0]

    def group(self, group: str) -> dict[str, Tensor]:
        return {n: t for n, t in self.tensors.items() if self.group_of(n) == group}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {n: self.tensors[n].data.copy() for n in self.names()}

    def copy(self) -> "ModelParams":
        return ModelParams({n: Tensor(a) for n, a in self.state().items()})

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())


@dataclass
class ConditionedEncoderState:
    stage: str
    hidden: Tensor                 # [B, P, d_model]
    phone_mask: np.ndarray         # [B, P] bool, True for real phones
    style_vec: Tensor | None = None  # [B, d_model] projected style, kept for reuse

    @property
    def lengths(self) -> np.ndarray:
        return self.phone_mask.sum(axis=-1)

    def expect(self, stage: str, consumer: str) -> None:
        if self.stage != stage:
            raise ContractError(f"{consumer} needs a {stage} state, got {self.stage}")


@dataclass
class DecoderOutput:
    mel_pre: Tensor        # [B, T, n_mels] before the post-net
    mel: Tensor            # [B, T, n_mels] final
    stop_logits: Tensor    # [B, T]
    truncated: bool = False
    attention: list[np.ndarray] = field(default_factory=list)

    @property
    def stop_probs(self) -> np.ndarray:
        return tc._sigmoid(self.stop_logits.data)

    @property
    def n_frames(self) -> int:
        return self.mel.shape[1]


@dataclass
class Batch:
    phones: np.ndarray        # [B, P] int, zero padded
    phone_mask: np.ndarray    # [B, P] bool
    speakers: np.ndarray      # [B]
    styles: np.ndarray        # [B]
    mel: np.ndarray           # [B, T, n_mels]
    frame_mask: np.ndarray    # [B, T] bool
    prosody: np.ndarray       # [B, P, 4]

    @property
    def size(self) -> int:
        return len(self.speakers)


def make_batch(items: Sequence[tuple]) -> Batch:
    """Pad ``(phones, speaker, style, mel[T, M], prosody[P, 4])`` tuples into a batch."""
    if not items:
        raise InputError("empty batch")
    for phones, _, _, mel, pros in items:
        if len(phones) != len(pros):
            raise InputError(f"{len(phones)} phones but {len(pros)} prosody rows")
        if len(mel) < 1:
            raise InputError("target mel has no frames")
    bsz = len(items)
    pmax = max(len(it[0]) for it in items)
    tmax = max(len(it[3]) for it in items)
    n_mels = items[0][3].shape[1]
    phones = np.zeros((bsz, pmax), dtype=np.int64)
    pmask = np.zeros((bsz, pmax), dtype=bool)
    mel = np.zeros((bsz, tmax, n_mels), dtype=np.float32)
    fmask = np.zeros((bsz, tmax), dtype=bool)
    pros = np.zeros((bsz, pmax, PROSODY_DIM), dtype=np.float32)
    for b, (ph, _, _, m, pr) in enumerate(items):
        phones[b, :len(ph)] = ph
        pmask[b, :len(ph)] = True
        mel[b, :len(m)] = m
        fmask[b, :len(m)] = True
        pros[b, :len(ph)] = pr
    speakers = np.array([it[1] for it in items], dtype=np.int64)
    styles = np.array([it[2] for it in items], dtype=np.int64)
    return Batch(phones, pmask, speakers, styles, mel, fmask, pros)


_PE_CACHE: dict = {}


def positional_encoding(length: int, dim: int, dtype) -> np.ndarray:
    key = (length, dim, np.dtype(dtype).str)
    if key not in _PE_CACHE:
        pos = np.arange(length)[:, None]
        i = np.arange(dim)[None, :]
        angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
        pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
        _PE_CACHE[key] = pe.astype(dtype)
    return _PE_CACHE[key]


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    p = ModelParams()
    d, dff = cfg.d_model, cfg.d_ff

    def xavier(*shape):
        fan_in = int(np.prod(shape[:-1]))
        fan_out = shape[-1] * (shape[0] if len(shape) == 3 else 1)
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, shape).astype(np.float32)

    def zeros(*shape):
        return np.zeros(shape, dtype=np.float32)

    def linear(prefix, n_in, n_out):
        p.add(f"{prefix}.w", xavier(n_in, n_out))
        p.add(f"{prefix}.b", zeros(n_out))

    def conv(prefix, k, c_in, c_out):
        p.add(f"{prefix}.w", xavier(k, c_in, c_out))
        p.add(f"{prefix}.b", zeros(c_out))

    def norm(prefix):
        p.add(f"{prefix}.g", np.ones(d, dtype=np.float32))
        p.add(f"{prefix}.b", zeros(d))

    def attention(prefix):
        for proj in ("q", "v", "o"):
            linear(f"{prefix}.{proj}", d, d)
        # no key bias: it shifts every score of a query equally and gets zero gradient
        p.add(f"{prefix}.k.w", xavier(d, d))

    def feed_forward(prefix):
        linear(f"{prefix}.fc1", d, dff)
        linear(f"{prefix}.fc2", dff, d)

    p.add("encoder.phone_embed", rng.normal(0, 1.0 / math.sqrt(d), (cfg.n_phones, d)).astype(np.float32))
    p.add("encoder.pos_alpha", np.ones(1, dtype=np.float32))
    linear("encoder.prenet", d, d)
    for i in range(cfg.n_enc_blocks):
        attention(f"encoder.block{i}.self_attn")
        norm(f"encoder.block{i}.ln1")
        feed_forward(f"encoder.block{i}.ff")
        norm(f"encoder.block{i}.ln2")

    e = cfg.d_spk_sty_embed
    p.add("speaker_embed.table", rng.normal(0, 1.0, (cfg.n_speakers, e)).astype(np.float32))
    p.add("style_embed.table", rng.normal(0, 1.0, (cfg.n_styles, e)).astype(np.float32))
    linear("projections.speaker", d + e, d)
    linear("projections.style", e, d)

    cb = cfg.bottleneck_cnn_channels
    conv("bottleneck.conv1", 3, d, cb)
    conv("bottleneck.conv2", 3, cb, cb)
    linear("bottleneck.se.fc1", cb, cb // cfg.se_reduction)
    linear("bottleneck.se.fc2", cb // cfg.se_reduction, cb)
    linear("bottleneck.out", cb, PROSODY_DIM)

    conv("agg_cnn.conv1", 3, PROSODY_DIM, cfg.agg_cnn_channels)
    conv("agg_cnn.conv2", 3, cfg.agg_cnn_channels, d)

    linear("decoder.prenet.fc1", cfg.n_mels, d)
    linear("decoder.prenet.fc2", d, d)
    p.add("decoder.pos_alpha", np.ones(1, dtype=np.float32))
    for i in range(cfg.n_dec_blocks):
        attention(f"decoder.block{i}.self_attn")
        norm(f"decoder.block{i}.ln1")
        attention(f"decoder.block{i}.cross_attn")
        norm(f"decoder.block{i}.ln2")
        feed_forward(f"decoder.block{i}.ff")
        norm(f"decoder.block{i}.ln3")
    linear("decoder.mel_head", d, cfg.n_mels)
    conv("decoder.postnet.conv1", 5, cfg.n_mels, cfg.postnet_channels)
    conv("decoder.postnet.conv2", 5, cfg.postnet_channels, cfg.n_mels)
    linear("decoder.stop", d, 1)
    return p


def _masked(x: Tensor, mask: np.ndarray) -> Tensor:
    if mask.all():
        return x
    return tc.mul(x, Tensor(mask[..., None].astype(x.dtype)))


class ProsodyTTS:
    """The network, bound to a config and a parameter set.

    Parameters are read, never written, so one instance can serve several
    inference threads.
    """

    def __init__(self, config: ModelConfig, params: ModelParams | None = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)
        self.encode_calls = 0
        self._dropout_rng: np.random.Generator | None = None

    # --- building blocks -------------------------------------------------------

    def _linear(self, x: Tensor, prefix: str) -> Tensor:
        p = self.params
        return tc.linear(x, p[f"{prefix}.w"], p[f"{prefix}.b"])

    def _conv(self, x: Tensor, prefix: str) -> Tensor:
        p = self.params
        return tc.conv1d(x, p[f"{prefix}.w"], p[f"{prefix}.b"])

    def _norm(self, x: Tensor, prefix: str) -> Tensor:
        p = self.params
        return tc.layer_norm(x, p[f"{prefix}.g"], p[f"{prefix}.b"])

    def _mha(self, x: Tensor, memory: Tensor, prefix: str, mask: np.ndarray | None):
        bsz, tq, d = x.shape
        tk = memory.shape[1]
        h = self.config.n_heads
        dh = d // h

        def heads(t: Tensor, length: int) -> Tensor:
            return tc.transpose(tc.reshape(t, (bsz, length, h, dh)), (0, 2, 1, 3))
        q = heads(self._linear(x, f"{prefix}.q"), tq)
        k = heads(tc.matmul(memory, self.params[f"{prefix}.k.w"]), tk)
        v = heads(self._linear(memory, f"{prefix}.v"), tk)
        if mask is not None:
            mask = mask[:, None]  # broadcast over heads
        ctx, weights = tc.scaled_dot_attention(q, k, v, mask)
        ctx = tc.reshape(tc.transpose(ctx, (0, 2, 1, 3)), (bsz, tq, d))
        return self._linear(ctx, f"{prefix}.o"), weights

    def _feed_forward(self, x: Tensor, prefix: str) -> Tensor:
        return self._linear(tc.relu(self._linear(x, f"{prefix}.fc1")), f"{prefix}.fc2")

    def _positions(self, length: int, dtype, prefix: str) -> Tensor:
        pe = Tensor(positional_encoding(length, self.config.d_model, dtype))
        return tc.mul(self.params[f"{prefix}.pos_alpha"], pe)

    # --- public stages ----------------------------------------------------------

    def encode_text(self, phonemes) -> ConditionedEncoderState:
        """Phone ids ([P] or padded [B, P] with ``lengths``) to a text_only state."""
        phones, mask = _as_phone_batch(phonemes)
        return self.encode_batch(phones, mask)

    def encode_batch(self, phones: np.ndarray, phone_mask: np.ndarray) -> ConditionedEncoderState:
        cfg = self.config
        lengths = phone_mask.sum(axis=-1)
        if lengths.min() < 1 or phones.shape[1] > cfg.max_phones:
            raise InputError(f"phone count must be in [1, {cfg.max_phones}], got {phones.shape[1]}")
        valid = phones[phone_mask]
        bad = np.flatnonzero((valid < 0) | (valid >= cfg.n_phones))
        if bad.size:
            raise InputError(f"phone id {int(valid[bad[0]])} at index {int(bad[0])} is outside "
                             f"the {cfg.n_phones}-phone vocabulary")
        self.encode_calls += 1
        p = self.params
        emb = tc.embedding(p["encoder.phone_embed"], np.where(phone_mask, phones, 0))
        x = tc.add(emb, self._positions(phones.shape[1], emb.dtype, "encoder"))
        x = tc.relu(self._linear(x, "encoder.prenet"))
        attn_mask = np.broadcast_to(phone_mask[:, None, :], (phones.shape[0], phones.shape[1], phones.shape[1]))
        for i in range(cfg.n_enc_blocks):
            pre = f"encoder.block{i}"
            a, _ = self._mha(x, x, f"{pre}.self_attn", attn_mask)
            x = self._norm(tc.add(x, a), f"{pre}.ln1")
            x = self._norm(tc.add(x, self._feed_forward(x, f"{pre}.ff")), f"{pre}.ln2")
        return ConditionedEncoderState("text_only", x, phone_mask.copy())

    def style_vector(self, styles) -> Tensor:
        """tanh(W e_style + b): the projected style added to every phone row."""
        styles = np.atleast_1d(np.asarray(styles, dtype=np.int64))
        self._check_ids(styles, self.config.n_styles, "style")
        e = tc.embedding(self.params["style_embed.table"], styles)
        return tc.tanh(self._linear(e, "projections.style"))

    def combine_speaker_style(self, enc: ConditionedEncoderState, speakers, styles=None,
                              style_vec: Tensor | None = None) -> ConditionedEncoderState:
        """Speaker concat + projection, then add the projected style.

        Pass ``style_vec`` to reuse a style projection computed earlier.
        """
        enc.expect("text_only", "combine_speaker_style")
        bsz, plen, d = enc.hidden.shape
        speakers = np.atleast_1d(np.asarray(speakers, dtype=np.int64))
        self._check_ids(speakers, self.config.n_speakers, "speaker")
        if style_vec is None:
            if styles is None:
                raise InputError("combine_speaker_style needs styles or style_vec")
            style_vec = self.style_vector(styles)
        spk = tc.embedding(self.params["speaker_embed.table"], speakers)        # [B, E]
        spk = tc.broadcast_to(tc.reshape(spk, (bsz, 1, -1)), (bsz, plen, spk.shape[-1]))
        h = self._linear(tc.concat([enc.hidden, spk], axis=-1), "projections.speaker")
        h = tc.add(h, tc.reshape(style_vec, (bsz, 1, d)))
        return ConditionedEncoderState("speaker_style_combined", h, enc.phone_mask, style_vec)

    def se_block(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """Squeeze (masked mean over phones), excite (FC-relu-FC-sigmoid), rescale channels."""
        c = x.shape[-1]
        if c % self.config.se_reduction:
            raise ConfigurationError(f"SE channels {c} not divisible by reduction {self.config.se_reduction}")
        if x.ndim == 2:
            x3 = tc.reshape(x, (1,) + x.shape)
            return tc.reshape(self.se_block(x3, mask), x.shape)
        if mask is None:
            squeezed = tc.mean(x, axis=1)
        else:
            counts = mask.sum(axis=1, keepdims=True).astype(x.dtype)
            squeezed = tc.div(tc.tsum(_masked(x, mask), axis=1), Tensor(counts))
        s = tc.relu(self._linear(squeezed, "bottleneck.se.fc1"))
        s = tc.sigmoid(self._linear(s, "bottleneck.se.fc2"))
        return tc.mul(x, tc.reshape(s, (x.shape[0], 1, c)))

    def prosody_bottleneck(self, combined: ConditionedEncoderState) -> Tensor:
        """Predict [B, P, 4] prosody (lf0_z, vuv, dur_z, energy_z) per phone."""
        combined.expect("speaker_style_combined", "prosody_bottleneck")
        mask = combined.phone_mask
        h = _masked(tc.relu(self._conv(_masked(combined.hidden, mask), "bottleneck.conv1")), mask)
        h = _masked(tc.relu(self._conv(h, "bottleneck.conv2")), mask)
        h = self.se_block(h, mask)
        return _masked(self._linear(h, "bottleneck.out"), mask)

    def aggregation_features(self, prosody: Tensor, phone_mask: np.ndarray) -> Tensor:
        """The 2-layer CNN applied to prosody before it joins the encoder output."""
        h = _masked(tc.relu(self._conv(_masked(prosody, phone_mask), "agg_cnn.conv1")), phone_mask)
        return _masked(self._conv(h, "agg_cnn.conv2"), phone_mask)

    def aggregate_prosody(self, combined: ConditionedEncoderState, prosody,
                          features: Tensor | None = None) -> ConditionedEncoderState:
        combined.expect("speaker_style_combined", "aggregate_prosody")
        if features is None:
            prosody = prosody if isinstance(prosody, Tensor) else Tensor(np.asarray(prosody, dtype=combined.hidden.dtype))
            if prosody.ndim == 2:
                prosody = tc.reshape(prosody, (1,) + prosody.shape)
            if prosody.shape[:2] != combined.hidden.shape[:2] or prosody.shape[-1] != PROSODY_DIM:
                raise ContractError(f"prosody shape {prosody.shape} does not match "
                                    f"{combined.hidden.shape[:2]} phones x {PROSODY_DIM}")
            features = self.aggregation_features(prosody, combined.phone_mask)
        elif features.shape != combined.hidden.shape:
            raise ContractError(f"aggregation features {features.shape} != hidden {combined.hidden.shape}")
        return ConditionedEncoderState("fully_aggregated", tc.add(combined.hidden, features),
                                       combined.phone_mask, combined.style_vec)

    # --- decoder -------------------------------------------------------------------

    def _prenet(self, frames: Tensor) -> Tensor:
        h = tc.relu(self._linear(frames, "decoder.prenet.fc1"))
        h = self._dropout(h)
        h = tc.relu(self._linear(h, "decoder.prenet.fc2"))
        return self._dropout(h)

    def _dropout(self, h: Tensor) -> Tensor:
        rate = self.config.prenet_dropout
        if self._dropout_rng is None or rate <= 0:
            return h
        keep = (self._dropout_rng.random(h.shape) >= rate).astype(h.dtype) / h.dtype.type(1 - rate)
        return tc.mul(h, Tensor(keep))

    def _decoder_stack(self, inputs: Tensor, memory: ConditionedEncoderState, keep_attention: bool = False):
        cfg = self.config
        bsz, t, _ = inputs.shape
        x = self._prenet(inputs)
        x = tc.add(x, self._positions(t, x.dtype, "decoder"))
        causal = np.broadcast_to(np.tril(np.ones((t, t), dtype=bool)), (bsz, t, t))
        cross_mask = np.broadcast_to(memory.phone_mask[:, None, :], (bsz, t, memory.phone_mask.shape[1]))
        attention = []
        for i in range(cfg.n_dec_blocks):
            pre = f"decoder.block{i}"
            a, _ = self._mha(x, x, f"{pre}.self_attn", causal)
            x = self._norm(tc.add(x, a), f"{pre}.ln1")
            a, w = self._mha(x, memory.hidden, f"{pre}.cross_attn", cross_mask)
            if keep_attention:
                attention.append(w.data)
            x = self._norm(tc.add(x, a), f"{pre}.ln2")
            x = self._norm(tc.add(x, self._feed_forward(x, f"{pre}.ff")), f"{pre}.ln3")
        mel_pre = self._linear(x, "decoder.mel_head")
        stop = tc.reshape(self._linear(x, "decoder.stop"), (bsz, t))
        return mel_pre, stop, attention

    def _postnet(self, mel_pre: Tensor, frame_mask: np.ndarray | None) -> Tensor:
        x = mel_pre if frame_mask is None else _masked(mel_pre, frame_mask)
        h = tc.tanh(self._conv(x, "decoder.postnet.conv1"))
        if frame_mask is not None:
            h = _masked(h, frame_mask)
        return tc.add(mel_pre, self._conv(h, "decoder.postnet.conv2"))

    def decode(self, aggregated: ConditionedEncoderState, target_mel=None, frame_mask=None,
               max_frames: int | None = None, keep_attention: bool = False) -> DecoderOutput:
        """Teacher-forced when ``target_mel`` is given, autoregressive otherwise."""
        aggregated.expect("fully_aggregated", "decode")
        if target_mel is not None:
            target = np.asarray(target_mel.data if isinstance(target_mel, Tensor) else target_mel)
            if target.ndim == 2:
                target = target[None]
            if target.shape[1] < 1:
                raise InputError("teacher-forced decoding needs at least one target frame")
            dtype = aggregated.hidden.dtype
            go = np.zeros((target.shape[0], 1, target.shape[2]), dtype=dtype)
            inputs = Tensor(np.concatenate([go, target[:, :-1].astype(dtype)], axis=1))
            mel_pre, stop, attention = self._decoder_stack(inputs, aggregated, keep_attention)
            return DecoderOutput(mel_pre, self._postnet(mel_pre, frame_mask), stop, False, attention)
        return self._decode_autoregressive(aggregated, max_frames or self.config.max_decoder_frames,
                                           keep_attention)

    def _decode_autoregressive(self, aggregated, max_frames, keep_attention):
        if aggregated.hidden.shape[0] != 1:
            raise InputError("autoregressive decoding runs one utterance at a time")
        dtype = aggregated.hidden.dtype
        n_mels = self.config.n_mels
        frames = np.zeros((1, 1, n_mels), dtype=dtype)
        outputs, stops = [], []
        truncated = True
        attention = []
        with tc.no_grad():
            for t in range(max_frames):
                mel_pre, stop, attn = self._decoder_stack(Tensor(frames), aggregated, keep_attention)
                outputs.append(mel_pre.data[:, -1])
                stops.append(stop.data[:, -1])
                if keep_attention:
                    attention = attn
                if tc._sigmoid(stop.data[:, -1])[0] > 0.5:
                    truncated = False
                    break
                frames = np.concatenate([frames, mel_pre.data[:, -1:]], axis=1)
            mel_pre = Tensor(np.stack(outputs, axis=1))
            mel = self._postnet(mel_pre, None)
        return DecoderOutput(mel_pre, mel, Tensor(np.stack(stops, axis=1)), truncated, attention)

    # --- composite passes -----------------------------------------------------------

    def synthesize(self, phonemes, speaker: int, style: int, prosody=None,
                   max_frames: int | None = None) -> tuple[DecoderOutput, np.ndarray]:
        """Single-pass synthesis; ``prosody`` overrides the bottleneck prediction."""
        enc = self.encode_text(phonemes)
        combined = self.combine_speaker_style(enc, speaker, style)
        predicted = self.prosody_bottleneck(combined)
        fed = predicted if prosody is None else Tensor(np.asarray(prosody, dtype=predicted.dtype).reshape(predicted.shape))
        out = self.decode(self.aggregate_prosody(combined, fed), max_frames=max_frames)
        return out, fed.data[0]

    def forward_train(self, batch: Batch, alpha: float = 1.0, beta: float = 1.0,
                      dropout_rng: np.random.Generator | None = None) -> tuple[LossBreakdown, Tensor, Tensor]:
        """Teacher-forced pass over a padded batch; returns (breakdown, total, predicted prosody)."""
        if batch.prosody.shape[:2] != batch.phones.shape:
            raise InputError("prosody targets are not aligned with the phones")
        if batch.mel.shape[:2] != batch.frame_mask.shape:
            raise InputError("mel targets are not aligned with the frame mask")
        self._dropout_rng = dropout_rng
        try:
            enc = self.encode_batch(batch.phones, batch.phone_mask)
            combined = self.combine_speaker_style(enc, batch.speakers, batch.styles)
            predicted = self.prosody_bottleneck(combined)
            if self.config.prosody_feed == "predicted":
                fed = predicted
            else:
                fed = Tensor(batch.prosody.astype(predicted.dtype))
            aggregated = self.aggregate_prosody(combined, fed)
            out = self.decode(aggregated, batch.mel, batch.frame_mask)
        finally:
            self._dropout_rng = None
        dtype = predicted.dtype
        breakdown, total = compute_loss(
            out.mel_pre, out.mel, batch.mel.astype(dtype), out.stop_logits,
            stop_labels(batch.frame_mask).astype(dtype), predicted, batch.prosody.astype(dtype),
            alpha, beta, batch.frame_mask, batch.phone_mask)
        return breakdown, total, predicted

    @staticmethod
    def _check_ids(ids: np.ndarray, limit: int, what: str) -> None:
        bad = ids[(ids < 0) | (ids >= limit)]
        if bad.size:
            raise InputError(f"{what} id {int(bad[0])} outside table of size {limit}")


def _as_phone_batch(phonemes) -> tuple[np.ndarray, np.ndarray]:
    arr = np.asarray(phonemes)
    if arr.dtype == object or arr.ndim == 0:
        raise InputError("phonemes must be a sequence of integer ids")
    if arr.ndim == 1:
        if arr.size == 0:
            raise InputError("empty phoneme sequence")
        return arr[None].astype(np.int64), np.ones((1, arr.size), dtype=bool)
    return arr.astype(np.int64), np.ones(arr.shape, dtype=bool)
