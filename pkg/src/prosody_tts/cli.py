"""Command-line entry point: ``prosody-tts <subcommand> ...``.

Exit codes: 0 success, 1 user error (bad flags, bad input files, failed
check), 2 internal error. Output files are written only after a command has
fully succeeded.
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
import traceback
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import (SECTIONS, Config, ModelConfig, TrainConfig, format_config, format_value, parse_config,
                     replace, tiny_model_config)
from .corpus import gen_corpus, load_corpus, prepare_training_data, read_mel, read_wav, write_mel
from .errors import ProsodyTTSError
from .model import ProsodyTTS
from .prosody import (aggregate_to_phone, mel_frame_features, normalize_global, read_alignment,
                      read_prosody, waveform_frame_features, write_norm_stats, write_prosody)
from .trainer import STRATEGIES, evaluation_loss, refine, train, write_loss_curve


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Show defaults, except for optional flags whose default is 'not given'."""

    def _get_help_string(self, action):
        if action.default is None or action.default is argparse.SUPPRESS:
            return action.help
        return super()._get_help_string(action)


def _config_flags(parser, cls, skip=()):
    """One ``--key`` flag per dataclass field, defaulting to None (meaning: keep config value)."""
    group = parser.add_argument_group(f"[{next(n for n, c in SECTIONS.items() if c is cls)}] overrides")
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        typ = {int: int, float: float, bool: str, str: str}.get(type(default), str)
        group.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", type=typ, default=None,
                           metavar=type(default).__name__.upper(), help=f"(default: {format_value(default)})")


def _apply_overrides(obj, args):
    changes = {}
    for f in dataclasses.fields(obj):
        value = getattr(args, f"cfg_{f.name}", None)
        if value is None:
            continue
        if isinstance(getattr(obj, f.name), bool):
            value = value.lower() in ("1", "true", "yes")
        changes[f.name] = value
    return replace(obj, **changes) if changes else obj


def _load_config(path) -> Config:
    return parse_config(path) if path else Config()


def _phones(text: str, inventory: Sequence[str] | None, n_phones: int) -> np.ndarray:
    symbols = text.split()
    if not symbols:
        raise ProsodyTTSError("no phones given")
    inventory = list(inventory) if inventory else [f"p{i}" for i in range(n_phones)]
    index = {s: i for i, s in enumerate(inventory)}
    unknown = [s for s in symbols if s not in index]
    if unknown:
        raise ProsodyTTSError(f"unknown phone symbols {unknown}; inventory is {' '.join(inventory)}")
    return np.array([index[s] for s in symbols], dtype=np.int64)


def _inventory(meta: str | None) -> list[str] | None:
    if not meta:
        return None
    path = Path(meta)
    return load_corpus(path.parent if path.name == "meta.txt" else path).inventory


def _model(ckpt: Checkpoint) -> ProsodyTTS:
    return ProsodyTTS(ckpt.model_config, ckpt.params)


# --- subcommands -------------------------------------------------------------------------------

def cmd_gen_corpus(args) -> str:
    spec = _apply_overrides(_load_config(args.config).corpus, args)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    train_dir, test_dir = gen_corpus(spec, args.out)
    return f"wrote corpus to {train_dir} and test set to {test_dir}"


def cmd_extract_prosody(args) -> str:
    audio_dir, align_dir, out = Path(args.audio_dir), Path(args.align_dir), Path(args.out)
    ext = ".wav" if args.source == "audio" else ".mel"
    raw, phones = {}, {}
    for path in sorted(audio_dir.glob(f"*{ext}")):
        align_path = align_dir / (path.stem + ".align")
        if not align_path.exists():
            raise ProsodyTTSError(f"no alignment {align_path} for {path}")
        utt, _, segments = read_alignment(align_path)
        if args.source == "audio":
            samples, sr = read_wav(path)
            frames = waveform_frame_features(samples, sr, hop=args.hop)
        else:
            frames = mel_frame_features(read_mel(path))
        raw[utt] = aggregate_to_phone(frames, segments, utt).matrix()
        phones[utt] = [s.phone for s in segments]
    if not raw:
        raise ProsodyTTSError(f"no {ext} files in {audio_dir}")
    stats, normed = normalize_global(raw)
    out.mkdir(parents=True, exist_ok=True)
    for utt, values in normed.items():
        write_prosody(out / f"utt_{utt}.pros", utt, phones[utt], values, norm="global")
    write_norm_stats(out / "norm_stats.txt", stats)
    return f"extracted prosody for {len(raw)} utterances into {out}"


def _train_config(args, base: TrainConfig) -> TrainConfig:
    cfg = _apply_overrides(base, args)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.freeze:
        cfg = replace(cfg, frozen_groups=tuple(g for g in args.freeze.replace(",", " ").split() if g))
    return cfg


def cmd_train(args) -> str:
    config = _load_config(args.config)
    corpus = load_corpus(args.corpus)
    params = adam = None
    model_config = _apply_overrides(config.model, args)
    train_config = _train_config(args, config.train)
    stats = None
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        explicit = args.config or any(getattr(args, f"cfg_{f.name}") is not None
                                      for f in dataclasses.fields(ModelConfig))
        if explicit and ckpt.model_config != model_config:
            raise ProsodyTTSError("resume checkpoint was trained with a different model config")
        model_config, params, adam, stats = ckpt.model_config, ckpt.params, ckpt.adam, ckpt.norm_stats
    stats, items = prepare_training_data(corpus, stats)
    result = train(items, model_config, train_config, params=params, adam=adam)
    save_checkpoint(args.out, Checkpoint(model_config, result.params, train_config, stats, result.step, result.adam))
    if args.curve:
        write_loss_curve(args.curve, result.curve)
    last = result.curve[-1].loss.total if result.curve else float("nan")
    return f"trained to step {result.step}, final total loss {last:.6f}, saved {args.out}"


def cmd_refine(args) -> str:
    ckpt = load_checkpoint(args.ckpt)
    corpus = load_corpus(args.corpus)
    train_config = _train_config(args, replace(ckpt.train_config, frozen_groups=()))
    stats, items = prepare_training_data(corpus, ckpt.norm_stats)
    before = evaluation_loss(ckpt.params, items, ckpt.model_config, train_config.alpha, train_config.beta)
    result = refine(ckpt.params, items, ckpt.model_config, train_config, args.strategy)
    after = evaluation_loss(result.params, items, ckpt.model_config, train_config.alpha, train_config.beta)
    save_checkpoint(args.out, Checkpoint(ckpt.model_config, result.params, train_config, stats,
                                         ckpt.step + result.step, None))
    return f"refined ({args.strategy}) for {result.step} steps: loss {before:.6f} -> {after:.6f}, saved {args.out}"


def cmd_synth(args) -> str:
    ckpt = load_checkpoint(args.ckpt)
    model = _model(ckpt)
    phones = _phones(args.phones, _inventory(args.meta), ckpt.model_config.n_phones)
    out, _ = model.synthesize(phones, args.spk, args.sty, max_frames=args.max_frames)
    write_mel(args.out, out.mel.data[0])
    return f"{out.n_frames} frames{' (truncated)' if out.truncated else ''} -> {args.out}"


def _transfer(args, prosody=None):
    from .transfer_eval import TransferRequest, transfer
    ckpt = load_checkpoint(args.ckpt)
    model = _model(ckpt)
    inventory = _inventory(args.meta)
    phones = _phones(args.phones, inventory, ckpt.model_config.n_phones)
    req = TransferRequest(args.spk_src, args.sty_src, args.spk_tgt, tuple(int(p) for p in phones))
    out, fed = transfer(model, req, max_frames=args.max_frames, prosody=prosody)
    return out, fed, args.phones.split()


def cmd_transfer(args) -> str:
    out, fed, symbols = _transfer(args)
    write_mel(args.out, out.mel.data[0])
    if args.dump_prosody:
        write_prosody(args.dump_prosody, "transfer", symbols, fed, norm="global")
    return f"{out.n_frames} frames{' (truncated)' if out.truncated else ''} -> {args.out}"


def cmd_control(args) -> str:
    _, norm, file_phones, values = read_prosody(args.prosody)
    if norm != "global":
        raise ProsodyTTSError(f"{args.prosody}: control needs normalized (norm=global) prosody, got norm={norm}")
    if file_phones != args.phones.split():
        raise ProsodyTTSError(f"{args.prosody}: phones {file_phones} do not match --phones")
    args.spk_src = args.spk_tgt = args.spk
    args.sty_src = args.sty
    out, _, _ = _transfer(args, prosody=values)
    write_mel(args.out, out.mel.data[0])
    return f"{out.n_frames} frames{' (truncated)' if out.truncated else ''} -> {args.out}"


def cmd_evaluate(args) -> str:
    from .transfer_eval import PhoneAligner, evaluate, train_speaker_classifier
    ckpt = load_checkpoint(args.ckpt)
    test = load_corpus(args.test_set)
    train_dir = Path(args.corpus) if args.corpus else Path(args.test_set).parent
    corpus = load_corpus(train_dir)
    if ckpt.norm_stats is None:
        raise ProsodyTTSError("checkpoint carries no normalization statistics")
    aligner = PhoneAligner.fit(corpus)
    clf = train_speaker_classifier([(corpus.mel(e), e.speaker) for e in corpus], ckpt.model_config.n_speakers,
                                   ckpt.model_config.n_mels, seed=args.seed or 0)
    result = evaluate(_model(ckpt), test, ckpt.norm_stats, aligner, clf, args.spk_src, args.spk_tgt,
                      reference=args.reference, max_texts=args.max_texts, seed=args.seed or 0)
    text = result.report_text()
    Path(args.report).write_text(text)
    return text.rstrip()


def cmd_gradcheck(args) -> str:
    from .gradcheck import model_grad_check
    config = _load_config(args.config)
    model_config = config.model if args.config else tiny_model_config()
    result = model_grad_check(model_config, config.train, n_samples=args.samples, seed=args.seed or 0)
    groups = " ".join(f"{g}={e:.2e}" for g, e in sorted(result.groups.items()))
    summary = f"max relative error {result.max_rel_error:.3e} over {result.n_coordinates} coordinates ({groups})"
    if result.max_rel_error >= args.tolerance:
        raise ProsodyTTSError(f"{summary} exceeds tolerance {args.tolerance:g}")
    return summary


def cmd_config(args) -> str:
    return format_config(Config()).rstrip()


# --- parser --------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="prosody-tts", description="Phone-level prosody TTS with cross-speaker style transfer.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    def command(name, fn, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text,
                           formatter_class=_HelpFormatter)
        p.set_defaults(fn=fn)
        p.add_argument("--seed", type=int, default=None, help="override the configured seed")
        return p

    p = command("gen-corpus", cmd_gen_corpus, "generate the synthetic corpus and its test set")
    p.add_argument("--config", help="config file with a [corpus] section")
    p.add_argument("--out", required=True, help="output corpus directory")
    _config_flags(p, type(Config().corpus), skip=("seed",))

    p = command("extract-prosody", cmd_extract_prosody, "extract globally normalized phone-level prosody")
    p.add_argument("--audio-dir", required=True, help="directory of utt_<id>.wav (or .mel with --source mel)")
    p.add_argument("--align-dir", required=True, help="directory of matching .align files")
    p.add_argument("--out", required=True, help="output directory for .pros files and norm_stats.txt")
    p.add_argument("--source", choices=("audio", "mel"), default="audio", help="input kind")
    p.add_argument("--hop", type=int, default=256, help="analysis hop in samples")

    p = command("train", cmd_train, "train a model on a corpus")
    p.add_argument("--config", help="config file ([model] and [train] sections)")
    p.add_argument("--corpus", required=True, help="corpus directory")
    p.add_argument("--out", required=True, help="checkpoint to write")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--freeze", help="comma-separated parameter groups to freeze")
    p.add_argument("--curve", help="write the loss curve CSV here")
    _config_flags(p, ModelConfig)
    _config_flags(p, TrainConfig, skip=("seed", "frozen_groups"))

    p = command("refine", cmd_refine, "refine a pretrained checkpoint on new speakers")
    p.add_argument("--ckpt", required=True, help="pretrained checkpoint")
    p.add_argument("--corpus", required=True, help="corpus with the new speakers")
    p.add_argument("--out", required=True, help="checkpoint to write")
    p.add_argument("--strategy", choices=STRATEGIES, default="encoder_only", help="what stays trainable")
    p.add_argument("--freeze", help="extra comma-separated parameter groups to freeze")
    _config_flags(p, TrainConfig, skip=("seed", "frozen_groups"))

    def synth_flags(p, speaker_flags):
        p.add_argument("--ckpt", required=True, help="checkpoint")
        p.add_argument("--phones", required=True, help='whitespace-separated phone symbols, e.g. "p1 p4 p2"')
        p.add_argument("--meta", help="corpus meta.txt (or its directory) defining the phone inventory; "
                                      "default p0..p<n-1>")
        p.add_argument("--out", required=True, help="output .mel file")
        p.add_argument("--max-frames", type=int, default=None, help="decoder frame cap (default: model config)")
        for flag in speaker_flags:
            p.add_argument(flag, type=int, required=True)

    p = command("synth", cmd_synth, "synthesize a mel for one speaker and style")
    synth_flags(p, ("--spk", "--sty"))
    p = command("transfer", cmd_transfer, "speak with the source speaker's style in the target speaker's voice")
    synth_flags(p, ("--spk-src", "--sty-src", "--spk-tgt"))
    p.add_argument("--dump-prosody", help="write the fed prosody (norm=global) here")
    p = command("control", cmd_control, "synthesize from an edited prosody file, bypassing the prediction")
    synth_flags(p, ("--spk", "--sty"))
    p.add_argument("--prosody", required=True, help="prosody file (norm=global)")

    p = command("evaluate", cmd_evaluate, "transfer every test text and score prosody and speaker identity")
    p.add_argument("--ckpt", required=True, help="checkpoint")
    p.add_argument("--test-set", required=True, help="test corpus directory")
    p.add_argument("--corpus", help="training corpus for aligner templates and the speaker classifier "
                                    "(default: parent of the test set)")
    p.add_argument("--report", required=True, help="report file to write")
    p.add_argument("--spk-src", type=int, default=0, help="source speaker")
    p.add_argument("--spk-tgt", type=int, default=1, help="target speaker")
    p.add_argument("--reference", choices=("oracle", "extracted"), default="oracle", help="reference prosody")
    p.add_argument("--max-texts", type=int, default=None, help="limit the number of test texts")

    p = command("gradcheck", cmd_gradcheck, "finite-difference check of the full training loss")
    p.add_argument("--config", help="config file (default: the built-in tiny model)")
    p.add_argument("--tolerance", type=float, default=1e-3, help="maximum allowed relative error")
    p.add_argument("--samples", type=int, default=240, help="coordinates to check")

    command("config", cmd_config, "print every configuration key with its default")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_help(sys.stderr)
            return 1
        print(args.fn(args))
        return 0
    except SystemExit as exc:       # --help and --version
        return 0 if exc.code in (0, None) else 1
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (ProsodyTTSError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        print("internal error:", file=sys.stderr)
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
