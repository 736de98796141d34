import re

import numpy as np
import pytest

from prosody_tts import cli
from prosody_tts.checkpoint import load_checkpoint
from prosody_tts.config import SECTIONS, Config, format_value
from prosody_tts.corpus import read_mel
from prosody_tts.prosody import read_norm_stats, read_prosody

TINY = """
[model]
d_model = 16
d_spk_sty_embed = 4
n_enc_blocks = 1
n_dec_blocks = 1
d_ff = 32
bottleneck_cnn_channels = 8
agg_cnn_channels = 16
postnet_channels = 8
max_decoder_frames = 30

[train]
max_steps = 4
batch_size = 4
"""
SMALL_CORPUS = ["--utts-per-cell", "3", "--test-utts", "2"]
PHONES = "p1 p7 p3 p12"


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.cfg").write_text(TINY)
    assert run("gen-corpus", "--out", root / "corpus", *SMALL_CORPUS) == 0
    assert run("train", "--config", root / "tiny.cfg", "--corpus", root / "corpus", "--out", root / "a.ckpt",
               "--curve", root / "a.csv") == 0
    return root


def test_no_command_and_unknown_input_exit_1(capsys):
    assert run() == 1
    assert run("vocode") == 1
    assert "usage:" in capsys.readouterr().err
    assert run("synth", "--bogus") == 1
    assert run("gen-corpus") == 1          # missing --out


def documented_defaults(text):
    """{(section, flag): default} from the '[section] overrides' groups of a help text."""
    out, section = {}, None
    text = re.sub(r"\n\s{10,}(?=\(default)", " ", text)     # help wrapped onto its own line
    for line in text.splitlines():
        head = re.match(r"\[(\w+)\] overrides:", line)
        if head:
            section = head.group(1)
        elif not line.startswith(" "):
            section = None
        hit = re.search(r"--([a-z0-9-]+) [A-Z]+\s+\(default: ([^)]*)\)", line)
        if hit and section:
            out[(section, hit.group(1))] = hit.group(2)
    return out


def test_help_defaults_come_from_config_defaults(capsys):
    defaults = Config()
    checked = 0
    for command in ("gen-corpus", "extract-prosody", "train", "refine", "synth", "transfer", "control",
                    "evaluate", "gradcheck"):
        assert run(command, "--help") == 0
        text = capsys.readouterr().out
        assert "--help" in text
        for (section, flag), value in documented_defaults(text).items():
            assert format_value(getattr(getattr(defaults, section), flag.replace("-", "_"))) == value, flag
            checked += 1
    assert checked == 12 + (19 + 10) + 10     # gen-corpus; train; refine


def test_config_prints_every_key(capsys):
    assert run("config") == 0
    out = capsys.readouterr().out
    for name, cls in SECTIONS.items():
        assert f"[{name}]" in out
        for key in cls.__dataclass_fields__:
            assert re.search(rf"^{key} = ", out, re.M)


def test_gen_corpus_is_deterministic(tmp_path, work):
    assert run("gen-corpus", "--out", tmp_path / "c", *SMALL_CORPUS) == 0
    for path in (work / "corpus").rglob("*"):
        if path.is_file():
            assert (tmp_path / "c" / path.relative_to(work / "corpus")).read_bytes() == path.read_bytes()


def test_train_is_deterministic_and_writes_curve(tmp_path, work):
    assert run("train", "--config", work / "tiny.cfg", "--corpus", work / "corpus", "--out", tmp_path / "b.ckpt") == 0
    assert (tmp_path / "b.ckpt").read_bytes() == (work / "a.ckpt").read_bytes()
    assert len((work / "a.csv").read_text().splitlines()) == 5
    assert run("train", "--config", work / "tiny.cfg", "--corpus", work / "corpus", "--out", tmp_path / "c.ckpt",
               "--seed", "9") == 0
    assert (tmp_path / "c.ckpt").read_bytes() != (work / "a.ckpt").read_bytes()


def test_resume_and_freeze(tmp_path, work):
    assert run("train", "--corpus", work / "corpus", "--resume", work / "a.ckpt", "--out", tmp_path / "r.ckpt",
               "--max-steps", "2", "--freeze", "decoder,agg_cnn") == 0
    before, after = load_checkpoint(work / "a.ckpt"), load_checkpoint(tmp_path / "r.ckpt")
    assert after.step == 6
    for name in before.params.names():
        same = np.array_equal(before.params[name].data, after.params[name].data)
        assert same == (before.params.group_of(name) in ("decoder", "agg_cnn")), name
    assert run("train", "--corpus", work / "corpus", "--resume", work / "a.ckpt", "--out", tmp_path / "x.ckpt",
               "--d-model", "32") == 1
    assert not (tmp_path / "x.ckpt").exists()


def test_transfer_identity_matches_synth(tmp_path, work):
    ck = work / "a.ckpt"
    assert run("synth", "--ckpt", ck, "--phones", PHONES, "--spk", 1, "--sty", 2, "--out", tmp_path / "s.mel") == 0
    assert run("transfer", "--ckpt", ck, "--phones", PHONES, "--spk-src", 1, "--sty-src", 2, "--spk-tgt", 1,
               "--out", tmp_path / "t.mel") == 0
    assert (tmp_path / "s.mel").read_bytes() == (tmp_path / "t.mel").read_bytes()


def test_control_reproduces_transfer(tmp_path, work):
    ck = work / "a.ckpt"
    assert run("transfer", "--ckpt", ck, "--phones", PHONES, "--spk-src", 0, "--sty-src", 3, "--spk-tgt", 1,
               "--out", tmp_path / "t.mel", "--dump-prosody", tmp_path / "t.pros") == 0
    _, norm, phones, _ = read_prosody(tmp_path / "t.pros")
    assert norm == "global" and phones == PHONES.split()
    assert run("control", "--ckpt", ck, "--phones", PHONES, "--spk", 1, "--sty", 3, "--prosody", tmp_path / "t.pros",
               "--out", tmp_path / "c.mel", "--meta", work / "corpus" / "meta.txt") == 0
    assert (tmp_path / "c.mel").read_bytes() == (tmp_path / "t.mel").read_bytes()


def test_control_with_edited_prosody_changes_output(tmp_path, work):
    ck = work / "a.ckpt"
    run("transfer", "--ckpt", ck, "--phones", PHONES, "--spk-src", 0, "--sty-src", 3, "--spk-tgt", 1,
        "--out", tmp_path / "t.mel", "--dump-prosody", tmp_path / "t.pros")
    lines = (tmp_path / "t.pros").read_text().splitlines()
    fields = lines[2].split()
    fields[1] = "2.5"
    lines[2] = " ".join(fields)
    (tmp_path / "e.pros").write_text("\n".join(lines) + "\n")
    assert run("control", "--ckpt", ck, "--phones", PHONES, "--spk", 1, "--sty", 3, "--prosody", tmp_path / "e.pros",
               "--out", tmp_path / "e.mel") == 0
    assert not np.array_equal(read_mel(tmp_path / "e.mel")[:3], read_mel(tmp_path / "t.mel")[:3])


def test_user_errors_write_nothing(tmp_path, work, capsys):
    ck = work / "a.ckpt"
    out = tmp_path / "o.mel"
    assert run("synth", "--ckpt", ck, "--phones", "p1 zz", "--spk", 0, "--sty", 0, "--out", out) == 1
    assert run("synth", "--ckpt", ck, "--phones", "p1", "--spk", 5, "--sty", 0, "--out", out) == 1
    assert run("synth", "--ckpt", tmp_path / "missing.ckpt", "--phones", "p1", "--spk", 0, "--sty", 0, "--out", out) == 1
    (tmp_path / "bad.ckpt").write_bytes(ck.read_bytes()[:-10])
    assert run("synth", "--ckpt", tmp_path / "bad.ckpt", "--phones", "p1", "--spk", 0, "--sty", 0, "--out", out) == 1
    raw = tmp_path / "raw.pros"
    raw.write_text("#utt x norm=raw\np1 5.0 1 4 0.2\n")
    assert run("control", "--ckpt", ck, "--phones", "p1", "--spk", 0, "--sty", 0, "--prosody", raw, "--out", out) == 1
    assert not out.exists()
    err = capsys.readouterr().err
    assert "unknown phone" in err and "byte offset" in err and "norm=global" in err


def test_internal_error_exits_2_with_chain(monkeypatch, capsys):
    def boom(args):
        try:
            raise KeyError("inner")
        except KeyError as exc:
            raise RuntimeError("outer") from exc
    monkeypatch.setattr(cli, "cmd_config", boom)
    assert run("config") == 2
    err = capsys.readouterr().err
    assert "KeyError" in err and "RuntimeError: outer" in err


def test_refine_keeps_frozen_tensors(tmp_path, work):
    assert run("refine", "--ckpt", work / "a.ckpt", "--corpus", work / "corpus", "--out", tmp_path / "f.ckpt",
               "--max-steps", 2, "--freeze", "bottleneck") == 0
    before, after = load_checkpoint(work / "a.ckpt"), load_checkpoint(tmp_path / "f.ckpt")
    for name in before.params.names():
        frozen = before.params.group_of(name) in ("decoder", "bottleneck")
        assert np.array_equal(before.params[name].data, after.params[name].data) == frozen, name
    assert run("refine", "--ckpt", work / "a.ckpt", "--corpus", work / "corpus", "--out", tmp_path / "g.ckpt",
               "--strategy", "everything") == 1


def test_extract_prosody_from_audio(tmp_path):
    assert run("gen-corpus", "--out", tmp_path / "c", "--utts-per-cell", 1, "--test-utts", 1, "--with-audio", "true") == 0
    assert run("extract-prosody", "--audio-dir", tmp_path / "c", "--align-dir", tmp_path / "c",
               "--out", tmp_path / "p") == 0
    files = sorted((tmp_path / "p").glob("*.pros"))
    assert len(files) == 5
    assert read_prosody(files[0])[1] == "global"
    stats = read_norm_stats(tmp_path / "p" / "norm_stats.txt")
    assert stats.dur_std > 0
    assert run("extract-prosody", "--audio-dir", tmp_path / "p", "--align-dir", tmp_path / "c",
               "--out", tmp_path / "q") == 1
    assert not (tmp_path / "q").exists()


def test_evaluate_writes_report(tmp_path, work, capsys):
    report = tmp_path / "report.txt"
    assert run("evaluate", "--ckpt", work / "a.ckpt", "--test-set", work / "corpus" / "test", "--report", report,
               "--max-texts", 1) == 0
    text = report.read_text()
    assert text.splitlines()[0] == "model_name Lf0_Corr Dur_Corr Energy_Corr Lf0_RMSE"
    assert "transfer_to_target" in text
    assert text.rstrip() in capsys.readouterr().out


def test_gradcheck_command(capsys):
    assert run("gradcheck", "--samples", 40) == 0
    assert "max relative error" in capsys.readouterr().out
    assert run("gradcheck", "--samples", 20, "--tolerance", 1e-300) == 1
