import csv
import json
import shutil

import numpy as np
import pytest

from deskmusic import checkpoint as ck
from deskmusic.audio_io import Waveform, read_wav, write_wav
from deskmusic.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """A tiny corpus and every module trained for a few steps."""
    base = tmp_path_factory.mktemp("cli")
    corpus, ckpt = base / "corpus", base / "ckpt"
    assert run("corpus-build", "--n", 8, "--out", corpus, "--seed", 0) == EXIT_OK
    for kind in ("sem-codec", "ac-codec", "lm", "srfm", "evalkit"):
        assert run("train", "--module", kind, "--corpus", corpus, "--out", ckpt, "--steps", 3) == EXIT_OK
    return corpus, ckpt


def test_corpus_build_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("corpus-build", "--n", 3, "--out", a, "--seed", 5) == EXIT_OK
    assert run("corpus-build", "--n", 3, "--out", b, "--seed", 5) == EXIT_OK
    assert (a / "manifest.jsonl").read_bytes() == (b / "manifest.jsonl").read_bytes()
    for f in sorted(p.relative_to(a) for p in a.rglob("*.wav")):
        assert (a / f).read_bytes() == (b / f).read_bytes()


def test_corpus_build_unwritable(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run("corpus-build", "--n", 2, "--out", blocker / "sub") == EXIT_DATA
    assert "error" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    [],
    ["train", "--module", "vocoder", "--corpus", "c", "--out", "o"],
    ["generate", "--duration", "1", "--out", "x.wav"],
    ["generate", "--caption", "a", "--duration", "abc", "--out", "x.wav"],
])
def test_usage_errors_exit_1(argv):
    assert main(argv) == EXIT_USAGE


def test_help_exits_0(capsys):
    assert main(["--help"]) == EXIT_OK
    assert "corpus-build" in capsys.readouterr().out


def test_unknown_config_key_exits_1(tmp_path, trained):
    corpus, _ = trained
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[lm]\nstepz = 1\n")
    assert run("train", "--module", "lm", "--corpus", corpus, "--out", tmp_path, "--config", cfg) == EXIT_USAGE


def test_lm_without_semantic_codec_is_a_prerequisite_error(tmp_path, trained, capsys):
    corpus, _ = trained
    assert run("train", "--module", "lm", "--corpus", corpus, "--out", tmp_path / "empty", "--steps", 1) == EXIT_DATA
    assert "sem-codec" in capsys.readouterr().err


def test_train_writes_loss_curve(trained):
    _, ckpt = trained
    rows = list(csv.reader(open(ckpt / "lm_loss.csv")))
    assert rows[0] == ["step", "loss"] and [r[0] for r in rows[1:]] == ["1", "2", "3"]


def test_resume_continues_step_counter(tmp_path, trained, capsys):
    corpus, ckpt = trained
    work = tmp_path / "ck"
    shutil.copytree(ckpt, work)
    capsys.readouterr()
    assert run("train", "--module", "lm", "--corpus", corpus, "--out", work, "--steps", 2, "--resume") == EXIT_OK
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["first_step"] == 3
    assert ck.load_checkpoint(work / "lm.imck").metadata["step"] == 5
    rows = list(csv.reader(open(work / "lm_loss.csv")))
    assert [r[0] for r in rows[1:]] == ["1", "2", "3", "4", "5"]


@pytest.mark.parametrize("mode,rate", [("full", 48000), ("no-flow", 24000)])
def test_generate_duration_and_rate(tmp_path, trained, mode, rate):
    _, ckpt = trained
    out = tmp_path / "g.wav"
    assert run("generate", "--caption", "calm jazz", "--duration", 2, "--ckpt", ckpt, "--mode", mode,
               "--out", out) == EXIT_OK
    w = read_wav(out)
    assert w.sample_rate == rate and len(w.samples) == 2 * rate


def test_generate_seed_is_reproducible(tmp_path, trained):
    _, ckpt = trained
    paths = [tmp_path / f"{i}.wav" for i in range(3)]
    for p, seed in zip(paths, (7, 7, 8)):
        assert run("generate", "--caption", "loud metal", "--duration", 1, "--ckpt", ckpt, "--seed", seed,
                   "--out", p) == EXIT_OK
    assert paths[0].read_bytes() == paths[1].read_bytes()
    assert paths[0].read_bytes() != paths[2].read_bytes()


def test_generate_beyond_preset_maximum_exits_1(tmp_path, trained):
    _, ckpt = trained
    assert run("generate", "--caption", "x", "--duration", 481, "--ckpt", ckpt, "--out", tmp_path / "x.wav") == EXIT_USAGE


def test_generate_without_checkpoints_exits_2(tmp_path):
    assert run("generate", "--caption", "x", "--duration", 1, "--ckpt", tmp_path, "--out", tmp_path / "x.wav") == EXIT_DATA


@pytest.mark.parametrize("extra", [3, 0])
def test_continue_length(tmp_path, trained, extra):
    corpus, ckpt = trained
    prompt = tmp_path / "p.wav"
    rng = np.random.default_rng(0)
    write_wav(prompt, Waveform((0.1 * rng.standard_normal(96000)).astype(np.float32), 48000), 32)
    out = tmp_path / "c.wav"
    assert run("continue", "--prompt", prompt, "--extra-duration", extra, "--ckpt", ckpt, "--out", out) == EXIT_OK
    w = read_wav(out)
    assert w.sample_rate == 48000 and len(w.samples) == (2 + extra) * 48000


def test_continue_missing_prompt_exits_2(tmp_path, trained):
    _, ckpt = trained
    assert run("continue", "--prompt", tmp_path / "none.wav", "--extra-duration", 1, "--ckpt", ckpt,
               "--out", tmp_path / "c.wav") == EXIT_DATA


def test_eval_identical_dirs(tmp_path, trained, capsys):
    corpus, ckpt = trained
    capsys.readouterr()
    out = tmp_path / "r.json"
    assert run("eval", "--generated", corpus / "24k", "--reference", corpus / "24k", "--ckpt", ckpt,
               "--out", out) == EXIT_OK
    rep = json.loads(out.read_text())
    assert rep["fd"] == 0.0 and rep["kl"] == pytest.approx(0.0, abs=1e-9)


def test_eval_empty_dir_exits_2(tmp_path, trained):
    corpus, ckpt = trained
    (tmp_path / "empty").mkdir()
    assert run("eval", "--generated", tmp_path / "empty", "--reference", corpus / "24k", "--ckpt", ckpt) == EXIT_DATA


def test_inspect(trained, capsys):
    _, ckpt = trained
    capsys.readouterr()
    assert run("inspect", "--checkpoint", ckpt / "srfm.imck") == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert json.loads(lines[0])["kind"] == "srfm"
    n = len(ck.load_checkpoint(ckpt / "srfm.imck").tensors)
    assert lines[-1].startswith(f"tensors={n} ") and len(lines) == n + 2


def test_inspect_corrupt_exits_2(tmp_path, trained):
    _, ckpt = trained
    bad = tmp_path / "bad.imck"
    bad.write_bytes((ckpt / "lm.imck").read_bytes()[:-100])
    assert run("inspect", "--checkpoint", bad) == EXIT_DATA


def test_non_finite_weights_exit_3(tmp_path, trained):
    _, ckpt = trained
    work = tmp_path / "ck"
    shutil.copytree(ckpt, work)
    c = ck.load_checkpoint(work / "srfm.imck")
    tensors = {k: np.full_like(v, np.nan) for k, v in c.tensors.items()}
    ck.save_checkpoint(work / "srfm.imck", tensors, c.metadata)
    assert run("generate", "--caption", "x", "--duration", 1, "--ckpt", work, "--out", tmp_path / "x.wav") == EXIT_NUMERIC


def test_sweep_writes_four_rows(tmp_path, trained):
    corpus, ckpt = trained
    out = tmp_path / "sweep"
    assert run("sweep", "--corpus", corpus, "--ckpt", ckpt, "--out", out, "--n", 2, "--ode-steps", 2) == EXIT_OK
    rows = list(csv.DictReader(open(out / "sweep.csv")))
    assert [float(r["cfg"]) for r in rows] == [3, 5, 7, 10]
    assert all(np.isfinite(float(r["fd"])) and np.isfinite(float(r["kl"])) for r in rows)
