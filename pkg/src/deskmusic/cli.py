"""deskmusic command line.

Exit codes: 0 success, 1 usage, 2 data or prerequisite error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import checkpoint as ck
from . import corpus as cp
from . import evalkit as ek
from . import numcore as nc
from . import pipeline as pl
from . import sequence_lm as lm
from . import srfm
from .audio_io import AudioError, read_wav, write_wav
from .config import ConfigError, RunConfig

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
log = logging.getLogger("deskmusic")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit with 2, which is our data-error code
        raise UsageError(f"{self.prog}: {message}")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="deskmusic", description="Desk-scale text-to-music pipeline.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    c = sub.add_parser("corpus-build", help="synthesize a paired 48/24 kHz corpus")
    c.add_argument("--n", type=int, required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--duration", type=float, default=1.0)

    t = sub.add_parser("train", help="train one module")
    t.add_argument("--module", choices=pl.KINDS, required=True)
    t.add_argument("--stage", type=int, choices=lm.STAGES, default=2)
    t.add_argument("--config")
    t.add_argument("--steps", type=int)
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--seed", type=int)
    t.add_argument("--preset", choices=sorted(pl.PRESETS))
    t.add_argument("--resume", action="store_true")

    g = sub.add_parser("generate", help="text-to-music")
    g.add_argument("--caption", required=True)
    g.add_argument("--duration", type=float, required=True)
    _gen_flags(g)

    k = sub.add_parser("continue", help="extend an audio prompt")
    k.add_argument("--prompt", required=True)
    k.add_argument("--extra-duration", type=float, required=True)
    k.add_argument("--caption", default="")
    _gen_flags(k)

    e = sub.add_parser("eval", help="objective metrics between two WAV directories")
    e.add_argument("--generated", required=True)
    e.add_argument("--reference", required=True)
    e.add_argument("--kit", help="evalkit checkpoint (default: <ckpt>/evalkit.imck)")
    e.add_argument("--ckpt", default="ckpt")
    e.add_argument("--out")
    e.add_argument("--seed", type=int, default=0)

    i = sub.add_parser("inspect", help="print checkpoint metadata and tensor table")
    i.add_argument("--checkpoint", required=True)

    s = sub.add_parser("sweep", help="guidance-scale sweep: generate at each value, then evaluate")
    s.add_argument("--corpus", required=True, help="reference corpus root (captions and 48k masters)")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--cfg", type=float, nargs="+", default=list(srfm.SWEEP_CFG))
    s.add_argument("--target", choices=("srfm", "lm"), default="srfm")
    s.add_argument("--n", type=int, default=4)
    s.add_argument("--duration", type=float, default=1.0)
    s.add_argument("--top-k", type=int, default=350)
    s.add_argument("--ode-steps", type=int, default=10)
    s.add_argument("--kit")
    s.add_argument("--seed", type=int, default=0)
    return p


def _gen_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ckpt", default="ckpt")
    p.add_argument("--cfg-scale", type=float, default=3.0)
    p.add_argument("--top-k", type=int, default=350)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=tuple(pl.OUTPUT_RATE), default="full")
    p.add_argument("--ode-steps", type=int, default=10)
    p.add_argument("--solver", choices=srfm.SOLVERS, default="euler")
    p.add_argument("--flow-cfg", type=float, default=1.0)
    p.add_argument("--out", required=True)


def _options(a: argparse.Namespace) -> pl.GenerateOptions:
    try:
        ode = srfm.OdeParams(steps=a.ode_steps, solver=a.solver, cfg_scale=a.flow_cfg)
        opts = pl.GenerateOptions(a.cfg_scale, a.top_k, a.temperature, a.seed, a.mode, ode)
        opts.gen_params  # validates scale and top_k
    except (srfm.SrfmError, lm.LmError, ValueError) as e:
        raise UsageError(str(e)) from e
    return opts


def _check_duration(seconds: float, what: str) -> None:
    if not 0 <= seconds <= lm.MAX_SECONDS:
        raise UsageError(f"{what} {seconds}s outside [0, {lm.MAX_SECONDS}] (preset maximum is {lm.MAX_SECONDS}s)")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_corpus_build(a: argparse.Namespace) -> int:
    m = cp.build_dataset(a.n, a.out, a.seed, a.duration)
    print(json.dumps({"records": len(m), "manifest": str(Path(a.out) / "manifest.jsonl")}))
    return EXIT_OK


def cmd_train(a: argparse.Namespace) -> int:
    cfg = RunConfig.from_file(a.config).override("run", seed=a.seed, preset=a.preset)
    result = pl.train_module(
        a.module, a.corpus, a.out, cfg, steps=a.steps, stage=a.stage, resume=a.resume,
        on_step=lambda s, v: log.debug("step %d loss %.6g", s, v),
    )
    summary = {"module": a.module, "checkpoint": str(result.checkpoint), "first_step": result.first_step,
               "steps": len(result.losses)}
    if result.losses:
        summary.update(first_loss=result.losses[0], final_loss=result.losses[-1])
    print(json.dumps(summary))
    return EXIT_OK


def cmd_generate(a: argparse.Namespace) -> int:
    _check_duration(a.duration, "duration")
    opts = _options(a)
    gen = pl.Generator(a.ckpt, opts.mode)
    wave = gen.text_to_music(a.caption, a.duration, opts)
    write_wav(a.out, wave, 32)
    print(json.dumps({"out": a.out, "sample_rate": wave.sample_rate, "samples": len(wave)}))
    return EXIT_OK


def cmd_continue(a: argparse.Namespace) -> int:
    _check_duration(a.extra_duration, "extra duration")
    opts = _options(a)
    prompt = read_wav(a.prompt)
    if prompt.duration + a.extra_duration > lm.MAX_SECONDS:
        raise lm.LmError(f"prompt of {prompt.duration:.2f}s plus {a.extra_duration}s exceeds {lm.MAX_SECONDS}s")
    gen = pl.Generator(a.ckpt, opts.mode)
    wave = gen.continuation(prompt, a.extra_duration, opts, a.caption)
    write_wav(a.out, wave, 32)
    print(json.dumps({"out": a.out, "sample_rate": wave.sample_rate, "samples": len(wave)}))
    return EXIT_OK


def _kit(path: str | None, ckpt_dir: str) -> ek.EvalKit:
    p = Path(path) if path else pl.require(ckpt_dir, "evalkit", "evaluation")
    return pl.load_evalkit(p)


def cmd_eval(a: argparse.Namespace) -> int:
    kit = _kit(a.kit, a.ckpt)
    report = ek.evaluate_run(a.generated, a.reference, kit, metadata={"seed": a.seed, "kit": a.kit or a.ckpt})
    text = json.dumps(report, sort_keys=True)
    if a.out:
        Path(a.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_inspect(a: argparse.Namespace) -> int:
    info = ck.inspect_checkpoint(a.checkpoint)
    print(json.dumps(info["metadata"], sort_keys=True))
    for t in info["tensors"]:
        print(f"{t['name']}\t{t['dtype']}\t{tuple(t['shape'])}\toffset={t['offset']}\tbytes={t['nbytes']}")
    print(f"tensors={len(info['tensors'])} payload_bytes={info['payload_bytes']} ok")
    return EXIT_OK


SWEEP_FIELDS = ("cfg", "target", "kl", "fd", "align", "si_snr", "n")


def cmd_sweep(a: argparse.Namespace) -> int:
    _check_duration(a.duration, "duration")
    root = Path(a.corpus)
    manifest = cp.DatasetManifest.read(root / "manifest.jsonl")
    records = manifest.records[: a.n]
    kit = _kit(a.kit, a.ckpt)
    gen = pl.Generator(a.ckpt, "full")
    out = Path(a.out)
    rows = []
    ref_dir = out / "reference"
    ref_dir.mkdir(parents=True, exist_ok=True)
    for rec in records:
        master = cp.load_master(rec, root)
        n = int(round(a.duration * master.sample_rate))
        write_wav(ref_dir / Path(rec.path).name, type(master)(master.samples[:n], master.sample_rate), 32)
    for value in a.cfg:
        lm_scale, flow_scale = (3.0, value) if a.target == "srfm" else (value, 1.0)
        opts = _options(argparse.Namespace(cfg_scale=lm_scale, top_k=a.top_k, temperature=1.0, seed=a.seed,
                                           mode="full", ode_steps=a.ode_steps, solver="euler", flow_cfg=flow_scale))
        run_dir = out / f"cfg_{value:g}"
        run_dir.mkdir(parents=True, exist_ok=True)
        captions = {}
        for rec in records:
            name = Path(rec.path).name
            write_wav(run_dir / name, gen.text_to_music(rec.caption, a.duration, opts), 32)
            captions[name] = rec.caption
        (run_dir / "captions.json").write_text(json.dumps(captions, sort_keys=True), encoding="utf-8")
        rep = ek.evaluate_run(run_dir, ref_dir, kit, metadata={"seed": a.seed, "cfg": value, "target": a.target})
        rows.append({"cfg": value, "target": a.target, **{k: rep[k] for k in ("kl", "fd", "align", "si_snr", "n")}})
        log.info("cfg %g: kl %.4g fd %.4g", value, rep["kl"], rep["fd"])
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    print(json.dumps(rows))
    return EXIT_OK


COMMANDS = {
    "corpus-build": cmd_corpus_build,
    "train": cmd_train,
    "generate": cmd_generate,
    "continue": cmd_continue,
    "eval": cmd_eval,
    "inspect": cmd_inspect,
    "sweep": cmd_sweep,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = _parser().parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.cmd](args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except nc.NonFiniteError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (cp.CorpusError, ck.CheckpointError, pl.PrerequisiteError, ek.EvalError, AudioError, lm.LmError,
            srfm.SrfmError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
