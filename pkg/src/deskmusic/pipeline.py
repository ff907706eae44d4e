"""Training, generation and evaluation wiring over a checkpoint directory.

A checkpoint directory holds one ``<kind>.imck`` per module plus a
``<kind>_loss.csv`` curve. Prerequisites follow the data flow: the LM needs
the semantic codec (for tokens); the flow model needs both codecs (tokens
from the 24 kHz view, latents from the 48 kHz master of the same clip).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint as ck
from . import evalkit as ek
from . import numcore as nc
from . import sequence_lm as lm
from . import srfm
from .acoustic_codec import AcCodecConfig, AcCodecTrainer, AcousticCodec, AcTrainConfig, random_crops
from .audio_io import AudioError, Waveform, resample
from .config import RunConfig
from .corpus import DatasetManifest, load_master, load_view
from .semantic_codec import SemanticCodec, SemCodecConfig, SemCodecTrainer, SemTrainConfig

log = logging.getLogger("deskmusic")

KINDS = ("sem-codec", "ac-codec", "lm", "srfm", "evalkit")
PREREQS = {"sem-codec": (), "ac-codec": (), "lm": ("sem-codec",), "srfm": ("sem-codec", "ac-codec"), "evalkit": ()}
OUTPUT_RATE = {"full": 48000, "no-flow": 24000}


class PrerequisiteError(RuntimeError):
    pass


@dataclass(frozen=True)
class Preset:
    name: str
    lm: lm.LmConfig
    sem: SemCodecConfig = SemCodecConfig()
    ac: AcCodecConfig = AcCodecConfig()
    flow: srfm.FlowConfig = srfm.DESK_FLOW


# a smaller and a larger desk backbone; both accept 480 s
PRESETS = {
    "desk-0.5": Preset("desk-0.5", lm.LmConfig(d_model=96, n_layers=3, n_heads=4, d_ff=384)),
    "desk-1.5": Preset("desk-1.5", lm.DESK_LM),
}


def get_preset(name: str) -> Preset:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r} (known: {', '.join(PRESETS)})")
    return PRESETS[name]


def ckpt_path(ckpt_dir: str | Path, kind: str) -> Path:
    return Path(ckpt_dir) / f"{kind}.imck"


def require(ckpt_dir: str | Path, kind: str, needed_by: str) -> Path:
    path = ckpt_path(ckpt_dir, kind)
    if not path.exists():
        raise PrerequisiteError(f"{needed_by} needs the {kind} checkpoint {path}; run `train --module {kind}` first")
    return path


# ---------------------------------------------------------------------------
# corpus
# ---------------------------------------------------------------------------


@dataclass
class CorpusData:
    manifest: DatasetManifest
    root: Path
    views: list[np.ndarray] = field(default_factory=list)
    masters: list[np.ndarray] = field(default_factory=list)


def load_corpus(root: str | Path, masters: bool = True) -> CorpusData:
    root = Path(root)
    manifest = DatasetManifest.read(root / "manifest.jsonl")
    if not manifest.records:
        raise PrerequisiteError(f"corpus {root} has no records")
    data = CorpusData(manifest, root)
    for rec in manifest.records:
        data.views.append(load_view(rec, root).samples)
        if masters:
            data.masters.append(load_master(rec, root).samples)
    return data


# ---------------------------------------------------------------------------
# module construction and persistence
# ---------------------------------------------------------------------------


def _opt_names(module: nc.nn.Module, params: list[nc.Tensor]) -> list[str]:
    ids = {id(p): n for n, p in module.named_parameters()}
    return [ids[id(p)] for p in params]


def load_sem(ckpt_dir: str | Path) -> tuple[SemanticCodec, ck.Checkpoint]:
    c = ck.load_checkpoint(require(ckpt_dir, "sem-codec", "this command"))
    codec = SemanticCodec(SemCodecConfig.from_dict(c.metadata["config"]["model"]))
    ck.restore_module(c, codec, "sem-codec")
    return codec, c


def load_ac(ckpt_dir: str | Path) -> tuple[AcousticCodec, ck.Checkpoint]:
    c = ck.load_checkpoint(require(ckpt_dir, "ac-codec", "this command"))
    codec = AcousticCodec(AcCodecConfig.from_dict(c.metadata["config"]["model"]))
    ck.restore_module(c, codec, "ac-codec")
    return codec, c


def load_lm(ckpt_dir: str | Path) -> tuple[lm.TokenLM, ck.Checkpoint]:
    c = ck.load_checkpoint(require(ckpt_dir, "lm", "this command"))
    model = lm.TokenLM(lm.LmConfig.from_dict(c.metadata["config"]["model"]))
    ck.restore_module(c, model, "lm")
    return model, c


def load_flow(ckpt_dir: str | Path) -> tuple[srfm.FlowNet, ck.Checkpoint]:
    c = ck.load_checkpoint(require(ckpt_dir, "srfm", "this command"))
    net = srfm.FlowNet(srfm.FlowConfig.from_dict(c.metadata["config"]["model"]))
    ck.restore_module(c, net, "srfm")
    return net, c


class _KitModule(nc.nn.Module):
    def __init__(self, kit: ek.EvalKit):
        self.classifier = kit.classifier
        self.embedder = kit.embedder


def save_evalkit(path: str | Path, kit: ek.EvalKit, seed: int) -> None:
    extra = {}
    if kit.report is not None:
        extra["classifier_report"] = {"train_accuracy": kit.report.train_accuracy,
                                      "heldout_accuracy": kit.report.heldout_accuracy}
    ck.save_module(path, "evalkit", _KitModule(kit), {"seed": seed}, extra=extra)


def load_evalkit(path: str | Path) -> ek.EvalKit:
    c = ck.load_checkpoint(path)
    kit = ek.EvalKit(ek.GenreClassifier(), ek.DualEncoder())
    ck.restore_module(c, _KitModule(kit), "evalkit")
    rep = c.metadata.get("classifier_report")
    if rep:
        kit.report = ek.ClassifierReport(rep["train_accuracy"], rep["heldout_accuracy"], 0, 0)
    return kit


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    kind: str
    losses: list[float]
    first_step: int
    checkpoint: Path


def _token_crops(tokens: list[np.ndarray], latents: list[np.ndarray], n: int, batch: int, rng: np.random.Generator):
    """Aligned crops: token j covers latent frames 2j and 2j + 1."""
    toks = np.empty((batch, n), np.int64)
    lats = np.empty((batch, srfm.UPSAMPLE * n, latents[0].shape[-1]), np.float32)
    for b in range(batch):
        i = int(rng.integers(len(tokens)))
        avail = min(len(tokens[i]), len(latents[i]) // srfm.UPSAMPLE)
        j = int(rng.integers(avail - n + 1))
        toks[b] = tokens[i][j : j + n]
        lats[b] = latents[i][srfm.UPSAMPLE * j : srfm.UPSAMPLE * (j + n)]
    return toks, lats


def train_module(
    kind: str,
    corpus_root: str | Path,
    ckpt_dir: str | Path,
    cfg: RunConfig,
    steps: int | None = None,
    stage: int = 2,
    resume: bool = False,
    on_step: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Train one module, checkpointing every ``checkpoint_every`` steps and at the end."""
    if kind not in KINDS:
        raise ValueError(f"unknown module {kind!r}")
    ckpt_dir = Path(ckpt_dir)
    for dep in PREREQS[kind]:
        require(ckpt_dir, dep, f"training {kind}")
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    seed = int(cfg.get("run", "seed"))
    preset = get_preset(str(cfg.get("run", "preset")))
    sect = cfg.section(kind)
    steps = int(sect["steps"]) if steps is None else steps
    out = ckpt_path(ckpt_dir, kind)
    log.info("train %s: resolved config %s", kind, cfg.dumps())
    rng = np.random.default_rng(seed)

    if kind == "evalkit":
        corpus = load_corpus(corpus_root, masters=False)
        kit = ek.train_evalkit(corpus.manifest, corpus.root, seed=seed, steps=steps)
        save_evalkit(out, kit, seed)
        return TrainResult(kind, [], 0, out)

    prior = ck.load_checkpoint(out) if resume and out.exists() else None
    corpus = load_corpus(corpus_root, masters=kind in ("ac-codec", "srfm"))
    common = dict(lr=float(sect["lr"]), warmup=int(sect["warmup"]), batch=int(sect["batch"]), seed=seed)

    if kind == "sem-codec":
        module = SemanticCodec(preset.sem, seed)
        model_cfg = preset.sem.to_dict()
    elif kind == "ac-codec":
        module = AcousticCodec(preset.ac, seed)
        model_cfg = preset.ac.to_dict()
    elif kind == "lm":
        module = lm.TokenLM(preset.lm, seed)
        model_cfg = preset.lm.to_dict()
    else:
        module = srfm.FlowNet(preset.flow, seed)
        model_cfg = preset.flow.to_dict()
    if prior is not None:
        ck.restore_module(prior, module, kind)
        if prior.metadata.get("config", {}).get("model") != model_cfg:
            model_cfg = prior.metadata["config"]["model"]

    def state_for(params: list[nc.Tensor]) -> nc.OptimState | None:
        return ck.optimizer_state(prior, _opt_names(module, params)) if prior is not None else None

    if kind == "sem-codec":
        trainer = SemCodecTrainer(module, SemTrainConfig(**common), state_for(module.parameters()))
        length = min(24000, min(len(v) for v in corpus.views))

        def one_step() -> float:
            return trainer.step(random_crops(corpus.views, trainer.cfg.batch, rng, length))

    elif kind == "ac-codec":
        trainer = AcCodecTrainer(module, AcTrainConfig(**common), state_for(module.parameters()))

        def one_step() -> float:
            return trainer.step(random_crops(corpus.masters, trainer.cfg.batch, rng, trainer.crop_length))

    elif kind == "lm":
        sem, _ = load_sem(ckpt_dir)
        tokens = [sem.encode_array(v)[0] for v in corpus.views]
        schemas = lm.corpus_schemas(corpus.manifest.records, tokens, stage, module.config.max_text)
        lr = common.pop("lr") * (0.1 if stage == 3 else 1.0)
        trainer = lm.LmTrainer(
            module, lm.LmTrainConfig(stage=stage, lr=lr, drop_prob=float(sect["drop_prob"]), **common),
            state_for(module.parameters()),
        )

        def one_step() -> float:
            pick = rng.choice(len(schemas), size=trainer.cfg.batch, replace=len(schemas) < trainer.cfg.batch)
            return trainer.step([schemas[i] for i in pick])

    else:
        sem, _ = load_sem(ckpt_dir)
        ac, _ = load_ac(ckpt_dir)
        tokens = [sem.encode_array(v)[0] for v in corpus.views]
        latents = [ac.encode_array(m)[0] for m in corpus.masters]
        n_tok = min(lm.TOKEN_RATE, min(min(len(t), len(z) // 2) for t, z in zip(tokens, latents)))
        trainer = srfm.FlowTrainer(
            module, srfm.FlowTrainConfig(drop_prob=float(sect["drop_prob"]), **common), state_for(module.trainable())
        )
        if prior is None:
            trainer.fit_normalization(np.concatenate(latents))

        def one_step() -> float:
            return trainer.step(*_token_crops(tokens, latents, n_tok, trainer.cfg.batch, rng))

    first = trainer.opt.step_count
    every = int(cfg.get("run", "checkpoint_every"))
    curve = ckpt_dir / f"{kind}_loss.csv"
    losses: list[float] = []
    opt_names = _opt_names(module, trainer.opt.params)

    def save() -> None:
        ck.save_module(out, kind, module, {"model": model_cfg, "train": sect, "stage": stage},
                       trainer.opt.step_count, trainer.opt.state, opt_names)

    with open(curve, "a" if resume else "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if not resume or fh.tell() == 0:
            writer.writerow(["step", "loss"])
        for _ in range(steps):
            value = one_step()
            losses.append(value)
            step = trainer.opt.step_count
            writer.writerow([step, f"{value:.6g}"])
            if on_step is not None:
                on_step(step, value)
            if every > 0 and step % every == 0:
                save()
    save()
    return TrainResult(kind, losses, first, out)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


@dataclass
class GenerateOptions:
    cfg_scale: float = 3.0
    top_k: int = 350
    temperature: float = 1.0
    seed: int = 0
    mode: str = "full"
    ode: srfm.OdeParams = srfm.OdeParams()

    def __post_init__(self) -> None:
        if self.mode not in OUTPUT_RATE:
            raise ValueError(f"mode must be one of {tuple(OUTPUT_RATE)}, got {self.mode!r}")

    @property
    def gen_params(self) -> lm.GenParams:
        return lm.GenParams(cfg_scale=self.cfg_scale, top_k=self.top_k, temperature=self.temperature, seed=self.seed)


class Generator:
    """Loaded models for text-to-music and continuation."""

    def __init__(self, ckpt_dir: str | Path, mode: str = "full"):
        self.lm, _ = load_lm(ckpt_dir)
        self.sem, _ = load_sem(ckpt_dir)
        self.flow = self.ac = None
        if mode == "full":
            self.flow, _ = load_flow(ckpt_dir)
            self.ac, _ = load_ac(ckpt_dir)

    def render(self, tokens: np.ndarray, opts: GenerateOptions, n_samples: int) -> Waveform:
        """Tokens to audio at the mode's output rate, trimmed or padded to ``n_samples``."""
        if opts.mode == "no-flow":
            audio = self.sem.decode_array(tokens[None])[0]
        else:
            if self.flow is None:
                raise PrerequisiteError("full mode needs the srfm and ac-codec checkpoints")
            latent = srfm.srfm_sample(self.flow, tokens, opts.ode, seed=opts.seed)
            audio = self.ac.decode_array(latent)[0]
        audio = audio[:n_samples]
        if len(audio) < n_samples:
            audio = np.pad(audio, (0, n_samples - len(audio)))
        return Waveform(audio, OUTPUT_RATE[opts.mode])

    def text_to_music(self, caption: str, duration_s: float, opts: GenerateOptions) -> Waveform:
        seq = lm.generate_t2m(self.lm, caption, duration_s, opts.gen_params)
        return self.render(seq.codes, opts, int(round(duration_s * OUTPUT_RATE[opts.mode])))

    def continuation(self, prompt: Waveform, extra_s: float, opts: GenerateOptions, caption: str = "") -> Waveform:
        if prompt.sample_rate != self.sem.config.sample_rate:
            if prompt.sample_rate != 48000:
                raise AudioError(f"prompt must be 24 or 48 kHz, got {prompt.sample_rate} Hz")
            view = resample(prompt, self.sem.config.sample_rate)
        else:
            view = prompt
        seq = lm.generate_continuation(self.lm, self.sem, view, extra_s, opts.gen_params, caption)
        return self.render(seq.codes, opts, int(round((prompt.duration + extra_s) * OUTPUT_RATE[opts.mode])))


__all__ = [
    "CorpusData",
    "GenerateOptions",
    "Generator",
    "KINDS",
    "PRESETS",
    "PrerequisiteError",
    "TrainResult",
    "load_corpus",
    "load_evalkit",
    "train_module",
]
