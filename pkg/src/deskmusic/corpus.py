"""Procedural synthetic music corpus with genre, tempo and structure metadata.

All pitched material sits on a 75 Hz harmonic lattice and every onset lands
on the 75 Hz frame grid, so a sustained sound repeats exactly once per
320-sample frame at 24 kHz. That keeps the corpus learnable by a single
codebook tokenizer at desk scale.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .audio_io import Waveform, read_wav, resample, segment, write_wav

MASTER_RATE = 48000
VIEW_RATE = 24000
LATTICE_HZ = 75.0
GRID = MASTER_RATE // 75  # master samples per 75 Hz frame
PULSE_GRID = GRID // 2  # off-beat hits land on 150 Hz acoustic-codec frames
SECTIONS = ("intro", "verse", "chorus", "outro")
PITCH_CLASSES = ("C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B")
SEGMENT_SECONDS = 30.0

GENRES = ("ambient", "classical", "electronic", "folk", "hiphop", "jazz", "metal", "pop")


class CorpusError(RuntimeError):
    pass


@dataclass(frozen=True)
class Recipe:
    partials: tuple[float, ...]
    octave: int
    bpm_range: tuple[int, int]
    minor: bool
    sevenths: bool
    drums: float
    bass: float
    instrument: str


# partial amplitudes give each genre a distinct spectral envelope
RECIPES: dict[str, Recipe] = {
    "ambient": Recipe((1.0, 0.15, 0.05), 0, (60, 85), False, True, 0.4, 0.3, "soft pads"),
    "classical": Recipe((1.0, 0.5, 0.3, 0.2, 0.1), 0, (60, 110), False, False, 0.4, 0.4, "strings"),
    "electronic": Recipe(tuple(1.0 / k for k in range(1, 13)), 1, (120, 140), True, False, 0.5, 0.8, "synth leads"),
    "folk": Recipe((1.0, 0.6, 0.1, 0.3), 0, (80, 120), False, False, 0.4, 0.3, "acoustic guitar"),
    "hiphop": Recipe((1.0, 0.3, 0.2), -1, (80, 100), True, True, 0.8, 1.0, "deep bass"),
    "jazz": Recipe((1.0, 0.4, 0.25, 0.1, 0.05), 0, (70, 140), False, True, 0.3, 0.6, "piano"),
    "metal": Recipe(tuple((1.0 / k if k % 2 else 0.0) for k in range(1, 16)), 0, (140, 180), True, False, 0.7, 0.9, "distorted guitars"),
    "pop": Recipe((1.0, 0.5, 0.35, 0.2), 1, (100, 130), False, False, 0.5, 0.5, "bright keys"),
}

# scale-degree roots of the chord progression for each section
PROGRESSIONS = {
    "intro": (0, 3),
    "verse": (0, 5, 3, 4),
    "chorus": (3, 4, 0, 0),
    "outro": (3, 0),
}
MAJOR = (0, 2, 4, 5, 7, 9, 11)
MINOR = (0, 2, 3, 5, 7, 8, 10)


@dataclass(frozen=True)
class ClipSpec:
    genre: str
    bpm: int
    key: int
    structure: tuple[str, ...]
    duration_s: float
    seed: int

    def __post_init__(self) -> None:
        if self.genre not in GENRES:
            raise CorpusError(f"unknown genre {self.genre!r}; expected one of {GENRES}")
        if not 60 <= self.bpm <= 180:
            raise CorpusError(f"bpm must be in [60, 180], got {self.bpm}")
        if not 0 <= self.key < 12:
            raise CorpusError(f"key must be a pitch class 0..11, got {self.key}")
        if not 1 <= self.duration_s <= 480:
            raise CorpusError(f"duration must be in [1, 480] s, got {self.duration_s}")
        if not self.structure or any(s not in SECTIONS for s in self.structure):
            raise CorpusError(f"structure must be a non-empty sequence from {SECTIONS}")
        object.__setattr__(self, "structure", tuple(self.structure))


@dataclass
class ManifestRecord:
    path: str
    caption: str
    genre: str
    bpm: int
    structure: list[str]
    duration: float
    seed: int


@dataclass
class DatasetManifest:
    records: list[ManifestRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def write(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise CorpusError(f"manifest not found: {path}")
        recs = [ManifestRecord(**json.loads(line)) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
        return cls(recs)


def view_path(master_path: str | Path) -> Path:
    """Location of the 24 kHz view paired with a 48 kHz master."""
    p = Path(master_path)
    return p.parent.parent / "24k" / p.name


def load_master(record: ManifestRecord, root: str | Path) -> Waveform:
    return read_wav(Path(root) / record.path)


def load_view(record: ManifestRecord, root: str | Path) -> Waveform:
    return read_wav(view_path(Path(root) / record.path))


def lattice_freq(midi: float) -> float:
    """Nearest 75 Hz lattice frequency to an equal-tempered pitch (at least one lattice step)."""
    hz = 440.0 * 2.0 ** ((midi - 69) / 12.0)
    return LATTICE_HZ * max(1, int(round(hz / LATTICE_HZ)))


def _section_bounds(n_samples: int, n_sections: int) -> list[tuple[int, int]]:
    frames = n_samples // GRID
    edges = [round(i * frames / n_sections) * GRID for i in range(n_sections + 1)]
    edges[-1] = n_samples
    return list(zip(edges[:-1], edges[1:]))


def beat_samples(bpm: float) -> int:
    """Beat length in master samples, rounded to whole lattice periods (tempo error < 2.1%)."""
    return int(round(60.0 / bpm * LATTICE_HZ)) * GRID


def _snap(seconds: float, grid: int = GRID) -> int:
    return int(round(seconds * MASTER_RATE / grid)) * grid


def _tone(freq: float, partials: Sequence[float], t: np.ndarray) -> np.ndarray:
    out = np.zeros_like(t)
    for k, amp in enumerate(partials, start=1):
        f = freq * k
        if amp == 0.0 or f >= 10000:
            continue
        out += amp * np.sin(2 * np.pi * f * t + 0.3 * k)
    return out


def _ramp(n: int) -> np.ndarray:
    """Gate that rises and falls over one frame at each end."""
    g = np.ones(n)
    r = min(GRID, n // 2)
    if r:
        edge = 0.5 - 0.5 * np.cos(np.pi * np.arange(r) / r)
        g[:r] = edge
        g[n - r :] = edge[::-1]
    return g


def _drum(kind: str, tau: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Percussive hit: envelope on time since onset ``tau``, oscillators on the clip clock ``t``.

    Taking oscillator phase from the clip clock keeps every hit in the same
    phase relation to the lattice tones, so the pulse is exactly periodic.
    """
    if kind == "kick":
        return np.exp(-tau / 0.05) * (np.sin(2 * np.pi * 75 * t) + 0.5 * np.sin(2 * np.pi * 150 * t))
    if kind == "snare":
        return np.exp(-tau / 0.03) * sum(np.sin(2 * np.pi * 75 * h * t + h) for h in (3, 5, 7, 9)) / 3
    return np.exp(-tau / 0.01) * sum(np.sin(2 * np.pi * 75 * h * t + h) for h in (97, 113, 127)) / 3


def _note_gate(a: int, b: int, n: int) -> tuple[slice, np.ndarray]:
    """Equal-power gate for a note held over [a, b).

    The note fades in over the frame starting at ``a`` and out over the frame
    starting at ``b``, so a note leaving and one entering at the same boundary
    keep the summed energy level.
    """
    stop = min(n, b + GRID)
    g = np.ones(stop - a)
    rise = min(GRID, len(g))
    g[:rise] = np.sin(0.5 * np.pi * (np.arange(rise) + 0.5) / GRID)
    fall = stop - b if stop > b else min(GRID, len(g))
    g[len(g) - fall :] *= np.cos(0.5 * np.pi * (np.arange(fall) + 0.5) / GRID)
    return slice(a, stop), g


def synthesize_clip(spec: ClipSpec) -> Waveform:
    recipe = RECIPES[spec.genre]
    n = int(round(spec.duration_s * MASTER_RATE))
    t = np.arange(n) / MASTER_RATE
    out = np.zeros(n)
    scale = MINOR if recipe.minor else MAJOR
    root_midi = 60 + spec.key + 12 * recipe.octave
    # the beat is a whole number of lattice periods, so the pulse is exactly periodic
    beat = beat_samples(spec.bpm)
    bar = 4 * beat
    # (freq, partials, amplitude) -> held intervals; a note shared by consecutive chords is held through
    notes: dict[tuple[float, tuple[float, ...], float], list[list[int]]] = {}

    def hold(freq: float, partials: tuple[float, ...], amp: float, a: int, b: int) -> None:
        spans = notes.setdefault((freq, partials, amp), [])
        if spans and spans[-1][1] == a:
            spans[-1][1] = b
        else:
            spans.append([a, b])

    for section, (s0, s1) in zip(spec.structure, _section_bounds(n, len(spec.structure))):
        prog = PROGRESSIONS[section]
        level = {"intro": 0.6, "verse": 0.8, "chorus": 1.0, "outro": 0.7}[section]
        chord_start = s0
        i = 0
        while chord_start < s1:
            chord_end = min(s1, max(chord_start + GRID, chord_start + bar))
            degree = prog[i % len(prog)]
            tones = [degree, degree + 2, degree + 4] + ([degree + 6] if recipe.sevenths else [])
            for d in tones:
                midi = root_midi + scale[d % 7] + 12 * (d // 7)
                hold(lattice_freq(midi), recipe.partials, level * 0.3, chord_start, chord_end)
                if section == "chorus":
                    hold(lattice_freq(midi + 12), recipe.partials[:2], 0.1, chord_start, chord_end)
            if recipe.bass > 0 and section != "intro":
                bass_midi = root_midi - 24 + scale[degree % 7]
                hold(lattice_freq(bass_midi), (1.0, 0.3), recipe.bass * 0.35, chord_start, chord_end)
            chord_start = chord_end
            i += 1
        k = 0
        while True:
            onset = s0 + (k // 2) * beat + (k % 2) * _snap(beat / 2 / MASTER_RATE, PULSE_GRID)
            if onset >= s1:
                break
            # kick on every beat keeps the pulse period at one beat
            kind = "kick" if k % 2 == 0 else ("snare" if recipe.drums >= 0.7 else "hat")
            seg = slice(onset, min(s1, onset + _snap(0.25)))
            out[seg] += level * recipe.drums * 1.2 * _drum(kind, t[seg] - t[onset], t[seg]) * _ramp(seg.stop - seg.start)
            k += 1
    for (freq, partials, amp), spans in notes.items():
        for a, b in spans:
            span, gate = _note_gate(a, b, n)
            out[span] += amp * gate * _tone(freq, partials, t[span])
    peak = float(np.max(np.abs(out)))
    if peak > 0:
        out *= 0.8 / peak
    return Waveform(out.astype(np.float32), MASTER_RATE)


def tempo_word(bpm: int) -> str:
    if bpm < 90:
        return "slow"
    if bpm <= 130:
        return "medium"
    return "fast"


TEMPLATES = (
    "A {tempo} {genre} track in {key} featuring {instrument}, structured as {structure}.",
    "{Genre} music at a {tempo} tempo of {bpm} BPM with {instrument}; sections: {structure}.",
    "Instrumental {genre} piece, {tempo} and in {key}, moving through {structure}.",
    "{Tempo} {genre} tune built on {instrument}, arranged {structure}.",
    "A {tempo} {genre} groove in {key} ({structure}).",
    "{Genre} composition with {instrument}, {tempo} pace around {bpm} BPM, form: {structure}.",
)


def caption_from_spec(spec: ClipSpec) -> str:
    rng = np.random.default_rng([spec.seed, 17])
    template = TEMPLATES[int(rng.integers(len(TEMPLATES)))]
    tempo = tempo_word(spec.bpm)
    key = PITCH_CLASSES[spec.key] + (" minor" if RECIPES[spec.genre].minor else " major")
    return template.format(
        tempo=tempo,
        Tempo=tempo.capitalize(),
        genre=spec.genre,
        Genre=spec.genre.capitalize(),
        bpm=spec.bpm,
        key=key,
        instrument=RECIPES[spec.genre].instrument,
        structure=" - ".join(spec.structure),
    )


def template_index(caption: str) -> int:
    """Which template produced ``caption`` (by its fixed wording)."""
    markers = ("featuring", "BPM with", "moving through", "arranged", "groove", "form:")
    for i, m in enumerate(markers):
        if m in caption:
            return i
    raise CorpusError(f"caption not produced by a known template: {caption!r}")


def allocate_genres(n: int, weights: Sequence[float] | None, rng: np.random.Generator) -> list[str]:
    """Stratified allocation: counts follow ``weights`` by largest remainder, order shuffled."""
    w = np.ones(len(GENRES)) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (len(GENRES),) or np.any(w < 0) or w.sum() <= 0:
        raise CorpusError(f"genre weights must be {len(GENRES)} non-negative values with positive sum")
    quota = w / w.sum() * n
    counts = np.floor(quota).astype(int)
    for i in np.argsort(-(quota - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    genres = [g for g, c in zip(GENRES, counts) for _ in range(c)]
    rng.shuffle(genres)
    return genres


def sample_specs(
    n: int,
    seed: int,
    duration_s: float | Sequence[float] = 30.0,
    genre_weights: Sequence[float] | None = None,
) -> list[ClipSpec]:
    rng = np.random.default_rng(seed)
    durations = [float(duration_s)] * n if np.isscalar(duration_s) else [float(d) for d in duration_s]
    if len(durations) != n:
        raise CorpusError(f"got {len(durations)} durations for {n} clips")
    specs = []
    for i, genre in enumerate(allocate_genres(n, genre_weights, rng)):
        lo, hi = RECIPES[genre].bpm_range
        mask = rng.random(len(SECTIONS)) < 0.6
        if not mask.any():
            mask[rng.integers(len(SECTIONS))] = True
        structure = tuple(s for s, m in zip(SECTIONS, mask) if m)
        specs.append(
            ClipSpec(
                genre=genre,
                bpm=int(rng.integers(lo, hi + 1)),
                key=int(rng.integers(12)),
                structure=structure,
                duration_s=durations[i],
                seed=int(rng.integers(2**31)),
            )
        )
    return specs


def build_dataset(
    n_clips: int,
    out_dir: str | Path,
    seed: int,
    duration_s: float | Sequence[float] = 30.0,
    genre_weights: Sequence[float] | None = None,
) -> DatasetManifest:
    """Synthesize clips, write 48 kHz masters, 24 kHz views and ``manifest.jsonl``.

    Clips longer than 30 s are split into 30 s segments, one record each.
    """
    out = Path(out_dir)
    try:
        (out / "48k").mkdir(parents=True, exist_ok=True)
        (out / "24k").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CorpusError(f"cannot create output directory {out}: {e}") from e
    manifest = DatasetManifest()
    for i, spec in enumerate(sample_specs(n_clips, seed, duration_s, genre_weights)):
        master = synthesize_clip(spec)
        pieces = segment(master, SEGMENT_SECONDS) if spec.duration_s > SEGMENT_SECONDS else [master]
        caption = caption_from_spec(spec)
        for j, piece in enumerate(pieces):
            name = f"clip_{i:05d}.wav" if len(pieces) == 1 else f"clip_{i:05d}_s{j:02d}.wav"
            rel = Path("48k") / name
            try:
                write_wav(out / rel, piece, 32)
                write_wav(view_path(out / rel), resample(piece, VIEW_RATE), 32)
            except OSError as e:
                raise CorpusError(f"cannot write {out / rel}: {e}") from e
            manifest.records.append(
                ManifestRecord(
                    path=rel.as_posix(),
                    caption=caption,
                    genre=spec.genre,
                    bpm=spec.bpm,
                    structure=list(spec.structure),
                    duration=piece.duration,
                    seed=spec.seed,
                )
            )
    try:
        manifest.write(out / "manifest.jsonl")
    except OSError as e:
        raise CorpusError(f"cannot write {out / 'manifest.jsonl'}: {e}") from e
    return manifest
