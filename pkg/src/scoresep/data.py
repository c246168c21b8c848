"""Toy dataset synthesis, manifests, segment sampling and instrument families.

Dataset layout on disk (also the convention for real data)::

    <root>/manifest.json
    <root>/<song>/mixture.wav
    <root>/<song>/stems/<instrument>.wav
    <root>/<song>/notes.csv
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import scipy.io.wavfile

from . import dsp
from .score import (
    NoteEvent,
    PianoRoll,
    ScoreTrack,
    normalize_instrument,
    rasterize,
    read_notes_csv,
    serialize_notes_csv,
)

MANIFEST_VERSION = 1

FAMILIES = {
    "strings": ("violin", "viola", "cello", "bass"),
    "woodwinds": ("flute", "clarinet", "oboe", "bassoon"),
    "brass": ("horn", "trombone", "tuba", "trumpet"),
    "percussion": ("timpani", "harp", "untuned_percussion"),
}
_FAMILY_OF = {inst: fam for fam, members in FAMILIES.items() for inst in members}
ALIASES = {"double_bass": "bass", "contrabass": "bass", "french_horn": "horn"}


class DataError(ValueError):
    pass


def family_of(instrument: str) -> str:
    name = normalize_instrument(instrument)
    name = ALIASES.get(name, name)
    try:
        return _FAMILY_OF[name]
    except KeyError:
        raise DataError(f"instrument {instrument!r} belongs to no known family") from None


def family_members(family: str) -> List[str]:
    try:
        return list(FAMILIES[family])
    except KeyError:
        raise DataError(f"unknown family {family!r}; expected one of {sorted(FAMILIES)}") from None


# ---------------------------------------------------------------------------
# Toy synthesis
# ---------------------------------------------------------------------------


@dataclass
class ToyInstrument:
    name: str
    pitch_range: tuple
    harmonic_amplitudes: tuple
    attack: float = 0.02
    decay: float = 0.08
    sustain: float = 0.7
    release: float = 0.05
    note_rate: float = 2.0

    def __post_init__(self):
        low, high = self.pitch_range
        if not 0 <= low <= high <= 127:
            raise DataError(f"bad pitch range {self.pitch_range} for {self.name}")
        amps = self.harmonic_amplitudes
        if not amps or amps[0] <= 0 or any(a < 0 for a in amps):
            raise DataError("harmonic gains must be >= 0 with a positive fundamental")


DEFAULT_INSTRUMENTS = (
    ToyInstrument("toy_low", (36, 55), (1.0, 0.55, 0.35, 0.25, 0.15, 0.1), 0.03, 0.1, 0.6, 0.06, 1.5),
    ToyInstrument("toy_mid", (55, 74), (1.0, 0.1, 0.5, 0.05, 0.3, 0.02, 0.15), 0.05, 0.1, 0.8, 0.05, 2.0),
    ToyInstrument("toy_high", (74, 93), (1.0, 0.35, 0.12), 0.01, 0.06, 0.5, 0.04, 2.5),
)

OVERLAP_INSTRUMENTS = (
    ToyInstrument("toy_low", (48, 72), (1.0, 0.55, 0.35, 0.25, 0.15, 0.1), 0.03, 0.1, 0.6, 0.06, 1.5),
    ToyInstrument("toy_mid", (55, 79), (1.0, 0.1, 0.5, 0.05, 0.3, 0.02, 0.15), 0.05, 0.1, 0.8, 0.05, 2.0),
    ToyInstrument("toy_high", (60, 84), (1.0, 0.35, 0.12), 0.01, 0.06, 0.5, 0.04, 2.5),
)

PROFILES = {"default": DEFAULT_INSTRUMENTS, "overlap": OVERLAP_INSTRUMENTS}


@dataclass
class ToySpec:
    n_songs: int = 4
    duration_sec: float = 30.0
    sample_rate: int = 44100
    instruments: Sequence[ToyInstrument] = DEFAULT_INSTRUMENTS
    seed: int = 0

    def __post_init__(self):
        if self.duration_sec < 12:
            raise DataError("toy songs must last at least 12 s")
        if len(self.instruments) < 2:
            raise DataError("at least two toy instruments required")
        if self.n_songs < 1:
            raise DataError("need at least one song")


def midi_to_hz(pitch) -> float:
    return 440.0 * 2.0 ** ((pitch - 69) / 12.0)


def _note_sequence(inst: ToyInstrument, duration: float, rng) -> List[NoteEvent]:
    notes = []
    t = rng.exponential(1.0 / inst.note_rate)
    low, high = inst.pitch_range
    pitch = int(rng.integers(low, high + 1))
    while True:
        ioi = 0.15 + rng.exponential(1.0 / inst.note_rate)
        length = ioi * rng.uniform(0.55, 0.95)
        if t + length > duration - 0.05:
            break
        notes.append(NoteEvent(round(t, 6), round(t + length, 6), pitch, inst.name))
        t += ioi
        step = int(rng.integers(-4, 5))
        pitch = min(max(pitch + step, low), high)
    return notes


def _envelope(n, sr, inst: ToyInstrument):
    t = np.arange(n) / sr
    dur = n / sr
    a = min(inst.attack, dur / 3)
    r = min(inst.release, dur / 3)
    d = min(inst.decay, max(dur - a - r, 0.0))
    env = np.full(n, inst.sustain)
    env = np.where(t < a, t / a, env)
    in_decay = (t >= a) & (t < a + d)
    if d > 0:
        env = np.where(in_decay, 1.0 - (1.0 - inst.sustain) * (t - a) / d, env)
    tail = t > dur - r
    env = np.where(tail, env * np.clip((dur - t) / r, 0.0, 1.0), env)
    return env


def render_notes(notes: Sequence[NoteEvent], inst: ToyInstrument, n_samples, sr, rng) -> np.ndarray:
    out = np.zeros(n_samples)
    for note in notes:
        start = int(round(note.onset * sr))
        stop = min(int(round(note.offset * sr)), n_samples)
        if stop <= start:
            continue
        n = stop - start
        t = np.arange(n) / sr
        f0 = midi_to_hz(note.pitch)
        velocity = rng.uniform(0.5, 1.0)
        tone = np.zeros(n)
        for k, amp in enumerate(inst.harmonic_amplitudes, 1):
            if amp == 0 or k * f0 >= 0.45 * sr:
                continue
            tone += amp * np.sin(2 * np.pi * k * f0 * t + rng.uniform(0, 2 * np.pi))
        out[start:stop] += velocity * _envelope(n, sr, inst) * tone
    return out


@dataclass
class SongEntry:
    song_id: str
    mixture: str
    stems: Dict[str, str]
    notes: Optional[str]
    duration: float
    sample_rate: int
    instruments: List[str] = field(default_factory=list)

    def to_dict(self, root: Path) -> dict:
        rel = lambda p: os.path.relpath(p, root) if p is not None else None  # noqa: E731
        d = asdict(self)
        d["mixture"] = rel(self.mixture)
        d["stems"] = {k: rel(v) for k, v in self.stems.items()}
        d["notes"] = rel(self.notes)
        return d

    @classmethod
    def from_dict(cls, d: dict, root: Path) -> "SongEntry":
        absp = lambda p: str(root / p) if p is not None else None  # noqa: E731
        return cls(
            d["song_id"],
            absp(d["mixture"]),
            {k: absp(v) for k, v in d["stems"].items()},
            absp(d.get("notes")),
            float(d["duration"]),
            int(d["sample_rate"]),
            list(d.get("instruments") or d["stems"].keys()),
        )


def synthesize_toy(spec: ToySpec, out_dir) -> List[SongEntry]:
    """Render ``spec.n_songs`` songs plus ``manifest.json`` into ``out_dir``.

    Output is a pure function of ``spec``: each song draws from its own child
    of ``SeedSequence(spec.seed)``.
    """
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {root}: {exc}") from exc
    sr = spec.sample_rate
    n_samples = int(round(spec.duration_sec * sr))
    children = np.random.SeedSequence(spec.seed).spawn(spec.n_songs)
    entries = []
    for k, child in enumerate(children):
        rng = np.random.default_rng(child)
        song_id = f"song{k:03d}"
        song_dir = root / song_id
        (song_dir / "stems").mkdir(parents=True, exist_ok=True)
        tracks, stems = [], {}
        for inst in spec.instruments:
            notes = _note_sequence(inst, spec.duration_sec, rng)
            tracks.append(ScoreTrack(inst.name, notes))
            stems[inst.name] = render_notes(notes, inst, n_samples, sr, rng)
        peak = np.max(np.abs(sum(stems.values())))
        gain = 0.9 / peak if peak > 0 else 1.0
        stems32 = {name: (s * gain).astype(np.float32) for name, s in stems.items()}
        mix = sum(s.astype(np.float64) for s in stems32.values()).astype(np.float32)
        stem_paths = {}
        for name, s in stems32.items():
            path = song_dir / "stems" / f"{name}.wav"
            scipy.io.wavfile.write(path, sr, s)
            stem_paths[name] = str(path)
        mix_path = song_dir / "mixture.wav"
        scipy.io.wavfile.write(mix_path, sr, mix)
        notes_path = song_dir / "notes.csv"
        notes_path.write_text(serialize_notes_csv(tracks), encoding="utf-8")
        entries.append(
            SongEntry(song_id, str(mix_path), stem_paths, str(notes_path),
                      n_samples / sr, sr, [i.name for i in spec.instruments])
        )
    write_manifest(entries, root / "manifest.json")
    return entries


def write_manifest(entries: Sequence[SongEntry], path) -> None:
    path = Path(path)
    root = path.parent
    instruments = sorted({i for e in entries for i in e.instruments})
    doc = {
        "version": MANIFEST_VERSION,
        "instruments": instruments,
        "songs": [e.to_dict(root) for e in entries],
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_manifest(path) -> List[SongEntry]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    if doc.get("version") != MANIFEST_VERSION:
        raise DataError(f"unsupported manifest version {doc.get('version')!r}")
    root = path.parent
    entries = [SongEntry.from_dict(d, root) for d in doc["songs"]]
    for e in entries:
        for p in [e.mixture, *e.stems.values()]:
            if not os.path.exists(p):
                raise DataError(f"manifest references missing file {p}")
    return entries


def manifest_instruments(entries: Sequence[SongEntry]) -> List[str]:
    seen = []
    for e in entries:
        for i in e.instruments:
            if i not in seen:
                seen.append(i)
    return seen


# ---------------------------------------------------------------------------
# Segment sampling
# ---------------------------------------------------------------------------


def _read(path) -> np.ndarray:
    rate, data = scipy.io.wavfile.read(path, mmap=True)
    if data.ndim == 2:
        data = data.mean(axis=1)
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0
    return data


@dataclass
class Segment:
    mix: dsp.AudioClip
    stems: Dict[str, dsp.AudioClip]
    rolls: Dict[str, PianoRoll]
    start: int
    song_id: str


class SongCache:
    """Memory-mapped audio and parsed scores, keyed by path."""

    def __init__(self):
        self._audio = {}
        self._scores = {}

    def audio(self, path) -> np.ndarray:
        if path not in self._audio:
            self._audio[path] = _read(path)
        return self._audio[path]

    def score(self, path) -> Dict[str, ScoreTrack]:
        if path not in self._scores:
            self._scores[path] = {t.instrument: t for t in read_notes_csv(path)}
        return self._scores[path]


_DEFAULT_CACHE = SongCache()


def sample_segment(
    entry: SongEntry,
    segment_sec: float = 6.0,
    rng=None,
    instruments: Optional[Sequence[str]] = None,
    window_size: int = 4096,
    hop_size: int = 1024,
    with_score: bool = True,
    cache: Optional[SongCache] = None,
    start: Optional[int] = None,
) -> Segment:
    """Uniformly placed, sample-exact segment with rolls rasterised at STFT frame rate.

    Only stems of ``instruments`` are read; instruments missing from the song
    get silent stems and empty rolls.
    """
    cache = cache or _DEFAULT_CACHE
    rng = rng if rng is not None else np.random.default_rng()
    sr = entry.sample_rate
    seg_len = int(round(segment_sec * sr))
    mix_full = cache.audio(entry.mixture)
    if len(mix_full) < seg_len:
        raise DataError(f"song {entry.song_id} shorter than {segment_sec} s segment")
    if start is None:
        start = int(rng.integers(0, len(mix_full) - seg_len + 1))
    instruments = list(instruments) if instruments is not None else list(entry.instruments)
    mix = dsp.AudioClip(np.asarray(mix_full[start : start + seg_len], dtype=np.float64), sr)
    stems = {}
    for name in instruments:
        if name in entry.stems:
            data = cache.audio(entry.stems[name])[start : start + seg_len]
            stems[name] = dsp.AudioClip(np.asarray(data, dtype=np.float64), sr)
        else:
            stems[name] = dsp.AudioClip(np.zeros(seg_len), sr)
    rolls = {}
    if with_score:
        if entry.notes is None:
            raise DataError(f"song {entry.song_id} has no note CSV")
        tracks = cache.score(entry.notes)
        frames = dsp.n_frames(seg_len, hop_size)
        offset = start / sr
        for name in instruments:
            track = tracks.get(name, ScoreTrack(name, []))
            rolls[name] = rasterize(track.shifted(offset), frames, sr, hop_size)
    return Segment(mix, stems, rolls, start, entry.song_id)
