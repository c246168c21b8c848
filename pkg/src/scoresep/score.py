"""Aligned note annotations and frame-aligned binary piano rolls."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Sequence

import numpy as np

N_PITCHES = 128
CSV_HEADER = ("onset_sec", "offset_sec", "midi_pitch", "instrument")

# No pitch representation exists for these.
UNPITCHED = frozenset({"untuned_percussion", "unt_perc", "unpitched_percussion"})


class ScoreError(ValueError):
    pass


class ScoreParseError(ScoreError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnpitchedInstrumentError(ScoreParseError):
    pass


def normalize_instrument(name: str) -> str:
    return "_".join(name.strip().lower().replace("-", " ").split())


@dataclass(frozen=True, order=True)
class NoteEvent:
    onset: float
    offset: float
    pitch: int
    instrument: str = ""

    def __post_init__(self):
        if not (0 <= self.onset < self.offset):
            raise ScoreError(f"need 0 <= onset < offset, got {self.onset}, {self.offset}")
        if not (0 <= self.pitch <= 127):
            raise ScoreError(f"pitch {self.pitch} outside 0-127")


@dataclass
class ScoreTrack:
    instrument: str
    notes: List[NoteEvent] = field(default_factory=list)

    def __post_init__(self):
        for note in self.notes:
            if note.instrument != self.instrument:
                raise ScoreError(
                    f"note for {note.instrument!r} in track {self.instrument!r}"
                )
        self.notes = sorted(self.notes, key=lambda n: (n.onset, n.offset, n.pitch))

    def shifted(self, offset_sec: float) -> "ScoreTrack":
        """Notes moved by ``-offset_sec`` and clipped at time zero."""
        notes = []
        for n in self.notes:
            onset, offset = n.onset - offset_sec, n.offset - offset_sec
            if offset <= 0:
                continue
            notes.append(NoteEvent(max(onset, 0.0), offset, n.pitch, n.instrument))
        return ScoreTrack(self.instrument, notes)


@dataclass(frozen=True)
class PianoRoll:
    data: np.ndarray
    hop_size: int
    sample_rate: int

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[1] != N_PITCHES:
            raise ScoreError(f"piano roll must be frames x 128, got {self.data.shape}")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]


def parse_notes_csv(text) -> List[ScoreTrack]:
    """Parse the canonical ``onset_sec,offset_sec,midi_pitch,instrument`` CSV.

    ``text`` may be a string or a text stream.  Tracks come back in order of
    first appearance.
    """
    if isinstance(text, str):
        text = io.StringIO(text)
    reader = csv.reader(text)
    try:
        header = next(reader)
    except StopIteration:
        raise ScoreParseError("empty file, header required", 1) from None
    if tuple(h.strip() for h in header) != CSV_HEADER:
        raise ScoreParseError(f"expected header {','.join(CSV_HEADER)}", 1)
    grouped: dict = {}
    seen = set()
    for row in reader:
        line = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 4:
            raise ScoreParseError(f"expected 4 fields, got {len(row)}", line)
        try:
            onset, offset = float(row[0]), float(row[1])
            pitch = int(row[2])
        except ValueError as exc:
            raise ScoreParseError(f"non-numeric field ({exc})", line) from None
        instrument = normalize_instrument(row[3])
        if not instrument:
            raise ScoreParseError("empty instrument name", line)
        if instrument in UNPITCHED:
            raise UnpitchedInstrumentError(
                f"instrument {instrument!r} is unpitched and has no piano-roll form", line
            )
        if not (math.isfinite(onset) and math.isfinite(offset)):
            raise ScoreParseError("non-finite time", line)
        if onset < 0:
            raise ScoreParseError(f"negative onset {onset}", line)
        if offset <= onset:
            raise ScoreParseError(f"offset {offset} <= onset {onset}", line)
        if not 0 <= pitch <= 127:
            raise ScoreParseError(f"pitch {pitch} outside 0-127", line)
        note = NoteEvent(onset, offset, pitch, instrument)
        if note in seen:
            continue
        seen.add(note)
        grouped.setdefault(instrument, []).append(note)
    return [ScoreTrack(name, notes) for name, notes in grouped.items()]


def read_notes_csv(path) -> List[ScoreTrack]:
    with open(path, newline="", encoding="utf-8") as fh:
        return parse_notes_csv(fh)


def serialize_notes_csv(tracks: Iterable[ScoreTrack]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for track in tracks:
        for n in track.notes:
            writer.writerow([repr(float(n.onset)), repr(float(n.offset)), n.pitch, n.instrument])
    return buf.getvalue()


def urmp_row_to_note(onset: float, freq: float, duration: float, instrument: str = "") -> NoteEvent:
    if freq <= 0:
        raise ScoreError(f"frequency must be positive, got {freq}")
    if duration <= 0:
        raise ScoreError(f"duration must be positive, got {duration}")
    pitch = int(round(69 + 12 * math.log2(freq / 440.0)))
    return NoteEvent(onset, onset + duration, pitch, normalize_instrument(instrument))


def read_urmp_notes(path, instrument: str) -> ScoreTrack:
    """Read a per-track URMP note file: whitespace/comma separated onset, Hz, duration."""
    notes = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            fields = line.replace(",", " ").split()
            if not fields:
                continue
            try:
                onset, freq, dur = (float(v) for v in fields[:3])
            except ValueError:
                raise ScoreParseError("expected onset, frequency, duration", line_no) from None
            try:
                notes.append(urmp_row_to_note(onset, freq, dur, instrument))
            except ScoreError as exc:
                raise ScoreParseError(str(exc), line_no) from None
    return ScoreTrack(normalize_instrument(instrument), notes)


def rasterize(track: ScoreTrack, n_frames: int, sample_rate: int, hop_size: int) -> PianoRoll:
    """Binary roll where frame ``f`` spans ``[f*hop/sr, (f+1)*hop/sr)``.

    A cell is on when a note of that pitch overlaps the span by any positive
    amount.  Notes past the last frame are clipped.
    """
    if n_frames <= 0:
        raise ScoreError(f"n_frames must be positive, got {n_frames}")
    roll = np.zeros((n_frames, N_PITCHES), dtype=np.uint8)
    edges = np.arange(n_frames + 1) * hop_size / sample_rate
    starts, ends = edges[:-1], edges[1:]
    for note in track.notes:
        # overlap needs start < offset and end > onset
        first = np.searchsorted(ends, note.onset, side="right")
        stop = np.searchsorted(starts, note.offset, side="left")
        if stop > first:
            roll[first:stop, note.pitch] = 1
    return PianoRoll(roll, hop_size, sample_rate)


def slice_roll(roll: PianoRoll, start_frame: int, n_frames: int) -> PianoRoll:
    if start_frame < 0:
        raise ScoreError(f"negative start frame {start_frame}")
    out = np.zeros((n_frames, N_PITCHES), dtype=roll.data.dtype)
    chunk = roll.data[start_frame : start_frame + n_frames]
    out[: len(chunk)] = chunk
    return PianoRoll(out, roll.hop_size, roll.sample_rate)


def roll_to_csv(roll: PianoRoll) -> str:
    return "\n".join(",".join(str(int(v)) for v in row) for row in roll.data) + "\n"


def tracks_by_instrument(tracks: Sequence[ScoreTrack]) -> dict:
    return {t.instrument: t for t in tracks}
