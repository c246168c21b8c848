"""Frame-wise SDR evaluation with silence zeroing and median-of-medians aggregation.

Protocol: references are first cleaned by zeroing every 1-s window whose
samples all lie below 0.01 in magnitude; SDR is then computed per
non-overlapping 1-s frame, frames whose reference is exactly zero are
excluded, the per-song value is the median over frames, the per-instrument
value is the median over songs and the overall score is the mean over
instruments.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import dsp

SDR_CAP_DB = 120.0


class EvalError(ValueError):
    pass


def zero_silent_windows(clip: dsp.AudioClip, threshold: float = 0.01, window_sec: float = 1.0) -> dsp.AudioClip:
    """Set every window whose max |sample| is below ``threshold`` to exact zeros."""
    x = np.array(clip.samples, dtype=np.float64)
    window_len = max(1, int(round(window_sec * clip.sample_rate)))
    silent = dsp.silent_windows(x, window_len, threshold) if len(x) else []
    for k, flag in enumerate(silent):
        if flag:
            x[k * window_len : (k + 1) * window_len] = 0.0
    return dsp.AudioClip(x, clip.sample_rate)


def frame_sdr(ref, est, frame_sec: float = 1.0, sample_rate: Optional[int] = None) -> List[Tuple[int, Optional[float]]]:
    """``[(frame_index, sdr_db or None)]``; ``None`` marks an excluded all-zero frame.

    Distortion energy is floored at ``1e-12`` of the reference energy, which
    caps a perfect frame at +120 dB.
    """
    if isinstance(ref, dsp.AudioClip):
        sample_rate = ref.sample_rate
        ref = ref.samples
    if isinstance(est, dsp.AudioClip):
        est = est.samples
    if sample_rate is None:
        raise EvalError("sample rate required for raw arrays")
    ref = np.asarray(ref, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    if ref.shape != est.shape:
        raise EvalError(f"length mismatch: reference {ref.shape} vs estimate {est.shape}")
    frame_len = max(1, int(round(frame_sec * sample_rate)))
    out = []
    for k in range(-(-len(ref) // frame_len)):
        r = ref[k * frame_len : (k + 1) * frame_len]
        e = est[k * frame_len : (k + 1) * frame_len]
        if not np.any(r):
            out.append((k, None))
            continue
        target = float(r @ r)
        err = float((r - e) @ (r - e))
        err = max(err, 1e-12 * target)
        out.append((k, 10.0 * math.log10(target / err)))
    return out


@dataclass
class SdrReport:
    frames: Dict[str, Dict[str, List[Optional[float]]]]
    song_medians: Dict[str, Dict[str, float]]
    instrument_medians: Dict[str, float]
    overall_mean: float
    protocol: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        songs = []
        for song_id in sorted(self.frames):
            insts = []
            for name in sorted(self.frames[song_id]):
                insts.append({
                    "name": name,
                    "frames": self.frames[song_id][name],
                    "median": self.song_medians.get(song_id, {}).get(name),
                })
            songs.append({"id": song_id, "instruments": insts})
        return {
            "protocol": self.protocol,
            "songs": songs,
            "instruments": [{"name": k, "median": v} for k, v in sorted(self.instrument_medians.items())],
            "overall_mean": self.overall_mean,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "SdrReport":
        frames, medians = {}, {}
        for song in doc["songs"]:
            frames[song["id"]] = {i["name"]: i["frames"] for i in song["instruments"]}
            medians[song["id"]] = {
                i["name"]: i["median"] for i in song["instruments"] if i["median"] is not None
            }
        return cls(
            frames, medians, {i["name"]: i["median"] for i in doc["instruments"]},
            doc["overall_mean"], doc.get("protocol", {}),
        )

    def self_consistent(self, tol: float = 1e-9) -> bool:
        again = aggregate(self.frames, self.protocol)
        if set(again.instrument_medians) != set(self.instrument_medians):
            return False
        for k, v in again.instrument_medians.items():
            if abs(v - self.instrument_medians[k]) > tol:
                return False
        for song, vals in again.song_medians.items():
            for k, v in vals.items():
                if abs(v - self.song_medians[song][k]) > tol:
                    return False
        return abs(again.overall_mean - self.overall_mean) <= tol


def aggregate(frames: Mapping[str, Mapping[str, Sequence]], protocol: Optional[dict] = None) -> SdrReport:
    """Median over frames per song, median over songs per instrument, mean over instruments.

    ``frames[song][instrument]`` is a list of SDR values with ``None`` for
    excluded frames (``(index, value)`` pairs are accepted too).
    """
    clean: Dict[str, Dict[str, List[Optional[float]]]] = {}
    song_medians: Dict[str, Dict[str, float]] = {}
    per_inst: Dict[str, List[float]] = {}
    for song, insts in frames.items():
        clean[song] = {}
        for name, values in insts.items():
            vals = [v[1] if isinstance(v, (tuple, list)) else v for v in values]
            clean[song][name] = vals
            valid = [v for v in vals if v is not None]
            if not valid:
                continue
            med = float(np.median(valid))
            song_medians.setdefault(song, {})[name] = med
            per_inst.setdefault(name, []).append(med)
    if not per_inst:
        raise EvalError("no valid (non-silent) frames anywhere")
    inst_medians = {name: float(np.median(v)) for name, v in per_inst.items()}
    overall = float(np.mean([inst_medians[k] for k in sorted(inst_medians)]))
    return SdrReport(clean, song_medians, inst_medians, overall, dict(protocol or {}))


def evaluate_clips(
    estimates: Mapping[str, Mapping[str, dsp.AudioClip]],
    references: Mapping[str, Mapping[str, dsp.AudioClip]],
    silence_threshold: float = 0.01,
    frame_sec: float = 1.0,
) -> SdrReport:
    frames = {}
    for song, refs in references.items():
        if song not in estimates:
            raise EvalError(f"no estimates for song {song!r}")
        frames[song] = {}
        for name, ref in refs.items():
            est = estimates[song].get(name)
            if est is None:
                raise EvalError(f"no estimate for {song}/{name}")
            if est.sample_rate != ref.sample_rate:
                raise EvalError(
                    f"sample-rate mismatch for {song}/{name}: {est.sample_rate} vs {ref.sample_rate}"
                )
            ref = zero_silent_windows(ref, silence_threshold, frame_sec)
            frames[song][name] = [v for _, v in frame_sdr(ref, est, frame_sec)]
    protocol = {"frame_sec": frame_sec, "silence_threshold": silence_threshold,
                "sdr_cap_db": SDR_CAP_DB, "metric": "energy-ratio SDR"}
    return aggregate(frames, protocol)


def load_layout(root) -> Dict[str, Dict[str, Path]]:
    """``<root>/<song>/<instrument>.wav`` -> ``{song: {instrument: path}}``."""
    root = Path(root)
    if not root.is_dir():
        raise EvalError(f"{root} is not a directory")
    out = {}
    for song_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        wavs = {p.stem: p for p in sorted(song_dir.glob("*.wav"))}
        if wavs:
            out[song_dir.name] = wavs
    if not out:
        raise EvalError(f"no <song>/<instrument>.wav files under {root}")
    return out


def references_from_manifest(manifest) -> Dict[str, Dict[str, Path]]:
    from .data import load_manifest

    return {e.song_id: {k: Path(v) for k, v in e.stems.items()} for e in load_manifest(manifest)}


def evaluate(est_dir, ref, silence_threshold: float = 0.01, frame_sec: float = 1.0) -> SdrReport:
    """Evaluate ``est_dir`` against a reference directory or a dataset manifest."""
    ref = Path(ref)
    ref_paths = references_from_manifest(ref) if ref.suffix == ".json" else load_layout(ref)
    est_paths = load_layout(est_dir)
    missing = sorted(set(ref_paths) - set(est_paths))
    if missing:
        raise EvalError(f"estimate directory lacks songs {missing}")
    estimates, references = {}, {}
    for song, insts in ref_paths.items():
        lacking = sorted(set(insts) - set(est_paths[song]))
        if lacking:
            raise EvalError(f"estimate directory lacks {song}/{lacking}")
        references[song] = {k: dsp.read_wav(p) for k, p in insts.items()}
        estimates[song] = {k: dsp.read_wav(est_paths[song][k]) for k in insts}
    return evaluate_clips(estimates, references, silence_threshold, frame_sec)
