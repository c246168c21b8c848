"""Training loop, input statistics and the binary checkpoint format."""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import dsp
from .data import DataError, SongCache, SongEntry, family_members, sample_segment
from .loss import combination_loss
from .model import ModelConfig, SeparationModel, build

log = logging.getLogger(__name__)

MAGIC = b"SSEP"
FORMAT_VERSION = 1


class TrainError(RuntimeError):
    pass


class NumericalError(TrainError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    variant: str = "score_only"
    instruments: Optional[List[str]] = None
    family: Optional[str] = None
    epochs: int = 5
    steps_per_epoch: int = 20
    batch_size: int = 4
    segment_sec: float = 6.0
    lr: float = 1e-3
    lam: float = 10.0
    seed: int = 0
    window_size: int = 4096
    hop_size: int = 1024
    precision: str = "float64"
    profile: str = "desk"
    clip_norm: float = 5.0
    stats_segments: int = 16
    model_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        self.variant = self.variant.replace("-", "_")
        for name in ("epochs", "steps_per_epoch", "batch_size"):
            if getattr(self, name) <= 0:
                raise TrainError(f"{name} must be positive")
        if self.segment_sec <= 0:
            raise TrainError("segment_sec must be positive")
        if self.precision not in ("float32", "float64"):
            raise TrainError(f"unknown precision {self.precision!r}")
        if self.instruments is None and self.family is not None:
            self.instruments = family_members(self.family)
        if not self.instruments:
            raise TrainError("either instruments or family must be given")

    def model_config(self) -> ModelConfig:
        n_bins = self.window_size // 2 + 1
        if self.profile == "desk":
            return ModelConfig.desk(self.variant, self.instruments, n_bins, **self.model_overrides)
        return ModelConfig(self.variant, list(self.instruments), n_bins, **self.model_overrides)


@dataclass
class Checkpoint:
    model: SeparationModel
    metadata: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Optimiser
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, clip_norm=5.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> float:
        """Clip to the global norm, apply one update, return the pre-clip norm."""
        norm = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in self.params))
        if not math.isfinite(norm):
            raise NumericalError("non-finite gradient")
        scale = 1.0
        if self.clip_norm and norm > self.clip_norm:
            scale = self.clip_norm / norm
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad * scale
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.value -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.value.dtype)
        return norm


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------


def compute_input_stats(
    entries: Sequence[SongEntry],
    window_size: int = 4096,
    hop_size: int = 1024,
    n_segments: int = 16,
    segment_sec: float = 6.0,
    seed: int = 0,
    cache: Optional[SongCache] = None,
):
    """Per-bin mean and std of the mixture magnitude over seeded random segments."""
    if not entries:
        raise DataError("empty dataset")
    rng = np.random.default_rng(seed)
    n_bins = window_size // 2 + 1
    total = np.zeros(n_bins)
    total_sq = np.zeros(n_bins)
    count = 0
    for _ in range(n_segments):
        entry = entries[int(rng.integers(len(entries)))]
        seg_sec = min(segment_sec, entry.duration)
        seg = sample_segment(entry, seg_sec, rng, instruments=[], window_size=window_size,
                             hop_size=hop_size, with_score=False, cache=cache)
        mag = np.abs(dsp.stft_array(seg.mix.samples, window_size, hop_size))
        total += mag.sum(axis=0)
        total_sq += (mag**2).sum(axis=0)
        count += mag.shape[0]
    mean = total / count
    var = np.maximum(total_sq / count - mean**2, 0.0)
    return mean, np.maximum(np.sqrt(var), 1e-6)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _batch(model, segments, instruments, window, hop, dtype):
    specs = [dsp.stft(s.mix, window, hop) for s in segments]
    mags = np.stack([np.abs(s.data) for s in specs]).astype(dtype)
    rolls = None
    if model.config.variant != "baseline":
        rolls = np.stack(
            [np.stack([s.rolls[name].data for s in segments]) for name in instruments]
        ).astype(dtype)
    return specs, mags, rolls


def train_step(model, optimizer, segments, cfg: TrainConfig, dtype):
    instruments = model.config.instruments
    specs, mags, rolls = _batch(model, segments, instruments, cfg.window_size, cfg.hop_size, dtype)
    masks = model.forward(mags if model.config.variant != "score_only" else None, rolls)
    grad = np.zeros(masks.shape, dtype=np.float64)
    total = 0.0
    breakdowns = []
    for b, seg in enumerate(segments):
        refs = np.stack([seg.stems[name].samples for name in instruments])
        bd = combination_loss(masks[:, b], specs[b], seg.mix.samples, refs, cfg.lam,
                              instruments=instruments, with_grad=True)
        grad[:, b] = bd.mask_grad / len(segments)
        total += bd.total / len(segments)
        breakdowns.append(bd)
    if not math.isfinite(total):
        raise NumericalError("loss became NaN/Inf")
    model.zero_grad()
    model.backward(grad.astype(dtype))
    norm = optimizer.step()
    return total, breakdowns, norm


def train(
    entries: Sequence[SongEntry],
    cfg: TrainConfig,
    log_fn: Optional[Callable[[dict], None]] = None,
    time_budget_sec: Optional[float] = None,
) -> Checkpoint:
    """Train a model for ``cfg.instruments`` on random segments of ``entries``.

    The mixture always contains every source of the song; targets are only the
    selected instruments, whose stems are the only ones read.
    """
    if not entries:
        raise DataError("empty dataset")
    model_cfg = cfg.model_config()
    if model_cfg.variant != "baseline":
        missing = [e.song_id for e in entries if e.notes is None]
        if missing:
            raise DataError(f"{model_cfg.variant} training needs note CSVs; missing for {missing}")
    dtype = np.float32 if cfg.precision == "float32" else np.float64
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    model = build(model_cfg, seed=int(seeds[0].generate_state(1)[0]), dtype=dtype)
    cache = SongCache()
    if model_cfg.use_io_normalization:
        mean, std = compute_input_stats(
            entries, cfg.window_size, cfg.hop_size, cfg.stats_segments, cfg.segment_sec,
            seed=int(seeds[1].generate_state(1)[0]), cache=cache,
        )
        model.set_input_stats(mean, std)
    model.train()
    optimizer = Adam([p for _, p in model.named_params()], lr=cfg.lr, clip_norm=cfg.clip_norm)
    rng = np.random.default_rng(seeds[2])
    with_score = model_cfg.variant != "baseline"
    history = []
    step = 0
    started = time.monotonic()
    stop = False
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for _ in range(cfg.steps_per_epoch):
            segments = []
            for _ in range(cfg.batch_size):
                entry = entries[int(rng.integers(len(entries)))]
                segments.append(
                    sample_segment(entry, cfg.segment_sec, rng, model_cfg.instruments,
                                   cfg.window_size, cfg.hop_size, with_score, cache)
                )
            total, breakdowns, norm = train_step(model, optimizer, segments, cfg, dtype)
            step += 1
            losses.append(total)
            if log_fn is not None:
                rec = {"step": step, "epoch": epoch, "total": total, "grad_norm": norm}
                rec["subsets"] = _mean_subsets(breakdowns)
                log_fn(rec)
            if time_budget_sec is not None and time.monotonic() - started > time_budget_sec:
                stop = True
                break
        epoch_loss = float(np.mean(losses))
        history.append(epoch_loss)
        log.info("epoch %d mean loss %.6f", epoch, epoch_loss)
        if stop:
            break
    model.eval()
    metadata = {
        "train_config": _jsonable(asdict(cfg)),
        "epochs_run": len(history),
        "steps_run": step,
        "epoch_losses": history,
        "final_loss": history[-1],
    }
    return Checkpoint(model, metadata)


def _mean_subsets(breakdowns):
    out = []
    for key in breakdowns[0].terms:
        f = float(np.mean([b.terms[key][0] for b in breakdowns]))
        t = float(np.mean([b.terms[key][1] for b in breakdowns]))
        out.append({"instruments": list(key), "freq": f, "time": t})
    return out


def _jsonable(obj):
    return json.loads(json.dumps(obj, default=str))


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------


def _tensors(model: SeparationModel):
    items = [("param/" + name, p.value) for name, p in model.named_params()]
    items += [("buffer/" + name, np.asarray(b)) for name, b in model.buffers()]
    return items


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    tensors = _tensors(ckpt.model)
    directory = []
    payload = bytearray()
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<")
        raw = arr.astype(dt, copy=False).tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "dtype": dt.str,
                          "offset": len(payload), "nbytes": len(raw)})
        payload += raw
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": ckpt.model.config.to_dict(),
        "dtype": ckpt.model.dtype.str,
        "tensors": directory,
        "metadata": ckpt.metadata,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hbytes)) + hbytes + bytes(payload)


def save(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def checkpoint_from_bytes(blob: bytes) -> Checkpoint:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError("not an SSEP checkpoint")
    version, hlen = struct.unpack("<IQ", blob[4:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if len(blob) < 16 + hlen:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    payload = blob[16 + hlen :]
    cfg = ModelConfig(**header["model_config"])
    model = build(cfg, dtype=np.dtype(header["dtype"]))
    params = dict(model.named_params())
    buffers = dict(model.buffers())
    seen = set()
    for entry in header["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise CheckpointError(f"truncated tensor payload for {entry['name']}")
        arr = np.frombuffer(payload[start : start + nbytes], dtype=np.dtype(entry["dtype"]))
        arr = arr.reshape(entry["shape"])
        kind, name = entry["name"].split("/", 1)
        target = params.get(name) if kind == "param" else buffers.get(name)
        if target is None:
            raise CheckpointError(f"unexpected tensor {entry['name']}")
        expected = target.value.shape if kind == "param" else target.shape
        if tuple(arr.shape) != tuple(expected):
            raise CheckpointError(f"shape mismatch for {entry['name']}: {arr.shape} vs {expected}")
        if kind == "param":
            target.value = arr.astype(model.dtype).copy()
            target.grad = np.zeros_like(target.value)
        else:
            target[...] = arr
        seen.add(entry["name"])
    expected_names = {"param/" + n for n in params} | {"buffer/" + n for n in buffers}
    if seen != expected_names:
        raise CheckpointError(f"checkpoint lacks tensors {sorted(expected_names - seen)}")
    model.eval()
    return Checkpoint(model, header.get("metadata", {}))


def load(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    return checkpoint_from_bytes(blob)
