"""Baseline, score-informed and score-only mask estimators.

All three share the cross-branch layout: one encoder, LSTM stack and decoder
per instrument, with the encoder outputs averaged before the LSTMs and the
(encoder, LSTM) features averaged again before the decoders.  The variants
differ only in what each encoder branch sees:

* ``baseline``: the (normalised) mixture magnitude, identical for every branch.
* ``score_informed``: the mixture magnitude concatenated with that
  instrument's encoded piano roll.
* ``score_only``: that instrument's raw piano roll; no audio at all.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from . import dsp, nn
from .score import N_PITCHES, PianoRoll, ScoreTrack, normalize_instrument, rasterize

VARIANTS = ("baseline", "score_informed", "score_only")


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    variant: str
    instruments: List[str]
    n_bins: int = 2049
    hidden_size: int = 512
    encoder_out: int = 512
    score_encoder_hidden: int = 32
    score_feature_size: int = 32
    use_io_normalization: Optional[bool] = None
    lstm_layers: int = 3
    score_lstm_layers: int = 3

    def __post_init__(self):
        self.variant = self.variant.replace("-", "_")
        if self.variant not in VARIANTS:
            raise ModelError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        self.instruments = [normalize_instrument(i) for i in self.instruments]
        if not self.instruments:
            raise ModelError("at least one instrument is required")
        if len(set(self.instruments)) != len(self.instruments):
            raise ModelError(f"duplicate instruments in {self.instruments}")
        if self.use_io_normalization is None:
            self.use_io_normalization = self.variant != "score_only"
        if self.variant == "score_only" and self.use_io_normalization:
            raise ModelError("score_only models have no input/output normalisation")
        if self.variant == "score_informed":
            # score_encoder_hidden is the bidirectional width (half per direction)
            if self.score_encoder_hidden % 2:
                raise ModelError("score_encoder_hidden must be even")
            if self.score_feature_size != self.score_encoder_hidden:
                raise ModelError(
                    "score_feature_size must equal score_encoder_hidden "
                    "(the encoder output is the BiLSTM output)"
                )
        for name in ("n_bins", "hidden_size", "encoder_out", "lstm_layers", "score_lstm_layers"):
            if getattr(self, name) <= 0:
                raise ModelError(f"{name} must be positive")

    @classmethod
    def desk(cls, variant, instruments, n_bins=2049, **kw):
        kw.setdefault("hidden_size", 32)
        kw.setdefault("encoder_out", 32)
        kw.setdefault("score_encoder_hidden", 8)
        kw.setdefault("score_feature_size", 8)
        return cls(variant, list(instruments), n_bins, **kw)

    @property
    def n_branches(self) -> int:
        return len(self.instruments)

    def branch_input_width(self) -> int:
        if self.variant == "baseline":
            return self.n_bins
        if self.variant == "score_informed":
            return self.n_bins + self.score_feature_size
        return N_PITCHES

    def to_dict(self) -> dict:
        return asdict(self)


def expected_param_count(cfg: ModelConfig) -> int:
    """Closed-form trainable parameter count for a configuration."""
    J, F, E, H = cfg.n_branches, cfg.n_bins, cfg.encoder_out, cfg.hidden_size
    per_branch = cfg.branch_input_width() * E + 2 * E  # encoder linear + BN
    per_branch += nn.bilstm_param_count(E, H, cfg.lstm_layers)
    per_branch += (E + 2 * H) * H + 2 * H + H * F + 2 * F  # decoder
    if cfg.use_io_normalization:
        per_branch += 2 * F
    if cfg.variant == "score_informed":
        S = cfg.score_feature_size
        per_branch += nn.bilstm_param_count(N_PITCHES, S // 2, cfg.score_lstm_layers) + 2 * S
    return J * per_branch


class Branches(nn.Module):
    """A list of per-instrument sub-networks with identical structure."""

    def __init__(self, modules):
        super().__init__()
        self.items = list(modules)
        for k, m in enumerate(self.items):
            self.add_child(str(k), m)

    def __getitem__(self, k):
        return self.items[k]

    def __len__(self):
        return len(self.items)


class SeparationModel(nn.Module):
    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float64):
        super().__init__()
        self.config = cfg = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        J, F, E, H = cfg.n_branches, cfg.n_bins, cfg.encoder_out, cfg.hidden_size

        self.input_mean = np.zeros(F)
        self.input_std = np.ones(F)

        if cfg.variant == "score_informed":
            S = cfg.score_feature_size
            self.score_lstm = self.add_child(
                "score_encoder/lstm",
                nn.BiLSTM(N_PITCHES, S // 2, cfg.score_lstm_layers, groups=J, rng=rng, dtype=dtype),
            )
            self.score_bn = self.add_child(
                "score_encoder/bn", Branches(nn.BatchNorm(S, dtype=dtype) for _ in range(J))
            )
            self.score_relu = [nn.Activation("relu") for _ in range(J)]

        width = cfg.branch_input_width()
        self.encoders = self.add_child(
            "encoder",
            Branches(
                nn.Sequential(
                    nn.Linear(width, E, bias=False, rng=rng, dtype=dtype),
                    nn.BatchNorm(E, dtype=dtype),
                    nn.Activation("tanh"),
                )
                for _ in range(J)
            ),
        )
        self.lstm = self.add_child(
            "lstm", nn.BiLSTM(E, H, cfg.lstm_layers, groups=J, rng=rng, dtype=dtype)
        )
        self.decoders = self.add_child(
            "decoder",
            Branches(
                nn.Sequential(
                    nn.Linear(E + 2 * H, H, bias=False, rng=rng, dtype=dtype),
                    nn.BatchNorm(H, dtype=dtype),
                    nn.Activation("relu"),
                    nn.Linear(H, F, bias=False, rng=rng, dtype=dtype),
                    nn.BatchNorm(F, dtype=dtype),
                )
                for _ in range(J)
            ),
        )
        if cfg.use_io_normalization:
            self.out_scale = self.add_param("output/scale", np.ones((J, F), dtype=dtype))
            self.out_shift = self.add_param("output/shift", np.ones((J, F), dtype=dtype))

    # -- state -----------------------------------------------------------------

    def buffers(self, prefix=""):
        if self.config.use_io_normalization:
            yield prefix + "input/mean", self.input_mean
            yield prefix + "input/std", self.input_std
        yield from super().buffers(prefix)

    def set_input_stats(self, mean, std):
        self.input_mean = np.asarray(mean, dtype=np.float64).copy()
        self.input_std = np.maximum(np.asarray(std, dtype=np.float64), 1e-6)

    @property
    def instruments(self):
        return self.config.instruments

    # -- forward / backward ------------------------------------------------------

    def _score_features(self, rolls):
        s = self.score_lstm.forward(rolls)
        feats = []
        for k in range(self.config.n_branches):
            feats.append(self.score_relu[k].forward(self.score_bn[k].forward(s[k])))
        return np.stack(feats)

    def forward(self, mix_mag=None, rolls=None):
        """Masks for every instrument.

        ``mix_mag`` is ``(batch, frames, bins)`` or ``(frames, bins)``;
        ``rolls`` is ``(instruments, batch, frames, 128)`` or
        ``(instruments, frames, 128)``.  Returns ``(instruments, [batch,]
        frames, bins)`` non-negative masks.
        """
        cfg = self.config
        J, E = cfg.n_branches, cfg.encoder_out
        needs_mix = cfg.variant in ("baseline", "score_informed")
        needs_score = cfg.variant in ("score_informed", "score_only")
        if needs_mix and mix_mag is None:
            raise ModelError(f"{cfg.variant} model needs the mixture magnitude")
        if needs_score and rolls is None:
            raise ModelError(f"{cfg.variant} model needs piano rolls")
        unbatched = False
        if needs_mix:
            mix_mag = np.asarray(mix_mag, dtype=self.dtype)
            if mix_mag.ndim == 2:
                mix_mag, unbatched = mix_mag[None], True
            if mix_mag.shape[-1] != cfg.n_bins:
                raise ModelError(f"expected {cfg.n_bins} bins, got {mix_mag.shape[-1]}")
        if needs_score:
            rolls = np.asarray(rolls, dtype=self.dtype)
            if rolls.ndim == 3:
                rolls, unbatched = rolls[:, None], True
            if rolls.shape[0] != J or rolls.shape[-1] != N_PITCHES:
                raise ModelError(f"expected ({J}, batch, frames, 128) rolls, got {rolls.shape}")
        if needs_mix and needs_score and mix_mag.shape[:2] != rolls.shape[1:3]:
            raise ModelError(
                f"frame mismatch: mixture {mix_mag.shape[:2]} vs rolls {rolls.shape[1:3]}"
            )
        self._unbatched = unbatched

        if needs_mix:
            x_mix = mix_mag
            if cfg.use_io_normalization:
                x_mix = ((mix_mag - self.input_mean) / self.input_std).astype(self.dtype)
        if cfg.variant == "baseline":
            inputs = [x_mix] * J
        elif cfg.variant == "score_informed":
            feats = self._score_features(rolls)
            inputs = [np.concatenate([x_mix, feats[k]], axis=-1) for k in range(J)]
        else:
            inputs = [rolls[k] for k in range(J)]

        enc = np.stack([self.encoders[k].forward(inputs[k]) for k in range(J)])
        cross1 = enc.mean(axis=0)
        lstm_out = self.lstm.forward(np.broadcast_to(cross1, (J,) + cross1.shape).copy())
        cross2 = np.concatenate([cross1, lstm_out.mean(axis=0)], axis=-1)

        dec = np.stack([self.decoders[k].forward(cross2) for k in range(J)])
        if cfg.use_io_normalization:
            self._dec_pre = dec
            dec = dec * self.out_scale.value[:, None, None, :] + self.out_shift.value[:, None, None, :]
        self._relu_mask = dec > 0
        masks = np.where(self._relu_mask, dec, 0.0).astype(self.dtype)
        self._E = E
        return masks[:, 0] if unbatched else masks

    def backward(self, grad_masks):
        """Accumulate parameter gradients; returns input gradients as a dict."""
        cfg = self.config
        J, E = cfg.n_branches, self._E
        g = np.asarray(grad_masks, dtype=self.dtype)
        if self._unbatched:
            g = g[:, None]
        g = g * self._relu_mask
        if cfg.use_io_normalization:
            self.out_scale.grad += np.einsum("jbtf,jbtf->jf", g, self._dec_pre)
            self.out_shift.grad += g.sum(axis=(1, 2))
            g = g * self.out_scale.value[:, None, None, :]
        g_cross2 = sum(self.decoders[k].backward(g[k]) for k in range(J))
        g_lstm = np.broadcast_to(g_cross2[..., E:] / J, (J,) + g_cross2[..., E:].shape).copy()
        g_cross1 = g_cross2[..., :E] + self.lstm.backward(g_lstm).sum(axis=0)
        g_inputs = [self.encoders[k].backward(g_cross1 / J) for k in range(J)]

        grads = {}
        F = cfg.n_bins
        if cfg.variant == "baseline":
            g_mix = sum(g_inputs)
        elif cfg.variant == "score_informed":
            g_mix = sum(gi[..., :F] for gi in g_inputs)
            g_feat = []
            for k in range(J):
                gk = self.score_relu[k].backward(g_inputs[k][..., F:])
                g_feat.append(self.score_bn[k].backward(gk))
            grads["rolls"] = self.score_lstm.backward(np.stack(g_feat))
        else:
            grads["rolls"] = np.stack(g_inputs)
        if cfg.variant != "score_only":
            if cfg.use_io_normalization:
                g_mix = g_mix / self.input_std
            grads["mix"] = g_mix
        if self._unbatched:
            grads = {k: (v[0] if k == "mix" else v[:, 0]) for k, v in grads.items()}
        return grads


def build(config: ModelConfig, seed: int = 0, dtype=np.float64) -> SeparationModel:
    return SeparationModel(config, seed=seed, dtype=dtype)


def encode_score(model: SeparationModel, roll: PianoRoll, instrument: str) -> np.ndarray:
    """Encoded score features (frames x score_feature_size) for one instrument."""
    cfg = model.config
    if cfg.variant != "score_informed":
        raise ModelError(f"{cfg.variant} model has no score encoder")
    instrument = normalize_instrument(instrument)
    if instrument not in cfg.instruments:
        raise ModelError(f"instrument {instrument!r} not in model {cfg.instruments}")
    k = cfg.instruments.index(instrument)
    rolls = np.zeros((cfg.n_branches, 1, roll.n_frames, N_PITCHES), dtype=model.dtype)
    rolls[k, 0] = roll.data
    return model._score_features(rolls)[k, 0]


def rolls_for(
    instruments: Sequence[str],
    tracks: Optional[Mapping[str, ScoreTrack]],
    n_frames: int,
    sample_rate: int,
    hop_size: int,
) -> np.ndarray:
    """``(instruments, frames, 128)`` stack; missing instruments get an empty roll."""
    out = np.zeros((len(instruments), n_frames, N_PITCHES), dtype=np.float64)
    for k, name in enumerate(instruments):
        track = (tracks or {}).get(name)
        if track is not None:
            out[k] = rasterize(track, n_frames, sample_rate, hop_size).data
    return out


def separate(
    model: SeparationModel,
    mix: dsp.AudioClip,
    score: Optional[Sequence[ScoreTrack]] = None,
    window_size: int = 4096,
    hop_size: int = 1024,
    return_masks: bool = False,
):
    """Run the full mask-and-invert pipeline on one clip.

    Returns ``{instrument: AudioClip}`` (and the mask stack when
    ``return_masks``).  Batch norm runs in inference mode.
    """
    cfg = model.config
    if cfg.n_bins != window_size // 2 + 1:
        raise ModelError(f"model expects {cfg.n_bins} bins but window {window_size} gives {window_size // 2 + 1}")
    needs_score = cfg.variant != "baseline"
    if needs_score and score is None:
        raise ModelError(f"{cfg.variant} model requires a score")
    spec = dsp.stft(mix, window_size, hop_size)
    frames = spec.n_frames
    rolls = None
    if needs_score:
        tracks = {t.instrument: t for t in score}
        rolls = rolls_for(cfg.instruments, tracks, frames, mix.sample_rate, hop_size)
    mag = None
    if cfg.variant != "score_only":
        mag = dsp.magnitude(spec).data
    was_training = model.training
    model.eval()
    try:
        masks = model.forward(mag, rolls)
    finally:
        model.train(was_training)
    out = {}
    for k, name in enumerate(cfg.instruments):
        masked = dsp.apply_mask(spec, dsp.Mask(masks[k].astype(np.float64)))
        out[name] = dsp.istft(masked, len(mix))
    if return_masks:
        return out, masks
    return out
