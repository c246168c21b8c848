"""Time-frequency transforms, masking, resampling and Wiener denoising.

All signals are mono.  The STFT uses a periodic Hann window for analysis and
synthesis, center padding by ``window_size // 2`` reflected samples, and
squared-window overlap-add normalisation on the way back, so frame ``k`` is
centred on sample ``k * hop_size``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np
import scipy.io.wavfile
import scipy.ndimage
import scipy.signal


class DspError(ValueError):
    pass


class NoSilentRegionError(DspError):
    pass


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples)
        if samples.ndim != 1:
            raise DspError(f"mono clip expected, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise DspError("clip contains NaN or Inf samples")
        if int(self.sample_rate) <= 0:
            raise DspError(f"sample rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class ComplexSpectrogram:
    """frames x bins complex STFT.  ``length`` is the source clip length when known."""

    data: np.ndarray
    window_size: int
    hop_size: int
    sample_rate: int
    length: Optional[int] = None

    def __post_init__(self):
        _check_geometry(self.data, self.window_size, self.hop_size)

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class MagSpectrogram:
    data: np.ndarray
    window_size: int
    hop_size: int
    sample_rate: int

    def __post_init__(self):
        _check_geometry(self.data, self.window_size, self.hop_size)
        if np.any(self.data < 0):
            raise DspError("magnitude spectrogram has negative entries")


@dataclass(frozen=True)
class Mask:
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise DspError("mask must be frames x bins")
        if not np.all(np.isfinite(data)) or np.any(data < 0):
            raise DspError("mask entries must be finite and non-negative")
        object.__setattr__(self, "data", data)


def _check_geometry(data, window_size, hop_size):
    if data.ndim != 2:
        raise DspError(f"spectrogram must be frames x bins, got shape {data.shape}")
    if hop_size <= 0 or hop_size > window_size:
        raise DspError(f"need 0 < hop ({hop_size}) <= window ({window_size})")
    if data.shape[1] != window_size // 2 + 1:
        raise DspError(
            f"{data.shape[1]} bins does not match window {window_size} "
            f"(expected {window_size // 2 + 1})"
        )


def hann(window_size: int) -> np.ndarray:
    """Periodic Hann window."""
    n = np.arange(window_size)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / window_size)


def n_frames(n_samples: int, hop_size: int) -> int:
    """Frame count produced by :func:`stft` for a clip of ``n_samples``."""
    return 1 + n_samples // hop_size


def _frame(x: np.ndarray, window_size: int, hop_size: int) -> np.ndarray:
    count = 1 + (len(x) - window_size) // hop_size
    return np.lib.stride_tricks.as_strided(
        x,
        shape=(count, window_size),
        strides=(x.strides[0] * hop_size, x.strides[0]),
        writeable=False,
    )


def stft_array(x: np.ndarray, window_size: int = 4096, hop_size: int = 1024) -> np.ndarray:
    """Raw-array STFT; returns a frames x bins complex matrix."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise DspError("cannot transform an empty clip")
    if hop_size <= 0 or hop_size > window_size:
        raise DspError(f"need 0 < hop ({hop_size}) <= window ({window_size})")
    pad = window_size // 2
    mode = "reflect" if len(x) > pad else "constant"
    padded = np.ascontiguousarray(np.pad(x, pad, mode=mode))
    frames = _frame(padded, window_size, hop_size)[: n_frames(len(x), hop_size)]
    return np.fft.rfft(frames * hann(window_size), axis=-1)


def _synthesis_norm(count: int, window_size: int, hop_size: int) -> np.ndarray:
    w2 = hann(window_size) ** 2
    total = np.zeros(window_size + hop_size * (count - 1))
    for k in range(count):
        total[k * hop_size : k * hop_size + window_size] += w2
    return total


def istft_array(
    data: np.ndarray, window_size: int, hop_size: int, length: Optional[int] = None
) -> np.ndarray:
    count = data.shape[0]
    if data.shape[-1] != window_size // 2 + 1:
        raise DspError("bin count does not match window size")
    frames = np.fft.irfft(data, n=window_size, axis=-1) * hann(window_size)
    out = np.zeros(window_size + hop_size * (count - 1))
    for k in range(count):
        out[k * hop_size : k * hop_size + window_size] += frames[k]
    norm = _synthesis_norm(count, window_size, hop_size)
    nonzero = norm > np.finfo(np.float64).tiny
    out[nonzero] /= norm[nonzero]
    pad = window_size // 2
    if length is None:
        length = hop_size * (count - 1)
    out = out[pad : pad + length]
    if len(out) < length:
        out = np.pad(out, (0, length - len(out)))
    return out


def istft_adjoint(
    grad: np.ndarray, n_frames_: int, window_size: int, hop_size: int
) -> np.ndarray:
    """Back-propagate a time-domain gradient through :func:`istft_array`.

    Returns complex ``G`` (frames x bins) such that, for any spectrogram ``X``
    and real mask ``M``, ``d <grad, istft(M * X)> / dM = Re(X * conj(G))``.
    """
    pad = window_size // 2
    norm = _synthesis_norm(n_frames_, window_size, hop_size)
    full = np.zeros_like(norm)
    stop = min(len(norm), pad + len(grad))
    full[pad:stop] = grad[: stop - pad]
    nonzero = norm > np.finfo(np.float64).tiny
    full[nonzero] /= norm[nonzero]
    full[~nonzero] = 0.0
    framed = _frame(full, window_size, hop_size)[:n_frames_] * hann(window_size)
    spec = np.fft.rfft(framed, axis=-1)
    scale = np.full(window_size // 2 + 1, 2.0 / window_size)
    scale[0] = 1.0 / window_size
    if window_size % 2 == 0:
        scale[-1] = 1.0 / window_size
    return spec * scale


def stft(clip: AudioClip, window_size: int = 4096, hop_size: int = 1024) -> ComplexSpectrogram:
    data = stft_array(clip.samples, window_size, hop_size)
    return ComplexSpectrogram(data, window_size, hop_size, clip.sample_rate, len(clip))


def istft(spec: ComplexSpectrogram, length: Optional[int] = None) -> AudioClip:
    if length is None:
        length = spec.length
    samples = istft_array(spec.data, spec.window_size, spec.hop_size, length)
    return AudioClip(samples, spec.sample_rate)


def magnitude(spec: ComplexSpectrogram) -> MagSpectrogram:
    return MagSpectrogram(np.abs(spec.data), spec.window_size, spec.hop_size, spec.sample_rate)


def apply_mask(mix_spec: ComplexSpectrogram, mask: Mask) -> ComplexSpectrogram:
    if mask.data.shape != mix_spec.data.shape:
        raise DspError(
            f"mask shape {mask.data.shape} does not match spectrogram {mix_spec.data.shape}"
        )
    return ComplexSpectrogram(
        mix_spec.data * mask.data,
        mix_spec.window_size,
        mix_spec.hop_size,
        mix_spec.sample_rate,
        mix_spec.length,
    )


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

TAPS_PER_PHASE = 64
KAISER_BETA = 8.6


def resample_filter(up: int, down: int) -> np.ndarray:
    """Kaiser-windowed sinc prototype with 64 taps per polyphase branch."""
    cutoff = 1.0 / max(up, down)
    taps = TAPS_PER_PHASE * up
    taps += 1 - taps % 2  # odd length keeps the group delay integral
    # unit DC gain; resample_poly applies the factor ``up`` itself
    return scipy.signal.firwin(taps, cutoff, window=("kaiser", KAISER_BETA))


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    if target_rate <= 0:
        raise DspError(f"target rate must be positive, got {target_rate}")
    if target_rate == clip.sample_rate:
        return AudioClip(clip.samples.copy(), clip.sample_rate)
    ratio = Fraction(int(target_rate), clip.sample_rate)
    up, down = ratio.numerator, ratio.denominator
    h = resample_filter(up, down)
    out = scipy.signal.resample_poly(clip.samples, up, down, window=h)
    length = int(round(len(clip) * target_rate / clip.sample_rate))
    if len(out) < length:
        out = np.pad(out, (0, length - len(out)))
    return AudioClip(out[:length], int(target_rate))


# ---------------------------------------------------------------------------
# Wiener denoising
# ---------------------------------------------------------------------------

WIENER_FLOOR = 1e-3


def silent_windows(samples: np.ndarray, window_len: int, threshold: float) -> np.ndarray:
    """Boolean per non-overlapping window (last one may be partial): all |x| < threshold."""
    count = -(-len(samples) // window_len)
    flags = np.zeros(count, dtype=bool)
    for k in range(count):
        chunk = samples[k * window_len : (k + 1) * window_len]
        flags[k] = np.max(np.abs(chunk)) < threshold
    return flags


def _silent_frames(x, silent, window_len, n_frames_, window_size, hop_size):
    """A frame is silent when every sample it covers lies in a silent window."""
    centres = np.arange(n_frames_) * hop_size
    first = np.clip(centres - window_size // 2, 0, len(x) - 1) // window_len
    last = np.clip(centres + window_size // 2 - 1, 0, len(x) - 1) // window_len
    # prefix sums turn "all windows in [first, last] silent" into one comparison
    loud = np.concatenate([[0], np.cumsum(~silent)])
    return loud[last + 1] - loud[first] == 0


def wiener_denoise(
    clip: AudioClip,
    silence_threshold: float = 0.01,
    window_size: int = 4096,
    hop_size: int = 1024,
    noise: Optional[AudioClip] = None,
    window_sec: float = 1.0,
    oversubtraction: float = 2.0,
    smoothing_frames: int = 9,
) -> AudioClip:
    """Suppress stationary noise with a per-bin Wiener gain.

    The noise power spectrum ``N`` is the mean ``|X|^2`` over STFT frames lying
    entirely inside 1-second windows whose samples are all below
    ``silence_threshold``; an explicit ``noise`` clip overrides that search.
    The gain is ``max(1 - a * N / P, 1e-3)`` where ``P`` is ``|X|^2`` averaged
    over ``smoothing_frames`` neighbouring frames and ``a`` is
    ``oversubtraction``.  ``a=1, smoothing_frames=1`` gives the plain rule.
    """
    if silence_threshold <= 0:
        raise DspError("silence threshold must be positive")
    if oversubtraction <= 0 or smoothing_frames < 1:
        raise DspError("oversubtraction must be positive and smoothing_frames >= 1")
    x = clip.samples
    if not np.any(x):
        return AudioClip(np.zeros_like(x, dtype=np.float64), clip.sample_rate)
    spec = stft_array(x, window_size, hop_size)
    power = np.abs(spec) ** 2
    if noise is not None:
        noise_power = np.mean(np.abs(stft_array(noise.samples, window_size, hop_size)) ** 2, axis=0)
    else:
        window_len = max(1, int(round(window_sec * clip.sample_rate)))
        silent = silent_windows(x, window_len, silence_threshold)
        frame_silent = _silent_frames(x, silent, window_len, spec.shape[0], window_size, hop_size)
        if not frame_silent.any():
            raise NoSilentRegionError(
                f"no silent region below {silence_threshold} found; "
                "supply an explicit noise segment"
            )
        noise_power = power[frame_silent].mean(axis=0)
    if smoothing_frames > 1:
        power = scipy.ndimage.uniform_filter1d(power, smoothing_frames, axis=0, mode="nearest")
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = 1.0 - oversubtraction * noise_power / power
    gain = np.where(power > 0, gain, 0.0)
    gain = np.maximum(gain, WIENER_FLOOR)
    out = istft_array(spec * gain, window_size, hop_size, len(x))
    return AudioClip(out, clip.sample_rate)


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------


def read_wav(path) -> AudioClip:
    rate, data = scipy.io.wavfile.read(path)
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        data = (data.astype(np.float64) - 128.0) / 128.0
    else:
        data = data.astype(np.float64)
    if data.ndim == 2:
        data = data.mean(axis=1)
    return AudioClip(data, rate)


def write_wav(path, clip: AudioClip, subtype: str = "float32") -> None:
    if subtype == "float32":
        data = clip.samples.astype(np.float32)
    elif subtype == "pcm16":
        data = np.round(np.clip(clip.samples, -1.0, 32767 / 32768) * 32768.0).astype(np.int16)
    else:
        raise DspError(f"unsupported WAV subtype {subtype!r}")
    scipy.io.wavfile.write(path, clip.sample_rate, data)
