"""Multi-domain loss evaluated over instrument combinations.

Each non-empty proper subset of instruments contributes a spectral MSE on the
summed-mask estimate plus ``lam`` times a weighted-SDR term on its inverse
STFT; the total is the mean over subsets.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import dsp


class LossError(ValueError):
    pass


def _unwrap(x, attr):
    # ndarray has its own ``.data`` buffer attribute, so test the type first
    return x if isinstance(x, np.ndarray) else np.asarray(getattr(x, attr, x))


def spectral_mse(est, ref) -> float:
    est = _unwrap(est, "data")
    ref = _unwrap(ref, "data")
    if est.shape != ref.shape:
        raise LossError(f"shape mismatch {est.shape} vs {ref.shape}")
    return float(np.mean((est - ref) ** 2))


def _cos_and_grad(a, b):
    """cos(a, b) and its gradient w.r.t. ``b``; zero when either norm vanishes."""
    aa, bb = float(a @ a), float(b @ b)
    if aa == 0 or bb == 0:
        return 0.0, np.zeros_like(b)
    dot = float(a @ b)
    # sqrt(aa * bb) == aa exactly when a == b, so a perfect match gives cos == 1
    cos = min(max(dot / np.sqrt(aa * bb), -1.0), 1.0)
    na, nb = np.sqrt(aa), np.sqrt(bb)
    grad = a / (na * nb) - dot * b / (na * nb**3)
    return cos, grad


def weighted_sdr(est, ref, mix, return_grad=False):
    """Weighted SDR loss in ``[-1, 1]``; ``-1`` for a perfect estimate.

    ``rho = |ref|^2 / (|ref|^2 + |mix - ref|^2)`` weights the target cosine,
    ``1 - rho`` the cosine between the true and estimated residuals.
    """
    est = np.asarray(getattr(est, "samples", est), dtype=np.float64)
    ref = np.asarray(getattr(ref, "samples", ref), dtype=np.float64)
    mix = np.asarray(getattr(mix, "samples", mix), dtype=np.float64)
    if not (est.shape == ref.shape == mix.shape):
        raise LossError(f"length mismatch {est.shape}, {ref.shape}, {mix.shape}")
    z = mix - ref
    z_hat = mix - est
    e_ref, e_z = float(ref @ ref), float(z @ z)
    rho = e_ref / (e_ref + e_z) if e_ref + e_z > 0 else 0.0
    cos_s, g_s = _cos_and_grad(ref, est)
    cos_n, g_n = _cos_and_grad(z, z_hat)
    value = -rho * cos_s - (1.0 - rho) * cos_n
    if return_grad:
        return value, -rho * g_s + (1.0 - rho) * g_n
    return value


def combinations(instruments: Sequence[str]) -> List[Tuple[str, ...]]:
    """All non-empty proper subsets, ordered by size then lexicographically."""
    items = list(instruments)
    if len(items) < 2:
        raise LossError("combination loss needs at least two instruments")
    ordered = sorted(items)
    out = []
    for size in range(1, len(items)):
        out.extend(itertools.combinations(ordered, size))
    return out


@dataclass
class LossBreakdown:
    total: float
    terms: Dict[Tuple[str, ...], Tuple[float, float]] = field(default_factory=dict)
    lam: float = 10.0
    mask_grad: Optional[np.ndarray] = field(default=None, repr=False)

    def to_record(self, **extra) -> dict:
        rec = dict(extra)
        rec["total"] = self.total
        rec["lambda"] = self.lam
        rec["subsets"] = [
            {"instruments": list(k), "freq": f, "time": t} for k, (f, t) in self.terms.items()
        ]
        return rec

    def to_json(self, **extra) -> str:
        return json.dumps(self.to_record(**extra), sort_keys=True)


def combination_loss(
    masks,
    mix_spec: dsp.ComplexSpectrogram,
    mix,
    refs,
    lam: float = 10.0,
    instruments: Optional[Sequence[str]] = None,
    ref_specs=None,
    with_grad: bool = False,
) -> LossBreakdown:
    """Loss for one segment.

    ``masks`` and ``refs`` are either dicts keyed by instrument or stacked
    arrays together with ``instruments``.  ``ref_specs`` optionally supplies
    precomputed STFTs of the references.  With ``with_grad`` the breakdown
    carries ``mask_grad`` stacked in ``instruments`` order.
    """
    if isinstance(masks, dict):
        instruments = list(masks) if instruments is None else list(instruments)
        missing = [i for i in instruments if i not in masks or i not in refs]
        if missing:
            raise LossError(f"missing instruments {missing}")
        mask_arr = np.stack([_unwrap(masks[i], "data") for i in instruments])
        ref_arr = np.stack([np.asarray(getattr(refs[i], "samples", refs[i])) for i in instruments])
    else:
        if instruments is None:
            raise LossError("instrument names required with stacked arrays")
        instruments = list(instruments)
        mask_arr, ref_arr = np.asarray(masks), np.asarray(refs)
        if len(mask_arr) != len(instruments) or len(ref_arr) != len(instruments):
            raise LossError("masks/refs do not cover every instrument")
    mix = np.asarray(getattr(mix, "samples", mix), dtype=np.float64)
    X = mix_spec.data
    W, hop = mix_spec.window_size, mix_spec.hop_size
    n = len(mix)
    if ref_specs is None:
        ref_specs = np.stack([dsp.stft_array(r, W, hop) for r in ref_arr])
    mix_mag = np.abs(X)
    index = {name: k for k, name in enumerate(instruments)}
    subsets = combinations(instruments)
    mask_arr = mask_arr.astype(np.float64)
    # istft is linear, so subset estimates are sums of per-instrument ones
    est_parts = np.stack([dsp.istft_array(m * X, W, hop, n) for m in mask_arr])
    grad = np.zeros(mask_arr.shape, dtype=np.float64) if with_grad else None
    g_time = np.zeros(ref_arr.shape, dtype=np.float64) if with_grad else None
    terms = {}
    total = 0.0
    for subset in subsets:
        ids = [index[name] for name in subset]
        m = mask_arr[ids].sum(axis=0)
        ref_mag = np.abs(ref_specs[ids].sum(axis=0))
        # masks are non-negative so |m * X| == m * |X|
        diff = m * mix_mag - ref_mag
        freq = float(np.mean(diff**2))
        est = est_parts[ids].sum(axis=0)
        ref_s = ref_arr[ids].sum(axis=0)
        if with_grad:
            time, g_est = weighted_sdr(est, ref_s, mix, return_grad=True)
            grad[ids] += ((2.0 / diff.size) * diff * mix_mag) / len(subsets)
            g_time[ids] += (lam / len(subsets)) * g_est
        else:
            time = weighted_sdr(est, ref_s, mix)
        terms[subset] = (freq, time)
        total += freq + lam * time
    if with_grad:
        for k in range(len(instruments)):
            if np.any(g_time[k]):
                grad[k] += np.real(X * np.conj(dsp.istft_adjoint(g_time[k], X.shape[0], W, hop)))
    return LossBreakdown(total / len(subsets), terms, lam, grad)
