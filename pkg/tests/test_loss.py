import itertools
import math

import numpy as np
import pytest

from scoresep import dsp
from scoresep.loss import LossError, combination_loss, combinations, spectral_mse, weighted_sdr

W, HOP, SR = 64, 16, 8000


def oracle_wsdr(est, ref, mix):
    """Direct transcription of the weighted-SDR formula with Python loops."""
    def dot(a, b):
        return sum(float(x) * float(y) for x, y in zip(a, b))

    def cos(a, b):
        na, nb = math.sqrt(dot(a, a)), math.sqrt(dot(b, b))
        return 0.0 if na == 0 or nb == 0 else dot(a, b) / (na * nb)

    z = [m - r for m, r in zip(mix, ref)]
    z_hat = [m - e for m, e in zip(mix, est)]
    rho = dot(ref, ref) / (dot(ref, ref) + dot(z, z))
    return -rho * cos(ref, est) - (1 - rho) * cos(z, z_hat)


def oracle_combination_loss(masks, mix, refs, lam):
    """Per-subset pipeline through the public dsp API, no linearity shortcuts."""
    names = sorted(masks)
    spec = dsp.stft(dsp.AudioClip(mix, SR), W, HOP)
    values = []
    for size in range(1, len(names)):
        for subset in itertools.combinations(names, size):
            mask = dsp.Mask(sum(masks[n] for n in subset))
            masked = dsp.apply_mask(spec, mask)
            est = dsp.istft(masked, len(mix)).samples
            ref = sum(refs[n] for n in subset)
            ref_mag = dsp.magnitude(dsp.stft(dsp.AudioClip(ref, SR), W, HOP))
            freq = spectral_mse(dsp.magnitude(masked), ref_mag)
            values.append(freq + lam * oracle_wsdr(est, ref, mix))
    return sum(values) / len(values)


def fixture(n_inst=3, n=400, seed=0):
    rng = np.random.default_rng(seed)
    names = ["flute", "oboe", "clarinet", "bassoon"][:n_inst]
    refs = {k: rng.standard_normal(n) * (0.5 + i) for i, k in enumerate(names)}
    mix = sum(refs.values())
    frames = dsp.n_frames(n, HOP)
    masks = {k: rng.random((frames, W // 2 + 1)) for k in names}
    return names, refs, mix, masks


class TestSpectralMse:
    def test_equal(self):
        x = np.random.default_rng(0).random((5, 7))
        assert spectral_mse(x, x) == 0.0

    def test_offset_one(self):
        x = np.random.default_rng(0).random((5, 7))
        assert spectral_mse(x + 1, x) == pytest.approx(1.0)

    def test_brute_force(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((4, 6)), rng.random((4, 6))
        total = 0.0
        for i in range(4):
            for j in range(6):
                total += (a[i, j] - b[i, j]) ** 2
        assert spectral_mse(a, b) == pytest.approx(total / 24, rel=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(LossError):
            spectral_mse(np.zeros((2, 3)), np.zeros((3, 2)))


class TestWeightedSdr:
    def test_perfect_is_minus_one(self):
        rng = np.random.default_rng(2)
        ref, other = rng.standard_normal(100), rng.standard_normal(100)
        assert weighted_sdr(ref, ref, ref + other) == -1.0

    def test_anti_aligned_is_plus_one(self):
        ref = np.random.default_rng(3).standard_normal(50)
        assert weighted_sdr(-ref, ref, ref) == pytest.approx(1.0, abs=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        ref, est, noise = (rng.standard_normal(64) for _ in range(3))
        mix = ref + noise
        assert weighted_sdr(est, ref, mix) == pytest.approx(oracle_wsdr(est, ref, mix), abs=1e-12)

    def test_bounded(self):
        rng = np.random.default_rng(9)
        for _ in range(200):
            a, b, c = (rng.standard_normal(16) for _ in range(3))
            assert -1.0 - 1e-12 <= weighted_sdr(a, b, b + c) <= 1.0 + 1e-12

    def test_silent_reference(self):
        mix = np.random.default_rng(4).standard_normal(30)
        ref = np.zeros(30)
        # rho = 0, only the residual cosine counts; est = 0 reproduces z exactly
        assert weighted_sdr(np.zeros(30), ref, mix) == -1.0
        assert np.isfinite(weighted_sdr(np.ones(30), ref, mix))

    def test_length_mismatch(self):
        with pytest.raises(LossError):
            weighted_sdr(np.zeros(3), np.zeros(4), np.zeros(4))


class TestCombinations:
    @pytest.mark.parametrize("j", [2, 3, 4, 5])
    def test_count(self, j):
        assert len(combinations([f"i{k}" for k in range(j)])) == 2**j - 2

    def test_two(self):
        assert combinations(["b", "a"]) == [("a",), ("b",)]

    def test_matches_powerset_filter(self):
        names = ["viola", "cello", "violin", "double_bass"]
        power = [
            tuple(sorted(s))
            for r in range(len(names) + 1)
            for s in itertools.combinations(names, r)
        ]
        expected = [s for s in power if 0 < len(s) < len(names)]
        got = combinations(names)
        assert sorted(got) == sorted(expected)
        assert [len(s) for s in got] == sorted(len(s) for s in got)
        for size in range(1, 4):
            block = [s for s in got if len(s) == size]
            assert block == sorted(block)

    def test_too_few(self):
        with pytest.raises(LossError):
            combinations(["solo"])


class TestCombinationLoss:
    @pytest.mark.parametrize("n_inst", [2, 3])
    def test_matches_oracle(self, n_inst):
        names, refs, mix, masks = fixture(n_inst)
        spec = dsp.stft(dsp.AudioClip(mix, SR), W, HOP)
        out = combination_loss(masks, spec, mix, refs, lam=10.0)
        assert out.total == pytest.approx(oracle_combination_loss(masks, mix, refs, 10.0), rel=1e-10)
        assert len(out.terms) == 2**n_inst - 2

    def test_total_is_mean_of_terms(self):
        names, refs, mix, masks = fixture(3, seed=1)
        spec = dsp.stft(dsp.AudioClip(mix, SR), W, HOP)
        out = combination_loss(masks, spec, mix, refs, lam=3.0)
        expected = np.mean([f + 3.0 * t for f, t in out.terms.values()])
        assert out.total == pytest.approx(expected, rel=1e-12)

    def test_pair_is_mean_of_singletons(self):
        names, refs, mix, masks = fixture(2, seed=2)
        spec = dsp.stft(dsp.AudioClip(mix, SR), W, HOP)
        out = combination_loss(masks, spec, mix, refs)
        assert set(out.terms) == {("flute",), ("oboe",)}

    def test_oracle_masks(self):
        # sources on disjoint frequency bins: binary masks separate them exactly
        n = 2048
        t = np.arange(n) / SR
        a = np.sin(2 * np.pi * 500 * t)
        b = np.sin(2 * np.pi * 3000 * t)
        mix = a + b
        spec = dsp.stft(dsp.AudioClip(mix, SR), W, HOP)
        freqs = np.fft.rfftfreq(W, 1 / SR)
        low = np.broadcast_to((freqs < 1750).astype(float), spec.data.shape)
        masks = {"a": low, "b": 1.0 - low}
        out = combination_loss(masks, spec, mix, {"a": a, "b": b})
        for freq, time in out.terms.values():
            assert time == pytest.approx(-1.0, abs=1e-4)
            assert freq < 1e-3 * np.mean(np.abs(spec.data) ** 2)

    def test_relabeling_symmetry(self):
        names, refs, mix, masks = fixture(3, seed=3)
        spec = dsp.stft(dsp.AudioClip(mix, SR), W, HOP)
        base = combination_loss(masks, spec, mix, refs).total
        rename = dict(zip(names, ["zeta", "alpha", "mu"]))
        swapped = combination_loss(
            {rename[k]: v for k, v in masks.items()}, spec, mix, {rename[k]: v for k, v in refs.items()}
        ).total
        assert swapped == pytest.approx(base, rel=1e-12)

    def test_missing_instrument(self):
        names, refs, mix, masks = fixture(3)
        spec = dsp.stft(dsp.AudioClip(mix, SR), W, HOP)
        del refs["oboe"]
        with pytest.raises(LossError, match="oboe"):
            combination_loss(masks, spec, mix, refs)

    def test_gradient_matches_finite_differences(self):
        names, refs, mix, masks = fixture(3, n=120, seed=4)
        spec = dsp.stft(dsp.AudioClip(mix, SR), W, HOP)
        stack = np.stack([masks[k] for k in names])
        ref_stack = np.stack([refs[k] for k in names])

        def value(m):
            return combination_loss(m, spec, mix, ref_stack, instruments=names).total

        analytic = combination_loss(stack, spec, mix, ref_stack, instruments=names, with_grad=True).mask_grad
        numeric = np.zeros_like(stack)
        eps = 1e-6
        for idx in np.ndindex(stack.shape):
            up, down = stack.copy(), stack.copy()
            up[idx] += eps
            down[idx] -= eps
            numeric[idx] = (value(up) - value(down)) / (2 * eps)
        scale = np.max(np.abs(numeric))
        rel = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3 * scale)
        assert np.max(rel) <= 1e-3

    def test_record_round_trip(self):
        names, refs, mix, masks = fixture(2)
        spec = dsp.stft(dsp.AudioClip(mix, SR), W, HOP)
        rec = combination_loss(masks, spec, mix, refs).to_record(step=3)
        assert rec["step"] == 3 and len(rec["subsets"]) == 2
