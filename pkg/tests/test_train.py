import json

import numpy as np
import pytest

from scoresep import dsp
from scoresep.data import DataError, SongCache, ToySpec, sample_segment, synthesize_toy
from scoresep.loss import combination_loss
from scoresep.model import ModelConfig, build
from scoresep.train import (
    Adam,
    Checkpoint,
    CheckpointError,
    TrainConfig,
    TrainError,
    checkpoint_bytes,
    checkpoint_from_bytes,
    compute_input_stats,
    load,
    save,
    train,
    train_step,
)
from scoresep.nn import Param

INST = ["toy_low", "toy_mid", "toy_high"]
FAST = dict(window_size=512, hop_size=128, segment_sec=1.0, batch_size=2, instruments=INST)


@pytest.fixture(scope="module")
def songs(tmp_path_factory):
    return synthesize_toy(ToySpec(n_songs=2, duration_sec=12, seed=21), tmp_path_factory.mktemp("songs"))


def fast_cfg(**kw):
    return TrainConfig(**{**FAST, **kw})


class TestConfig:
    def test_family_expands(self):
        cfg = TrainConfig(family="brass")
        assert cfg.instruments == ["horn", "trombone", "tuba", "trumpet"]

    @pytest.mark.parametrize("bad", [dict(epochs=0), dict(batch_size=0), dict(segment_sec=0),
                                     dict(precision="float16"), dict(instruments=None)])
    def test_invalid(self, bad):
        with pytest.raises(TrainError):
            TrainConfig(**{"instruments": INST, **bad})

    def test_model_config_profiles(self):
        desk = fast_cfg().model_config()
        assert desk.hidden_size == 32 and desk.n_bins == 257
        full = fast_cfg(profile="full").model_config()
        assert full.hidden_size == 512


class TestAdam:
    def test_first_step_is_lr_times_sign(self):
        # bias-corrected first step: m/c1 = g, v/c2 = g^2 -> update = lr * g/|g|
        p = Param(np.array([1.0, -2.0, 3.0]))
        p.grad[...] = [0.5, -0.1, 0.0]
        Adam([p], lr=0.01, clip_norm=None).step()
        assert np.allclose(p.value, [0.99, -1.99, 3.0], atol=1e-9)

    def test_clipping(self):
        p = Param(np.zeros(2))
        p.grad[...] = [30.0, 40.0]
        opt = Adam([p], lr=0.1, clip_norm=5.0)
        assert opt.step() == pytest.approx(50.0)
        # direction is unchanged by clipping, Adam normalizes magnitude away
        assert np.allclose(p.value, [-0.1, -0.1], atol=1e-6)

    def test_matches_reference_recursion(self):
        rng = np.random.default_rng(0)
        p = Param(rng.standard_normal(4))
        x = p.value.copy()
        m = np.zeros(4)
        v = np.zeros(4)
        opt = Adam([p], lr=1e-2, clip_norm=None)
        for t in range(1, 6):
            g = rng.standard_normal(4)
            p.grad[...] = g
            opt.step()
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x = x - 1e-2 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert np.allclose(p.value, x, rtol=1e-12)


class TestInputStats:
    def test_brute_force(self, songs):
        mean, std = compute_input_stats(songs, 512, 128, n_segments=3, segment_sec=1.0, seed=4)
        rng = np.random.default_rng(4)
        mags = []
        for _ in range(3):
            e = songs[int(rng.integers(len(songs)))]
            seg = sample_segment(e, 1.0, rng, instruments=[], window_size=512, hop_size=128, with_score=False)
            mags.append(np.abs(dsp.stft_array(seg.mix.samples, 512, 128)))
        allm = np.concatenate(mags)
        assert np.allclose(mean, allm.mean(axis=0), rtol=1e-10)
        assert np.allclose(std, np.maximum(allm.std(axis=0), 1e-6), rtol=1e-6)

    def test_deterministic(self, songs):
        a = compute_input_stats(songs, 512, 128, 2, 1.0, seed=1)
        b = compute_input_stats(songs, 512, 128, 2, 1.0, seed=1)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_silent_dataset(self, tmp_path, songs):
        import scipy.io.wavfile
        entry = songs[0]
        silent = tmp_path / "silent.wav"
        scipy.io.wavfile.write(silent, 44100, np.zeros(44100 * 12, dtype=np.float32))
        from dataclasses import replace
        mean, std = compute_input_stats([replace(entry, mixture=str(silent))], 512, 128, 2, 1.0)
        assert not mean.any() and np.all(std == 1e-6)

    def test_empty(self):
        with pytest.raises(DataError):
            compute_input_stats([])


class TestTraining:
    def test_loss_decreases(self, songs):
        cfg = fast_cfg(variant="score_only", epochs=5, steps_per_epoch=6, lr=3e-3, seed=1)
        ckpt = train(songs, cfg)
        losses = ckpt.metadata["epoch_losses"]
        assert len(losses) == 5
        assert losses[-1] < losses[0]

    def test_baseline_without_scores(self, songs):
        from dataclasses import replace
        bare = [replace(e, notes=None) for e in songs]
        ckpt = train(bare, fast_cfg(variant="baseline", epochs=1, steps_per_epoch=1))
        assert ckpt.metadata["steps_run"] == 1

    def test_score_variant_needs_csv(self, songs):
        from dataclasses import replace
        bare = [replace(e, notes=None) for e in songs]
        with pytest.raises(DataError, match="note CSV"):
            train(bare, fast_cfg(variant="score_informed", epochs=1, steps_per_epoch=1))

    def test_empty_dataset(self):
        with pytest.raises(DataError):
            train([], fast_cfg())

    def test_log_records(self, songs):
        records = []
        train(songs, fast_cfg(epochs=2, steps_per_epoch=2), log_fn=records.append)
        assert [r["step"] for r in records] == [1, 2, 3, 4]
        assert [r["epoch"] for r in records] == [1, 1, 2, 2]
        assert all(len(r["subsets"]) == 6 for r in records)
        json.dumps(records)

    def test_reproducible(self, songs):
        cfg = fast_cfg(variant="score_informed", epochs=1, steps_per_epoch=3, seed=7)
        a, b = [], []
        ca = train(songs, cfg, log_fn=a.append)
        cb = train(songs, cfg, log_fn=b.append)
        assert [r["total"] for r in a] == [r["total"] for r in b]
        assert checkpoint_bytes(ca) == checkpoint_bytes(cb)

    def test_seed_changes_run(self, songs):
        a = train(songs, fast_cfg(epochs=1, steps_per_epoch=1, seed=1))
        b = train(songs, fast_cfg(epochs=1, steps_per_epoch=1, seed=2))
        assert checkpoint_bytes(a) != checkpoint_bytes(b)

    def test_time_budget(self, songs):
        ckpt = train(songs, fast_cfg(epochs=50, steps_per_epoch=10), time_budget_sec=0.0)
        assert ckpt.metadata["steps_run"] == 1

    def test_family_training_reads_only_family_stems(self, songs):
        cache = SongCache()
        opened = []
        original = cache.audio

        def spy(path):
            opened.append(path)
            return original(path)

        cache.audio = spy
        rng = np.random.default_rng(0)
        for _ in range(4):
            sample_segment(songs[0], 1.0, rng, ["toy_mid"], 512, 128, True, cache)
        stems = songs[0].stems
        assert stems["toy_mid"] in opened
        assert stems["toy_low"] not in opened and stems["toy_high"] not in opened

    def test_single_segment_overfit(self, songs):
        # floor: magnitude-ratio oracle masks, which zero every singleton spectral term
        seg = sample_segment(songs[0], 1.0, np.random.default_rng(3), INST, 512, 128)
        spec = dsp.stft(seg.mix, 512, 128)
        mag = np.abs(spec.data)
        oracle = {k: np.abs(dsp.stft(seg.stems[k], 512, 128).data) / np.maximum(mag, 1e-12) for k in INST}
        refs = {k: seg.stems[k].samples for k in INST}
        floor = combination_loss(oracle, spec, seg.mix.samples, refs).total

        cfg = fast_cfg(variant="score_informed", lr=1e-2, seed=0)
        model = build(cfg.model_config(), seed=0)
        model.set_input_stats(mag.mean(axis=0), mag.std(axis=0))
        opt = Adam([p for _, p in model.named_params()], lr=1e-2)
        for _ in range(200):
            loss, _, _ = train_step(model, opt, [seg, seg], cfg, np.float64)
        assert loss <= floor + 0.05 * abs(floor)


class TestCheckpoint:
    @pytest.fixture
    def ckpt(self):
        cfg = ModelConfig("score_informed", ["violin", "cello"], n_bins=9, hidden_size=4,
                          encoder_out=4, score_encoder_hidden=4, score_feature_size=4)
        model = build(cfg, seed=3)
        rng = np.random.default_rng(0)
        model.set_input_stats(rng.random(9), 1 + rng.random(9))
        model.forward(rng.random((2, 6, 9)), (rng.random((2, 2, 6, 128)) < 0.1).astype(float))
        model.eval()
        return Checkpoint(model, {"note": "unit", "epoch": 3})

    def test_byte_identical_round_trip(self, ckpt, tmp_path):
        save(ckpt, tmp_path / "a.ckpt")
        again = load(tmp_path / "a.ckpt")
        save(again, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        assert again.metadata == {"note": "unit", "epoch": 3}

    def test_forward_bit_exact(self, ckpt):
        rng = np.random.default_rng(5)
        mag, rolls = rng.random((7, 9)), (rng.random((2, 7, 128)) < 0.1).astype(float)
        before = ckpt.model.forward(mag, rolls)
        after = checkpoint_from_bytes(checkpoint_bytes(ckpt)).model.forward(mag, rolls)
        assert np.array_equal(before, after)

    def test_layout(self, ckpt):
        blob = checkpoint_bytes(ckpt)
        assert blob[:4] == b"SSEP"
        assert int.from_bytes(blob[4:8], "little") == 1
        hlen = int.from_bytes(blob[8:16], "little")
        header = json.loads(blob[16 : 16 + hlen])
        names = {t["name"] for t in header["tensors"]}
        assert "buffer/input/mean" in names and "param/lstm/l0/w_in" in names
        end = max(t["offset"] + t["nbytes"] for t in header["tensors"])
        assert len(blob) == 16 + hlen + end

    def test_truncated(self, ckpt):
        blob = checkpoint_bytes(ckpt)
        for cut in (3, 12, 40, len(blob) - 1):
            with pytest.raises(CheckpointError):
                checkpoint_from_bytes(blob[:cut])

    def test_version_mismatch(self, ckpt):
        blob = bytearray(checkpoint_bytes(ckpt))
        blob[4:8] = (2).to_bytes(4, "little")
        with pytest.raises(CheckpointError, match="version"):
            checkpoint_from_bytes(bytes(blob))

    def test_shape_mismatch(self, ckpt):
        blob = checkpoint_bytes(ckpt)
        hlen = int.from_bytes(blob[8:16], "little")
        header = json.loads(blob[16 : 16 + hlen])
        header["tensors"][0]["shape"] = [1] + header["tensors"][0]["shape"]
        hbytes = json.dumps(header).encode()
        forged = blob[:8] + len(hbytes).to_bytes(8, "little") + hbytes + blob[16 + hlen :]
        with pytest.raises(CheckpointError):
            checkpoint_from_bytes(forged)

    def test_not_a_checkpoint(self, tmp_path):
        (tmp_path / "x").write_bytes(b"RIFF....")
        with pytest.raises(CheckpointError):
            load(tmp_path / "x")
        with pytest.raises(CheckpointError):
            load(tmp_path / "missing")
