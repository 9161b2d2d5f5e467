from dataclasses import replace

import numpy as np
import pytest
import torch

from diffsep import dsp
from diffsep.data import AugmentConfig, ExcerptPair, sample_excerpt, synth_toy_dataset
from diffsep.model import TINY_CONFIG
from diffsep import train as T
from diffsep.train import PAPER_PROFILE, TrainConfig

MICRO = TrainConfig(
    lr_init=1e-3,
    warmup_steps=2,
    total_steps=6,
    batch_size=2,
    excerpt_seconds=0.1,
    checkpoint_every=3,
)


@pytest.fixture(scope="module")
def tracks():
    return synth_toy_dataset(2, 1.0, seed=5)


def test_learning_rate_schedule():
    cfg = PAPER_PROFILE
    assert T.lr_schedule(0, cfg) == 0.0
    assert T.lr_schedule(2000, cfg) == pytest.approx(5e-5)
    assert T.lr_schedule(4000, cfg) == pytest.approx(1e-4)
    mid = 4000 + (cfg.total_steps - 4000) // 2
    assert T.lr_schedule(mid, cfg) == pytest.approx(5e-5)
    assert T.lr_schedule(cfg.total_steps, cfg) == pytest.approx(0.0, abs=1e-20)


def test_lr_is_monotone_after_warmup():
    lrs = [T.lr_schedule(s, MICRO) for s in range(MICRO.total_steps + 1)]
    peak = int(np.argmax(lrs))
    assert peak == MICRO.warmup_steps
    assert all(a >= b for a, b in zip(lrs[peak:], lrs[peak + 1 :]))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(warmup_steps=10, total_steps=10)
    with pytest.raises(ValueError):
        TrainConfig(ema_decay=1.0)
    with pytest.raises(ValueError, match="valid"):
        TrainConfig.from_dict({"learning_rate": 1.0})
    assert TrainConfig.from_dict(MICRO.to_dict()) == MICRO


def test_seed_streams_are_distinct_and_stable():
    a, b = T.seed_streams(0), T.seed_streams(0)
    assert a == b
    assert len(set(a.values())) == len(a)
    assert T.seed_streams(1) != a


def test_ema_update():
    ema, net = torch.nn.Linear(2, 1), torch.nn.Linear(2, 1)
    torch.nn.init.zeros_(ema.weight)
    torch.nn.init.ones_(net.weight)
    T.ema_update(ema, net, 0.9)
    torch.testing.assert_close(ema.weight, torch.full((1, 2), 0.1))


def test_prepare_pair_uses_mixture_peak():
    rng = np.random.default_rng(0)
    target = dsp.StereoWaveform(rng.standard_normal((2, 4410)) * 0.1)
    mixture = dsp.StereoWaveform(target.samples * 4)
    tgt, cond = T.prepare_pair(ExcerptPair(mixture, target, {}))
    peak = np.max(np.abs(mixture.samples))
    np.testing.assert_allclose(tgt, dsp.encode(dsp.StereoWaveform(target.samples / peak)).values, rtol=1e-6, atol=1e-7)
    assert tgt.shape == cond.shape == (16, 256, 5)


def test_non_finite_loss_is_reported(tracks):
    state = T.init_state(TINY_CONFIG, MICRO)
    target = torch.full((1, 16, 8, 2), float("nan"))
    with pytest.raises(T.NonFiniteLossError):
        T.train_step(state, (target, torch.zeros_like(target)))
    assert state.step == 0


def test_training_is_deterministic(tracks):
    cfg = replace(MICRO, total_steps=100, warmup_steps=10, excerpt_seconds=0.05)
    a = T.train(tracks, TINY_CONFIG, cfg)
    b = T.train(tracks, TINY_CONFIG, cfg)
    assert len(a.losses) == 100
    assert a.losses == b.losses


def test_checkpoint_round_trip_is_byte_identical(tracks, tmp_path):
    state = T.train(tracks, TINY_CONFIG, MICRO, checkpoint_path=tmp_path / "a.ckpt")
    again = T.load_checkpoint(tmp_path / "a.ckpt")
    T.save_checkpoint(again, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert again.step == state.step == MICRO.total_steps
    assert again.losses == state.losses


def test_resume_from_periodic_checkpoint_is_bit_exact(tracks, tmp_path):
    ref = T.train(tracks, TINY_CONFIG, MICRO)
    # the periodic checkpoint after step 3 is overwritten at step 6, so stop a copy at 3
    state = T.init_state(TINY_CONFIG, MICRO)
    for _ in range(3):
        T.train_step(state, [T.sample_excerpt(tracks, MICRO.excerpt_seconds, T.AugmentConfig(), state.data_rng)
                             for _ in range(MICRO.batch_size)])
    T.save_checkpoint(state, tmp_path / "s3.ckpt")
    resumed = T.train(tracks, TINY_CONFIG, MICRO, state=T.load_checkpoint(tmp_path / "s3.ckpt"))
    assert resumed.losses == ref.losses
    for p, q in zip(resumed.net.parameters(), ref.net.parameters()):
        assert torch.equal(p, q)
    for p, q in zip(resumed.ema.parameters(), ref.ema.parameters()):
        assert torch.equal(p, q)


def test_corrupt_checkpoints_are_rejected(tracks, tmp_path):
    state = T.init_state(TINY_CONFIG, MICRO)
    path = tmp_path / "c.ckpt"
    T.save_checkpoint(state, path)
    blob = path.read_bytes()

    (tmp_path / "short.ckpt").write_bytes(blob[:-10])
    with pytest.raises(T.CheckpointError, match="payload"):
        T.load_checkpoint(tmp_path / "short.ckpt")
    (tmp_path / "head.ckpt").write_bytes(blob[:40])
    with pytest.raises(T.CheckpointError):
        T.load_checkpoint(tmp_path / "head.ckpt")
    flipped = bytearray(blob)
    flipped[-5] ^= 0xFF
    (tmp_path / "flip.ckpt").write_bytes(bytes(flipped))
    with pytest.raises(T.CheckpointError, match="checksum"):
        T.load_checkpoint(tmp_path / "flip.ckpt")
    (tmp_path / "magic.ckpt").write_bytes(b"NOTDIFF!" + blob[8:])
    with pytest.raises(T.CheckpointError, match="not a diffsep"):
        T.load_checkpoint(tmp_path / "magic.ckpt")
    bumped = bytearray(blob)
    bumped[8] = 99
    (tmp_path / "ver.ckpt").write_bytes(bytes(bumped))
    with pytest.raises(T.CheckpointError, match="schema version"):
        T.load_checkpoint(tmp_path / "ver.ckpt")


def test_denoiser_weights_default_to_ema(tracks, tmp_path):
    state = T.train(tracks, TINY_CONFIG, MICRO, checkpoint_path=tmp_path / "m.ckpt")
    ema = T.load_denoiser_net(tmp_path / "m.ckpt")
    raw = T.load_denoiser_net(tmp_path / "m.ckpt", use_ema=False)
    for p, q in zip(ema.parameters(), state.ema.parameters()):
        assert torch.equal(p, q)
    for p, q in zip(raw.parameters(), state.net.parameters()):
        assert torch.equal(p, q)


def test_sigma_data_estimate_is_the_target_rms(tracks):
    est = T.estimate_sigma_data(tracks, 0.1, n_excerpts=8, seed=3)
    assert est == T.estimate_sigma_data(tracks, 0.1, n_excerpts=8, seed=3)
    rng = np.random.default_rng(3)
    targets = [T.prepare_pair(sample_excerpt(tracks, 0.1, AugmentConfig(), rng))[0] for _ in range(8)]
    assert est == pytest.approx(np.sqrt(np.mean(np.square(np.stack(targets), dtype=np.float64))))
    # toy vocals sit far below the default data scale
    assert 0 < est < 0.2


def test_sigma_data_estimate_rejects_silence():
    silent = synth_toy_dataset(1, 1.0, seed=5)
    for stem in silent[0].stems.values():
        stem.samples[:] = 0
    with pytest.raises(ValueError, match="silent"):
        T.estimate_sigma_data(silent, 0.1, n_excerpts=2)


def test_loss_uses_the_model_sigma_data(tracks):
    pair = sample_excerpt(tracks, 0.1, AugmentConfig.none(), np.random.default_rng(0))
    losses = []
    for sd in (0.5, 0.05):
        state = T.init_state(replace(TINY_CONFIG, sigma_data=sd), MICRO)
        losses.append(T.train_step(state, [pair]))
    assert losses[0] != losses[1]
