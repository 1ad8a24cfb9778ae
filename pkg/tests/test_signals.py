import math

import numpy as np
import pytest

from periodllm.signals import (
    ConfigError,
    GroundTruth,
    PeriodicSequence,
    SequenceConfig,
    channel_phases,
    derive_ground_truth,
    generate_sequence,
    read_pseq,
    to_frame_features,
    write_csv,
    write_pseq,
)


def gen(**kw):
    base = dict(period_T=1.0, dt=0.25, length=8)
    base.update(kw)
    return generate_sequence(SequenceConfig(**base))


def test_dt_equal_period_gives_constant_K():
    seq = gen(amplitude_K=1.0, dt=1.0, length=5)
    assert np.array_equal(seq.samples[:, 0], np.ones(5))


@pytest.mark.parametrize("waveform", ["cosine", "square", "triangle"])
def test_dt_equal_period_every_waveform(waveform):
    seq = gen(amplitude_K=2.5, period_T=0.7, dt=0.7, length=9, waveform=waveform)
    np.testing.assert_allclose(seq.samples[:, 0], 2.5, atol=1e-9)


def test_quarter_period_cosine():
    seq = gen(amplitude_K=2.0, period_T=1.0, dt=0.25, length=4)
    np.testing.assert_allclose(seq.samples[:, 0], [2, 0, -2, 0], atol=1e-12)


def _oracle_drift(K, N, T, dt, L, slope):
    # independent pointwise evaluation of K cos(2 pi t / T) + N * slope * t
    out = []
    for i in range(L):
        t = i * dt
        out.append(K * math.cos(2 * math.pi * t / T) + N * slope * t)
    return np.array(out)


def test_linear_drift_matches_direct_oracle():
    T = 1.6
    seq = gen(amplitude_K=0.1, semantic_amp_N=1.0, semantic_kind="linear_drift", drift_slope=0.5,
              period_T=T, dt=T / 8, length=16)
    np.testing.assert_allclose(seq.samples[:, 0], _oracle_drift(0.1, 1.0, T, T / 8, 16, 0.5), atol=1e-12)


def test_omega_and_metadata():
    seq = gen(period_T=0.8)
    assert abs(seq.omega * seq.period_T - 2 * math.pi) <= 1e-9 * 2 * math.pi
    assert seq.length == 8 and seq.channels == 1


@pytest.mark.parametrize("bad", [dict(dt=0.0), dict(period_T=-1.0), dict(length=0), dict(noise_sigma=-0.1),
                                 dict(channels=0), dict(waveform="saw"), dict(semantic_kind="chirp")])
def test_invalid_config_rejected(bad):
    with pytest.raises(ConfigError):
        gen(**bad)


def test_channel_phases_first_is_zero_and_seeded():
    p = channel_phases(5, 4)
    assert p[0] == 0.0
    assert np.array_equal(p, channel_phases(5, 4))
    assert not np.array_equal(p, channel_phases(6, 4))


def test_determinism_with_noise_and_walk():
    kw = dict(channels=3, semantic_amp_N=0.5, semantic_kind="random_walk", noise_sigma=0.2, seed=11)
    assert np.array_equal(gen(**kw).samples, gen(**kw).samples)
    assert not np.array_equal(gen(**kw).samples, gen(**{**kw, "seed": 12}).samples)


@pytest.mark.parametrize(
    "L, dt, T, count, rate",
    [(40, 0.25, 2.0, 5, 30.0), (7, 1.0, 2.0, 3, 30.0), (1800, 1 / 30, 0.8, 75, 75.0)],
)
def test_ground_truth_examples(L, dt, T, count, rate):
    gt = derive_ground_truth(gen(length=L, dt=dt, period_T=T))
    assert gt == GroundTruth(count, pytest.approx(rate, rel=1e-12))
    assert abs(gt.rate_per_minute * T - 60) <= 1e-9 * 60


def test_frame_features_identity_and_shape():
    seq = gen(length=4)
    f1 = to_frame_features(seq, 1, identity=True)
    assert np.array_equal(f1[:, 0], seq.samples[:, 0])
    f8 = to_frame_features(seq, 8)
    assert f8.shape == (4, 8)
    assert np.array_equal(f8[:, 0], seq.samples[:, 0])
    assert np.array_equal(f8, to_frame_features(seq, 8))
    with pytest.raises(ConfigError):
        to_frame_features(seq, 0)


def test_pseq_round_trip(tmp_path):
    seq = gen(channels=3, semantic_amp_N=0.3, semantic_kind="random_walk", noise_sigma=0.1, seed=4,
              waveform="triangle")
    write_pseq(seq, tmp_path / "a.pseq")
    raw = (tmp_path / "a.pseq").read_bytes()
    assert raw[:5] == b"PSEQ1"
    back = read_pseq(tmp_path / "a.pseq")
    assert np.array_equal(back.samples, seq.samples)
    for name in ("period_T", "omega", "amplitude_K", "semantic_amp_N", "dt", "waveform", "semantic_kind",
                 "noise_sigma", "seed"):
        assert getattr(back, name) == getattr(seq, name)


def test_pseq_bad_magic(tmp_path):
    p = tmp_path / "x.pseq"
    p.write_bytes(b"NOPE!" + bytes(100))
    with pytest.raises(ValueError):
        read_pseq(p)


def test_csv_export(tmp_path):
    seq = gen(channels=2)
    write_csv(seq, tmp_path / "a.csv")
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert len(lines) == 1 + seq.length
    assert isinstance(seq, PeriodicSequence)
