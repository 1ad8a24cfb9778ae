"""Synthetic periodic sequences: x = K * p(omega t) + N * s(t) + noise.

Shapes: samples are (L, D) = (time steps, channels).
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

WAVEFORMS = ("cosine", "square", "triangle")
SEMANTIC_KINDS = ("none", "linear_drift", "random_walk")

PSEQ_MAGIC = b"PSEQ1"
_HEADER = struct.Struct("<5sQQdddddq16s16s")


class ConfigError(ValueError):
    """Rejected sequence configuration."""


@dataclass(frozen=True)
class SequenceConfig:
    period_T: float
    dt: float
    length: int
    channels: int = 1
    amplitude_K: float = 1.0
    semantic_amp_N: float = 0.0
    waveform: str = "cosine"
    semantic_kind: str = "none"
    drift_slope: float = 0.5
    noise_sigma: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if not self.dt > 0:
            raise ConfigError(f"dt must be positive, got {self.dt}")
        if not self.period_T > 0:
            raise ConfigError(f"period_T must be positive, got {self.period_T}")
        if self.length < 1:
            raise ConfigError(f"length must be >= 1, got {self.length}")
        if self.channels < 1:
            raise ConfigError(f"channels must be >= 1, got {self.channels}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.waveform not in WAVEFORMS:
            raise ConfigError(f"unknown waveform {self.waveform!r}")
        if self.semantic_kind not in SEMANTIC_KINDS:
            raise ConfigError(f"unknown semantic_kind {self.semantic_kind!r}")


@dataclass
class PeriodicSequence:
    samples: np.ndarray
    period_T: float
    omega: float
    amplitude_K: float
    semantic_amp_N: float
    dt: float
    waveform: str
    semantic_kind: str
    noise_sigma: float
    seed: int

    @property
    def length(self) -> int:
        return self.samples.shape[0]

    @property
    def channels(self) -> int:
        return self.samples.shape[1]


@dataclass(frozen=True)
class GroundTruth:
    repetition_count: int
    rate_per_minute: float


def periodic_wave(phase: np.ndarray, waveform: str) -> np.ndarray:
    """Unit-amplitude periodic function with p(0) = 1 and period 2*pi."""
    if waveform == "cosine":
        return np.cos(phase)
    frac = np.mod(phase / (2 * math.pi), 1.0)
    if waveform == "square":
        # snap to a 1e-9 cycle grid so samples landing on an edge do not flip
        # sides from rounding noise between periods
        frac = np.mod(np.round(frac, 9), 1.0)
        # high on the first and last quarter so that p(0) = 1
        return np.where((frac < 0.25) | (frac >= 0.75), 1.0, -1.0)
    if waveform == "triangle":
        return 1.0 - 4.0 * np.minimum(frac, 1.0 - frac)
    raise ConfigError(f"unknown waveform {waveform!r}")


def channel_phases(seed: int, channels: int) -> np.ndarray:
    """Channel 0 is fixed at phase 0; the rest are seeded uniform phases."""
    rng = np.random.default_rng([seed, 1])
    phases = rng.uniform(0.0, 2 * math.pi, size=channels)
    phases[0] = 0.0
    return phases


def _semantic(t: np.ndarray, cfg: SequenceConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.semantic_kind == "none":
        return np.zeros((t.size, cfg.channels))
    if cfg.semantic_kind == "linear_drift":
        return np.repeat((cfg.drift_slope * t)[:, None], cfg.channels, axis=1)
    # bounded random walk: clipped cumulative sum of unit-variance steps
    steps = rng.normal(0.0, math.sqrt(cfg.dt), size=(t.size, cfg.channels))
    steps[0] = 0.0
    return np.clip(np.cumsum(steps, axis=0), -1.0, 1.0)


def generate_sequence(cfg: SequenceConfig) -> PeriodicSequence:
    cfg.validate()
    omega = 2 * math.pi / cfg.period_T
    t = np.arange(cfg.length) * cfg.dt
    phases = channel_phases(cfg.seed, cfg.channels)
    periodic = periodic_wave(omega * t[:, None] + phases[None, :], cfg.waveform)
    samples = cfg.amplitude_K * periodic
    rng = np.random.default_rng([cfg.seed, 2])
    if cfg.semantic_amp_N != 0.0:
        samples = samples + cfg.semantic_amp_N * _semantic(t, cfg, rng)
    if cfg.noise_sigma > 0:
        samples = samples + rng.normal(0.0, cfg.noise_sigma, size=samples.shape)
    return PeriodicSequence(
        samples=samples,
        period_T=cfg.period_T,
        omega=omega,
        amplitude_K=cfg.amplitude_K,
        semantic_amp_N=cfg.semantic_amp_N,
        dt=cfg.dt,
        waveform=cfg.waveform,
        semantic_kind=cfg.semantic_kind,
        noise_sigma=cfg.noise_sigma,
        seed=cfg.seed,
    )


def derive_ground_truth(seq: PeriodicSequence) -> GroundTruth:
    # small tolerance keeps exact multiples like 1800 * (1/30) / 0.8 from rounding down
    elapsed = seq.length * seq.dt / seq.period_T
    count = int(math.floor(elapsed + 1e-9))
    return GroundTruth(repetition_count=count, rate_per_minute=60.0 / seq.period_T)


def to_frame_features(seq: PeriodicSequence, feat_dim: int, identity: bool = False) -> np.ndarray:
    """Expand each time step into a feat_dim descriptor.

    The first min(D, feat_dim) columns are the raw channel samples; the rest
    are a fixed random projection of the samples seeded by ``seq.seed``.
    """
    if feat_dim <= 0:
        raise ConfigError(f"feat_dim must be positive, got {feat_dim}")
    x = seq.samples
    n_raw = min(x.shape[1], feat_dim)
    if identity:
        out = np.zeros((x.shape[0], feat_dim))
        out[:, :n_raw] = x[:, :n_raw]
        return out
    rng = np.random.default_rng([seq.seed, 3])
    proj = rng.normal(0.0, 1.0 / math.sqrt(x.shape[1]), size=(x.shape[1], feat_dim - n_raw))
    return np.concatenate([x[:, :n_raw], x @ proj], axis=1)


_WAVE_CODES = {w: i for i, w in enumerate(WAVEFORMS)}
_SEM_CODES = {s: i for i, s in enumerate(SEMANTIC_KINDS)}


def _pad16(s: str) -> bytes:
    return s.encode("ascii").ljust(16, b"\0")


def write_pseq(seq: PeriodicSequence, path: str | Path) -> None:
    """Columnar binary: header then D columns of L little-endian float64."""
    header = _HEADER.pack(
        PSEQ_MAGIC,
        seq.length,
        seq.channels,
        seq.dt,
        seq.period_T,
        seq.amplitude_K,
        seq.semantic_amp_N,
        seq.noise_sigma,
        seq.seed,
        _pad16(seq.waveform),
        _pad16(seq.semantic_kind),
    )
    cols = np.ascontiguousarray(seq.samples.T, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(cols.tobytes())


def read_pseq(path: str | Path) -> PeriodicSequence:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size or raw[:5] != PSEQ_MAGIC:
        raise ValueError(f"{path}: not a PSEQ1 file")
    (_, L, D, dt, T, K, N, sigma, seed, wave, sem) = _HEADER.unpack_from(raw)
    body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    if body.size != L * D:
        raise ValueError(f"{path}: expected {L * D} samples, found {body.size}")
    return PeriodicSequence(
        samples=body.reshape(D, L).T.astype(np.float64),
        period_T=T,
        omega=2 * math.pi / T,
        amplitude_K=K,
        semantic_amp_N=N,
        dt=dt,
        waveform=wave.rstrip(b"\0").decode("ascii"),
        semantic_kind=sem.rstrip(b"\0").decode("ascii"),
        noise_sigma=sigma,
        seed=seed,
    )


def write_csv(seq: PeriodicSequence, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"ch{d}" for d in range(seq.channels)])
        for i, row in enumerate(seq.samples):
            w.writerow([repr(i * seq.dt)] + [repr(float(v)) for v in row])
