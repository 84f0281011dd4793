"""Deterministic multi-domain frame sequences with class-dependent domain shift.

A frame of class s in domain u is ``mu_s + gamma_s * delta_u + noise``.
Class labels come in contiguous runs of geometric length, so a local
attention window sees frames with differing domain susceptibility.  Class 0
is the silence class and never carries domain information.

Seed stream: the class prototypes and domain offsets are drawn from
``SeedSequence([seed, 0])``; sequence ``i`` (global index over train then
test) is drawn from ``SeedSequence([seed, i + 1])``.  Sequences can therefore
be generated independently and in any order.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as cfgio
from .binio import ByteReader
from .errors import ConfigError, FormatError

DATA_MAGIC = b"AADD"
DATA_VERSION = 1
SILENCE = 0


@dataclass(frozen=True)
class DatasetConfig:
    r_x: int = 20
    n_classes: int = 10
    n_domains: int = 4
    train_per_domain: int = 200
    test_per_domain: int = 100
    T: int = 50
    segment_mean: float = 5.0
    noise: float = 1.5
    shift: float = 3.0
    class_spread: float = 1.5
    susceptibility: tuple[float, ...] = ()
    seed: int = 0

    def __post_init__(self):
        if self.r_x < 1 or self.T < 1:
            raise ConfigError(f"r_x and T must be positive, got r_x={self.r_x}, T={self.T}")
        if self.n_classes < 2:
            raise ConfigError(f"need at least 2 classes (one is silence), got {self.n_classes}")
        if self.n_domains < 2:
            raise ConfigError(f"need at least 2 domains for a domain probe, got {self.n_domains}")
        if self.train_per_domain < 1 or self.test_per_domain < 1:
            raise ConfigError("train_per_domain and test_per_domain must be positive")
        if self.segment_mean < 1.0:
            raise ConfigError(f"segment_mean must be >= 1, got {self.segment_mean}")
        if self.noise < 0 or self.shift < 0:
            raise ConfigError("noise and shift must be non-negative")
        if self.susceptibility:
            gamma = self.susceptibility
            if len(gamma) != self.n_classes:
                raise ConfigError(f"susceptibility has {len(gamma)} entries for {self.n_classes} classes")
            if any(not 0.0 <= x <= 1.0 for x in gamma):
                raise ConfigError("susceptibility entries must lie in [0, 1]")
            if gamma[SILENCE] != 0.0:
                raise ConfigError("the silence class must have susceptibility 0")

    @property
    def gamma(self) -> np.ndarray:
        if self.susceptibility:
            return np.asarray(self.susceptibility, dtype=np.float64)
        return np.linspace(0.0, 1.0, self.n_classes)


@dataclass
class SequenceSample:
    X: np.ndarray
    Y: np.ndarray
    D: np.ndarray

    @property
    def T(self) -> int:
        return self.X.shape[1]

    @property
    def domain(self) -> int:
        return int(self.D[0])


@dataclass
class Dataset:
    config: DatasetConfig
    train: list[SequenceSample] = field(default_factory=list)
    test: list[SequenceSample] = field(default_factory=list)

    def split(self, name: str) -> list[SequenceSample]:
        if name not in ("train", "test"):
            raise ConfigError(f"unknown split {name!r}")
        return getattr(self, name)


def _prototypes(config: DatasetConfig):
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
    means = config.class_spread * rng.standard_normal((config.r_x, config.n_classes))
    raw = rng.standard_normal((config.r_x, config.n_domains))
    raw -= raw.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(raw, axis=0, keepdims=True)
    offsets = config.shift * raw / np.where(norms > 0, norms, 1.0)
    return means, offsets


def class_runs(rng: np.random.Generator, T: int, n_classes: int, mean_len: float) -> np.ndarray:
    labels = np.empty(T, dtype=np.int64)
    t = 0
    prev = -1
    while t < T:
        if prev < 0:
            c = int(rng.integers(n_classes))
        else:
            # adjacent runs always differ
            c = int(rng.integers(n_classes - 1))
            c += c >= prev
        n = int(rng.geometric(1.0 / mean_len))
        labels[t:t + n] = c
        t += n
        prev = c
    return labels


def generate_sequence(config: DatasetConfig, index: int, domain: int,
                      means: np.ndarray, offsets: np.ndarray) -> SequenceSample:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, index + 1]))
    Y = class_runs(rng, config.T, config.n_classes, config.segment_mean)
    gamma = config.gamma
    noise = config.noise * rng.standard_normal((config.r_x, config.T))
    X = means[:, Y] + gamma[Y][None, :] * offsets[:, [domain]] + noise
    return SequenceSample(X, Y, np.full(config.T, domain, dtype=np.int64))


def generate(config: DatasetConfig) -> Dataset:
    means, offsets = _prototypes(config)
    ds = Dataset(config)
    i = 0
    for split, per_domain in (("train", config.train_per_domain), ("test", config.test_per_domain)):
        out = ds.split(split)
        for k in range(per_domain * config.n_domains):
            out.append(generate_sequence(config, i, k % config.n_domains, means, offsets))
            i += 1
    return ds


def dataset_to_bytes(ds: Dataset) -> bytes:
    cfg_bytes = cfgio.to_text(ds.config).encode()
    parts = [DATA_MAGIC, struct.pack("<I", DATA_VERSION),
             struct.pack("<Q", len(cfg_bytes)), cfg_bytes,
             struct.pack("<II", len(ds.train), len(ds.test))]
    for s in ds.train + ds.test:
        parts.append(struct.pack("<HI", s.domain, s.T))
        parts.append(np.asarray(s.Y, dtype="<u2").tobytes())
        parts.append(np.ascontiguousarray(s.X, dtype="<f8").tobytes())
    return b"".join(parts)


def dataset_save(ds: Dataset, path) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))


def dataset_from_bytes(buf: bytes) -> Dataset:
    r = ByteReader(buf)
    if r.take(4, "magic") != DATA_MAGIC:
        raise FormatError("not a dataset file (bad magic)", 0)
    (version,) = r.unpack("<I", "version")
    if version != DATA_VERSION:
        raise FormatError(f"unsupported dataset version {version}", 4)
    (n_cfg,) = r.unpack("<Q", "config length")
    at = r.pos
    try:
        config = cfgio.from_text(DatasetConfig, r.take(n_cfg, "config block").decode())
    except (ConfigError, UnicodeDecodeError) as exc:
        raise FormatError(f"invalid embedded config: {exc}", at) from None
    n_train, n_test = r.unpack("<II", "split sizes")
    ds = Dataset(config)
    for i in range(n_train + n_test):
        start = r.pos
        domain, T = r.unpack("<HI", f"sequence {i} header")
        if domain >= config.n_domains:
            raise FormatError(f"sequence {i}: domain {domain} >= {config.n_domains}", start)
        Y = np.frombuffer(r.take(2 * T, f"sequence {i} labels"), dtype="<u2").astype(np.int64)
        if T and Y.max() >= config.n_classes:
            raise FormatError(f"sequence {i}: label {Y.max()} >= {config.n_classes}", start)
        X = np.frombuffer(r.take(8 * config.r_x * T, f"sequence {i} frames"), dtype="<f8")
        X = X.reshape(config.r_x, T).astype(np.float64)
        (ds.train if i < n_train else ds.test).append(
            SequenceSample(X, Y, np.full(T, domain, dtype=np.int64)))
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after last sequence", r.pos)
    return ds


def dataset_load(path) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes())
