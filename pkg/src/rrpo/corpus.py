"""Synthetic emotional-feature corpora with a planted shortcut channel.

Dimensions ``0..D-2`` carry the genuine class signal: a class-keyed
sinusoid across feature dimensions plus Gaussian noise. Dimension ``D-1``
is the shortcut channel: unit spikes whose count per 16-frame block is
``class + 1`` when the per-utterance correlation coin lands heads, and the
count of a random class otherwise.

Corpus files are little-endian::

    b"RRPO-CORP\\0"  version:u16  count:u32  D:u32
    per record:  L:u32  label:u8  frames:f64*(L*D)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .rng import Rng, stream_id

MAGIC = b"RRPO-CORP\0"
VERSION = 1
BLOCK = 16
SIGNAL_AMP = 0.3

DOMAIN_DEFAULTS = {
    "pretrain": dict(shortcut_correlation=0.95, noise_scale=1.0, scale_jitter=0.0, signal_scale=0.1),
    "finetune": dict(shortcut_correlation=0.0, noise_scale=1.0, scale_jitter=0.0),
    "eval-shifted": dict(shortcut_correlation=0.0, noise_scale=2.0, scale_jitter=0.5),
}


class CorpusFormatError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusSpec:
    n_samples: int
    domain: str = "finetune"
    seed: int = 0
    K: int = 5
    L_min: int = 16
    L_max: int = 48
    D: int = 16
    shortcut_correlation: float = 0.0
    noise_scale: float = 1.0
    scale_jitter: float = 0.0
    signal_scale: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.shortcut_correlation <= 1.0:
            raise ValueError("shortcut_correlation must lie in [0, 1]")
        if self.L_min < 2 or self.L_max < self.L_min:
            raise ValueError(f"bad length range [{self.L_min}, {self.L_max}]")
        if self.K > 255:
            raise ValueError("labels are stored as u8")


def domain_spec(domain: str, n_samples: int, seed: int = 0, **overrides) -> CorpusSpec:
    if domain not in DOMAIN_DEFAULTS:
        raise ValueError(f"unknown domain {domain!r}")
    kw = dict(DOMAIN_DEFAULTS[domain])
    kw.update(overrides)
    return CorpusSpec(n_samples=n_samples, domain=domain, seed=seed, **kw)


def class_pattern(cls: int, K: int, D: int) -> np.ndarray:
    """Mean frame of class ``cls`` over the genuine dimensions."""
    d = np.arange(D - 1)
    omega = 0.5 + 0.3 * cls
    phase = 2.0 * np.pi * cls / K
    return SIGNAL_AMP * np.sin(omega * d + phase)


def spike_track(L: int, count: int, rng: Rng) -> np.ndarray:
    """``count`` spikes at random offsets in each full block of 16 frames.

    A trailing partial block of ``m`` frames gets ``round(count * m / 16)``
    spikes, so the overall rate stays within half a spike of ``count / 16``.
    """
    track = np.zeros(L)
    for start in range(0, L, BLOCK):
        m = min(BLOCK, L - start)
        n = count if m == BLOCK else int(np.floor(count * m / BLOCK + 0.5))
        pos = rng.permutation(m)[:n] + start
        track[pos] = 1.0
    return track


def gen_utterance(cls: int, spec: CorpusSpec, index: int):
    if not 0 <= index < spec.n_samples:
        raise IndexError(f"index {index} outside corpus of {spec.n_samples}")
    rng = Rng(spec.seed, stream_id("utterance", spec.domain, index))
    L = int(rng.integers(spec.L_min, spec.L_max))
    D = spec.D
    genuine = spec.signal_scale * class_pattern(cls, spec.K, D)[None, :] + spec.noise_scale * rng.normal((L, D - 1))
    if spec.scale_jitter > 0:
        genuine = genuine * rng.uniform(1.0 - spec.scale_jitter, 1.0 + spec.scale_jitter, size=D - 1)
    heads = rng.random() < spec.shortcut_correlation
    shown = cls if heads else int(rng.integers(0, spec.K - 1))
    feats = np.empty((L, D))
    feats[:, : D - 1] = genuine
    feats[:, D - 1] = spike_track(L, shown + 1, rng)
    return feats, cls


def gen_samples(spec: CorpusSpec):
    """Class-balanced samples in a deterministic shuffled order."""
    order = Rng(spec.seed, stream_id("shuffle", spec.domain, spec.n_samples)).permutation(spec.n_samples)
    feats, labels = [], []
    for idx in order:
        f, y = gen_utterance(int(idx) % spec.K, spec, int(idx))
        feats.append(f)
        labels.append(y)
    return feats, np.asarray(labels, dtype=np.int64)


def write_corpus(path, feats, labels) -> None:
    D = feats[0].shape[1] if feats else 0
    parts = [MAGIC, struct.pack("<HII", VERSION, len(feats), D)]
    for f, y in zip(feats, labels):
        if f.shape[1] != D:
            raise CorpusFormatError("all records must share the feature dimension")
        parts.append(struct.pack("<IB", f.shape[0], int(y)))
        parts.append(np.ascontiguousarray(f, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_corpus(path):
    buf = Path(path).read_bytes()
    if not buf.startswith(MAGIC):
        raise CorpusFormatError(f"{path}: bad magic")
    pos = len(MAGIC)
    version, count, D = struct.unpack_from("<HII", buf, pos)
    if version != VERSION:
        raise CorpusFormatError(f"{path}: unsupported version {version}")
    pos += 10
    feats, labels = [], []
    for _ in range(count):
        L, y = struct.unpack_from("<IB", buf, pos)
        pos += 5
        n = L * D
        if pos + 8 * n > len(buf):
            raise CorpusFormatError(f"{path}: truncated record")
        feats.append(np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(L, D).astype(np.float64))
        labels.append(y)
        pos += 8 * n
    if pos != len(buf):
        raise CorpusFormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return feats, np.asarray(labels, dtype=np.int64)


def gen_corpus(spec: CorpusSpec, path) -> int:
    feats, labels = gen_samples(spec)
    write_corpus(path, feats, labels)
    return len(feats)


def artifact_energy(feats) -> float:
    """Mean squared value of the shortcut channel."""
    feats = np.asarray(feats)
    return float(np.mean(feats[:, -1] ** 2))


def spike_density(feats) -> float:
    return float(np.mean(np.asarray(feats)[:, -1] > 0.5))


def natural_band(feats_list) -> tuple[float, float]:
    """Mean and standard deviation of artifact energy over a clean corpus."""
    e = np.array([artifact_energy(f) for f in feats_list])
    return float(e.mean()), float(e.std())


def with_seed(spec: CorpusSpec, seed: int) -> CorpusSpec:
    return replace(spec, seed=seed)
