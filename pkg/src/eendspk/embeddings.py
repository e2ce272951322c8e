"""Per-frame speaker embedding sequences aligned to the 100 ms feature grid."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np

from .features import (
    FRAME_LENGTH,
    LOG_FLOOR,
    SAMPLE_RATE,
    AudioSignal,
    FrameSequence,
    mel_energies,
    n_feature_frames,
)

EMB_DIM = 512
HOP = 0.1
WINDOW_SIZES = (1.0, 2.0, 3.0)

EMB_MAGIC = b"EEMB"
EMB_VERSION = 1
_EMB_HEADER = struct.Struct("<4sHIIII")


@dataclass(frozen=True)
class EmbeddingSequence:
    data: np.ndarray
    window_size: float
    hop: float = HOP

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ValueError("embedding data must be a T x E matrix")
        object.__setattr__(self, "data", data)

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def __len__(self):
        return self.n_frames


@runtime_checkable
class EmbeddingProvider(Protocol):
    """Maps a window of 8 kHz samples to a fixed-size speaker vector.

    Implementations must be deterministic and hold no per-call state, so one
    instance can be shared across extraction workers.
    """

    dimension: int

    def embed(self, window: np.ndarray) -> np.ndarray: ...


def as_vad_mask(mask, n_frames: int | None = None) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 1:
        raise ValueError("VAD mask must be a 1-d vector")
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("VAD mask values must be 0 or 1")
    if n_frames is not None and len(mask) != n_frames:
        raise ValueError(f"VAD mask has {len(mask)} frames, expected {n_frames}")
    return mask.astype(np.int64)


class ToyEmbedder:
    """Deterministic stand-in for a pretrained speaker-embedding network.

    Window statistics (per-band log-Mel mean with the window's overall level
    removed, plus per-band standard deviation) are projected through a fixed
    Gaussian matrix seeded by ``seed`` and length-normalized. A window whose
    statistics vanish (e.g. digital silence) maps to the normalized
    projection of the all-ones vector.
    """

    def __init__(self, seed: int = 0, dimension: int = EMB_DIM):
        self.seed = seed
        self.dimension = dimension
        rng = np.random.default_rng(seed)
        self._proj = rng.standard_normal((dimension, 46)) / np.sqrt(46)
        self._proj.setflags(write=False)
        fallback = self._proj @ np.ones(46)
        self._fallback = fallback / np.linalg.norm(fallback)

    def statistics(self, window: np.ndarray) -> np.ndarray:
        window = np.asarray(window, dtype=np.float64)
        if len(window) < FRAME_LENGTH:
            window = np.pad(window, (0, FRAME_LENGTH - len(window)))
        logmel = np.log(np.maximum(mel_energies(window), LOG_FLOOR))
        means = logmel.mean(axis=0)
        return np.concatenate([means - means.mean(), logmel.std(axis=0)])

    def embed(self, window: np.ndarray) -> np.ndarray:
        stats = self.statistics(window)
        if np.linalg.norm(stats) < 1e-8:
            return self._fallback.copy()
        v = self._proj @ stats
        return v / np.linalg.norm(v)


def toy_embedder(speaker_profile: int = 0) -> ToyEmbedder:
    return ToyEmbedder(seed=speaker_profile)


def window_bounds(center: float, window_size: float, duration: float) -> tuple[float, float]:
    """Window of ``window_size`` centred on ``center``, shifted to lie inside the signal."""
    if window_size >= duration:
        return 0.0, duration
    start = min(max(center - window_size / 2, 0.0), duration - window_size)
    return start, start + window_size


def extract_embeddings(audio: AudioSignal, provider: EmbeddingProvider, window_size: float,
                       hop: float = HOP) -> EmbeddingSequence:
    if window_size not in WINDOW_SIZES:
        raise ValueError(f"window_size must be one of {WINDOW_SIZES}, got {window_size}")
    if not np.isclose(hop, HOP):
        raise ValueError(f"hop must be {HOP} s to match the feature grid")
    hop_samples = int(round(hop * SAMPLE_RATE))
    if len(audio) < hop_samples:
        raise ValueError(f"audio shorter than one hop ({len(audio)} < {hop_samples} samples)")
    n = n_feature_frames(len(audio))
    duration = audio.duration
    rows = np.empty((n, provider.dimension), dtype=np.float32)
    for t in range(n):
        start, end = window_bounds(t * hop, window_size, duration)
        a, b = int(round(start * SAMPLE_RATE)), int(round(end * SAMPLE_RATE))
        rows[t] = provider.embed(audio.samples[a:b])
    return EmbeddingSequence(rows, window_size, hop)


def apply_silence_mask(B: EmbeddingSequence, mask) -> EmbeddingSequence:
    """Replace rows at non-speech frames with the zero vector."""
    mask = as_vad_mask(mask, B.n_frames)
    data = np.where(mask[:, None] == 1, B.data, 0).astype(B.data.dtype)
    return EmbeddingSequence(data, B.window_size, B.hop)


def align_lengths(X: FrameSequence, B: EmbeddingSequence) -> tuple[FrameSequence, EmbeddingSequence]:
    tolerance = int(round(B.window_size / B.hop))
    if abs(X.n_frames - B.n_frames) > tolerance:
        raise ValueError(
            f"feature/embedding length mismatch ({X.n_frames} vs {B.n_frames} frames) exceeds "
            f"{tolerance}; check the embedding hop and feature subsampling")
    T = min(X.n_frames, B.n_frames)
    if X.n_frames == T and B.n_frames == T:
        return X, B
    return (FrameSequence(X.data[:T], X.frame_shift),
            EmbeddingSequence(B.data[:T], B.window_size, B.hop))


def save_precomputed(path, B: EmbeddingSequence) -> None:
    """Layout: little-endian header (magic, version u16, T, E, hop_ms, window_ms as u32)
    followed by a row-major float32 T x E payload."""
    data = np.ascontiguousarray(B.data, dtype="<f4")
    T, E = data.shape
    header = _EMB_HEADER.pack(EMB_MAGIC, EMB_VERSION, T, E,
                              int(round(B.hop * 1000)), int(round(B.window_size * 1000)))
    with open(path, "wb") as f:
        f.write(header)
        f.write(data.tobytes())


def load_precomputed(path) -> EmbeddingSequence:
    raw = Path(path).read_bytes()
    if len(raw) < _EMB_HEADER.size:
        raise ValueError(f"{path}: truncated embedding header")
    magic, version, T, E, hop_ms, window_ms = _EMB_HEADER.unpack_from(raw)
    if magic != EMB_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != EMB_VERSION:
        raise ValueError(f"{path}: unsupported embedding file version {version}")
    payload = raw[_EMB_HEADER.size:]
    if len(payload) != T * E * 4:
        raise ValueError(f"{path}: payload is {len(payload)} bytes, header implies {T * E * 4}")
    data = np.frombuffer(payload, dtype="<f4").reshape(T, E).astype(np.float32)
    return EmbeddingSequence(data, window_ms / 1000.0, hop_ms / 1000.0)
