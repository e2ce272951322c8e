"""Log-Mel filterbank front end: 23 bands, 25 ms / 10 ms framing, +-7 frame
splicing and 10x subsampling, giving a 345-dim vector every 100 ms."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.io import wavfile

SAMPLE_RATE = 8000
FRAME_LENGTH = 200  # 25 ms
FRAME_SHIFT = 80  # 10 ms
N_FFT = 256
N_MELS = 23
LOG_FLOOR = 1e-10
CONTEXT = 7
SUBSAMPLING = 10

FEAT_MAGIC = b"EFEA"
FEAT_VERSION = 1
_FEAT_HEADER = struct.Struct("<4sHIIf")


@dataclass(frozen=True)
class AudioSignal:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate != SAMPLE_RATE:
            raise ValueError(f"expected {SAMPLE_RATE} Hz audio, got {self.sample_rate} Hz")
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("audio must be mono")
        if not np.all(np.isfinite(samples)):
            raise ValueError("audio contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def __len__(self):
        return len(self.samples)


@dataclass(frozen=True)
class FrameSequence:
    data: np.ndarray
    frame_shift: float

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ValueError("frame data must be a T x F matrix")
        if not np.all(np.isfinite(data)):
            raise ValueError("frame data contains NaN/Inf")
        object.__setattr__(self, "data", data)

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def __len__(self):
        return self.n_frames

    def timestamps(self) -> np.ndarray:
        return np.arange(self.n_frames) * self.frame_shift


def read_wav(path) -> AudioSignal:
    """Read 16-bit mono PCM into [-1, 1) floats."""
    rate, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif np.issubdtype(data.dtype, np.floating):
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample type {data.dtype}")
    return AudioSignal(samples, rate)


def write_wav(path, audio: AudioSignal) -> None:
    pcm = np.clip(np.round(audio.samples * 32768.0), -32768, 32767).astype(np.int16)
    wavfile.write(str(path), audio.sample_rate, pcm)


def n_logmel_frames(n_samples: int) -> int:
    if n_samples < FRAME_LENGTH:
        return 0
    return (n_samples - FRAME_LENGTH) // FRAME_SHIFT + 1


def n_feature_frames(n_samples: int, factor: int = SUBSAMPLING) -> int:
    """Length of the subsampled feature sequence for a signal of n_samples."""
    return -(-n_logmel_frames(n_samples) // factor)


def _hz_to_mel(hz):
    return 1127.0 * np.log1p(np.asarray(hz) / 700.0)


def _mel_to_hz(mel):
    return 700.0 * np.expm1(np.asarray(mel) / 1127.0)


@lru_cache(maxsize=4)
def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sample_rate: int = SAMPLE_RATE,
                   low_hz: float = 0.0, high_hz: float = 4000.0) -> np.ndarray:
    """Triangular filters on the HTK mel scale, shape (n_mels, n_fft // 2 + 1)."""
    fft_freqs = np.linspace(0.0, sample_rate / 2, n_fft // 2 + 1)
    edges = _mel_to_hz(np.linspace(_hz_to_mel(low_hz), _hz_to_mel(high_hz), n_mels + 2))
    fb = np.zeros((n_mels, len(fft_freqs)))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        rising = (fft_freqs - lo) / (mid - lo)
        falling = (hi - fft_freqs) / (hi - mid)
        fb[m] = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def frame_signal(samples: np.ndarray, frame_length: int = FRAME_LENGTH,
                 frame_shift: int = FRAME_SHIFT) -> np.ndarray:
    n = max(0, (len(samples) - frame_length) // frame_shift + 1)
    idx = np.arange(frame_length)[None, :] + frame_shift * np.arange(n)[:, None]
    return samples[idx]


def mel_energies(samples: np.ndarray) -> np.ndarray:
    """Linear Mel-band energies per 25 ms frame, shape (T, 23)."""
    frames = frame_signal(samples) * np.hamming(FRAME_LENGTH)
    power = np.abs(np.fft.rfft(frames, n=N_FFT, axis=1)) ** 2
    return power @ mel_filterbank().T


def compute_logmel(audio: AudioSignal) -> FrameSequence:
    if audio.sample_rate != SAMPLE_RATE:
        raise ValueError(f"expected {SAMPLE_RATE} Hz audio")
    if len(audio) < FRAME_LENGTH:
        raise ValueError(
            f"audio too short: {len(audio)} samples, need at least {FRAME_LENGTH} for one frame")
    energies = mel_energies(audio.samples)
    return FrameSequence(np.log(np.maximum(energies, LOG_FLOOR)), FRAME_SHIFT / SAMPLE_RATE)


def splice_context(frames: FrameSequence, left: int = CONTEXT, right: int = CONTEXT) -> FrameSequence:
    """Concatenate each frame with its neighbours, repeating the edge frames."""
    if left < 0 or right < 0:
        raise ValueError("context sizes must be non-negative")
    x = frames.data
    padded = np.concatenate([np.repeat(x[:1], left, axis=0), x, np.repeat(x[-1:], right, axis=0)])
    T = x.shape[0]
    spliced = np.concatenate([padded[i:i + T] for i in range(left + right + 1)], axis=1)
    return FrameSequence(spliced, frames.frame_shift)


def subsample(frames: FrameSequence, factor: int = SUBSAMPLING) -> FrameSequence:
    if factor < 1:
        raise ValueError(f"subsampling factor must be >= 1, got {factor}")
    return FrameSequence(frames.data[::factor], frames.frame_shift * factor)


def normalize(frames: FrameSequence) -> FrameSequence:
    """Per-utterance mean normalization."""
    return FrameSequence(frames.data - frames.data.mean(axis=0, keepdims=True), frames.frame_shift)


def extract_features(audio: AudioSignal, mean_norm: bool = False) -> FrameSequence:
    """Full acoustic chain: log-Mel -> splice(7, 7) -> subsample(10)."""
    logmel = compute_logmel(audio)
    if mean_norm:
        logmel = normalize(logmel)
    return subsample(splice_context(logmel))


def save_features(path, frames: FrameSequence) -> None:
    data = np.ascontiguousarray(frames.data, dtype="<f4")
    T, F = data.shape
    with open(path, "wb") as f:
        f.write(_FEAT_HEADER.pack(FEAT_MAGIC, FEAT_VERSION, T, F, frames.frame_shift))
        f.write(data.tobytes())


def load_features(path) -> FrameSequence:
    raw = Path(path).read_bytes()
    if len(raw) < _FEAT_HEADER.size:
        raise ValueError(f"{path}: truncated feature header")
    magic, version, T, F, shift = _FEAT_HEADER.unpack_from(raw)
    if magic != FEAT_MAGIC or version != FEAT_VERSION:
        raise ValueError(f"{path}: not a feature file (magic={magic!r}, version={version})")
    payload = raw[_FEAT_HEADER.size:]
    if len(payload) != T * F * 4:
        raise ValueError(f"{path}: payload is {len(payload)} bytes, header implies {T * F * 4}")
    data = np.frombuffer(payload, dtype="<f4").reshape(T, F).astype(np.float32)
    return FrameSequence(data, float(np.float32(shift)))
