"""Oracle and energy-based voice activity detection on the 100 ms grid."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .embeddings import as_vad_mask
from .features import FRAME_LENGTH, SUBSAMPLING, AudioSignal, frame_signal
from .segments import Segment, SegmentList, labels_to_segments, segments_to_labels

# Kaldi computes log energy on the int16 sample scale; thresholds assume it.
_PCM_SCALE = 32768.0
_ENERGY_FLOOR = float(np.finfo(np.float32).eps)


def oracle_mask(ref: Iterable[Segment], n_frames: int) -> np.ndarray:
    """Frame is speech iff any reference speaker is active under the >=50% rule."""
    ref = list(ref)
    for s in ref:
        if s.duration < 0:
            raise ValueError(f"negative-duration segment {s}")
    if not ref:
        return np.zeros(n_frames, dtype=np.int64)
    labels, _ = segments_to_labels(ref, n_frames)
    return labels.any(axis=1).astype(np.int64)


def frame_log_energy(audio: AudioSignal) -> np.ndarray:
    if len(audio) < FRAME_LENGTH:
        samples = np.pad(audio.samples, (0, FRAME_LENGTH - len(audio)))
    else:
        samples = audio.samples
    frames = frame_signal(samples * _PCM_SCALE)
    return np.log(np.maximum((frames ** 2).sum(axis=1), _ENERGY_FLOOR))


def energy_vad_frames(audio: AudioSignal, mean_scale: float = 0.5, base_threshold: float = 5.0,
                      context: int = 2, vote: float = 0.6) -> np.ndarray:
    """10 ms decisions, following Kaldi's compute-vad voting rule."""
    energy = frame_log_energy(audio)
    threshold = base_threshold + mean_scale * energy.mean()
    passes = (energy > threshold).astype(np.float64)
    window = np.ones(2 * context + 1)
    num = np.convolve(passes, window, mode="same")
    den = np.convolve(np.ones_like(passes), window, mode="same")
    return (num >= vote * den).astype(np.int64)


def downsample_mask(fine: np.ndarray, factor: int = SUBSAMPLING) -> np.ndarray:
    """Coarse frame is speech when at least half of its fine frames are."""
    n = -(-len(fine) // factor)
    padded = np.full(n * factor, np.nan)
    padded[:len(fine)] = fine
    return (np.nanmean(padded.reshape(n, factor), axis=1) >= 0.5).astype(np.int64)


def energy_vad(audio: AudioSignal, mean_scale: float = 0.5, base_threshold: float = 5.0,
               context: int = 2, vote: float = 0.6) -> np.ndarray:
    if len(audio) == 0:
        raise ValueError("empty audio")
    fine = energy_vad_frames(audio, mean_scale, base_threshold, context, vote)
    return downsample_mask(fine)


def gate_hypothesis(hyp: np.ndarray, mask) -> np.ndarray:
    """Zero all speaker activity at non-speech frames."""
    hyp = np.asarray(hyp)
    mask = as_vad_mask(mask, hyp.shape[0])
    return hyp * mask[:, None].astype(hyp.dtype)


def mask_to_segments(mask, recording_id: str) -> SegmentList:
    mask = as_vad_mask(mask)
    return labels_to_segments(mask[:, None], recording_id, ["speech"])
