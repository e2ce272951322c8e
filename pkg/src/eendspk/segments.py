"""Speaker segments, RTTM I/O and conversion to/from frame label matrices."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

FRAME_SHIFT = 0.1


@dataclass(frozen=True, order=True)
class Segment:
    recording_id: str
    speaker: str
    onset: float
    duration: float

    def __post_init__(self):
        if not math.isfinite(self.onset) or not math.isfinite(self.duration):
            raise ValueError(f"non-finite segment bounds: {self}")
        if self.duration <= 0:
            raise ValueError(f"segment duration must be positive: {self}")

    @property
    def offset(self) -> float:
        return self.onset + self.duration


SegmentList = list[Segment]


def speakers(segments: Iterable[Segment]) -> list[str]:
    return sorted({s.speaker for s in segments})


def recordings(segments: Iterable[Segment]) -> list[str]:
    return sorted({s.recording_id for s in segments})


def by_recording(segments: Iterable[Segment]) -> dict[str, SegmentList]:
    out = defaultdict(list)
    for s in segments:
        out[s.recording_id].append(s)
    return dict(out)


def merge_intervals(intervals: Iterable[tuple[float, float]]) -> list[tuple[float, float]]:
    merged: list[list[float]] = []
    for start, end in sorted(intervals):
        if merged and start <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], end)
        else:
            merged.append([start, end])
    return [(a, b) for a, b in merged]


def speaker_intervals(segments: Iterable[Segment]) -> dict[str, list[tuple[float, float]]]:
    """Per-speaker sorted, merged (start, end) intervals."""
    raw = defaultdict(list)
    for s in segments:
        raw[s.speaker].append((s.onset, s.offset))
    return {spk: merge_intervals(iv) for spk, iv in sorted(raw.items())}


def normalize_segments(segments: Iterable[Segment]) -> SegmentList:
    """Sort and merge overlapping/abutting segments of the same speaker."""
    out = []
    for rec, segs in sorted(by_recording(segments).items()):
        for spk, ivs in speaker_intervals(segs).items():
            out.extend(Segment(rec, spk, a, b - a) for a, b in ivs)
    return sorted(out, key=lambda s: (s.recording_id, s.onset, s.speaker))


# ---------------------------------------------------------------- RTTM


def format_rttm_line(seg: Segment) -> str:
    return (f"SPEAKER {seg.recording_id} 1 {seg.onset:.2f} {seg.duration:.2f} "
            f"<NA> <NA> {seg.speaker} <NA> <NA>")


def write_rttm(path, segments: Iterable[Segment]) -> None:
    lines = [format_rttm_line(s) for s in sorted(segments, key=lambda s: (s.recording_id, s.onset, s.speaker))]
    Path(path).write_text("".join(line + "\n" for line in lines))


def parse_rttm(text: str, source: str = "<rttm>") -> SegmentList:
    segments = []
    for lineno, line in enumerate(text.splitlines(), 1):
        fields = line.split()
        if not fields or fields[0].startswith("#"):
            continue
        if len(fields) != 10:
            raise ValueError(f"{source}:{lineno}: expected 10 fields, got {len(fields)}")
        if fields[0] != "SPEAKER":
            raise ValueError(f"{source}:{lineno}: unsupported record type {fields[0]!r}")
        try:
            onset, duration = float(fields[3]), float(fields[4])
        except ValueError as exc:
            raise ValueError(f"{source}:{lineno}: bad onset/duration") from exc
        if duration <= 0:
            continue
        segments.append(Segment(fields[1], fields[7], onset, duration))
    return segments


def read_rttm(path) -> SegmentList:
    return parse_rttm(Path(path).read_text(), str(path))


# ---------------------------------------------------------------- frame grid


def segments_to_labels(segments: Iterable[Segment], n_frames: int, speaker_order: list[str] | None = None,
                       frame_shift: float = FRAME_SHIFT) -> tuple[np.ndarray, list[str]]:
    """Discretize segments to a T x S binary matrix.

    Frame t spans [t * shift, (t + 1) * shift) and is active for a speaker when
    at least half of that span is covered by the speaker's speech.
    """
    segments = list(segments)
    order = list(speaker_order) if speaker_order is not None else speakers(segments)
    labels = np.zeros((n_frames, len(order)), dtype=np.int64)
    starts = np.arange(n_frames) * frame_shift
    ends = starts + frame_shift
    for col, spk in enumerate(order):
        cover = np.zeros(n_frames)
        for a, b in speaker_intervals(s for s in segments if s.speaker == spk).get(spk, []):
            cover += np.clip(np.minimum(ends, b) - np.maximum(starts, a), 0.0, None)
        # small slack so grid-aligned half frames are not lost to rounding
        labels[:, col] = cover >= 0.5 * frame_shift - 1e-9
    return labels, order


def labels_to_segments(labels: np.ndarray, recording_id: str, speaker_names: list[str] | None = None,
                       frame_shift: float = FRAME_SHIFT) -> SegmentList:
    labels = np.asarray(labels)
    names = speaker_names or [f"spk{i}" for i in range(labels.shape[1])]
    out = []
    for col, name in enumerate(names):
        active = np.concatenate([[0], (labels[:, col] > 0).astype(np.int8), [0]])
        edges = np.flatnonzero(np.diff(active))
        for start, end in zip(edges[::2], edges[1::2]):
            out.append(Segment(recording_id, name, round(start * frame_shift, 6),
                               round((end - start) * frame_shift, 6)))
    return sorted(out, key=lambda s: (s.onset, s.speaker))
