"""Diarization error rate with a forgiveness collar, frame-level DER and
posterior-to-segment decoding."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from scipy.ndimage import median_filter

from .segments import (
    FRAME_SHIFT,
    Segment,
    SegmentList,
    by_recording,
    labels_to_segments,
    merge_intervals,
    speaker_intervals,
)

MAX_MAPPING_SPEAKERS = 6


@dataclass
class DerBreakdown:
    fa: float = 0.0
    miss: float = 0.0
    se: float = 0.0
    total_speech: float = 0.0
    mapping: dict = field(default_factory=dict)

    @property
    def der(self) -> float:
        if self.total_speech <= 0:
            raise ValueError("DER undefined without reference speech")
        return (self.fa + self.miss + self.se) / self.total_speech

    def __add__(self, other: "DerBreakdown") -> "DerBreakdown":
        return DerBreakdown(self.fa + other.fa, self.miss + other.miss, self.se + other.se,
                            self.total_speech + other.total_speech)


def best_mapping(overlap: np.ndarray) -> tuple[dict[int, int], float]:
    """Injective hyp->ref assignment maximizing total matched time.

    ``overlap[h, r]`` is the time hyp speaker h and ref speaker r are both
    active. Exhaustive over all assignments.
    """
    n_hyp, n_ref = overlap.shape
    if max(n_hyp, n_ref) > MAX_MAPPING_SPEAKERS:
        raise ValueError(f"exhaustive mapping limited to {MAX_MAPPING_SPEAKERS} speakers per side")
    k = max(n_hyp, n_ref)
    padded = np.zeros((k, k))
    padded[:n_hyp, :n_ref] = overlap
    best, best_perm = -1.0, None
    rows = np.arange(k)
    for perm in itertools.permutations(range(k)):
        score = padded[rows, perm].sum()
        if score > best + 1e-12:
            best, best_perm = score, perm
    mapping = {h: r for h, r in enumerate(best_perm) if h < n_hyp and r < n_ref}
    return mapping, float(best)


def _active(intervals: list[tuple[float, float]], points: np.ndarray) -> np.ndarray:
    if not intervals:
        return np.zeros(len(points), dtype=bool)
    starts = np.array([a for a, _ in intervals])
    ends = np.array([b for _, b in intervals])
    idx = np.searchsorted(starts, points, side="right") - 1
    ok = idx >= 0
    out = np.zeros(len(points), dtype=bool)
    out[ok] = points[ok] < ends[idx[ok]]
    return out


def score_recording(ref: Iterable[Segment], hyp: Iterable[Segment], collar: float = 0.25) -> DerBreakdown:
    ref_iv = speaker_intervals(ref)
    hyp_iv = speaker_intervals(hyp)
    ref_names, hyp_names = list(ref_iv), list(hyp_iv)
    if not ref_names:
        raise ValueError("empty reference speech")

    no_score = merge_intervals(
        (b - collar, b + collar) for ivs in ref_iv.values() for a, e in ivs for b in (a, e)
    ) if collar > 0 else []

    bounds = {p for ivs in (*ref_iv.values(), *hyp_iv.values()) for iv in ivs for p in iv}
    bounds.update(p for iv in no_score for p in iv)
    bounds = np.array(sorted(bounds))
    mids = (bounds[:-1] + bounds[1:]) / 2
    dur = np.diff(bounds)
    scored = ~_active(no_score, mids)

    R = np.stack([_active(ref_iv[n], mids) for n in ref_names], axis=1) if ref_names \
        else np.zeros((len(mids), 0), dtype=bool)
    H = np.stack([_active(hyp_iv[n], mids) for n in hyp_names], axis=1) if hyp_names \
        else np.zeros((len(mids), 0), dtype=bool)
    R, H, dur = R[scored], H[scored], dur[scored]

    n_ref, n_hyp = R.sum(1), H.sum(1)
    # total may be 0 when collars swallow every reference segment; .der then raises
    total = float((dur * n_ref).sum())
    overlap = (H.T.astype(float) * dur) @ R.astype(float)
    mapping, correct = best_mapping(overlap)
    miss = float((dur * np.maximum(n_ref - n_hyp, 0)).sum())
    fa = float((dur * np.maximum(n_hyp - n_ref, 0)).sum())
    se = float((dur * np.minimum(n_ref, n_hyp)).sum()) - correct
    return DerBreakdown(fa, miss, max(se, 0.0), total,
                        {hyp_names[h]: ref_names[r] for h, r in mapping.items()})


def score_corpus(ref: Iterable[Segment], hyp: Iterable[Segment],
                 collar: float = 0.25) -> tuple[dict[str, DerBreakdown], DerBreakdown]:
    """Per-recording breakdowns plus the corpus total (components summed, then divided)."""
    ref_by, hyp_by = by_recording(ref), by_recording(hyp)
    unknown = set(hyp_by) - set(ref_by)
    if unknown:
        raise ValueError(f"hypothesis recordings missing from reference: {sorted(unknown)}")
    per_rec = {rec: score_recording(ref_by[rec], hyp_by.get(rec, []), collar) for rec in sorted(ref_by)}
    total = DerBreakdown()
    for b in per_rec.values():
        total = total + b
    return per_rec, total


def score_der(ref: Iterable[Segment], hyp: Iterable[Segment], collar: float = 0.25) -> DerBreakdown:
    ref, hyp = list(ref), list(hyp)
    if not ref:
        raise ValueError("empty reference speech")
    per_rec, total = score_corpus(ref, hyp, collar)
    if len(per_rec) == 1:
        return next(iter(per_rec.values()))
    return total


def frame_der(refY: np.ndarray, hypY: np.ndarray) -> DerBreakdown:
    """Frame-count DER with the best column permutation and no collar."""
    refY, hypY = np.asarray(refY) > 0, np.asarray(hypY) > 0
    if refY.shape[0] != hypY.shape[0] or refY.ndim != 2 or hypY.ndim != 2:
        raise ValueError(f"shape mismatch {refY.shape} vs {hypY.shape}")
    n_ref, n_hyp = refY.sum(1), hypY.sum(1)
    mapping, correct = best_mapping(hypY.T.astype(float) @ refY.astype(float))
    return DerBreakdown(
        fa=float(np.maximum(n_hyp - n_ref, 0).sum()),
        miss=float(np.maximum(n_ref - n_hyp, 0).sum()),
        se=float(np.minimum(n_ref, n_hyp).sum() - correct),
        total_speech=float(n_ref.sum()),
        mapping=mapping,
    )


def binarize(posteriors: np.ndarray, threshold: float = 0.5, median_window: int = 11) -> np.ndarray:
    if not 0 < threshold < 1:
        raise ValueError("threshold must be in (0, 1)")
    if median_window < 1 or median_window % 2 == 0:
        raise ValueError("median window must be a positive odd number")
    decisions = (np.asarray(posteriors) > threshold).astype(np.float64)
    if median_window > 1:
        decisions = median_filter(decisions, size=(median_window, 1), mode="constant", cval=0.0)
    return decisions.astype(np.int64)


def posteriors_to_segments(posteriors: np.ndarray, threshold: float = 0.5, median_window: int = 11,
                           recording_id: str = "rec", speaker_names: list[str] | None = None,
                           frame_shift: float = FRAME_SHIFT) -> SegmentList:
    return labels_to_segments(binarize(posteriors, threshold, median_window), recording_id,
                              speaker_names, frame_shift)
