"""Two-speaker simulated conversations with a controllable overlap ratio.

Speakers alternate turns. After each turn the next one either starts after an
exponential pause or, with probability ``p_overlap``, before the previous turn
ends (overlap drawn uniformly between a quarter of and the full bound that
keeps every speaker's own turns disjoint). ``p_overlap`` is calibrated against the target ratio.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .features import SAMPLE_RATE, AudioSignal, write_wav
from .segments import Segment, SegmentList, merge_intervals, write_rttm

_QUANTUM = 0.01  # turn boundaries live on a 10 ms grid so RTTM round-trips exactly


class SyntheticSpeaker:
    """Pseudo-speech source: white noise shaped by a speaker-specific spectral
    envelope (three formant-like bumps plus tilt) and a syllabic amplitude
    modulation."""

    def __init__(self, seed: int):
        self.seed = seed
        rng = np.random.default_rng([0x5EED, seed])
        self.formants = np.array([rng.uniform(250, 900), rng.uniform(900, 2200), rng.uniform(2200, 3600)])
        self.bandwidths = rng.uniform(80, 350, size=3)
        self.gains = rng.uniform(0.3, 1.0, size=3)
        self.tilt = rng.uniform(-1.5, 0.0)
        self.syllable_rate = rng.uniform(3.0, 6.0)
        self.level = rng.uniform(0.05, 0.15)

    def envelope(self, freqs: np.ndarray) -> np.ndarray:
        bumps = self.gains[:, None] * np.exp(-0.5 * ((freqs[None, :] - self.formants[:, None])
                                                     / self.bandwidths[:, None]) ** 2)
        tilt = (1.0 + freqs / 1000.0) ** self.tilt
        return 0.05 + bumps.sum(axis=0) * tilt

    def utterance(self, duration: float, utt_seed: int = 0) -> np.ndarray:
        n = int(round(duration * SAMPLE_RATE))
        if n <= 0:
            return np.zeros(0)
        rng = np.random.default_rng([self.seed, utt_seed])
        noise = rng.standard_normal(n)
        spec = np.fft.rfft(noise) * self.envelope(np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE))
        shaped = np.fft.irfft(spec, n)
        t = np.arange(n) / SAMPLE_RATE
        phase = rng.uniform(0, np.pi)
        am = 0.25 + 0.75 * np.abs(np.sin(np.pi * self.syllable_rate * t + phase))
        x = shaped * am
        rms = np.sqrt(np.mean(x ** 2)) or 1.0
        return np.clip(x * (self.level / rms), -1.0, 1.0)


def synth_speaker(seed: int) -> SyntheticSpeaker:
    return SyntheticSpeaker(seed)


@dataclass(frozen=True)
class MixtureSpec:
    n_speakers: int = 2
    target_overlap: float = 0.344
    pause_scale: float = 1.0
    speaker_seeds: tuple[int, int] | None = None
    utterance_pool: Sequence[Sequence[np.ndarray]] | None = field(default=None, compare=False, hash=False)
    seed: int = 0
    max_duration: float = 30.0
    turn_range: tuple[float, float] = (1.0, 4.0)
    max_overlap_fraction: float = 0.9
    edge_silence: tuple[float, float] = (0.3, 1.0)
    noise_snr_db: float | None = None

    def validate(self):
        if self.n_speakers != 2:
            raise ValueError("only two-speaker conversations are supported")
        if not 0.0 <= self.target_overlap < 1.0:
            raise ValueError(f"target_overlap must be in [0, 1), got {self.target_overlap}")
        if self.pause_scale <= 0:
            raise ValueError("pause_scale must be positive")
        lo, hi = self.turn_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad turn_range {self.turn_range}")
        if self.max_duration < lo + 2 * self.edge_silence[1]:
            raise ValueError("max_duration too short for a single turn")
        if self.utterance_pool is not None:
            if len(self.utterance_pool) != 2 or any(len(p) == 0 for p in self.utterance_pool):
                raise ValueError("utterance pool must be nonempty for each speaker")
        elif self.speaker_seeds is not None and len(self.speaker_seeds) != 2:
            raise ValueError("need two speaker seeds")


def _q(x: float) -> float:
    return round(round(x / _QUANTUM) * _QUANTUM, 2)


def _timeline(rng: np.random.Generator, p_overlap: float, spec: MixtureSpec,
              pool_lengths: Sequence[Sequence[float]] | None = None):
    """Turn layout: list of (speaker, start, length, pool_index), and the total duration.

    Every turn draws the same random numbers in the same order regardless of
    the branch taken, so nearby ``p_overlap`` values give nearby layouts.
    """
    lead_lo, lead_hi = spec.edge_silence
    lead = _q(rng.uniform(lead_lo, lead_hi))
    tail = _q(rng.uniform(lead_lo, lead_hi))
    limit = spec.max_duration - tail
    turns = []
    prev_end = prev_prev_end = None
    prev_len = None
    k = 0
    while True:
        u_branch, u_overlap, pause = rng.random(), rng.random(), rng.exponential(spec.pause_scale)
        spk = k % 2
        if pool_lengths is not None:
            idx = int(rng.integers(len(pool_lengths[spk])))
            length = _q(pool_lengths[spk][idx])
        else:
            idx = -1
            length = _q(rng.uniform(*spec.turn_range))
        if length <= 0:
            k += 1
            continue
        if prev_end is None:
            start = lead
        elif u_branch < p_overlap:
            room = min(length, prev_len)
            if prev_prev_end is not None:
                room = min(room, prev_end - prev_prev_end)
            start = _q(prev_end - (0.25 + 0.75 * u_overlap) * spec.max_overlap_fraction * max(room, 0.0))
            if prev_prev_end is not None and start < prev_prev_end:
                start = prev_prev_end
        else:
            start = _q(prev_end + pause)
        if start + length > limit:
            if prev_end is None or limit - start < spec.turn_range[0] or pool_lengths is not None:
                break
            length = _q(limit - start)
        turns.append((spk, start, length, idx))
        prev_prev_end, prev_end, prev_len = prev_end, _q(start + length), length
        k += 1
    duration = min(spec.max_duration, (prev_end or lead) + tail)
    return turns, duration


def _turn_overlap_ratio(turns) -> float:
    segs = [(spk, s, s + l) for spk, s, l, _ in turns]
    return _interval_overlap_ratio(segs)


def _interval_overlap_ratio(spans: Iterable[tuple[object, float, float]]) -> float:
    per_spk: dict[object, list] = {}
    for spk, a, b in spans:
        per_spk.setdefault(spk, []).append((a, b))
    events = []
    for ivs in per_spk.values():
        for a, b in merge_intervals(ivs):
            events += [(a, 1), (b, -1)]
    if not events:
        raise ValueError("no speech in input")
    events.sort()
    active, last, single, multi = 0, events[0][0], 0.0, 0.0
    for t, delta in events:
        span = t - last
        if active >= 1:
            single += span
        if active >= 2:
            multi += span
        active += delta
        last = t
    if single <= 0:
        raise ValueError("zero total speech duration")
    return multi / single


@lru_cache(maxsize=32)
def calibrate_overlap_probability(spec: MixtureSpec, n_trials: int = 200, tol: float = 0.002) -> float:
    """Probability of starting a turn early so the mean per-mixture overlap
    ratio matches ``spec.target_overlap``."""
    spec = replace(spec, utterance_pool=None)
    target = spec.target_overlap
    if target == 0.0:
        return 0.0
    lo, hi = spec.turn_range
    mean_len = (lo + hi) / 2
    # expected overlap per early start ~ 5/8 of the cap times the expected shorter turn
    mean_overlap = 0.625 * spec.max_overlap_fraction * (lo + (hi - lo) / 3)
    p = min(1.0, target * mean_len / (mean_overlap * (1 + target)))

    def measure(p_):
        ratios = []
        for i in range(n_trials):
            turns, _ = _timeline(np.random.default_rng([0xCA1, i]), p_, spec)
            ratios.append(_turn_overlap_ratio(turns))
        return float(np.mean(ratios))

    for _ in range(30):
        got = measure(p)
        if abs(got - target) < tol:
            break
        if got <= 0:
            p = min(1.0, p * 2 or 0.1)
            continue
        new_p = min(1.0, p * target / got)
        if new_p == p == 1.0:
            raise ValueError(f"target overlap {target} unreachable with these turn settings")
        p = new_p
    return p


def simulate_conversation(spec: MixtureSpec, recording_id: str = "mix", return_sources: bool = False):
    """Returns (AudioSignal, SegmentList), plus the per-speaker source array when requested."""
    spec.validate()
    rng = np.random.default_rng([spec.seed])
    if spec.speaker_seeds is not None:
        seeds = tuple(spec.speaker_seeds)
    else:
        seeds = tuple(int(s) for s in rng.integers(0, 2**31 - 1, size=2))
    p_overlap = calibrate_overlap_probability(replace(spec, seed=0, speaker_seeds=None, utterance_pool=None))
    pool_lengths = None
    if spec.utterance_pool is not None:
        pool_lengths = [[len(u) / SAMPLE_RATE for u in pool] for pool in spec.utterance_pool]
    turns, duration = _timeline(rng, p_overlap, spec, pool_lengths)

    n = int(round(duration * SAMPLE_RATE))
    sources = np.zeros((2, n))
    speakers = [SyntheticSpeaker(s) for s in seeds]
    names = [f"spk{s}" for s in seeds]
    segments: SegmentList = []
    for k, (spk, start, length, idx) in enumerate(turns):
        a = int(round(start * SAMPLE_RATE))
        if idx >= 0:
            utt = np.asarray(spec.utterance_pool[spk][idx], dtype=np.float64)
        else:
            utt = speakers[spk].utterance(length, utt_seed=int(rng.integers(2**31 - 1)))
        utt = utt[: n - a]
        sources[spk, a:a + len(utt)] = utt
        segments.append(Segment(recording_id, names[spk], start, round(len(utt) / SAMPLE_RATE, 6)))
    mix = sources.sum(axis=0)
    if spec.noise_snr_db is not None:
        speech_rms = np.sqrt(np.mean(mix[np.abs(mix) > 0] ** 2)) if np.any(mix) else 1.0
        mix = mix + rng.standard_normal(n) * speech_rms * 10 ** (-spec.noise_snr_db / 20)
    mix = np.clip(mix, -1.0, 1.0)
    audio = AudioSignal(mix)
    if return_sources:
        return audio, segments, sources
    return audio, segments


def compute_overlap_ratio(labels) -> float:
    """Time with >=2 active speakers over time with >=1, from segments or a T x S label matrix."""
    if isinstance(labels, np.ndarray):
        if labels.size == 0:
            raise ValueError("empty label matrix")
        active = (labels > 0).sum(axis=1)
        speech = np.count_nonzero(active >= 1)
        if speech == 0:
            raise ValueError("zero total speech duration")
        return np.count_nonzero(active >= 2) / speech
    segs = list(labels)
    if not segs:
        raise ValueError("empty segment list")
    return _interval_overlap_ratio((s.speaker, s.onset, s.offset) for s in segs)


def generate_dataset(out_dir, count: int, spec: MixtureSpec = MixtureSpec(), prefix: str = "mix") -> list[dict]:
    """Write WAV + RTTM pairs and a ``manifest.tsv`` (id, path, duration, overlap_ratio).

    Mixture ``i`` uses RNG seed ``(spec.seed, i)`` so output does not depend on
    generation order.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(count):
        rec = f"{prefix}{i:05d}"
        mix_seed = int(np.random.default_rng([spec.seed, i]).integers(2**31 - 1))
        audio, segments = simulate_conversation(replace(spec, seed=mix_seed), rec)
        write_wav(out / f"{rec}.wav", audio)
        write_rttm(out / f"{rec}.rttm", segments)
        rows.append({"id": rec, "path": f"{rec}.wav", "duration": f"{audio.duration:.2f}",
                     "overlap_ratio": f"{compute_overlap_ratio(segments):.4f}"})
    with open(out / "manifest.tsv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["id", "path", "duration", "overlap_ratio"], delimiter="\t")
        writer.writeheader()
        writer.writerows(rows)
    return rows


def read_manifest(dataset_dir) -> list[dict]:
    path = Path(dataset_dir) / "manifest.tsv"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.tsv in {dataset_dir}")
    with open(path, newline="") as f:
        return list(csv.DictReader(f, delimiter="\t"))
