import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from eendspk.embeddings import (
    EmbeddingProvider,
    EmbeddingSequence,
    ToyEmbedder,
    align_lengths,
    apply_silence_mask,
    extract_embeddings,
    load_precomputed,
    save_precomputed,
    toy_embedder,
    window_bounds,
)
from eendspk.features import AudioSignal, FrameSequence, extract_features
from eendspk.simulate import synth_speaker


class ConstantProvider:
    dimension = 512

    def embed(self, window):
        return np.full(512, 0.25)


class SpanProvider:
    """Records the window length it was given."""
    dimension = 1

    def embed(self, window):
        return np.array([len(window)], dtype=float)


def test_constant_provider_gives_identical_rows():
    audio = AudioSignal(np.random.default_rng(0).standard_normal(8000 * 10) * 0.1)
    B = extract_embeddings(audio, ConstantProvider(), 1.0)
    assert B.data.shape == (100, 512)
    assert np.all(B.data == B.data[0])


def test_ten_seconds_matches_acoustic_frame_count():
    audio = AudioSignal(np.random.default_rng(0).standard_normal(80000) * 0.1)
    B = extract_embeddings(audio, toy_embedder(3), 1.0)
    X = extract_features(audio)
    assert B.data.shape == (100, 512)
    assert X.n_frames == B.n_frames


def test_window_clamped_to_signal():
    audio = AudioSignal(np.zeros(16000))
    B = extract_embeddings(audio, SpanProvider(), 3.0)
    assert B.n_frames == 20
    assert np.all(B.data[:, 0] == 16000)
    B = extract_embeddings(AudioSignal(np.zeros(40000)), SpanProvider(), 2.0)
    assert np.all(B.data[:, 0] == 16000)


def test_window_bounds_centered_and_shifted():
    assert window_bounds(2.0, 1.0, 10.0) == (1.5, 2.5)
    assert window_bounds(0.0, 1.0, 10.0) == (0.0, 1.0)
    assert window_bounds(9.9, 1.0, 10.0) == (9.0, 10.0)
    assert window_bounds(1.0, 3.0, 2.0) == (0.0, 2.0)


def test_extract_rejects_bad_window_and_short_audio():
    audio = AudioSignal(np.zeros(8000))
    with pytest.raises(ValueError):
        extract_embeddings(audio, ConstantProvider(), 1.5)
    with pytest.raises(ValueError):
        extract_embeddings(AudioSignal(np.zeros(799)), ConstantProvider(), 1.0)


def test_providers_satisfy_protocol():
    assert isinstance(ToyEmbedder(0), EmbeddingProvider)
    assert isinstance(ConstantProvider(), EmbeddingProvider)


def test_silence_mask_examples():
    B = EmbeddingSequence(np.arange(3 * 4, dtype=np.float32).reshape(3, 4) + 1, 1.0)
    out = apply_silence_mask(B, [1, 0, 1])
    assert np.array_equal(out.data[0], B.data[0])
    assert np.array_equal(out.data[2], B.data[2])
    assert np.linalg.norm(out.data[1]) == 0
    assert np.array_equal(apply_silence_mask(B, [1, 1, 1]).data, B.data)
    assert not np.any(apply_silence_mask(B, [0, 0, 0]).data)
    with pytest.raises(ValueError):
        apply_silence_mask(B, [1, 0])


@given(st.lists(st.integers(0, 1), min_size=1, max_size=30))
def test_silence_mask_idempotent(mask):
    rng = np.random.default_rng(len(mask))
    B = EmbeddingSequence(rng.standard_normal((len(mask), 8)), 1.0)
    once = apply_silence_mask(B, mask)
    twice = apply_silence_mask(once, mask)
    assert np.array_equal(once.data, twice.data)
    assert np.all(np.linalg.norm(once.data[np.array(mask) == 0], axis=1) == 0)


def test_align_lengths():
    X = FrameSequence(np.zeros((100, 345)), 0.1)
    B = EmbeddingSequence(np.zeros((100, 512)), 1.0)
    X2, B2 = align_lengths(X, B)
    assert (X2.n_frames, B2.n_frames) == (100, 100)
    X2, B2 = align_lengths(X, EmbeddingSequence(np.zeros((102, 512)), 1.0))
    assert (X2.n_frames, B2.n_frames) == (100, 100)
    with pytest.raises(ValueError, match="mismatch"):
        align_lengths(X, EmbeddingSequence(np.zeros((50, 512)), 1.0))


@given(st.integers(90, 110), st.integers(90, 110))
def test_align_is_projection(tx, tb):
    X = FrameSequence(np.zeros((tx, 3)), 0.1)
    B = EmbeddingSequence(np.zeros((tb, 2)), 2.0)
    X1, B1 = align_lengths(X, B)
    X2, B2 = align_lengths(X1, B1)
    assert X1.n_frames == B1.n_frames == X2.n_frames == B2.n_frames == min(tx, tb)


def test_toy_embedder_separates_synthetic_speakers():
    emb = ToyEmbedder(0)
    vecs = {}
    for seed in (11, 22, 33):
        spk = synth_speaker(seed)
        vecs[seed] = np.stack([emb.embed(spk.utterance(1.0, utt_seed=k)) for k in range(12)])
    within, cross = [], []
    seeds = list(vecs)
    for i, a in enumerate(seeds):
        sims = vecs[a] @ vecs[a].T
        within.append(sims[np.triu_indices(len(sims), 1)].mean())
        for b in seeds[i + 1:]:
            cross.append((vecs[a] @ vecs[b].T).mean())
    assert min(within) > max(cross)
    # each window is closer to its own speaker centroid than to the others
    centroids = {s: v.mean(0) / np.linalg.norm(v.mean(0)) for s, v in vecs.items()}
    for s, v in vecs.items():
        own = v @ centroids[s]
        for o in seeds:
            if o != s:
                assert np.all(own > v @ centroids[o])


def test_toy_embedder_deterministic_and_normalized():
    w = np.random.default_rng(4).standard_normal(8000) * 0.1
    a, b = ToyEmbedder(5).embed(w), ToyEmbedder(5).embed(w.copy())
    assert np.array_equal(a, b)
    assert np.linalg.norm(a) == pytest.approx(1.0)
    z1, z2 = ToyEmbedder(5).embed(np.zeros(8000)), ToyEmbedder(5).embed(np.zeros(16000))
    assert np.array_equal(z1, z2)
    assert np.linalg.norm(z1) == pytest.approx(1.0)


def test_precomputed_roundtrip_bytes(tmp_path):
    data = np.random.default_rng(0).standard_normal((7, 512)).astype(np.float32)
    save_precomputed(tmp_path / "x.emb", EmbeddingSequence(data, 2.0))
    raw = (tmp_path / "x.emb").read_bytes()
    assert raw[:4] == b"EEMB"
    assert struct.unpack_from("<HIIII", raw, 4) == (1, 7, 512, 100, 2000)
    assert raw[22:] == data.astype("<f4").tobytes()
    B = load_precomputed(tmp_path / "x.emb")
    assert np.array_equal(B.data, data)
    assert B.window_size == 2.0 and B.hop == pytest.approx(0.1)


def test_precomputed_truncated_and_mismatched(tmp_path):
    data = np.zeros((4, 256), dtype=np.float32)
    save_precomputed(tmp_path / "x.emb", EmbeddingSequence(data, 1.0))
    raw = (tmp_path / "x.emb").read_bytes()
    (tmp_path / "trunc.emb").write_bytes(raw[:-10])
    with pytest.raises(ValueError):
        load_precomputed(tmp_path / "trunc.emb")
    header = struct.pack("<4sHIIII", b"EEMB", 1, 4, 512, 100, 1000)
    (tmp_path / "dim.emb").write_bytes(header + raw[22:])
    with pytest.raises(ValueError, match="payload"):
        load_precomputed(tmp_path / "dim.emb")
    (tmp_path / "hdr.emb").write_bytes(raw[:10])
    with pytest.raises(ValueError):
        load_precomputed(tmp_path / "hdr.emb")
