import json
import math
import shutil

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

import eendspk.trainer as trainer_mod
from eendspk.embeddings import EmbeddingSequence
from eendspk.features import AudioSignal, extract_features
from eendspk.segments import segments_to_labels
from eendspk.simulate import MixtureSpec, generate_dataset, simulate_conversation
from eendspk.trainer import (
    TrainConfig,
    format_config,
    infer,
    load_checkpoint,
    load_dataset,
    make_chunks,
    noam_lr,
    parse_config,
    prepare_recording,
    save_checkpoint,
    train,
)
from eendspk.vad import oracle_mask

TINY = dict(n_blocks=1, d_model=16, n_heads=2, ff_dim=32, dropout=0.0, chunk_frames=40,
            batch_size=2, warmup_steps=10, epochs=2)


def tiny(**kw) -> TrainConfig:
    return TrainConfig(**{**TINY, **kw})


@pytest.fixture(scope="module")
def corpus():
    out = []
    for i in range(3):
        audio, segs = simulate_conversation(MixtureSpec(seed=100 + i, max_duration=8.0), f"r{i}")
        out.append((f"r{i}", audio, segs))
    return out


def recs_for(corpus, cfg):
    return [prepare_recording(rid, audio, segs, cfg) for rid, audio, segs in corpus]


# ---------------------------------------------------------------- config and schedule


@given(st.integers(1, 5000), st.integers(1, 1000), st.sampled_from([16, 256]))
def test_noam_closed_form(step, warmup, d):
    want = d ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)
    assert noam_lr(step, d, warmup) == pytest.approx(want, rel=1e-12)


def test_noam_peaks_at_warmup():
    lrs = [noam_lr(k, 256, 100) for k in range(1, 400)]
    assert int(np.argmax(lrs)) + 1 == 100
    assert noam_lr(100, 256, 100, scale=2.0) == pytest.approx(2 * 256 ** -0.5 * 0.1)


def test_parse_config():
    cfg = parse_config("variant = A  # comment\nepochs=3\n\nuse_oracle_vad_on_embeddings = false\nlr_scale = 0.5\n")
    assert (cfg.variant, cfg.epochs, cfg.use_oracle_vad_on_embeddings, cfg.lr_scale) == ("A", 3, False, 0.5)
    assert parse_config(format_config(cfg)) == cfg
    with pytest.raises(ValueError, match="unknown key"):
        parse_config("learning_rate = 1")
    with pytest.raises(ValueError):
        parse_config("warmup_steps = 0")
    with pytest.raises(ValueError):
        parse_config("chunk_frames = 8")
    with pytest.raises(ValueError):
        parse_config("variant = D")
    with pytest.raises(ValueError):
        parse_config("epochs")


def test_alpha_follows_mode():
    assert TrainConfig(mode="train").alpha == 1.0
    assert TrainConfig(mode="adapt").alpha == 0.1


# ---------------------------------------------------------------- data path


def test_prepare_recording_streams(corpus):
    rid, audio, segs = corpus[0]
    T = extract_features(audio).n_frames
    rc = prepare_recording(rid, audio, segs, tiny(variant="C"))
    assert rc.X.shape == (T, 345) and rc.B.shape == (T, 512)
    assert rc.labels.shape == (T, 2)
    assert prepare_recording(rid, audio, segs, tiny(variant="B")).X is None
    assert prepare_recording(rid, audio, segs, tiny(variant="baseline")).B is None


def test_baseline_never_touches_embeddings(corpus, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise AssertionError("embedding stream read")

    monkeypatch.setattr(trainer_mod, "extract_embeddings", boom)
    monkeypatch.setattr(trainer_mod, "load_precomputed", boom)
    generate_dataset(tmp_path / "d", 2, MixtureSpec(seed=1, max_duration=6.0))
    cfg = tiny(variant="baseline", epochs=1)
    recs = load_dataset(tmp_path / "d", cfg, embeddings_dir=tmp_path / "missing")
    seen = []
    train(cfg, recs, batch_hook=lambda b: seen.append(b["B"]))
    assert seen and all(b is None for b in seen)


def test_silence_contract_in_batches(corpus):
    cfg = tiny(variant="C", epochs=1)
    recs = recs_for(corpus, cfg)
    checked = []

    def hook(batch):
        for k, n in enumerate(batch["lengths"].tolist()):
            silent = batch["speech_mask"][k, :n] == 0
            checked.append(int(silent.sum()))
            assert not batch["B"][k, :n][silent].any()

    train(cfg, recs, batch_hook=hook)
    assert sum(checked) > 0


def test_silence_violation_is_caught(corpus):
    cfg = tiny(variant="C", epochs=1)
    recs = recs_for(corpus, cfg)
    silent = np.flatnonzero(recs[0].speech_mask == 0)
    recs[0].B[silent[0]] = 1.0
    with pytest.raises(AssertionError, match="silent"):
        train(cfg, recs)


def test_chunks_cover_every_frame(corpus):
    recs = recs_for(corpus, tiny())
    chunks = make_chunks(recs, 40)
    for i, r in enumerate(recs):
        spans = sorted((s, e) for j, s, e in chunks if j == i)
        assert spans[0][0] == 0 and spans[-1][1] == r.n_frames
        assert all(a[1] == b[0] for a, b in zip(spans, spans[1:]))


# ---------------------------------------------------------------- training


def test_same_seed_same_result(corpus, tmp_path):
    cfg = tiny(variant="C", seed=3, dropout=0.1)
    recs = recs_for(corpus, cfg)
    a = train(cfg, recs, out_dir=tmp_path / "a")
    b = train(cfg, recs, out_dir=tmp_path / "b")
    assert a.history[-1]["loss"] == b.history[-1]["loss"]
    ma = (tmp_path / "a" / "final" / "manifest.txt").read_text()
    assert ma == (tmp_path / "b" / "final" / "manifest.txt").read_text()


def test_training_log_records(corpus, tmp_path):
    cfg = tiny(variant="A", epochs=3)
    recs = recs_for(corpus, cfg)
    result = train(cfg, recs, recs[:1], out_dir=tmp_path, log_path=tmp_path / "log.jsonl")
    rows = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in rows] == [1, 2, 3]
    assert set(rows[0]) == {"epoch", "step", "loss", "L_d", "L_alpha", "lr", "val_der"}
    for r in rows:
        assert r["loss"] == pytest.approx(r["L_d"] + r["L_alpha"])
        assert 0 <= r["val_der"]
    assert result.best_path is not None and result.final_path is not None


def test_adapt_mode_weights_existence_loss(corpus):
    cfg = tiny(variant="C", mode="adapt", epochs=1)
    hist = train(cfg, recs_for(corpus, cfg)).history
    assert hist[0]["loss"] == pytest.approx(hist[0]["L_d"] + 0.1 * hist[0]["L_alpha"])


def test_nan_loss_aborts_with_diagnostic(corpus):
    cfg = tiny(variant="C", epochs=1)
    recs = recs_for(corpus, cfg)

    def poison(batch):
        batch["X"][:] = float("nan")

    with pytest.raises(FloatingPointError, match=r"step 1 .*lr=.*grad_norm="):
        train(cfg, recs, batch_hook=poison)


def test_init_model_variant_must_match(corpus):
    cfg = tiny(variant="C", epochs=1)
    model = train(cfg, recs_for(corpus, cfg)).model
    with pytest.raises(ValueError, match="variant"):
        train(tiny(variant="B", epochs=1), recs_for(corpus, tiny(variant="B")), init_model=model)


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        train(tiny(), [])


@pytest.mark.slow
def test_desk_training_loss_goes_down(tmp_path):
    """Desk schedule (warmup 500, 50 epochs) on 40 short toy mixtures: epoch-averaged
    loss falls from one block of ten epochs to the next."""
    generate_dataset(tmp_path / "d", 40, MixtureSpec(seed=11, max_duration=10.0))
    cfg = TrainConfig(variant="C", epochs=50, warmup_steps=500, batch_size=8, chunk_frames=100,
                      n_blocks=2, d_model=64, n_heads=4, ff_dim=256)
    hist = train(cfg, load_dataset(tmp_path / "d", cfg)).history
    blocks = [np.mean([h["loss"] for h in hist[k:k + 10]]) for k in range(0, 50, 10)]
    assert all(b < a for a, b in zip(blocks, blocks[1:])), blocks


# ---------------------------------------------------------------- checkpoints


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    cfg = tiny(variant="C", epochs=1)
    root = tmp_path_factory.mktemp("ckpt")
    result = train(cfg, recs_for(corpus, cfg), out_dir=root)
    return result.final_path, cfg


def test_checkpoint_roundtrip(trained, tmp_path):
    path, cfg = trained
    ck = load_checkpoint(path)
    save_checkpoint(tmp_path / "again", ck.model, ck.cfg)
    assert (path / "manifest.txt").read_bytes() == (tmp_path / "again" / "manifest.txt").read_bytes()
    ck2 = load_checkpoint(tmp_path / "again")
    for (k, a), (_, b) in zip(ck.model.state_dict().items(), ck2.model.state_dict().items()):
        assert torch.equal(a, b), k
    assert ck2.cfg.variant == "C" and ck2.cfg.d_model == 16


def test_checkpoint_corruption_and_mismatch(trained, tmp_path):
    path, cfg = trained
    bad = tmp_path / "bad"
    shutil.copytree(path, bad)
    raw = bytearray((bad / "weights.pt").read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    (bad / "weights.pt").write_bytes(bytes(raw))
    with pytest.raises(ValueError):
        load_checkpoint(bad)
    with pytest.raises(ValueError, match="variant"):
        load_checkpoint(path, expected_variant="B")
    old = tmp_path / "old"
    shutil.copytree(path, old)
    text = (old / "manifest.txt").read_text().replace("format_version = 1", "format_version = 0")
    (old / "manifest.txt").write_text(text)
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(old)
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nothing")


# ---------------------------------------------------------------- inference


def _frames(segs, T):
    if not segs:
        return np.zeros((T, 2), dtype=int)
    return segments_to_labels(segs, T, speaker_order=["spk0", "spk1"])[0]


def test_oracle_gating_only_removes_speech(trained, corpus):
    path, _ = trained
    ck = load_checkpoint(path)
    rid, audio, segs = corpus[1]
    T = extract_features(audio).n_frames
    free = _frames(infer(ck, audio, rid, vad="none", threshold=0.3), T)
    gated = _frames(infer(ck, audio, rid, vad="oracle", ref=segs, threshold=0.3), T)
    mask = oracle_mask(segs, T).astype(bool)
    assert np.all(gated <= free)
    assert np.array_equal(gated[mask], free[mask])
    assert not gated[~mask].any()


def test_infer_guards(trained, corpus):
    path, cfg = trained
    ck = load_checkpoint(path)
    rid, audio, segs = corpus[0]
    with pytest.raises(ValueError):
        infer(ck, AudioSignal(np.zeros(0)))
    with pytest.raises(ValueError, match="oracle"):
        infer(ck, audio, vad="oracle")
    with pytest.raises(ValueError):
        infer(ck, audio, vad="sometimes")
    wrong_dim = EmbeddingSequence(np.zeros((80, 256)), 1.0)
    with pytest.raises(ValueError, match="dim"):
        infer(ck, audio, embeddings=wrong_dim)
    wrong_window = EmbeddingSequence(np.zeros((80, 512)), 2.0)
    with pytest.raises(ValueError, match="window"):
        infer(ck, audio, embeddings=wrong_window)


def test_energy_vad_inference_runs(trained, corpus):
    path, _ = trained
    rid, audio, segs = corpus[2]
    out = infer(load_checkpoint(path), audio, rid, vad="energy", median_window=1)
    assert all(s.recording_id == rid and s.speaker in ("spk0", "spk1") for s in out)
    assert all(s.offset <= audio.duration + 0.1 + 1e-9 for s in out)
    assert math.isfinite(sum(s.duration for s in out))
