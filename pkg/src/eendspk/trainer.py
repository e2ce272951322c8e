"""Training, adaptation and inference orchestration, plus checkpoint I/O."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .embeddings import (
    EmbeddingSequence,
    ToyEmbedder,
    align_lengths,
    apply_silence_mask,
    extract_embeddings,
    load_precomputed,
)
from .features import AudioSignal, FrameSequence, extract_features, read_wav
from .losses import ALPHA, batch_loss
from .metrics import binarize, frame_der
from .model import EENDEDA, EncoderConfig, predict_posteriors
from .segments import Segment, SegmentList, labels_to_segments, read_rttm, segments_to_labels
from .simulate import read_manifest
from .vad import energy_vad, gate_hypothesis, oracle_mask

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
VAD_MODES = ("none", "oracle", "energy")


@dataclass
class TrainConfig:
    variant: str = "C"
    epochs: int = 50
    warmup_steps: int = 500
    batch_size: int = 4
    chunk_frames: int = 500
    mode: str = "train"
    seed: int = 0
    use_oracle_vad_on_embeddings: bool = True
    # model
    n_blocks: int = 4
    d_model: int = 256
    n_heads: int = 4
    ff_dim: int = 2048
    dropout: float = 0.1
    shuffle_eda: bool = True
    # optimizer
    lr_scale: float = 1.0
    grad_clip: float = 5.0
    target_val_der: float = 0.0  # stop once validation frame DER drops below this; 0 disables
    # embeddings
    window_size: float = 1.0
    embedding_seed: int = 0
    n_speakers: int = 2

    def __post_init__(self):
        if self.variant not in ("baseline", "A", "B", "C"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.mode not in ALPHA:
            raise ValueError(f"mode must be train or adapt, got {self.mode!r}")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if self.chunk_frames < 16:
            raise ValueError("chunk_frames must be >= 16")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    @property
    def alpha(self) -> float:
        return ALPHA[self.mode]

    @property
    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.n_blocks, self.d_model, self.n_heads, self.ff_dim, self.dropout)


def _parse_value(raw: str, kind):
    if kind is bool or kind == "bool":
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind is int or kind == "int":
        return int(raw)
    if kind is float or kind == "float":
        return float(raw)
    return raw.strip()


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment; unknown keys are rejected."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key not in types:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(raw, types[key])
    return replace(base or TrainConfig(), **values)


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text())


def format_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in asdict(cfg).items())


def noam_lr(step: int, d_model: int, warmup: int, scale: float = 1.0) -> float:
    step = max(step, 1)
    return scale * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


# ---------------------------------------------------------------- data


@dataclass
class Recording:
    id: str
    X: np.ndarray | None
    B: np.ndarray | None
    labels: np.ndarray
    segments: SegmentList = field(default_factory=list)
    speech_mask: np.ndarray | None = None

    @property
    def n_frames(self) -> int:
        return self.labels.shape[0]


def prepare_recording(rec_id: str, audio: AudioSignal | None, segments: SegmentList, cfg: TrainConfig,
                      features: FrameSequence | None = None,
                      embeddings: EmbeddingSequence | None = None) -> Recording:
    """Features, embeddings and frame labels on a common grid.

    Baseline never computes or reads embeddings; variant B never keeps features.
    """
    needs_emb = cfg.variant != "baseline"
    if features is None:
        if audio is None:
            raise ValueError("need audio or precomputed features")
        features = extract_features(audio)
    if needs_emb and embeddings is None:
        if audio is None:
            raise ValueError("need audio or precomputed embeddings")
        embeddings = extract_embeddings(audio, ToyEmbedder(cfg.embedding_seed), cfg.window_size)
    if needs_emb:
        features, embeddings = align_lengths(features, embeddings)
    T = features.n_frames
    labels, names = segments_to_labels(segments, T)
    labels = _fixed_speakers(labels, cfg.n_speakers)
    mask = oracle_mask(segments, T)
    B = None
    if needs_emb:
        if cfg.use_oracle_vad_on_embeddings:
            embeddings = apply_silence_mask(embeddings, mask)
        B = embeddings.data.astype(np.float32)
    X = features.data.astype(np.float32) if cfg.variant != "B" else None
    return Recording(rec_id, X, B, labels, list(segments), mask)


def _fixed_speakers(labels: np.ndarray, n: int) -> np.ndarray:
    if labels.shape[1] > n:
        raise ValueError(f"recording has {labels.shape[1]} speakers, model handles {n}")
    out = np.zeros((labels.shape[0], n), dtype=np.float32)
    out[:, :labels.shape[1]] = labels
    return out


def load_dataset(dataset_dir, cfg: TrainConfig, embeddings_dir=None) -> list[Recording]:
    root = Path(dataset_dir)
    recs = []
    for row in read_manifest(root):
        audio = read_wav(root / row["path"])
        segments = read_rttm(root / f"{row['id']}.rttm")
        emb = None
        if embeddings_dir is not None and cfg.variant != "baseline":
            emb = load_precomputed(Path(embeddings_dir) / f"{row['id']}.emb")
            if not math.isclose(emb.window_size, cfg.window_size):
                raise ValueError(f"{row['id']}: embedding window {emb.window_size}s != config {cfg.window_size}s")
        recs.append(prepare_recording(row["id"], audio, segments, cfg, embeddings=emb))
    if not recs:
        raise ValueError(f"{dataset_dir}: empty dataset")
    return recs


def make_chunks(recs: Sequence[Recording], chunk_frames: int) -> list[tuple[int, int, int]]:
    """(recording index, start frame, end frame) for fixed-length chunks."""
    out = []
    for i, r in enumerate(recs):
        for start in range(0, r.n_frames, chunk_frames):
            out.append((i, start, min(start + chunk_frames, r.n_frames)))
    return out


def collate(recs: Sequence[Recording], chunks, variant: str, check_silence: bool) -> dict:
    lengths = torch.tensor([e - s for _, s, e in chunks])
    T = int(lengths.max())
    n_spk = recs[chunks[0][0]].labels.shape[1]

    def pad(arrs, dim):
        out = torch.zeros(len(arrs), T, dim)
        for k, a in enumerate(arrs):
            out[k, :len(a)] = torch.from_numpy(a)
        return out

    labels = pad([recs[i].labels[s:e] for i, s, e in chunks], n_spk)
    X = B = None
    if variant != "B":
        X = pad([recs[i].X[s:e] for i, s, e in chunks], recs[chunks[0][0]].X.shape[1])
    if variant != "baseline":
        B_list = [recs[i].B[s:e] for i, s, e in chunks]
        if check_silence:
            for (i, s, e), b in zip(chunks, B_list):
                silent = recs[i].speech_mask[s:e] == 0
                if np.any(b[silent]):
                    raise AssertionError(f"{recs[i].id}: non-zero embedding at a silent frame")
        B = pad(B_list, B_list[0].shape[1])
    return {"X": X, "B": B, "labels": labels, "lengths": lengths,
            "speech_mask": pad([recs[i].speech_mask[s:e, None].astype(np.float32) for i, s, e in chunks], 1)[..., 0],
            "chunks": chunks}


# ---------------------------------------------------------------- checkpoints


def _state_digest(state: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(state):
        t = state[name].detach().cpu().contiguous()
        h.update(f"{name}|{t.dtype}|{tuple(t.shape)}|".encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def build_manifest(model: EENDEDA, cfg: TrainConfig, state: dict) -> dict:
    c = model.cfg
    return {
        "format_version": CHECKPOINT_VERSION,
        "variant": model.variant,
        "n_blocks": c.n_blocks,
        "d_model": c.d_model,
        "n_heads": c.n_heads,
        "ff_dim": c.ff_dim,
        "dropout": c.dropout,
        "feat_dim": model.feat_dim,
        "emb_dim": model.emb_dim,
        "input_dim": model.input_dim,
        "window_size": cfg.window_size,
        "embedding_seed": cfg.embedding_seed,
        "use_oracle_vad_on_embeddings": cfg.use_oracle_vad_on_embeddings,
        "n_speakers": cfg.n_speakers,
        "mode": cfg.mode,
        "alpha": cfg.alpha,
        "weights_sha256": _state_digest(state),
    }


def format_manifest(manifest: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in manifest.items())


def parse_manifest(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if line.strip():
            key, value = (p.strip() for p in line.split("=", 1))
            out[key] = value
    return out


def save_checkpoint(path, model: EENDEDA, cfg: TrainConfig) -> Path:
    """Checkpoint directory: ``manifest.txt`` (plain key = value) + ``weights.pt``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}
    torch.save(state, path / "weights.pt")
    (path / "manifest.txt").write_text(format_manifest(build_manifest(model, cfg, state)))
    return path


@dataclass
class Checkpoint:
    model: EENDEDA
    cfg: TrainConfig
    manifest: dict


def load_checkpoint(path, expected_variant: str | None = None) -> Checkpoint:
    path = Path(path)
    manifest_path, weights_path = path / "manifest.txt", path / "weights.pt"
    if not manifest_path.exists() or not weights_path.exists():
        raise FileNotFoundError(f"{path}: not a checkpoint directory")
    m = parse_manifest(manifest_path.read_text())
    version = int(m.get("format_version", -1))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    if expected_variant is not None and m["variant"] != expected_variant:
        raise ValueError(f"{path}: checkpoint variant {m['variant']} cannot be run as {expected_variant}")
    try:
        state = torch.load(io.BytesIO(weights_path.read_bytes()), map_location="cpu", weights_only=True)
    except Exception as exc:
        raise ValueError(f"{path}: corrupted weights ({exc})") from exc
    if _state_digest(state) != m["weights_sha256"]:
        raise ValueError(f"{path}: weights do not match manifest digest")
    cfg = TrainConfig(
        variant=m["variant"], mode=m["mode"], n_blocks=int(m["n_blocks"]), d_model=int(m["d_model"]),
        n_heads=int(m["n_heads"]), ff_dim=int(m["ff_dim"]), dropout=float(m["dropout"]),
        window_size=float(m["window_size"]), embedding_seed=int(m["embedding_seed"]),
        use_oracle_vad_on_embeddings=m["use_oracle_vad_on_embeddings"] == "True",
        n_speakers=int(m["n_speakers"]))
    model = EENDEDA(cfg.variant, cfg.encoder_config, int(m["feat_dim"]), int(m["emb_dim"]))
    model.load_state_dict(state)
    model.eval()
    return Checkpoint(model, cfg, m)


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: EENDEDA
    history: list[dict]
    best_path: Path | None = None
    final_path: Path | None = None


def evaluate_frame_der(model: EENDEDA, recs: Sequence[Recording], n_speakers: int = 2,
                       median_window: int = 1) -> float:

    total = None
    for r in recs:
        post = predict_posteriors(model, r.X, r.B, n_speakers)
        b = frame_der(r.labels, binarize(post, 0.5, median_window))
        total = b if total is None else total + b
    return total.der


def train(cfg: TrainConfig, train_recs: Sequence[Recording], val_recs: Sequence[Recording] | None = None,
          out_dir=None, init_model: EENDEDA | None = None, log_path=None,
          batch_hook: Callable[[dict], None] | None = None) -> TrainResult:
    """Noam-scheduled Adam on PIT + attractor-existence loss.

    ``val_recs`` (if given) drive per-epoch frame DER and best-checkpoint
    selection; otherwise the epoch training loss does.
    """
    if not train_recs:
        raise ValueError("empty training set")
    torch.manual_seed(cfg.seed)
    model = init_model if init_model is not None else EENDEDA(cfg.variant, cfg.encoder_config)
    if model.variant != cfg.variant:
        raise ValueError(f"initial model is variant {model.variant}, config says {cfg.variant}")
    opt = torch.optim.Adam(model.parameters(), lr=0.0, betas=(0.9, 0.98), eps=1e-9)
    gen = torch.Generator().manual_seed(cfg.seed)
    chunks = make_chunks(train_recs, cfg.chunk_frames)
    check_silence = cfg.use_oracle_vad_on_embeddings and cfg.variant != "baseline"
    out = Path(out_dir) if out_dir is not None else None
    log_file = open(log_path, "w") if log_path is not None else None
    history: list[dict] = []
    best, best_path = math.inf, None
    step = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            model.train()
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(chunks))
            sums = np.zeros(3)
            n_batches = 0
            for k in range(0, len(order), cfg.batch_size):
                batch = collate(train_recs, [chunks[j] for j in order[k:k + cfg.batch_size]],
                                cfg.variant, check_silence)
                if batch_hook is not None:
                    batch_hook(batch)
                step += 1
                lr = noam_lr(step, cfg.d_model, cfg.warmup_steps, cfg.lr_scale)
                for g in opt.param_groups:
                    g["lr"] = lr
                logits, _, exist = model(batch["X"], batch["B"], batch["lengths"], cfg.n_speakers,
                                         shuffle=cfg.shuffle_eda, generator=gen)
                losses = batch_loss(logits, exist, batch["labels"], batch["lengths"], cfg.mode)
                opt.zero_grad()
                losses.total.backward()
                grad_norm = float(torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip))
                if not math.isfinite(losses.total.item()):
                    raise FloatingPointError(
                        f"non-finite loss at step {step} (lr={lr:.3g}, grad_norm={grad_norm:.3g})")
                opt.step()
                sums += [losses.total.item(), losses.L_d.item(), losses.L_alpha.item()]
                n_batches += 1
            mean = sums / max(n_batches, 1)
            record = {"epoch": epoch, "step": step, "loss": float(mean[0]), "L_d": float(mean[1]),
                      "L_alpha": float(mean[2]),
                      "lr": noam_lr(step, cfg.d_model, cfg.warmup_steps, cfg.lr_scale), "val_der": None}
            if val_recs:
                record["val_der"] = evaluate_frame_der(model, val_recs, cfg.n_speakers)
            history.append(record)
            if log_file:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
            log.info("epoch %d step %d loss %.4f val_der %s", epoch, step, mean[0], record["val_der"])
            score = record["val_der"] if record["val_der"] is not None else record["loss"]
            if out is not None and score < best:
                best = score
                best_path = save_checkpoint(out / "best", model, cfg)
            if record["val_der"] is not None and record["val_der"] < cfg.target_val_der:
                break
    finally:
        if log_file:
            log_file.close()
    model.eval()
    final_path = save_checkpoint(out / "final", model, cfg) if out is not None else None
    return TrainResult(model, history, best_path, final_path)


# ---------------------------------------------------------------- inference


def infer(checkpoint: Checkpoint | EENDEDA, audio: AudioSignal | None = None, recording_id: str = "rec",
          vad: str = "none", ref: SegmentList | None = None, features: FrameSequence | None = None,
          embeddings: EmbeddingSequence | None = None, cfg: TrainConfig | None = None,
          threshold: float = 0.5, median_window: int = 11) -> SegmentList:
    """Forward pass -> binarized, median-filtered decisions -> optional VAD gate -> segments."""

    if isinstance(checkpoint, Checkpoint):
        model, cfg = checkpoint.model, checkpoint.cfg
    else:
        model, cfg = checkpoint, cfg or TrainConfig(variant=checkpoint.variant)
    if vad not in VAD_MODES:
        raise ValueError(f"vad must be one of {VAD_MODES}")
    if audio is not None and len(audio) == 0:
        raise ValueError("empty audio")
    if vad == "oracle" and ref is None:
        raise ValueError("oracle VAD needs reference segments")
    if vad == "energy" and audio is None:
        raise ValueError("energy VAD needs audio")
    if features is None and model.uses_features:
        if audio is None:
            raise ValueError("need audio or features")
        features = extract_features(audio)
    if embeddings is None and model.uses_embeddings:
        if audio is None:
            raise ValueError("need audio or embeddings")
        embeddings = extract_embeddings(audio, ToyEmbedder(cfg.embedding_seed), cfg.window_size)
    if features is not None and features.dim != model.feat_dim:
        raise ValueError(f"feature dim {features.dim} does not match checkpoint ({model.feat_dim})")
    if embeddings is not None and model.uses_embeddings:
        if embeddings.dim != model.emb_dim:
            raise ValueError(f"embedding dim {embeddings.dim} does not match checkpoint ({model.emb_dim})")
        if not math.isclose(embeddings.window_size, cfg.window_size):
            raise ValueError(f"embedding window {embeddings.window_size}s does not match "
                             f"checkpoint ({cfg.window_size}s)")
    if features is not None and embeddings is not None and model.uses_embeddings:
        features, embeddings = align_lengths(features, embeddings)
    X = features if model.uses_features else None
    B = embeddings if model.uses_embeddings else None
    post = predict_posteriors(model, X, B, cfg.n_speakers)
    hyp = binarize(post, threshold, median_window)
    if vad == "oracle":
        hyp = gate_hypothesis(hyp, oracle_mask(ref, len(hyp)))
    elif vad == "energy":
        mask = energy_vad(audio)
        mask = np.pad(mask, (0, max(0, len(hyp) - len(mask))))[:len(hyp)]
        hyp = gate_hypothesis(hyp, mask)
    return labels_to_segments(hyp, recording_id, [f"spk{i}" for i in range(hyp.shape[1])])
