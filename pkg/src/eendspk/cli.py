"""``eendspk`` command line: simulate, embed, train, adapt, infer, score.

Exit codes: 0 success, 2 usage error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .embeddings import (
    EmbeddingSequence,
    ToyEmbedder,
    apply_silence_mask,
    extract_embeddings,
    load_precomputed,
    save_precomputed,
)
from .features import read_wav
from .metrics import DerBreakdown, score_corpus
from .segments import by_recording, read_rttm, write_rttm
from .simulate import MixtureSpec, generate_dataset, read_manifest
from .trainer import infer, load_checkpoint, load_config, load_dataset, train
from .vad import oracle_mask

log = logging.getLogger("eendspk")


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _unit_float(text: str) -> float:
    value = float(text)
    if not 0.0 <= value < 1.0:
        raise argparse.ArgumentTypeError(f"must be in [0, 1), got {value}")
    return value


def _window(text: str) -> float:
    if text not in ("1", "2", "3"):
        raise argparse.ArgumentTypeError(f"window must be 1, 2 or 3 seconds, got {text}")
    return float(text)


def _ref_by_recording(path) -> dict:
    return by_recording(read_rttm(path)) if path else {}


# ---------------------------------------------------------------- subcommands


def cmd_simulate(args) -> int:
    spec = MixtureSpec(target_overlap=args.overlap, seed=args.seed, max_duration=args.duration)
    rows = generate_dataset(args.out, args.count, spec, prefix=args.prefix)
    mean = np.mean([float(r["overlap_ratio"]) for r in rows])
    print(f"wrote {len(rows)} mixtures to {args.out} (mean overlap {mean:.3f})")
    return 0


def cmd_embed(args) -> int:
    root = Path(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ref = _ref_by_recording(args.oracle_vad)
    provider = ToyEmbedder(args.seed) if args.provider == "toy" else None
    for row in read_manifest(root):
        rec = row["id"]
        audio = read_wav(root / row["path"])
        if provider is not None:
            B = extract_embeddings(audio, provider, args.window)
        else:
            src = Path(args.source) / f"{rec}.npy"
            if not src.exists():
                raise FileNotFoundError(f"{src}: no frame-level embeddings for {rec}")
            B = EmbeddingSequence(np.load(src).astype(np.float32), args.window)
        if args.oracle_vad:
            if rec not in ref:
                raise ValueError(f"{args.oracle_vad}: no reference segments for {rec}")
            B = apply_silence_mask(B, oracle_mask(ref[rec], B.n_frames))
        save_precomputed(out / f"{rec}.emb", B)
        log.info("%s: %d x %d", rec, B.n_frames, B.dim)
    print(f"wrote embeddings to {out}")
    return 0


def _train_like(args, mode: str) -> int:
    cfg = replace(load_config(args.config), mode=mode)
    init = None
    if mode == "adapt":
        ckpt = load_checkpoint(args.init, expected_variant=cfg.variant)
        init = ckpt.model
    train_recs = load_dataset(args.data, cfg, args.embeddings)
    val_recs = load_dataset(args.val, cfg, args.val_embeddings) if args.val else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(cfg, train_recs, val_recs, out_dir=out, init_model=init, log_path=out / "train.log")
    last = result.history[-1] if result.history else {}
    print(f"{mode} finished: {len(result.history)} epochs, final loss {last.get('loss', float('nan')):.4f}, "
          f"checkpoint {result.final_path}")
    return 0


def cmd_train(args) -> int:
    return _train_like(args, "train")


def cmd_adapt(args) -> int:
    return _train_like(args, "adapt")


def cmd_infer(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    ref = _ref_by_recording(args.ref)
    if args.wav:
        jobs = [(Path(args.wav).stem, Path(args.wav))]
    else:
        root = Path(args.data)
        jobs = [(row["id"], root / row["path"]) for row in read_manifest(root)]
    hyp = []
    for rec, wav in jobs:
        audio = read_wav(wav)
        emb = None
        if args.embeddings and ckpt.model.uses_embeddings:
            emb = load_precomputed(Path(args.embeddings) / f"{rec}.emb")
        if args.vad == "oracle" and rec not in ref:
            raise ValueError(f"{args.ref}: no reference segments for {rec}")
        hyp += infer(ckpt, audio, rec, vad=args.vad, ref=ref.get(rec), embeddings=emb,
                     threshold=args.threshold, median_window=args.median)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_rttm(args.out, hyp)
    print(f"wrote {len(hyp)} segments for {len(jobs)} recordings to {args.out}")
    return 0


def _fmt_row(name: str, b: DerBreakdown) -> str:
    if b.total_speech <= 0:
        return f"{name:<20} {'n/a':>7} {'n/a':>7} {'n/a':>7} {'n/a':>7} {0.0:>9.2f}"
    pct = [100 * x / b.total_speech for x in (b.fa + b.miss + b.se, b.fa, b.miss, b.se)]
    return f"{name:<20} " + " ".join(f"{x:>7.2f}" for x in pct) + f" {b.total_speech:>9.2f}"


def _plot(path, labels, totals) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(labels) + 2), 4))
    x = np.arange(len(labels))
    bottom = np.zeros(len(labels))
    for part in ("fa", "miss", "se"):
        vals = np.array([100 * getattr(t, part) / t.total_speech if t.total_speech else 0.0 for t in totals])
        ax.bar(x, vals, bottom=bottom, label={"fa": "FA", "miss": "Miss", "se": "SE"}[part])
        bottom += vals
    ax.set_xticks(x, labels, rotation=20, ha="right")
    ax.set_ylabel("DER (%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def cmd_score(args) -> int:
    ref = read_rttm(args.ref)
    labels = args.label or [Path(h).stem for h in args.hyp]
    if len(labels) != len(args.hyp):
        raise ValueError("--label must be given once per --hyp")
    totals = []
    for name, hyp_path in zip(labels, args.hyp):
        per, total = score_corpus(ref, read_rttm(hyp_path), args.collar)
        print(f"# {name} (collar {args.collar:.2f} s)")
        print(f"{'recording':<20} {'DER%':>7} {'FA%':>7} {'Miss%':>7} {'SE%':>7} {'speech_s':>9}")
        for rec in sorted(per):
            print(_fmt_row(rec, per[rec]))
        print(_fmt_row("CORPUS", total))
        totals.append(total)
    if args.plot:
        _plot(args.plot, labels, totals)
        print(f"wrote plot to {args.plot}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eendspk", description="EEND-EDA diarization with speaker embeddings.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a toy two-speaker corpus")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--count", type=_positive_int, required=True, help="number of mixtures")
    s.add_argument("--overlap", type=_unit_float, default=0.344, help="target overlap ratio (default 0.344)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--duration", type=float, default=30.0, help="max mixture length in seconds")
    s.add_argument("--prefix", default="mix", help="recording id prefix")
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("embed", help="write frame-level speaker embedding files (.emb)")
    e.add_argument("--data", required=True, help="dataset directory with manifest.tsv")
    e.add_argument("--out", required=True, help="output directory for <id>.emb files")
    e.add_argument("--window", type=_window, default=1.0, help="window size in seconds: 1, 2 or 3")
    e.add_argument("--provider", choices=["toy", "file"], default="toy",
                   help="toy: built-in spectral embedder; file: <source>/<id>.npy arrays (T x E)")
    e.add_argument("--source", help="directory of .npy embeddings for --provider file")
    e.add_argument("--oracle-vad", metavar="RTTM", help="zero rows at non-speech frames of this reference")
    e.add_argument("--seed", type=int, default=0, help="toy embedder projection seed")
    e.set_defaults(func=cmd_embed)

    for name, func in (("train", cmd_train), ("adapt", cmd_adapt)):
        t = sub.add_parser(name, help=f"{name} a model from a config file")
        t.add_argument("--config", required=True, help="flat key = value config file")
        t.add_argument("--data", required=True, help="training dataset directory")
        t.add_argument("--out", required=True, help="output directory (best/, final/, train.log)")
        t.add_argument("--val", help="validation dataset directory")
        t.add_argument("--embeddings", help="precomputed .emb directory for --data")
        t.add_argument("--val-embeddings", help="precomputed .emb directory for --val")
        if name == "adapt":
            t.add_argument("--init", required=True, help="checkpoint directory to start from")
        t.set_defaults(func=func)

    i = sub.add_parser("infer", help="diarize recordings and write RTTM")
    i.add_argument("--ckpt", required=True, help="checkpoint directory")
    src = i.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="dataset directory with manifest.tsv")
    src.add_argument("--wav", help="single 8 kHz mono WAV file")
    i.add_argument("--out", required=True, help="output RTTM path")
    i.add_argument("--vad", choices=["none", "oracle", "energy"], default="none")
    i.add_argument("--ref", help="reference RTTM (required for --vad oracle)")
    i.add_argument("--embeddings", help="precomputed .emb directory")
    i.add_argument("--threshold", type=float, default=0.5)
    i.add_argument("--median", type=int, default=11, help="median filter length in frames (odd)")
    i.set_defaults(func=cmd_infer)

    c = sub.add_parser("score", help="DER table (per recording and corpus)")
    c.add_argument("--ref", required=True, help="reference RTTM")
    c.add_argument("--hyp", required=True, action="append", help="hypothesis RTTM (repeat to compare)")
    c.add_argument("--label", action="append", help="display name per --hyp")
    c.add_argument("--collar", type=float, default=0.25)
    c.add_argument("--plot", help="write a DER bar chart PNG")
    c.set_defaults(func=cmd_score)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "infer":
        if args.vad == "oracle" and not args.ref:
            parser.error("--vad oracle requires --ref")
        if args.median < 1 or args.median % 2 == 0:
            parser.error("--median must be a positive odd number")
    if args.command == "embed" and args.provider == "file" and not args.source:
        parser.error("--provider file requires --source")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, AssertionError, FloatingPointError) as exc:
        print(f"eendspk {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
