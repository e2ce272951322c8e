"""Self-attentive EEND encoder with an encoder-decoder attractor head, and the
three ways of feeding frame-level speaker embeddings into it.

Variants:
    baseline  acoustic features -> encoder -> EDA -> posteriors
    A         acoustic features -> encoder -> e;  embeddings -> 1-block encoder -> EDA;
              posteriors from e and those attractors
    B         embeddings only -> encoder -> EDA -> posteriors
    C         [features ; embeddings] -> encoder -> EDA -> posteriors
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence

FEAT_DIM = 345
EMB_DIM = 512
VARIANTS = ("baseline", "A", "B", "C")


@dataclass(frozen=True)
class EncoderConfig:
    n_blocks: int = 4
    d_model: int = 256
    n_heads: int = 4
    ff_dim: int = 2048
    dropout: float = 0.1

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")


def input_dim_for(variant: str, feat_dim: int = FEAT_DIM, emb_dim: int = EMB_DIM) -> int:
    return {"baseline": feat_dim, "A": feat_dim, "B": emb_dim, "C": feat_dim + emb_dim}[variant]


class TransformerBlock(nn.Module):
    """Pre-norm self-attention block (no positional encoding)."""

    def __init__(self, d_model: int, n_heads: int, ff_dim: int, dropout: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = nn.MultiheadAttention(d_model, n_heads, dropout=dropout, batch_first=True)
        self.norm2 = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(nn.Linear(d_model, ff_dim), nn.ReLU(), nn.Dropout(dropout),
                                nn.Linear(ff_dim, d_model))
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, pad_mask=None):
        h = self.norm1(x)
        h, _ = self.attn(h, h, h, key_padding_mask=pad_mask, need_weights=False)
        x = x + self.dropout(h)
        return x + self.dropout(self.ff(self.norm2(x)))


class SAEncoder(nn.Module):
    def __init__(self, in_dim: int, cfg: EncoderConfig, n_blocks: int | None = None, final_norm: bool = True):
        super().__init__()
        self.in_dim = in_dim
        self.proj = nn.Linear(in_dim, cfg.d_model)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.d_model, cfg.n_heads, cfg.ff_dim, cfg.dropout)
            for _ in range(n_blocks or cfg.n_blocks))
        self.norm = nn.LayerNorm(cfg.d_model) if final_norm else nn.Identity()

    def forward(self, x, pad_mask=None):
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"encoder expects input dim {self.in_dim}, got {x.shape[-1]}")
        h = self.proj(x)
        for block in self.blocks:
            h = block(h, pad_mask)
        return self.norm(h)


class EncoderDecoderAttractor(nn.Module):
    def __init__(self, d_model: int):
        super().__init__()
        self.encoder = nn.LSTM(d_model, d_model, batch_first=True)
        self.decoder = nn.LSTM(d_model, d_model, batch_first=True)
        self.counter = nn.Linear(d_model, 1)

    def forward(self, e, lengths, n_attractors: int, shuffle: bool = False, generator=None):
        """Returns (attractors B x n x D, existence logits B x n)."""
        if n_attractors < 1:
            raise ValueError("n_attractors must be >= 1")
        if e.shape[1] == 0 or (lengths is not None and int(lengths.min()) < 1):
            raise ValueError("EDA needs a non-empty sequence")
        batch, T, D = e.shape
        if lengths is None:
            lengths = torch.full((batch,), T, dtype=torch.long)
        if shuffle:
            order = torch.arange(T).repeat(batch, 1)
            for i, n in enumerate(lengths.tolist()):
                order[i, :n] = torch.randperm(n, generator=generator)
            e = torch.gather(e, 1, order.to(e.device).unsqueeze(-1).expand(-1, -1, D))
        packed = pack_padded_sequence(e, lengths.cpu(), batch_first=True, enforce_sorted=False)
        _, (h0, c0) = self.encoder(packed)
        zeros = e.new_zeros(batch, n_attractors, D)
        attractors, _ = self.decoder(zeros, (h0, c0))
        return attractors, self.counter(attractors).squeeze(-1)


def posteriors(e: torch.Tensor, attractors: torch.Tensor, n_speakers: int | None = None) -> torch.Tensor:
    """sigmoid(e_t . a_s) for the first ``n_speakers`` attractors."""
    if e.shape[-1] != attractors.shape[-1]:
        raise ValueError(f"dimension mismatch: e has {e.shape[-1]}, attractors {attractors.shape[-1]}")
    if n_speakers is not None:
        attractors = attractors[..., :n_speakers, :]
    return torch.sigmoid(e @ attractors.transpose(-1, -2))


class EENDEDA(nn.Module):
    def __init__(self, variant: str = "baseline", cfg: EncoderConfig = EncoderConfig(),
                 feat_dim: int = FEAT_DIM, emb_dim: int = EMB_DIM):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        self.variant = variant
        self.cfg = cfg
        self.feat_dim = feat_dim
        self.emb_dim = emb_dim
        self.encoder = SAEncoder(input_dim_for(variant, feat_dim, emb_dim), cfg)
        self.emb_encoder = (SAEncoder(emb_dim, cfg, n_blocks=1, final_norm=False)
                            if variant == "A" else None)
        self.eda = EncoderDecoderAttractor(cfg.d_model)

    @property
    def input_dim(self) -> int:
        return self.encoder.in_dim

    @property
    def uses_embeddings(self) -> bool:
        return self.variant != "baseline"

    @property
    def uses_features(self) -> bool:
        return self.variant != "B"

    def _check_inputs(self, X, B):
        if self.uses_embeddings and B is None:
            raise ValueError(f"variant {self.variant} requires the embedding sequence")
        if self.uses_features and X is None:
            raise ValueError(f"variant {self.variant} requires acoustic features")
        if X is not None and B is not None and X.shape[:-1] != B.shape[:-1]:
            raise ValueError(f"feature/embedding frame mismatch: {tuple(X.shape)} vs {tuple(B.shape)}")

    def encode(self, X, B, pad_mask=None):
        """Returns (e used for posteriors, sequence fed to EDA)."""
        self._check_inputs(X, B)
        if self.variant == "baseline":
            e = self.encoder(X, pad_mask)
            return e, e
        if self.variant == "A":
            return self.encoder(X, pad_mask), self.emb_encoder(B, pad_mask)
        if self.variant == "B":
            e = self.encoder(B, pad_mask)
            return e, e
        e = self.encoder(torch.cat([X, B], dim=-1), pad_mask)
        return e, e

    def forward(self, X=None, B=None, lengths=None, n_speakers: int = 2, shuffle: bool = False,
                generator=None):
        """Batched forward pass.

        X: (batch, T, feat_dim), B: (batch, T, emb_dim), lengths: (batch,) valid frames.
        Returns frame logits (batch, T, n_speakers), attractors (batch, n_speakers + 1, D)
        and existence logits (batch, n_speakers + 1).
        """
        ref = X if X is not None else B
        if ref is None:
            raise ValueError("no input given")
        batch, T = ref.shape[:2]
        pad_mask = None
        if lengths is not None:
            pad_mask = torch.arange(T, device=ref.device)[None, :] >= lengths[:, None].to(ref.device)
        e, e_att = self.encode(X, B, pad_mask)
        attractors, exist_logits = self.eda(e_att, lengths, n_speakers + 1, shuffle, generator)
        logits = e @ attractors[:, :n_speakers].transpose(-1, -2)
        return logits, attractors, exist_logits

    @torch.no_grad()
    def estimate_speakers(self, X=None, B=None, max_speakers: int = 4, threshold: float = 0.5):
        """Decode attractors until existence probability drops below ``threshold``;
        returns (posteriors T x S_hat, existence probabilities)."""
        logits, attractors, exist = self.forward(X, B, n_speakers=max_speakers)
        probs = torch.sigmoid(exist[0])
        below = (probs < threshold).nonzero()
        n = int(below[0]) if len(below) else max_speakers
        return torch.sigmoid(logits[0, :, :n]), probs


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def _as_batch(x, dtype):
    if x is None:
        return None
    data = getattr(x, "data", x)
    return torch.as_tensor(np.asarray(data), dtype=dtype).unsqueeze(0)


@torch.no_grad()
def predict_posteriors(model: EENDEDA, X=None, B=None, n_speakers: int = 2) -> np.ndarray:
    """Eval-mode posteriors (T x S) for one recording given FrameSequence / EmbeddingSequence
    objects or plain arrays."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    Xt = _as_batch(X, dtype) if model.uses_features else None
    Bt = _as_batch(B, dtype) if model.uses_embeddings else None
    logits, _, _ = model(Xt, Bt, n_speakers=n_speakers)
    model.train(was_training)
    return torch.sigmoid(logits[0]).numpy()
