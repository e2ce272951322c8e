"""Diarization losses: BCE, attractor existence loss, PIT loss and their sum."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import torch
import torch.nn.functional as F

ALPHA = {"train": 1.0, "adapt": 0.1}
MAX_PIT_SPEAKERS = 6


def _tensor(x, dtype=torch.float64):
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=dtype)


def bce(y, y_hat) -> torch.Tensor:
    """H(y, y_hat) summed over the last axis; posteriors must lie strictly in (0, 1)."""
    y, y_hat = _tensor(y), _tensor(y_hat)
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch {tuple(y.shape)} vs {tuple(y_hat.shape)}")
    if torch.any(y_hat <= 0) or torch.any(y_hat >= 1):
        raise ValueError("posteriors must be strictly inside (0, 1); use bce_with_logits")
    y = y.to(y_hat.dtype)
    return (-y * torch.log(y_hat) - (1 - y) * torch.log1p(-y_hat)).sum(-1)


def bce_with_logits(y, logits) -> torch.Tensor:
    """Same as :func:`bce` with posteriors given as logits, stable for any real input."""
    y, logits = _tensor(y), _tensor(logits)
    return F.binary_cross_entropy_with_logits(logits, y.to(logits.dtype), reduction="none").sum(-1)


def existence_labels(n_speakers: int) -> torch.Tensor:
    """1 for each of the S speakers, 0 for the trailing stop slot."""
    return torch.cat([torch.ones(n_speakers), torch.zeros(1)])


def attractor_existence_loss(probs, n_speakers: int) -> torch.Tensor:
    probs = _tensor(probs)
    if probs.shape[-1] != n_speakers + 1:
        raise ValueError(f"expected {n_speakers + 1} existence probabilities, got {probs.shape[-1]}")
    labels = existence_labels(n_speakers).to(probs.dtype).expand_as(probs)
    return bce(labels, probs) / (1 + n_speakers)


def attractor_existence_loss_logits(logits, n_speakers: int) -> torch.Tensor:
    logits = _tensor(logits)
    if logits.shape[-1] != n_speakers + 1:
        raise ValueError(f"expected {n_speakers + 1} existence logits, got {logits.shape[-1]}")
    labels = existence_labels(n_speakers).to(logits.dtype).expand_as(logits)
    return bce_with_logits(labels, logits) / (1 + n_speakers)


def _pit(labels, logits, frame_mask=None):
    labels, logits = _tensor(labels), _tensor(logits)
    if labels.shape != logits.shape:
        raise ValueError(f"shape mismatch {tuple(labels.shape)} vs {tuple(logits.shape)}")
    T, S = logits.shape
    if S > MAX_PIT_SPEAKERS:
        raise ValueError(f"exhaustive PIT limited to {MAX_PIT_SPEAKERS} speakers, got {S}")
    y = labels.to(logits.dtype)
    # cost[i, j]: BCE of reference column i against output column j, summed over frames
    pair = F.binary_cross_entropy_with_logits(
        logits[:, None, :].expand(T, S, S), y[:, :, None].expand(T, S, S), reduction="none")
    if frame_mask is not None:
        pair = pair * frame_mask.to(pair.dtype)[:, None, None]
        T = int(frame_mask.sum())
    cost = pair.sum(0)
    perms = list(itertools.permutations(range(S)))
    cols = torch.arange(S)
    totals = torch.stack([cost[list(p), cols].sum() for p in perms])
    best = int(torch.argmin(totals))
    return totals[best] / (T * S), perms[best]


def pit_loss(Y, Y_hat) -> tuple[torch.Tensor, tuple[int, ...]]:
    """Permutation-invariant diarization loss over posteriors.

    Returns the loss and the label-column permutation phi (output column s is
    matched to reference column phi[s]).
    """
    Y_hat = _tensor(Y_hat)
    if torch.any(Y_hat <= 0) or torch.any(Y_hat >= 1):
        raise ValueError("posteriors must be strictly inside (0, 1); use pit_loss_logits")
    return _pit(Y, torch.logit(Y_hat))


def pit_loss_logits(Y, logits, frame_mask=None) -> tuple[torch.Tensor, tuple[int, ...]]:
    return _pit(Y, logits, frame_mask)


@dataclass
class LossBundle:
    L_d: torch.Tensor | float
    L_alpha: torch.Tensor | float
    total: torch.Tensor | float
    alpha: float
    permutation: tuple[int, ...] | None = None


def total_loss(L_d, L_alpha, mode: str = "train", permutation=None) -> LossBundle:
    if mode not in ALPHA:
        raise ValueError(f"mode must be one of {sorted(ALPHA)}, got {mode!r}")
    alpha = ALPHA[mode]
    return LossBundle(L_d, L_alpha, L_d + alpha * L_alpha, alpha, permutation)


def batch_loss(logits, exist_logits, labels, lengths, mode: str = "train") -> LossBundle:
    """Average per-recording losses over a padded batch.

    logits: (batch, T, S), exist_logits: (batch, S + 1), labels: (batch, T, S),
    lengths: (batch,) number of valid frames.
    """
    n_speakers = logits.shape[-1]
    d_terms, perms = [], []
    for i, n in enumerate(lengths.tolist()):
        ld, perm = pit_loss_logits(labels[i, :n], logits[i, :n])
        d_terms.append(ld)
        perms.append(perm)
    L_d = torch.stack(d_terms).mean()
    L_alpha = attractor_existence_loss_logits(exist_logits, n_speakers).mean()
    return total_loss(L_d, L_alpha, mode, perms)
