"""Supervised contrastive loss and categorical cross-entropy."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import torch

from .errors import ArgumentError

UNIT_NORM_TOL = 1e-5
SIMPLEX_TOL = 1e-6
LOG_FLOOR = 1e-12


class NoPositivesWarning(UserWarning):
    """Some or all anchors in a contrastive batch have no same-class partner."""


@dataclass(frozen=True)
class SupConConfig:
    temperature: float = 0.1

    def __post_init__(self) -> None:
        if not (self.temperature > 0 and math.isfinite(self.temperature)):
            raise ArgumentError(f"temperature must be a positive finite real, got {self.temperature}")


def supcon_loss(
    embeddings: torch.Tensor,
    labels: torch.Tensor,
    temperature: float | SupConConfig = 0.1,
) -> torch.Tensor:
    """Supervised contrastive loss summed over anchors.

    For anchor ``i`` with positives ``P(i)`` (same label, excluding ``i``) and
    candidates ``A(i)`` (everything but ``i``), the anchor term is the mean over
    ``p`` of ``-log softmax_A(i)(z_i . z_a / tau)[p]``. Anchors with no positive
    contribute nothing; if none has one, the loss is zero and a
    :class:`NoPositivesWarning` is emitted.

    Args:
        embeddings: ``(N, D)`` unit-norm rows.
        labels: ``(N,)`` integer class ids.
        temperature: ``tau`` or a :class:`SupConConfig`.
    """
    tau = temperature.temperature if isinstance(temperature, SupConConfig) else SupConConfig(temperature).temperature
    z = embeddings
    labels = torch.as_tensor(labels)
    if z.dim() != 2:
        raise ArgumentError(f"embeddings must be (N, D), got shape {tuple(z.shape)}")
    n = z.shape[0]
    if n < 2:
        raise ArgumentError(f"supcon_loss needs at least 2 embeddings, got {n}")
    if labels.shape != (n,):
        raise ArgumentError(f"labels must have shape ({n},), got {tuple(labels.shape)}")
    if not torch.isfinite(z).all():
        raise ArgumentError("embeddings contain non-finite values")
    norms = z.detach().norm(dim=1)
    if (norms <= 1e-12).any():
        raise ArgumentError(f"embedding {int((norms <= 1e-12).nonzero()[0])} has zero norm")
    bad = (norms - 1).abs() > UNIT_NORM_TOL
    if bad.any():
        i = int(bad.nonzero()[0])
        raise ArgumentError(f"embedding {i} is not unit-norm (norm={float(norms[i]):.8g})")

    eye = torch.eye(n, dtype=torch.bool, device=z.device)
    positives = (labels[:, None] == labels[None, :]) & ~eye
    n_pos = positives.sum(dim=1)
    has_pos = n_pos > 0
    if not has_pos.any():
        warnings.warn("no anchor in the batch has a positive; loss is defined as 0", NoPositivesWarning, stacklevel=2)
        return (z * 0).sum()
    if not has_pos.all():
        warnings.warn(
            f"{int((~has_pos).sum())} anchor(s) without positives were skipped",
            NoPositivesWarning,
            stacklevel=2,
        )

    logits = (z @ z.T) / tau
    logits = logits.masked_fill(eye, float("-inf"))
    # per-anchor max over A(i); detached so it only shifts, never steers, gradients
    logits = logits - logits.max(dim=1, keepdim=True).values.detach()
    log_denom = torch.logsumexp(logits, dim=1, keepdim=True)
    log_prob = (logits - log_denom).masked_fill(~positives, 0.0)
    per_anchor = -log_prob.sum(dim=1)[has_pos] / n_pos[has_pos]
    return per_anchor.sum()


def cross_entropy_loss(
    probabilities: torch.Tensor,
    targets: torch.Tensor,
    eps: float = LOG_FLOOR,
) -> torch.Tensor:
    """Mean categorical cross-entropy of softmax outputs against one-hot targets.

    ``targets`` may be one-hot rows ``(N, K)`` or integer labels ``(N,)``.
    Probabilities are clamped at ``eps`` before the log.
    """
    p = probabilities
    if p.dim() != 2 or p.shape[0] == 0:
        raise ArgumentError(f"probabilities must be a non-empty (N, K) matrix, got {tuple(p.shape)}")
    n, k = p.shape
    targets = torch.as_tensor(targets, device=p.device)
    if targets.dim() == 1:
        if targets.shape[0] != n:
            raise ArgumentError(f"expected {n} labels, got {targets.shape[0]}")
        if ((targets < 0) | (targets >= k)).any():
            raise ArgumentError(f"labels must lie in [0, {k})")
        targets = torch.nn.functional.one_hot(targets.long(), k).to(p.dtype)
    else:
        if targets.shape != p.shape:
            raise ArgumentError(f"targets shape {tuple(targets.shape)} != probabilities shape {tuple(p.shape)}")
        t = targets.detach()
        if not (((t == 0) | (t == 1)).all() and (t.sum(dim=1) == 1).all()):
            raise ArgumentError("targets must be exactly one-hot rows")
        targets = targets.to(p.dtype)
    pd = p.detach()
    if not torch.isfinite(pd).all() or (pd < 0).any():
        raise ArgumentError("probabilities must be finite and non-negative")
    row_err = (pd.sum(dim=1) - 1).abs()
    if (row_err > SIMPLEX_TOL).any():
        i = int((row_err > SIMPLEX_TOL).nonzero()[0])
        raise ArgumentError(f"row {i} is not on the probability simplex (sum={float(pd[i].sum()):.8g})")
    return -(targets * p.clamp_min(eps).log()).sum() / n
