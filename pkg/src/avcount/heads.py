"""Shared two-branch counting head and the full counting loss.

One linear branch emits a count per repetition class, the other a softmax
over repetition classes; the clip count is their inner product. The training
loss combines squared error, relative absolute error, and a batch diversity
term that pushes the classification units to respond to different inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import torch
from torch import Tensor, nn

from .errors import DomainError


class Supervision(str, Enum):
    DIVERSITY = "diversity"
    ACTION_CLASS_CE = "action_class_ce"


@dataclass
class HeadConfig:
    feature_dim: int
    num_repetition_classes: int
    lambda1: float = 10.0
    lambda2: float = 10.0
    supervision: Supervision = Supervision.DIVERSITY

    def __post_init__(self):
        if self.feature_dim < 1 or self.num_repetition_classes < 1:
            raise ValueError("feature_dim and num_repetition_classes must be >= 1")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")
        self.supervision = Supervision(self.supervision)


@dataclass
class HeadOutput:
    """Per-class counts, repetition-class distribution, and their inner
    product. Leading batch dimension mirrors the input feature's."""

    per_class_counts: Tensor
    class_dist: Tensor
    count: Tensor


class CountingHead(nn.Module):
    """Two fully connected branches over a shared feature vector."""

    def __init__(self, config: HeadConfig):
        super().__init__()
        self.config = config
        self.count_fc = nn.Linear(config.feature_dim, config.num_repetition_classes)
        self.class_fc = nn.Linear(config.feature_dim, config.num_repetition_classes)

    def forward(self, feature: Tensor) -> HeadOutput:
        feature = torch.as_tensor(feature)
        if feature.shape[-1] != self.config.feature_dim:
            raise ValueError(
                f"feature dim {feature.shape[-1]} does not match config {self.config.feature_dim}"
            )
        if not torch.isfinite(feature).all():
            raise DomainError("head input feature contains non-finite values")
        feature = feature.to(self.count_fc.weight.dtype)
        per_class = self.count_fc(feature)
        dist = torch.softmax(self.class_fc(feature), dim=-1)
        count = (per_class * dist).sum(dim=-1)
        return HeadOutput(per_class_counts=per_class, class_dist=dist, count=count)


def _as_2d(dists) -> Tensor:
    t = torch.as_tensor(dists)
    if t.dtype not in (torch.float32, torch.float64):
        t = t.double()
    if t.ndim == 1:
        t = t.unsqueeze(0)
    if t.ndim != 2:
        raise ValueError(f"expected a batch of probability vectors, got shape {tuple(t.shape)}")
    return t


def diversity_loss(class_dists) -> Tensor:
    """Sum of pairwise cosine similarities between class-unit columns.

    The batch of N distributions over P classes is read column-wise: unit q
    contributes the length-N vector of its activations across the batch, and
    every unordered column pair adds its cosine. Columns with zero norm
    (possible only with exact zeros) contribute nothing.
    """
    t = _as_2d(class_dists)
    if (t < 0).any():
        raise DomainError("class distributions must be non-negative")
    norms = t.norm(dim=0)
    safe = torch.where(norms > 0, norms, torch.ones_like(norms))
    unit = t / safe
    gram = unit.T @ unit
    return torch.triu(gram, diagonal=1).sum()


def action_class_ce_loss(class_dists, action_labels) -> Tensor:
    """Cross-entropy of the repetition-class distribution against action
    labels; drop-in replacement for the diversity term."""
    t = _as_2d(class_dists)
    labels = torch.as_tensor(action_labels, dtype=torch.long)
    if labels.ndim == 0:
        labels = labels.unsqueeze(0)
    if labels.shape[0] != t.shape[0]:
        raise ValueError(f"got {labels.shape[0]} labels for batch of {t.shape[0]}")
    if (labels < 0).any() or (labels >= t.shape[1]).any():
        raise ValueError(f"action labels must lie in [0, {t.shape[1]})")
    picked = t[torch.arange(t.shape[0]), labels]
    return -(torch.log(picked)).mean()


def counting_loss(
    counts,
    labels,
    class_dists=None,
    config: HeadConfig | None = None,
    action_labels=None,
) -> Tensor:
    """Full counting objective for one batch.

    mean over samples of (C - l)^2 + lambda1 * |C - l| / l, plus lambda2 times
    the batch diversity term (or the action-class cross entropy when that
    supervision mode is configured). The diversity value is a single
    batch-level quantity; attributing it uniformly per sample and averaging
    adds it exactly once.
    """
    if config is None:
        raise ValueError("counting_loss requires a HeadConfig for the loss weights")
    c = torch.as_tensor(counts)
    l = torch.as_tensor(labels, dtype=c.dtype if c.is_floating_point() else torch.float64)
    c = c.to(l.dtype) if not c.is_floating_point() else c
    if c.ndim == 0:
        c = c.unsqueeze(0)
    if l.ndim == 0:
        l = l.unsqueeze(0)
    if c.shape != l.shape:
        raise ValueError(f"counts shape {tuple(c.shape)} != labels shape {tuple(l.shape)}")
    if (l <= 0).any():
        raise DomainError("count labels must be strictly positive")

    err = c - l
    loss = (err.pow(2) + config.lambda1 * err.abs() / l).mean()
    if config.lambda2 > 0 and class_dists is not None:
        if config.supervision is Supervision.ACTION_CLASS_CE:
            if action_labels is None:
                raise ValueError("action_class_ce supervision needs action_labels")
            loss = loss + config.lambda2 * action_class_ce_loss(class_dists, action_labels)
        else:
            loss = loss + config.lambda2 * diversity_loss(class_dists)
    return loss
