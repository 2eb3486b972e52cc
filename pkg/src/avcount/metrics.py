"""Domain types for counts and the two evaluation metrics.

MAE here is the relative form used throughout repetition counting:
mean(|prediction - truth| / truth). OBO is the fraction of videos whose
absolute error is at most one repetition; predictions are compared as raw
reals, without rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

from .errors import DomainError


class Modality(str, Enum):
    SIGHT = "sight"
    SOUND = "sound"
    FUSED = "fused"


@dataclass(frozen=True)
class CountLabel:
    """Ground-truth repetition count; strictly positive because the relative
    error terms divide by it."""

    value: float

    def __post_init__(self):
        if not math.isfinite(self.value) or self.value <= 0:
            raise DomainError(f"count label must be a positive finite real, got {self.value}")


@dataclass(frozen=True)
class CountPrediction:
    """Non-negative predicted count with the modality that produced it."""

    value: float
    modality: Modality = Modality.SIGHT

    def __post_init__(self):
        if not math.isfinite(self.value) or self.value < 0:
            raise DomainError(f"count prediction must be finite and >= 0, got {self.value}")


@dataclass
class EvalReport:
    mae: float
    obo: float
    n: int
    per_tag_mae: dict[str, float] = field(default_factory=dict)

    def to_lines(self) -> list[str]:
        """Flat key/value text table, one metric per line."""
        lines = [f"n     {self.n}", f"mae   {self.mae:.6f}", f"obo   {self.obo:.6f}"]
        width = max((len(t) for t in self.per_tag_mae), default=0)
        for tag in sorted(self.per_tag_mae):
            lines.append(f"mae[{tag:<{width}}]  {self.per_tag_mae[tag]:.6f}")
        return lines

    def to_dict(self) -> dict:
        return {"n": self.n, "mae": self.mae, "obo": self.obo, "per_tag_mae": dict(self.per_tag_mae)}


def _pred_value(p) -> float:
    return float(p.value) if isinstance(p, CountPrediction) else float(p)


def _label_value(l) -> float:
    v = float(l.value) if isinstance(l, CountLabel) else float(l)
    if not math.isfinite(v) or v <= 0:
        raise DomainError(f"ground-truth count must be positive, got {v}")
    return v


def _paired_values(preds: Sequence, gts: Sequence) -> tuple[list[float], list[float]]:
    if len(preds) != len(gts):
        raise ValueError(f"got {len(preds)} predictions for {len(gts)} labels")
    if len(preds) == 0:
        raise ValueError("metrics need at least one (prediction, label) pair")
    return [_pred_value(p) for p in preds], [_label_value(l) for l in gts]


def mae(preds: Sequence, gts: Sequence) -> float:
    """Mean relative absolute error, mean(|c_i - l_i| / l_i)."""
    ps, ls = _paired_values(preds, gts)
    return sum(abs(p - l) / l for p, l in zip(ps, ls)) / len(ps)


def obo(preds: Sequence, gts: Sequence) -> float:
    """Off-by-one accuracy: fraction of pairs with |c_i - l_i| <= 1."""
    ps, ls = _paired_values(preds, gts)
    return sum(1.0 for p, l in zip(ps, ls) if abs(p - l) <= 1.0) / len(ps)


def evaluate_report(
    preds: Sequence,
    gts: Sequence,
    tags: Sequence[Iterable] | None = None,
) -> EvalReport:
    """Global MAE/OBO plus per-challenge-tag MAE.

    `tags`, when given, is aligned with `preds`: one collection of tags per
    video. Per-tag OBO is intentionally not reported (challenge subsets are
    evaluated on MAE only).
    """
    ps, ls = _paired_values(preds, gts)
    report = EvalReport(mae=mae(ps, ls), obo=obo(ps, ls), n=len(ps))
    if tags is not None:
        if len(tags) != len(ps):
            raise ValueError(f"got {len(tags)} tag sets for {len(ps)} predictions")
        by_tag: dict[str, list[int]] = {}
        for i, tagset in enumerate(tags):
            for tag in tagset:
                by_tag.setdefault(str(getattr(tag, "value", tag)), []).append(i)
        for tag, idx in by_tag.items():
            report.per_tag_mae[tag] = mae([ps[i] for i in idx], [ls[i] for i in idx])
    return report


def best_constant_mae(gts: Sequence) -> tuple[float, float]:
    """Lowest relative MAE achievable by a single constant prediction.

    The objective is a weighted L1 distance, so an optimum sits on one of the
    label values; evaluate all of them and keep the best. Returns
    (constant, mae).
    """
    ls = [_label_value(l) for l in gts]
    best_c, best = ls[0], float("inf")
    for c in sorted(set(ls)):
        m = sum(abs(c - l) / l for l in ls) / len(ls)
        if m < best:
            best_c, best = c, m
    return best_c, best
