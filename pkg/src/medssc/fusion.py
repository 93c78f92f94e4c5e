"""Score fusion, label decoding and precision/recall/F1 reporting.

The abstract-level and segment-level models emit per-sentence score
matrices over the same label set; fusion is their weighted elementwise
sum, decoding is row argmax, and evaluation reports per-label plus
weighted/micro/macro aggregates from the confusion matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import FusionConfig
from .corpus import LabelSet


@dataclass(frozen=True)
class PredictionMatrix:
    """Per-sentence score vectors for one abstract (rows = real sentences)."""

    id: str
    scores: np.ndarray  # (I, L) float

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        if scores.ndim != 2:
            raise ValueError(f"scores must be 2D, got shape {scores.shape}")
        object.__setattr__(self, "scores", scores)


def fuse(
    abs_pred: PredictionMatrix,
    seg_pred: PredictionMatrix,
    config: FusionConfig | None = None,
) -> PredictionMatrix:
    """Weighted elementwise sum of the two per-sentence score matrices."""
    config = config or FusionConfig()
    if abs_pred.scores.shape != seg_pred.scores.shape:
        raise ValueError(
            f"shape mismatch for abstract {abs_pred.id!r}: "
            f"{abs_pred.scores.shape} vs {seg_pred.scores.shape}"
        )
    if abs_pred.id != seg_pred.id:
        raise ValueError(f"abstract id mismatch: {abs_pred.id!r} vs {seg_pred.id!r}")
    fused = config.lambda_abs * abs_pred.scores + config.lambda_seg * seg_pred.scores
    return PredictionMatrix(id=abs_pred.id, scores=fused)


def decode(pred: PredictionMatrix | np.ndarray) -> np.ndarray:
    """Per-sentence argmax; ties break toward the lowest label index."""
    scores = pred.scores if isinstance(pred, PredictionMatrix) else np.asarray(pred)
    if scores.size == 0:
        raise ValueError("cannot decode an empty prediction matrix")
    return np.argmax(scores, axis=1)


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


@dataclass
class EvalReport:
    labels: tuple[str, ...]
    confusion: np.ndarray  # (L, L) int, rows = gold, columns = predicted
    per_label: dict[str, dict[str, float]]
    weighted: dict[str, float]
    micro: dict[str, float]
    macro: dict[str, float]
    total: int
    excluded: tuple[str, ...] = ()
    weighted_excluding: dict[str, float] | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "labels": list(self.labels),
            "confusion": self.confusion.tolist(),
            "per_label": self.per_label,
            "weighted": self.weighted,
            "micro": self.micro,
            "macro": self.macro,
            "total": self.total,
        }
        if self.excluded:
            out["excluded"] = list(self.excluded)
            out["weighted_excluding"] = self.weighted_excluding
        out.update(self.extra)
        return out

    def to_text(self) -> str:
        names = list(self.labels)
        if self.weighted_excluding is not None:
            names.append("weighted -" + ",".join(self.excluded))
        width = max(12, *(len(name) for name in names))
        lines = [f"{'label':<{width}} {'F1':>8} {'P':>8} {'R':>8} {'support':>9}"]
        for name in self.labels:
            row = self.per_label[name]
            lines.append(
                f"{name:<{width}} {row['f1']:>8.4f} {row['precision']:>8.4f} "
                f"{row['recall']:>8.4f} {int(row['support']):>9d}"
            )
        lines.append("-" * len(lines[0]))
        for scheme, values in (
            ("weighted", self.weighted),
            ("micro", self.micro),
            ("macro", self.macro),
        ):
            lines.append(
                f"{scheme:<{width}} {values['f1']:>8.4f} {values['precision']:>8.4f} "
                f"{values['recall']:>8.4f} {self.total:>9d}"
            )
        if self.weighted_excluding is not None:
            name = "weighted -" + ",".join(self.excluded)
            values = self.weighted_excluding
            lines.append(
                f"{name:<{width}} {values['f1']:>8.4f} {values['precision']:>8.4f} "
                f"{values['recall']:>8.4f} {self.total:>9d}"
            )
        return "\n".join(lines)


def _aggregate(stats: dict[str, dict[str, float]], names, weights) -> dict[str, float]:
    total = float(sum(weights))
    if total == 0:
        return {"precision": 0.0, "recall": 0.0, "f1": 0.0}
    out = {}
    for metric in ("precision", "recall", "f1"):
        out[metric] = sum(stats[n][metric] * w for n, w in zip(names, weights)) / total
    return out


def evaluate(
    pred_labels,
    gold_labels,
    labels: LabelSet,
    exclude: tuple[str, ...] = (),
) -> EvalReport:
    """Confusion-matrix based precision/recall/F1 report.

    ``pred_labels`` and ``gold_labels`` are equal-length sequences of label
    indices. The weighted scheme weights per-label scores by gold support;
    micro aggregates counts globally; macro is the unweighted label mean.
    ``exclude`` additionally reports a weighted average that ignores the
    named labels (their support is zeroed), without touching the primary
    aggregates.
    """
    pred = np.asarray(pred_labels, dtype=np.int64)
    gold = np.asarray(gold_labels, dtype=np.int64)
    if pred.shape != gold.shape or pred.ndim != 1:
        raise ValueError(
            f"prediction/gold length mismatch: {pred.shape} vs {gold.shape}"
        )
    n_labels = len(labels)
    if pred.size and (pred.min() < 0 or pred.max() >= n_labels):
        raise ValueError("predicted label index outside the label set")
    if gold.size and (gold.min() < 0 or gold.max() >= n_labels):
        raise ValueError("gold label index outside the label set")

    confusion = np.zeros((n_labels, n_labels), dtype=np.int64)
    np.add.at(confusion, (gold, pred), 1)

    per_label = {}
    supports = confusion.sum(axis=1)
    for i, name in enumerate(labels.names):
        tp = int(confusion[i, i])
        fp = int(confusion[:, i].sum() - tp)
        fn = int(confusion[i, :].sum() - tp)
        precision, recall, f1 = _prf(tp, fp, fn)
        per_label[name] = {
            "precision": precision,
            "recall": recall,
            "f1": f1,
            "support": int(supports[i]),
        }

    names = labels.names
    weighted = _aggregate(per_label, names, [per_label[n]["support"] for n in names])
    tp_total = int(np.trace(confusion))
    micro_p, micro_r, micro_f1 = _prf(
        tp_total, int(confusion.sum()) - tp_total, int(confusion.sum()) - tp_total
    )
    micro = {"precision": micro_p, "recall": micro_r, "f1": micro_f1}
    macro = _aggregate(per_label, names, [1] * len(names))

    weighted_excluding = None
    if exclude:
        unknown = [name for name in exclude if name not in labels.names]
        if unknown:
            raise ValueError(f"cannot exclude labels outside the label set: {unknown}")
        kept = [n for n in names if n not in exclude]
        weighted_excluding = _aggregate(
            per_label, kept, [per_label[n]["support"] for n in kept]
        )

    return EvalReport(
        labels=names,
        confusion=confusion,
        per_label=per_label,
        weighted=weighted,
        micro=micro,
        macro=macro,
        total=int(gold.size),
        excluded=tuple(exclude),
        weighted_excluding=weighted_excluding,
    )
