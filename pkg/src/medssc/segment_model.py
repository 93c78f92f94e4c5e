"""The segment-level model: fixed-length sliding windows of consecutive
sentence embeddings, soft labels from the member sentences' label
histogram, an MLP classifier trained with KL divergence plus L2, and
aggregation of overlapping segment predictions back to sentence scores.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import SegModelConfig
from .corpus import LabelSet
from .fusion import PredictionMatrix
from .training import TrainResult, batch_indices, epoch_rng, fit, load_state, set_seed

__all__ = [
    "Segment",
    "segment_soft_label",
    "make_segments",
    "make_segments_unlabeled",
    "SegmentMLP",
    "mlp_forward",
    "kl_loss",
    "train_seg",
    "predict_segments",
    "aggregate_to_sentences",
    "build_segment_model",
]


@dataclass(frozen=True)
class Segment:
    """A window of consecutive sentence embeddings with its soft label.

    ``covered`` counts the real sentences inside the window; it is below
    the window size only for abstracts shorter than one window, which are
    zero-padded rather than dropped. ``soft_label`` is None for windows
    built for inference.
    """

    abstract_id: str
    start: int
    vector: np.ndarray  # (Q * L,) float32
    soft_label: np.ndarray | None  # (L,) float32, sums to 1
    covered: int


def segment_soft_label(label_rows: np.ndarray) -> np.ndarray:
    """Soft label of a window: elementwise sum of the member label vectors
    divided by the grand total of all their entries.

    Zero rows (padding) add nothing to either numerator or denominator, so
    the output is always a probability vector.
    """
    rows = np.asarray(label_rows, dtype=np.float64)
    total = rows.sum()
    if total <= 0:
        raise ValueError("segment has no labeled sentences (all label rows are zero)")
    return (rows.sum(axis=0) / total).astype(np.float32)


def _windows(matrix: np.ndarray, size: int):
    """Yield (start, window_rows, covered) with stride 1; one zero-padded
    window when the input is shorter than ``size``."""
    count = matrix.shape[0]
    if count < size:
        padded = np.zeros((size, matrix.shape[1]), dtype=np.float32)
        padded[:count] = matrix
        yield 0, padded, count
        return
    for start in range(count - size + 1):
        yield start, matrix[start : start + size], size


def make_segments(
    matrix: np.ndarray,
    label_rows: np.ndarray,
    abstract_id: str,
    size: int,
) -> list[Segment]:
    """Stride-1 sliding windows of ``size`` consecutive sentences.

    An abstract of I >= size sentences yields exactly I - size + 1
    segments; shorter abstracts yield a single zero-padded segment so
    every sentence keeps coverage.
    """
    matrix = np.asarray(matrix, dtype=np.float32)
    label_rows = np.asarray(label_rows, dtype=np.float32)
    if matrix.shape[0] == 0:
        raise ValueError(f"abstract {abstract_id!r} has no embedding rows")
    if label_rows.shape[0] != matrix.shape[0]:
        raise ValueError(
            f"abstract {abstract_id!r}: {matrix.shape[0]} embedding rows but "
            f"{label_rows.shape[0]} label rows"
        )
    label_windows = _windows(label_rows, size)
    return [
        Segment(
            abstract_id=abstract_id,
            start=start,
            vector=rows.reshape(-1),
            soft_label=segment_soft_label(next(label_windows)[1]),
            covered=covered,
        )
        for start, rows, covered in _windows(matrix, size)
    ]


def make_segments_unlabeled(matrix: np.ndarray, abstract_id: str, size: int) -> list[Segment]:
    """Inference-time windows: same geometry as make_segments, no labels."""
    matrix = np.asarray(matrix, dtype=np.float32)
    if matrix.shape[0] == 0:
        raise ValueError(f"abstract {abstract_id!r} has no embedding rows")
    return [
        Segment(
            abstract_id=abstract_id,
            start=start,
            vector=rows.reshape(-1),
            soft_label=None,
            covered=covered,
        )
        for start, rows, covered in _windows(matrix, size)
    ]


class SegmentMLP(nn.Module):
    """Five-block MLP: four Dense-ELU-BatchNorm-Dropout blocks narrowing
    through the configured widths, then a dense layer over the labels.
    """

    def __init__(self, input_width: int, n_labels: int, config: SegModelConfig):
        super().__init__()
        self.input_width = input_width
        self.n_labels = n_labels
        self.config = config
        blocks = []
        width = input_width
        for out_width in config.hidden_widths:
            blocks.append(
                nn.Sequential(
                    nn.Linear(width, out_width),
                    nn.ELU(),
                    nn.BatchNorm1d(out_width),
                    nn.Dropout(config.dropout),
                )
            )
            width = out_width
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Linear(width, n_labels)

    @property
    def block_output_widths(self) -> tuple[int, ...]:
        return (*self.config.hidden_widths, self.n_labels)

    def dense_weights(self) -> list[torch.Tensor]:
        """Dense-layer weight matrices: the L2 penalty applies to these only
        (bias and batch-norm parameters are left unregularized)."""
        weights = [block[0].weight for block in self.blocks]
        weights.append(self.head.weight)
        return weights

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.input_width:
            raise ValueError(
                f"segment width {x.shape[-1]} does not match model input width "
                f"{self.input_width}"
            )
        for block in self.blocks:
            x = block(x)
        return self.head(x)


def mlp_forward(model: SegmentMLP, x) -> torch.Tensor:
    """Per-segment label distributions (softmax over the head logits)."""
    x_t = x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=np.float32))
    return torch.softmax(model(x_t), dim=1)


def kl_loss(true, pred, weights=(), l2: float = 0.0) -> torch.Tensor:
    """KL divergence summed over the batch plus an L2 penalty.

    Computes sum_n sum_l y log(y / p) with the 0*log(0/x) = 0 convention
    and p clamped at 1e-7, plus (l2 / 2) * sum of squared entries of
    ``weights``. Nonnegative up to the penalty term.
    """
    true_t = torch.as_tensor(true)
    pred_t = pred if isinstance(pred, torch.Tensor) else torch.as_tensor(pred)
    if true_t.shape != pred_t.shape:
        raise ValueError(f"shape mismatch: true {tuple(true_t.shape)} vs pred {tuple(pred_t.shape)}")
    y = true_t.to(pred_t.dtype if pred_t.is_floating_point() else torch.float64)
    p = pred_t.to(y.dtype).clamp_min(1e-7)
    ratio = torch.where(y > 0, y * (torch.log(y.clamp_min(1e-30)) - torch.log(p)), torch.zeros_like(y))
    loss = ratio.sum()
    for w in weights:
        loss = loss + (l2 / 2.0) * (w.to(loss.dtype) ** 2).sum()
    return loss


def model_meta(model: SegmentMLP) -> dict:
    return {
        "kind": "seg",
        "n_labels": model.n_labels,
        "input_width": model.input_width,
        "config": {
            "hidden_widths": list(model.config.hidden_widths),
            "dropout": model.config.dropout,
            "segment_size": model.config.segment_size,
            "aggregation": model.config.aggregation,
        },
    }


def build_segment_model(meta: dict) -> SegmentMLP:
    config = SegModelConfig(
        hidden_widths=tuple(meta["config"]["hidden_widths"]),
        dropout=meta["config"]["dropout"],
        segment_size=meta["config"]["segment_size"],
        aggregation=meta["config"].get("aggregation", "mean"),
    )
    return SegmentMLP(
        input_width=meta["input_width"], n_labels=meta["n_labels"], config=config
    )


def _stack(segments: list[Segment]) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([s.vector for s in segments])
    y = np.stack([s.soft_label for s in segments])
    return x, y


def train_seg(
    train_segments: list[Segment],
    val_segments: list[Segment],
    label_set: LabelSet,
    config: SegModelConfig,
    seed: int,
) -> tuple[SegmentMLP, TrainResult]:
    """Train the segment classifier; returns the best-epoch model.

    Validation F1 compares the predicted argmax against the soft label's
    argmax per segment.
    """
    from .fusion import evaluate as evaluate_labels

    set_seed(seed)
    x_train, y_train = _stack(train_segments)
    x_val, y_val = _stack(val_segments)
    model = SegmentMLP(
        input_width=x_train.shape[1], n_labels=len(label_set), config=config
    )
    x_train_t = torch.as_tensor(x_train)
    y_train_t = torch.as_tensor(y_train)
    val_gold = y_val.argmax(axis=1)

    def train_epoch(optimizer, epoch: int) -> float:
        rng = epoch_rng(seed, stage=3, epoch=epoch)
        total, count = 0.0, 0
        for idx in batch_indices(len(train_segments), config.batch_size, rng):
            if len(idx) == 1:
                continue  # batch norm cannot normalize a single row in train mode
            optimizer.zero_grad()
            probs = mlp_forward(model, x_train_t[idx])
            loss = kl_loss(y_train_t[idx], probs, model.dense_weights(), config.l2)
            loss.backward()
            optimizer.step()
            total += float(loss.detach())
            count += len(idx)
        return total / max(count, 1)

    def evaluate_split() -> tuple[float, float]:
        model.eval()
        with torch.no_grad():
            probs = mlp_forward(model, torch.as_tensor(x_val))
            loss = kl_loss(
                torch.as_tensor(y_val), probs, model.dense_weights(), config.l2
            )
        report = evaluate_labels(probs.numpy().argmax(axis=1), val_gold, label_set)
        return float(loss) / len(val_segments), report.weighted["f1"]

    result = fit(
        model,
        epochs=config.epochs,
        learning_rate=config.learning_rate,
        lr_factor=config.lr_factor,
        lr_patience=config.lr_patience,
        train_epoch=train_epoch,
        evaluate=evaluate_split,
    )
    load_state(model, result.state)
    model.eval()
    return model, result


def predict_segments(
    model: SegmentMLP, segments: list[Segment], batch_size: int = 256
) -> np.ndarray:
    """Per-segment label distributions in input order (eval mode)."""
    model.eval()
    out = np.zeros((len(segments), model.n_labels), dtype=np.float32)
    x = np.stack([s.vector for s in segments])
    with torch.no_grad():
        for idx in batch_indices(len(segments), batch_size):
            out[idx] = mlp_forward(model, torch.as_tensor(x[idx])).numpy()
    return out


def aggregate_to_sentences(
    segments: list[Segment],
    probs: np.ndarray,
    lengths: dict[str, int],
    mode: str = "mean",
) -> dict[str, PredictionMatrix]:
    """Combine overlapping segment predictions into per-sentence scores.

    Every sentence takes the mean (or elementwise max) of the predicted
    distributions of all segments covering it; interior sentences of long
    abstracts are covered by exactly the window size, boundary sentences
    by fewer.
    """
    if mode not in ("mean", "max"):
        raise ValueError(f"unknown aggregation mode {mode!r}")
    n_labels = probs.shape[1]
    sums = {aid: np.zeros((count, n_labels), dtype=np.float64) for aid, count in lengths.items()}
    counts = {aid: np.zeros(count, dtype=np.int64) for aid, count in lengths.items()}
    for segment, row in zip(segments, probs):
        acc = sums[segment.abstract_id]
        hits = counts[segment.abstract_id]
        for offset in range(segment.covered):
            position = segment.start + offset
            if mode == "mean":
                acc[position] += row
            else:
                acc[position] = np.maximum(acc[position], row) if hits[position] else row
            hits[position] += 1
    out = {}
    for abstract_id, count in lengths.items():
        if (counts[abstract_id] == 0).any():
            uncovered = int(np.argmin(counts[abstract_id]))
            raise ValueError(
                f"sentence {uncovered} of abstract {abstract_id!r} is covered by no segment"
            )
        scores = sums[abstract_id]
        if mode == "mean":
            scores = scores / counts[abstract_id][:, None]
        out[abstract_id] = PredictionMatrix(id=abstract_id, scores=scores)
    return out
