"""The abstract-level model: a convolutional-recurrent network over each
abstract's stacked sentence embeddings with a per-sentence sigmoid
regression head, trained with binary cross-entropy over the concatenated
per-abstract score sequence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .config import AbsModelConfig
from .corpus import Corpus, LabelSet
from .features import onehot_labels
from .fusion import PredictionMatrix
from .training import TrainResult, batch_indices, epoch_rng, fit, load_state, set_seed

__all__ = [
    "AbstractTensor",
    "group_by_abstract",
    "abstract_label_matrices",
    "pad_batch",
    "AbstractCRNN",
    "crnn_forward",
    "bce_abstract_loss",
    "train_abs",
    "predict_abs",
    "build_abstract_model",
]


@dataclass
class AbstractTensor:
    """One abstract's sentence-embedding rows plus a validity mask."""

    id: str
    matrix: np.ndarray  # (I, L) float32
    mask: np.ndarray  # (I,) bool

    def __len__(self) -> int:
        return int(self.mask.sum())


def group_by_abstract(
    embeddings: dict[tuple[str, int], np.ndarray],
    corpus: Corpus,
    max_sentences: int = 64,
) -> list[AbstractTensor]:
    """Stack each abstract's sentence embeddings in sentence order.

    Every corpus sentence must have an embedding. Abstracts longer than
    ``max_sentences`` are truncated (the convolution stack assumes a
    bounded height; benchmark abstracts never reach it).
    """
    tensors = []
    for abstract in corpus.abstracts:
        rows = []
        for index in range(min(len(abstract), max_sentences)):
            key = (abstract.id, index)
            if key not in embeddings:
                raise KeyError(
                    f"missing sentence embedding for abstract {abstract.id!r}, "
                    f"sentence {index}; re-run `medssc extract-embeddings`"
                )
            rows.append(embeddings[key])
        matrix = np.stack(rows).astype(np.float32)
        tensors.append(
            AbstractTensor(
                id=abstract.id,
                matrix=matrix,
                mask=np.ones(len(rows), dtype=bool),
            )
        )
    return tensors


def abstract_label_matrices(
    corpus: Corpus, label_set: LabelSet, max_sentences: int = 64
) -> list[np.ndarray]:
    """Per-abstract one-hot label rows, truncated like the embeddings."""
    return [
        onehot_labels([s.label for s in a.sentences[:max_sentences]], label_set)
        for a in corpus.abstracts
    ]


def pad_batch(
    tensors: list[AbstractTensor], extras: list[np.ndarray] | None = None
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor | None]:
    """Zero-pad a batch of abstracts to the longest member.

    Returns (embeddings (B, I_max, L), mask (B, I_max), padded extras) where
    ``extras`` are per-abstract row matrices padded the same way (labels).
    """
    longest = max(t.matrix.shape[0] for t in tensors)
    width = tensors[0].matrix.shape[1]
    x = np.zeros((len(tensors), longest, width), dtype=np.float32)
    mask = np.zeros((len(tensors), longest), dtype=bool)
    padded_extra = None
    if extras is not None:
        extra_width = extras[0].shape[1]
        padded_extra = np.zeros((len(tensors), longest, extra_width), dtype=np.float32)
    for b, tensor in enumerate(tensors):
        rows = tensor.matrix.shape[0]
        x[b, :rows] = tensor.matrix
        mask[b, :rows] = tensor.mask
        if extras is not None:
            padded_extra[b, :rows] = extras[b]
    return (
        torch.as_tensor(x),
        torch.as_tensor(mask),
        torch.as_tensor(padded_extra) if padded_extra is not None else None,
    )


class AbstractCRNN(nn.Module):
    """Two same-padded 2D convolutions, a bidirectional recurrent decoder
    and a per-sentence dense + sigmoid head.

    Convolution outputs are re-masked after each layer so padded rows stay
    exactly zero: an abstract padded with extra rows scores identically at
    its real rows.
    """

    def __init__(self, n_labels: int, config: AbsModelConfig):
        super().__init__()
        self.n_labels = n_labels
        self.config = config
        kh, kw = config.kernel
        # asymmetric zero padding keeps output height/width equal to input
        self._pad = ((kw - 1) // 2, kw // 2, (kh - 1) // 2, kh // 2)
        self.conv1 = nn.Conv2d(1, config.filters, kernel_size=config.kernel)
        self.conv2 = nn.Conv2d(config.filters, config.filters, kernel_size=config.kernel)
        rnn_cls = nn.LSTM if config.rnn_cell == "lstm" else nn.GRU
        self.rnn = rnn_cls(
            n_labels * config.filters,
            config.rnn_hidden,
            batch_first=True,
            bidirectional=True,
        )
        self.head = nn.Linear(2 * config.rnn_hidden, n_labels)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.n_labels:
            raise ValueError(
                f"embedding width {x.shape[-1]} does not match model width {self.n_labels}"
            )
        row_mask = mask.to(x.dtype)[:, None, :, None]
        h = x.unsqueeze(1)
        h = torch.relu(self.conv1(F.pad(h, self._pad))) * row_mask
        h = torch.relu(self.conv2(F.pad(h, self._pad))) * row_mask
        batch, channels, height, width = h.shape
        h = h.permute(0, 2, 3, 1).reshape(batch, height, width * channels)
        lengths = mask.sum(dim=1).clamp(min=1)
        packed = nn.utils.rnn.pack_padded_sequence(
            h, lengths.cpu(), batch_first=True, enforce_sorted=False
        )
        out, _ = self.rnn(packed)
        out, _ = nn.utils.rnn.pad_packed_sequence(
            out, batch_first=True, total_length=height
        )
        scores = torch.sigmoid(self.head(out))
        return scores * mask.to(scores.dtype).unsqueeze(-1)


def crnn_forward(
    model: AbstractCRNN, tensors: list[AbstractTensor], batch_size: int = 32
) -> list[PredictionMatrix]:
    """Per-sentence scores for each abstract (eval mode, masked rows dropped)."""
    model.eval()
    out: list[PredictionMatrix] = []
    with torch.no_grad():
        for idx in batch_indices(len(tensors), batch_size):
            chunk = [tensors[i] for i in idx]
            x, mask, _ = pad_batch(chunk)
            scores = model(x, mask).numpy()
            for b, tensor in enumerate(chunk):
                rows = int(tensor.mask.sum())
                out.append(PredictionMatrix(id=tensor.id, scores=scores[b, :rows]))
    return out


def bce_abstract_loss(true, pred, mask=None) -> torch.Tensor:
    """Binary cross-entropy over concatenated per-abstract score sequences.

    Sums over every (sentence, label) element of an abstract and averages
    over the batch; padded rows (mask=0) contribute nothing. Predictions
    are clamped to (1e-7, 1-1e-7) so exact 0/1 never produce infinities.
    """
    true_t = torch.as_tensor(true)
    pred_t = pred if isinstance(pred, torch.Tensor) else torch.as_tensor(pred)
    if true_t.dim() == 2:
        true_t, pred_t = true_t.unsqueeze(0), pred_t.unsqueeze(0)
        if mask is not None:
            mask = torch.as_tensor(mask).unsqueeze(0)
    if true_t.shape != pred_t.shape:
        raise ValueError(f"shape mismatch: true {tuple(true_t.shape)} vs pred {tuple(pred_t.shape)}")
    if torch.isnan(pred_t).any() or torch.isnan(true_t).any():
        raise ValueError("bce_abstract_loss received NaN inputs")
    eps = 1e-7
    p = pred_t.clamp(eps, 1 - eps)
    y = true_t.to(p.dtype)
    terms = y * torch.log(p) + (1 - y) * torch.log1p(-p)
    if mask is not None:
        terms = terms * torch.as_tensor(mask).to(p.dtype).unsqueeze(-1)
    return -terms.sum(dim=(1, 2)).mean()


def model_meta(model: AbstractCRNN) -> dict:
    return {
        "kind": "abs",
        "n_labels": model.n_labels,
        "config": {
            "kernel": list(model.config.kernel),
            "filters": model.config.filters,
            "rnn_hidden": model.config.rnn_hidden,
            "rnn_cell": model.config.rnn_cell,
        },
    }


def build_abstract_model(meta: dict) -> AbstractCRNN:
    config = AbsModelConfig(
        kernel=tuple(meta["config"]["kernel"]),
        filters=meta["config"]["filters"],
        rnn_hidden=meta["config"]["rnn_hidden"],
        rnn_cell=meta["config"]["rnn_cell"],
    )
    return AbstractCRNN(n_labels=meta["n_labels"], config=config)


def train_abs(
    train_tensors: list[AbstractTensor],
    train_labels: list[np.ndarray],
    val_tensors: list[AbstractTensor],
    val_labels: list[np.ndarray],
    label_set: LabelSet,
    config: AbsModelConfig,
    seed: int,
) -> tuple[AbstractCRNN, TrainResult]:
    """Train the abstract-level model; returns the best-epoch model."""
    from .fusion import evaluate as evaluate_labels

    set_seed(seed)
    model = AbstractCRNN(n_labels=len(label_set), config=config)
    val_gold = np.concatenate([m.argmax(axis=1) for m in val_labels])

    def train_epoch(optimizer, epoch: int) -> float:
        rng = epoch_rng(seed, stage=2, epoch=epoch)
        total, count = 0.0, 0
        for idx in batch_indices(len(train_tensors), config.batch_size, rng):
            optimizer.zero_grad()
            chunk = [train_tensors[i] for i in idx]
            x, mask, y = pad_batch(chunk, [train_labels[i] for i in idx])
            loss = bce_abstract_loss(y, model(x, mask), mask)
            loss.backward()
            optimizer.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        return total / count

    def evaluate_split() -> tuple[float, float]:
        with torch.no_grad():
            model.eval()
            total, count = 0.0, 0
            preds = []
            for idx in batch_indices(len(val_tensors), config.batch_size):
                chunk = [val_tensors[i] for i in idx]
                x, mask, y = pad_batch(chunk, [val_labels[i] for i in idx])
                scores = model(x, mask)
                total += float(bce_abstract_loss(y, scores, mask)) * len(idx)
                count += len(idx)
                for b, tensor in enumerate(chunk):
                    rows = int(tensor.mask.sum())
                    preds.append(scores[b, :rows].numpy().argmax(axis=1))
        report = evaluate_labels(np.concatenate(preds), val_gold, label_set)
        return total / count, report.weighted["f1"]

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


def predict_abs(
    model: AbstractCRNN, tensors: list[AbstractTensor], batch_size: int = 32
) -> dict[str, PredictionMatrix]:
    """Scores for every abstract, keyed by abstract id."""
    return {pm.id: pm for pm in crnn_forward(model, tensors, batch_size)}
