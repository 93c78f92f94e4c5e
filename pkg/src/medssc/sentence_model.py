"""The sentence-level classifier and its embedding extraction.

Four feature branches (word tokens, character tokens, one-hot sentence
statistics and a frozen pretrained sentence vector) are fused into a
softmax head over the label set. After training, the pre-softmax dense
activations (width = number of labels) become the compact sentence
embeddings consumed by the abstract- and segment-level models.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import FeatureConfig, SenModelConfig
from .corpus import Corpus, LabelSet
from .features import Vocabulary, encode_stats, onehot_labels, sentence_hash
from .layers import AttentiveBiLstmEncoder, BiLstmStack, concat_padded
from .training import TrainResult, batch_indices, epoch_rng, fit, load_state, set_seed

__all__ = [
    "SentenceFeatures",
    "SentenceClassifier",
    "featurize_corpus",
    "collate",
    "sen_forward",
    "cce_loss",
    "train_sen",
    "predict_proba",
    "extract_sentence_embeddings",
    "build_sentence_model",
]


@dataclass
class SentenceFeatures:
    """Fixed-shape feature arrays for every sentence of one corpus split."""

    keys: list[tuple[str, int]]  # (abstract_id, sentence_index)
    word_ids: np.ndarray  # (S, max_words) int32
    word_len: np.ndarray  # (S,) int64
    char_ids: np.ndarray  # (S, max_chars) int32
    char_len: np.ndarray  # (S,) int64
    stats: tuple[np.ndarray, np.ndarray, np.ndarray]  # one-hot blocks
    labels: np.ndarray  # (S,) int64 label indices
    label_onehot: np.ndarray  # (S, L) float32
    pretrained: np.ndarray | None  # (S, d_p) float32, if exported

    def __len__(self) -> int:
        return len(self.keys)


def featurize_corpus(
    corpus: Corpus,
    word_vocab: Vocabulary,
    char_vocab: Vocabulary,
    features: FeatureConfig,
    sentence_vectors: dict[str, np.ndarray] | None = None,
) -> SentenceFeatures:
    """Encode a tokenized corpus into padded id/one-hot arrays."""
    n = corpus.sentence_count
    caps = features.stat_caps
    word_ids = np.zeros((n, features.max_words), dtype=np.int32)
    char_ids = np.zeros((n, features.max_chars), dtype=np.int32)
    word_len = np.zeros(n, dtype=np.int64)
    char_len = np.zeros(n, dtype=np.int64)
    stats = tuple(np.zeros((n, cap), dtype=np.float32) for cap in caps)
    labels = np.zeros(n, dtype=np.int64)
    keys: list[tuple[str, int]] = []
    pretrained = None
    if sentence_vectors is not None:
        dim = len(next(iter(sentence_vectors.values())))
        pretrained = np.zeros((n, dim), dtype=np.float32)

    row = 0
    for abstract, index, sentence in corpus.iter_sentences():
        word_ids[row], word_len[row] = word_vocab.encode(sentence.words, features.max_words)
        char_ids[row], char_len[row] = char_vocab.encode(sentence.chars, features.max_chars)
        onehots = encode_stats(sentence.stats, caps)
        for block, vec in zip(stats, (onehots.t1, onehots.t2, onehots.t3)):
            block[row] = vec
        labels[row] = corpus.labels.index(sentence.label)
        if pretrained is not None:
            pretrained[row] = sentence_vectors[sentence_hash(sentence.text)]
        keys.append((abstract.id, index))
        row += 1

    return SentenceFeatures(
        keys=keys,
        word_ids=word_ids,
        word_len=word_len,
        char_ids=char_ids,
        char_len=char_len,
        stats=stats,
        labels=labels,
        label_onehot=onehot_labels(
            [corpus.labels.names[i] for i in labels], corpus.labels
        ),
        pretrained=pretrained,
    )


def collate(features: SentenceFeatures, idx: np.ndarray) -> dict[str, torch.Tensor]:
    batch = {
        "word_ids": torch.as_tensor(features.word_ids[idx], dtype=torch.int64),
        "word_mask": torch.as_tensor(
            np.arange(features.word_ids.shape[1]) < features.word_len[idx, None]
        ),
        "char_ids": torch.as_tensor(features.char_ids[idx], dtype=torch.int64),
        "char_mask": torch.as_tensor(
            np.arange(features.char_ids.shape[1]) < features.char_len[idx, None]
        ),
        "t1": torch.as_tensor(features.stats[0][idx]),
        "t2": torch.as_tensor(features.stats[1][idx]),
        "t3": torch.as_tensor(features.stats[2][idx]),
    }
    if features.pretrained is not None:
        batch["pretrained"] = torch.as_tensor(features.pretrained[idx])
    return batch


class _StatEncoder(nn.Module):
    """Two dense layers mapping one one-hot statistic to a hidden vector."""

    def __init__(self, input_dim: int, hidden: int, inner: int = 256):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(input_dim, inner), nn.ReLU(), nn.Linear(inner, hidden)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class SentenceClassifier(nn.Module):
    """Multi-branch sentence classifier with a softmax head.

    Word and char branches run through stacked bidirectional LSTMs plus
    self-attention; their outputs are joined along the sequence axis,
    re-encoded, extended with three encoded statistic vectors, pooled by a
    final bidirectional LSTM, and (optionally) concatenated with the
    frozen pretrained sentence vector before the final dense layer.
    Disabled branches are simply omitted from their concatenation points.
    """

    def __init__(
        self,
        n_labels: int,
        config: SenModelConfig,
        features: FeatureConfig,
        word_vocab_size: int,
        char_vocab_size: int,
        word_matrix: np.ndarray | None = None,
        char_matrix: np.ndarray | None = None,
    ):
        super().__init__()
        if not config.branches:
            raise ValueError("at least one branch must be enabled")
        self.branches = frozenset(config.branches)
        self.n_labels = n_labels
        self.config = config
        self.feature_config = features
        hidden = config.hidden
        self.dropout = nn.Dropout(config.dropout)

        if "word" in self.branches:
            self.word_embedding = nn.Embedding(
                word_vocab_size, features.word_dim, padding_idx=0
            )
            if word_matrix is not None:
                with torch.no_grad():
                    self.word_embedding.weight.copy_(torch.as_tensor(word_matrix))
            self.word_encoder = AttentiveBiLstmEncoder(features.word_dim, hidden)
        if "char" in self.branches:
            self.char_embedding = nn.Embedding(
                char_vocab_size, features.char_dim, padding_idx=0
            )
            if char_matrix is not None:
                with torch.no_grad():
                    self.char_embedding.weight.copy_(torch.as_tensor(char_matrix))
            self.char_encoder = AttentiveBiLstmEncoder(features.char_dim, hidden)
        if "stat" in self.branches:
            self.stat_encoders = nn.ModuleList(
                _StatEncoder(cap, hidden) for cap in features.stat_caps
            )

        self.uses_sequence = bool(self.branches & {"word", "char", "stat"})
        if self.branches & {"word", "char"}:
            self.wordchar_encoder = BiLstmStack(hidden, hidden, layers=2)
        if self.uses_sequence:
            self.context_lstm = nn.LSTM(
                hidden, hidden, batch_first=True, bidirectional=True
            )
            self.pool_dense = nn.Linear(2 * hidden, hidden)

        head_in = (hidden if self.uses_sequence else 0) + (
            features.pretrained_dim if "pretrained" in self.branches else 0
        )
        self.head = nn.Linear(head_in, n_labels)

    @staticmethod
    def _trim(seq: torch.Tensor, mask: torch.Tensor):
        length = int(mask.sum(dim=1).max())
        return seq[:, :length], mask[:, :length]

    def forward(self, batch: dict[str, torch.Tensor]) -> torch.Tensor:
        """Return pre-softmax logits of shape (batch, n_labels)."""
        seq_parts = []
        if "word" in self.branches:
            mask = batch["word_mask"]
            encoded = self.word_encoder(self.word_embedding(batch["word_ids"]), mask)
            seq_parts.append((self.dropout(encoded), mask))
        if "char" in self.branches:
            mask = batch["char_mask"]
            encoded = self.char_encoder(self.char_embedding(batch["char_ids"]), mask)
            seq_parts.append((self.dropout(encoded), mask))

        z_parts = []
        if seq_parts:
            joined, joined_mask = self._trim(*concat_padded(seq_parts))
            lengths = joined_mask.sum(dim=1).clamp(min=1)
            encoded = self.wordchar_encoder(joined, lengths)
            z_parts.append((self.dropout(encoded), joined_mask))
        if "stat" in self.branches:
            stats = torch.stack(
                [enc(batch[key]) for enc, key in zip(self.stat_encoders, ("t1", "t2", "t3"))],
                dim=1,
            )
            ones = torch.ones(stats.shape[:2], dtype=torch.bool, device=stats.device)
            z_parts.append((stats, ones))

        head_parts = []
        if z_parts:
            z, z_mask = self._trim(*concat_padded(z_parts))
            lengths = z_mask.sum(dim=1).clamp(min=1)
            packed = nn.utils.rnn.pack_padded_sequence(
                z, lengths.cpu(), batch_first=True, enforce_sorted=False
            )
            _, (h_n, _) = self.context_lstm(packed)
            pooled = torch.cat([h_n[0], h_n[1]], dim=1)
            head_parts.append(self.pool_dense(self.dropout(pooled)))
        if "pretrained" in self.branches:
            if "pretrained" not in batch:
                raise ValueError(
                    "pretrained branch is enabled but the batch has no sentence "
                    "vectors; run `medssc export-sentence-vectors` first"
                )
            head_parts.append(batch["pretrained"])

        return self.head(torch.cat(head_parts, dim=1))


def sen_forward(model: SentenceClassifier, batch: dict[str, torch.Tensor]) -> torch.Tensor:
    """Class probabilities: softmax over the model logits, clamped away from 0."""
    return torch.softmax(model(batch), dim=1).clamp_min(1e-7)


def cce_loss(true, pred) -> torch.Tensor:
    """Categorical cross-entropy: -(1/N) sum_i sum_j y_ij log(p_ij).

    ``true`` holds one-hot rows, ``pred`` probability rows; predictions are
    clamped at 1e-7 before the log so exact zeros never produce NaN.
    """
    true_t = torch.as_tensor(true)
    pred_t = pred if isinstance(pred, torch.Tensor) else torch.as_tensor(pred)
    if true_t.shape != pred_t.shape:
        raise ValueError(f"shape mismatch: true {tuple(true_t.shape)} vs pred {tuple(pred_t.shape)}")
    log_pred = torch.log(pred_t.clamp_min(1e-7))
    return -(true_t.to(log_pred.dtype) * log_pred).sum(dim=1).mean()


def predict_proba(
    model: SentenceClassifier, features: SentenceFeatures, batch_size: int = 256
) -> np.ndarray:
    """Probabilities for a whole split, in corpus order (eval mode)."""
    model.eval()
    out = np.zeros((len(features), model.n_labels), dtype=np.float32)
    with torch.no_grad():
        for idx in batch_indices(len(features), batch_size):
            out[idx] = sen_forward(model, collate(features, idx)).numpy()
    return out


def extract_sentence_embeddings(
    model: SentenceClassifier, features: SentenceFeatures, batch_size: int = 256
) -> np.ndarray:
    """Pre-softmax dense activations, one L-wide vector per sentence."""
    model.eval()
    out = np.zeros((len(features), model.n_labels), dtype=np.float32)
    with torch.no_grad():
        for idx in batch_indices(len(features), batch_size):
            out[idx] = model(collate(features, idx)).numpy()
    return out


def model_meta(model: SentenceClassifier) -> dict:
    """Hyperparameters needed to rebuild the module for a checkpoint."""
    return {
        "kind": "sen",
        "n_labels": model.n_labels,
        "word_vocab_size": model.word_embedding.num_embeddings
        if "word" in model.branches
        else 0,
        "char_vocab_size": model.char_embedding.num_embeddings
        if "char" in model.branches
        else 0,
        "config": {
            "hidden": model.config.hidden,
            "dropout": model.config.dropout,
            "branches": sorted(model.branches),
        },
        "features": {
            "word_dim": model.feature_config.word_dim,
            "char_dim": model.feature_config.char_dim,
            "pretrained_dim": model.feature_config.pretrained_dim,
            "stat_caps": list(model.feature_config.stat_caps),
            "max_words": model.feature_config.max_words,
            "max_chars": model.feature_config.max_chars,
        },
    }


def build_sentence_model(meta: dict) -> SentenceClassifier:
    """Reconstruct an untrained module from checkpoint metadata."""
    config = SenModelConfig(
        hidden=meta["config"]["hidden"],
        dropout=meta["config"]["dropout"],
        branches=tuple(meta["config"]["branches"]),
    )
    features = FeatureConfig(
        word_dim=meta["features"]["word_dim"],
        char_dim=meta["features"]["char_dim"],
        pretrained_dim=meta["features"]["pretrained_dim"],
        stat_caps=tuple(meta["features"]["stat_caps"]),
        max_words=meta["features"]["max_words"],
        max_chars=meta["features"]["max_chars"],
    )
    return SentenceClassifier(
        n_labels=meta["n_labels"],
        config=config,
        features=features,
        word_vocab_size=max(meta["word_vocab_size"], 1),
        char_vocab_size=max(meta["char_vocab_size"], 1),
    )


def train_sen(
    train_features: SentenceFeatures,
    val_features: SentenceFeatures,
    label_set: LabelSet,
    config: SenModelConfig,
    features: FeatureConfig,
    seed: int,
    word_matrix: np.ndarray | None = None,
    char_matrix: np.ndarray | None = None,
    word_vocab_size: int = 1,
    char_vocab_size: int = 1,
) -> tuple[SentenceClassifier, TrainResult]:
    """Train the sentence classifier; returns the best-epoch model."""
    from .fusion import evaluate as evaluate_labels

    set_seed(seed)
    model = SentenceClassifier(
        n_labels=len(label_set),
        config=config,
        features=features,
        word_vocab_size=word_vocab_size,
        char_vocab_size=char_vocab_size,
        word_matrix=word_matrix,
        char_matrix=char_matrix,
    )
    train_onehot = torch.as_tensor(train_features.label_onehot)
    val_onehot = torch.as_tensor(val_features.label_onehot)

    def train_epoch(optimizer, epoch: int) -> float:
        rng = epoch_rng(seed, stage=1, epoch=epoch)
        total, count = 0.0, 0
        for idx in batch_indices(len(train_features), config.batch_size, rng):
            optimizer.zero_grad()
            probs = sen_forward(model, collate(train_features, idx))
            loss = cce_loss(train_onehot[idx], probs)
            loss.backward()
            optimizer.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        return total / count

    def evaluate_split() -> tuple[float, float]:
        probs = predict_proba(model, val_features, config.batch_size)
        val_loss = float(cce_loss(val_onehot, torch.as_tensor(probs)))
        report = evaluate_labels(probs.argmax(axis=1), val_features.labels, label_set)
        return val_loss, report.weighted["f1"]

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
