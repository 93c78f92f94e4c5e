"""Feature construction: vocabularies, embedding tables, one-hot statistics
and the frozen sentence-vector cache.

Embedding matrices built here are initializations handed to the sentence
model; the sentence-vector cache decouples training from the external
pretrained encoder so the whole pipeline runs offline once vectors are
exported.
"""

from __future__ import annotations

import hashlib
import json
import os
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .corpus import Corpus, LabelSet, SentenceStats


class FeatureError(ValueError):
    """Raised for invalid feature inputs or unusable cache/vector files."""


PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
PAD_INDEX = 0
UNK_INDEX = 1


@dataclass(frozen=True)
class Vocabulary:
    """Token/index bijection with pad=0 and unk=1 reserved."""

    kind: str  # 'word' or 'char'
    index_to_token: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(
            self, "_lookup", {tok: i for i, tok in enumerate(self.index_to_token)}
        )

    @property
    def size(self) -> int:
        return len(self.index_to_token)

    def lookup(self, token: str) -> int:
        return self._lookup.get(token, UNK_INDEX)

    def encode(self, tokens, max_len: int) -> tuple[np.ndarray, int]:
        """Encode tokens to a fixed-width int array; returns (ids, length).

        Sequences longer than ``max_len`` are truncated, shorter ones are
        padded with the pad index.
        """
        ids = np.full(max_len, PAD_INDEX, dtype=np.int32)
        n = min(len(tokens), max_len)
        for i in range(n):
            ids[i] = self.lookup(tokens[i])
        return ids, n

    def to_json(self) -> dict:
        return {"kind": self.kind, "tokens": list(self.index_to_token)}

    @classmethod
    def from_json(cls, data: dict) -> "Vocabulary":
        return cls(kind=data["kind"], index_to_token=tuple(data["tokens"]))


def build_vocab(corpus: Corpus, kind: str, min_freq: int = 1) -> Vocabulary:
    """Count tokens over the corpus and keep those with frequency >= min_freq.

    Tokens are ordered by (-frequency, token) for a deterministic layout.
    """
    if not corpus.abstracts:
        raise FeatureError("cannot build a vocabulary from an empty corpus")
    if kind not in ("word", "char"):
        raise FeatureError(f"unknown vocabulary kind {kind!r}")
    counts: Counter[str] = Counter()
    for _, _, sentence in corpus.iter_sentences():
        counts.update(sentence.words if kind == "word" else sentence.chars)
    kept = sorted(
        (tok for tok, c in counts.items() if c >= min_freq),
        key=lambda tok: (-counts[tok], tok),
    )
    return Vocabulary(kind=kind, index_to_token=(PAD_TOKEN, UNK_TOKEN, *kept))


def load_word_vectors(
    path, vocab: Vocabulary, dim: int, seed: int = 0, oov_range: float = 0.05
) -> np.ndarray:
    """Build the word embedding matrix from a text-format vector file.

    File lines are ``token v1 ... v_dim``. In-file vectors are copied
    verbatim; tokens without a pretrained vector get uniform [-oov_range,
    oov_range] rows from a seeded generator; the pad row stays zero.
    """
    if not os.path.exists(path):
        raise FeatureError(f"word vector file not found: {path}")
    pretrained: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split(" ")
            if len(parts) < 2:
                continue
            token, values = parts[0], parts[1:]
            if len(values) != dim:
                raise FeatureError(
                    f"{path}: line {line_no} has {len(values)} dims, expected {dim}"
                )
            if token in vocab._lookup:
                pretrained[token] = np.asarray(values, dtype=np.float32)
    matrix = init_word_vectors(vocab, dim, seed=seed, oov_range=oov_range)
    for token, vector in pretrained.items():
        index = vocab.lookup(token)
        if index == PAD_INDEX:
            continue  # the pad row must stay zero no matter what the file says
        matrix[index] = vector
    return matrix


def init_word_vectors(
    vocab: Vocabulary, dim: int, seed: int = 0, oov_range: float = 0.05
) -> np.ndarray:
    """Uniform-random word matrix used when no pretrained file is given."""
    rng = np.random.default_rng(seed)
    matrix = rng.uniform(-oov_range, oov_range, size=(vocab.size, dim)).astype(np.float32)
    matrix[PAD_INDEX] = 0.0
    return matrix


def init_char_embeddings(
    vocab: Vocabulary, dim: int, seed: int = 0, init_range: float = 0.05
) -> np.ndarray:
    """Uniform [-r, r] character embedding matrix with a zero pad row."""
    rng = np.random.default_rng(seed)
    matrix = rng.uniform(-init_range, init_range, size=(vocab.size, dim)).astype(np.float32)
    matrix[PAD_INDEX] = 0.0
    return matrix


@dataclass(frozen=True)
class StatOneHot:
    t1: np.ndarray
    t2: np.ndarray
    t3: np.ndarray

    def concat(self) -> np.ndarray:
        return np.concatenate([self.t1, self.t2, self.t3])


def encode_stats(stats: SentenceStats, caps: tuple[int, int, int]) -> StatOneHot:
    """One-hot encode the three sentence statistics, clamping to the caps."""
    vectors = []
    for value, cap in zip((stats.t1, stats.t2, stats.t3), caps):
        vec = np.zeros(cap, dtype=np.float32)
        vec[min(int(value), cap - 1)] = 1.0
        vectors.append(vec)
    return StatOneHot(*vectors)


def onehot_labels(labels, label_set: LabelSet) -> np.ndarray:
    """Rows of one-hot label vectors for a sequence of label names."""
    out = np.zeros((len(labels), len(label_set)), dtype=np.float32)
    for i, name in enumerate(labels):
        out[i, label_set.index(name)] = 1.0
    return out


# ---------------------------------------------------------------------------
# Frozen sentence-vector cache
# ---------------------------------------------------------------------------

def sentence_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class HashEncoder:
    """Deterministic stand-in encoder producing pseudo-random unit vectors.

    Each sentence maps to a fixed vector derived from its content hash, so
    fixtures and tests can exercise the pretrained-sentence branch without
    any model weights. Not a semantic encoder.
    """

    def __init__(self, dim: int = 768):
        self.dim = dim
        self.id = f"hash-{dim}"
        self.calls = 0

    def encode(self, texts) -> np.ndarray:
        self.calls += 1
        out = np.empty((len(texts), self.dim), dtype=np.float32)
        for i, text in enumerate(texts):
            digest = hashlib.sha256(text.encode("utf-8")).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            vec = rng.standard_normal(self.dim)
            out[i] = (vec / np.linalg.norm(vec)).astype(np.float32)
        return out


class TransformerEncoder:
    """Mean-pooled sentence vectors from a local transformer snapshot.

    Loaded lazily so the package has no hard dependency on `transformers`.
    The snapshot is used frozen (eval mode, no gradients).
    """

    def __init__(self, model_path: str, batch_size: int = 32, max_length: int = 512):
        import torch
        from transformers import AutoModel, AutoTokenizer

        self._torch = torch
        self.tokenizer = AutoTokenizer.from_pretrained(model_path)
        self.model = AutoModel.from_pretrained(model_path)
        self.model.eval()
        self.dim = int(self.model.config.hidden_size)
        self.id = f"hf-{os.path.basename(str(model_path).rstrip('/'))}-{self.dim}"
        self.batch_size = batch_size
        self.max_length = max_length
        self.calls = 0

    def encode(self, texts) -> np.ndarray:
        torch = self._torch
        self.calls += 1
        chunks = []
        with torch.no_grad():
            for start in range(0, len(texts), self.batch_size):
                batch = list(texts[start : start + self.batch_size])
                inputs = self.tokenizer(
                    batch, padding=True, truncation=True,
                    max_length=self.max_length, return_tensors="pt",
                )
                hidden = self.model(**inputs).last_hidden_state
                mask = inputs["attention_mask"].unsqueeze(-1).to(hidden.dtype)
                pooled = (hidden * mask).sum(1) / mask.sum(1).clamp(min=1e-9)
                chunks.append(pooled.cpu().numpy().astype(np.float32))
        return np.concatenate(chunks, axis=0)


def make_encoder(spec: str, dim: int = 768):
    """Build an encoder from a spec string: ``hash`` or ``hf:<model-or-path>``."""
    if spec == "hash":
        return HashEncoder(dim=dim)
    if spec.startswith("hf:"):
        return TransformerEncoder(spec[3:])
    raise FeatureError(f"unknown encoder spec {spec!r} (expected 'hash' or 'hf:<path>')")


def read_sentence_cache(path) -> tuple[dict[str, np.ndarray], dict]:
    """Load the sentence-vector cache; returns ({hash: vector}, header)."""
    vectors: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != "medssc-sentence-vectors":
            raise FeatureError(f"{path}: not a sentence-vector cache")
        dim = int(header["dim"])
        for line in fh:
            if not line.strip():
                continue
            record = json.loads(line)
            vec = np.asarray(record["vector"], dtype=np.float32)
            if vec.shape != (dim,):
                raise FeatureError(f"{path}: vector width {vec.shape} != header dim {dim}")
            vectors[record["hash"]] = vec
    return vectors, header


def write_sentence_cache(path, vectors: dict[str, np.ndarray], encoder_id: str, dim: int) -> None:
    header = {
        "format": "medssc-sentence-vectors",
        "version": 1,
        "encoder_id": encoder_id,
        "dim": dim,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for key in sorted(vectors):
            record = {
                "hash": key,
                "encoder_id": encoder_id,
                "vector": [float(x) for x in vectors[key]],
            }
            fh.write(json.dumps(record) + "\n")


def encode_pretrained_sentences(
    corpus: Corpus, encoder=None, cache_path=None
) -> dict[str, np.ndarray]:
    """Frozen sentence vectors for every distinct sentence in the corpus.

    Vectors come from the on-disk cache when present; only misses hit the
    encoder, and the refreshed cache is rewritten (sorted by hash, so the
    file is byte-stable for a given content set). With no encoder, a cache
    miss is an error telling the user to run the export step.
    """
    texts = {}
    for _, _, sentence in corpus.iter_sentences():
        texts.setdefault(sentence_hash(sentence.text), sentence.text)

    cached: dict[str, np.ndarray] = {}
    header: dict = {}
    if cache_path is not None and os.path.exists(cache_path):
        cached, header = read_sentence_cache(cache_path)
        if encoder is not None and header.get("encoder_id") != encoder.id:
            raise FeatureError(
                f"cache {cache_path} was built with encoder "
                f"{header.get('encoder_id')!r}, not {encoder.id!r}; re-run "
                "`medssc export-sentence-vectors` for this encoder"
            )

    missing = [h for h in sorted(texts) if h not in cached]
    if missing:
        if encoder is None:
            raise FeatureError(
                f"{len(missing)} sentences have no cached vector at "
                f"{cache_path}; run `medssc export-sentence-vectors` first"
            )
        fresh = encoder.encode([texts[h] for h in missing])
        for key, vec in zip(missing, fresh):
            cached[key] = np.asarray(vec, dtype=np.float32)
        if cache_path is not None:
            write_sentence_cache(cache_path, cached, encoder.id, encoder.dim)

    return {h: cached[h] for h in texts}
