"""Pipeline stages over a work directory.

Each stage validates its upstream artifacts, does its work, and persists
self-describing outputs. Re-running a stage with the same config and seed
reproduces its artifacts byte for byte (same machine, same library
builds), which is what the idempotence tests check.

Work-dir layout::

    work/
      config.json          resolved config + identity hash ("prepare")
      corpus/<split>.jsonl normalized abstracts
      features/            vocabularies, embedding matrices, sentence-vector cache
      checkpoints/         sen.npz / abs.npz / seg.npz
      embeddings/          per-split sentence embeddings (width = label count)
      predictions/         per-level per-split score files
      reports/             training histories and evaluation reports
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import abstract_model as abs_mod
from . import segment_model as seg_mod
from . import sentence_model as sen_mod
from .artifacts import (
    check_config_hash,
    load_checkpoint,
    read_embeddings,
    save_checkpoint,
    write_embeddings,
    write_predictions,
)
from .config import PipelineConfig
from .corpus import Corpus, parse_nicta, parse_pubmed_rct, read_corpus_jsonl, write_corpus_jsonl
from .features import (
    Vocabulary,
    build_vocab,
    encode_pretrained_sentences,
    init_char_embeddings,
    init_word_vectors,
    load_word_vectors,
    make_encoder,
)
from .fusion import FusionConfig, PredictionMatrix, decode, evaluate, fuse

SPLITS = ("train", "validation", "test")
LEVELS = ("sen", "abs", "seg", "combine")

# accepted data-file basenames per canonical split
_SPLIT_FILES = {
    "train": ("train.txt", "train.csv"),
    "validation": ("dev.txt", "validation.txt", "val.txt", "dev.csv", "validation.csv", "val.csv"),
    "test": ("test.txt", "test.csv"),
}


class PipelineError(RuntimeError):
    """A stage cannot run; the message names the command that fixes it."""


def canonical_split(name: str) -> str:
    alias = {"dev": "validation", "val": "validation"}
    split = alias.get(name, name)
    if split not in SPLITS:
        raise PipelineError(f"unknown split {name!r}; expected one of {SPLITS} (or 'dev')")
    return split


class WorkLayout:
    """Path bookkeeping for one work directory."""

    def __init__(self, root):
        self.root = Path(root)

    @property
    def config_path(self) -> Path:
        return self.root / "config.json"

    def corpus(self, split: str) -> Path:
        return self.root / "corpus" / f"{split}.jsonl"

    def vocab(self, kind: str) -> Path:
        return self.root / "features" / f"{kind}_vocab.json"

    def matrix(self, kind: str) -> Path:
        return self.root / "features" / f"{kind}_matrix.npz"

    @property
    def sentence_cache(self) -> Path:
        return self.root / "features" / "sentence_vectors.jsonl"

    def checkpoint(self, stage: str) -> Path:
        return self.root / "checkpoints" / f"{stage}.npz"

    def embeddings(self, split: str) -> Path:
        return self.root / "embeddings" / f"{split}.jsonl"

    def predictions(self, level: str, split: str) -> Path:
        return self.root / "predictions" / f"{level}_{split}.jsonl"

    def history(self, stage: str) -> Path:
        return self.root / "reports" / f"{stage}_history.json"

    def report(self, level: str, split: str, suffix: str) -> Path:
        return self.root / "reports" / f"{level}_{split}.{suffix}"

    def ensure_dirs(self):
        for sub in ("corpus", "features", "checkpoints", "embeddings", "predictions", "reports"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise PipelineError(f"missing artifact {path}; run `medssc {producer}` first")
    return path


def _check_work_config(config: PipelineConfig, work: WorkLayout, force: bool, warnings: list):
    if not work.config_path.exists():
        raise PipelineError(f"work dir {work.root} is not prepared; run `medssc prepare` first")
    stored = json.loads(work.config_path.read_text())
    note = check_config_hash(
        {"config_hash": stored.get("config_hash")}, config.identity_hash(),
        work.config_path, force=force,
    )
    if note:
        warnings.append(note)


def _find_data_file(data_dir: str, split: str) -> Path | None:
    for name in _SPLIT_FILES[split]:
        candidate = Path(data_dir) / name
        if candidate.exists():
            return candidate
    return None


def _parse_file(config: PipelineConfig, path: Path, split: str) -> Corpus:
    with open(path, encoding="utf-8") as fh:
        if config.dataset == "nicta":
            return parse_nicta(fh, split=split, labels=config.labels)
        return parse_pubmed_rct(fh, split=split, labels=config.labels)


def _load_corpus(work: WorkLayout, split: str, producer: str = "prepare") -> Corpus:
    corpus, _ = read_corpus_jsonl(_require(work.corpus(split), producer))
    return corpus


def _load_vocab(work: WorkLayout, kind: str) -> Vocabulary:
    data = json.loads(_require(work.vocab(kind), "prepare").read_text())
    return Vocabulary.from_json(data)


def _load_matrix(work: WorkLayout, kind: str) -> np.ndarray:
    with np.load(_require(work.matrix(kind), "prepare")) as data:
        return data["matrix"]


def _sentence_vectors(
    config: PipelineConfig, work: WorkLayout, corpus: Corpus, needed: bool
):
    if not needed:
        return None
    _require(work.sentence_cache, "export-sentence-vectors")
    vectors = encode_pretrained_sentences(corpus, encoder=None, cache_path=work.sentence_cache)
    dim = len(next(iter(vectors.values())))
    if dim != config.features.pretrained_dim:
        raise PipelineError(
            f"sentence-vector cache width {dim} does not match "
            f"features.pretrained_dim={config.features.pretrained_dim}; "
            f"set --set features.pretrained_dim={dim} (or re-export)"
        )
    return vectors


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def prepare(config: PipelineConfig, force: bool = False) -> dict:
    """Parse raw dataset files, build vocabularies and embedding matrices."""
    if not config.data_dir:
        raise PipelineError("prepare needs --data-dir pointing at the dataset release files")
    work = WorkLayout(config.work_dir)
    work.ensure_dirs()
    config_hash = config.identity_hash()

    splits = {}
    for split in SPLITS:
        path = _find_data_file(config.data_dir, split)
        if path is None:
            if split == "train":
                raise PipelineError(
                    f"no train file found in {config.data_dir} "
                    f"(looked for {', '.join(_SPLIT_FILES['train'])})"
                )
            continue
        corpus = _parse_file(config, path, split)
        write_corpus_jsonl(
            corpus, work.corpus(split),
            header_extra={"dataset": config.dataset, "config_hash": config_hash},
        )
        splits[split] = {
            "abstracts": len(corpus.abstracts),
            "sentences": corpus.sentence_count,
        }

    train_corpus = _load_corpus(work, "train")
    word_vocab = build_vocab(train_corpus, "word", min_freq=config.features.min_freq)
    char_vocab = build_vocab(train_corpus, "char", min_freq=config.features.min_freq)
    for vocab in (word_vocab, char_vocab):
        payload = {
            "format": "medssc-vocab",
            "version": 1,
            "config_hash": config_hash,
            **vocab.to_json(),
        }
        work.vocab(vocab.kind).write_text(json.dumps(payload, sort_keys=True))

    if config.word_vectors:
        word_matrix = load_word_vectors(
            config.word_vectors, word_vocab, config.features.word_dim,
            seed=config.seed, oov_range=config.features.oov_init_range,
        )
    else:
        word_matrix = init_word_vectors(
            word_vocab, config.features.word_dim,
            seed=config.seed, oov_range=config.features.oov_init_range,
        )
    char_matrix = init_char_embeddings(
        char_vocab, config.features.char_dim,
        seed=config.seed, init_range=config.features.char_init_range,
    )
    for kind, matrix in (("word", word_matrix), ("char", char_matrix)):
        with open(work.matrix(kind), "wb") as fh:
            np.savez(fh, matrix=matrix)

    work.config_path.write_text(
        json.dumps(
            {"config": config.to_dict(), "config_hash": config_hash},
            sort_keys=True, indent=2,
        )
    )
    return {
        "work_dir": str(work.root),
        "config_hash": config_hash,
        "splits": splits,
        "word_vocab_size": word_vocab.size,
        "char_vocab_size": char_vocab.size,
        "pretrained_word_vectors": bool(config.word_vectors),
    }


def export_sentence_vectors(config: PipelineConfig, force: bool = False) -> dict:
    """Run the frozen encoder once over every sentence and cache the vectors."""
    work = WorkLayout(config.work_dir)
    warnings: list[str] = []
    _check_work_config(config, work, force, warnings)
    abstracts = []
    for split in SPLITS:
        if work.corpus(split).exists():
            abstracts.extend(_load_corpus(work, split).abstracts)
    if not abstracts:
        raise PipelineError("no corpus files in work dir; run `medssc prepare` first")
    merged = Corpus(split="train", abstracts=tuple(abstracts), labels=config.labels)
    encoder = make_encoder(config.encoder, dim=config.features.pretrained_dim)
    vectors = encode_pretrained_sentences(merged, encoder=encoder, cache_path=work.sentence_cache)
    return {
        "cache": str(work.sentence_cache),
        "sentences": len(vectors),
        "dim": encoder.dim,
        "encoder_id": encoder.id,
        "warnings": warnings,
    }


def _featurized(
    config: PipelineConfig, work: WorkLayout, split: str,
    need_pretrained: bool | None = None,
):
    """Featurize one split. ``need_pretrained`` defaults to the configured
    branch set; consumers of an existing checkpoint pass the checkpoint's
    own branch set instead."""
    corpus = _load_corpus(work, split)
    word_vocab = _load_vocab(work, "word")
    char_vocab = _load_vocab(work, "char")
    if need_pretrained is None:
        need_pretrained = "pretrained" in config.sen.branches
    vectors = _sentence_vectors(config, work, corpus, need_pretrained)
    features = sen_mod.featurize_corpus(
        corpus, word_vocab, char_vocab, config.features, sentence_vectors=vectors
    )
    return corpus, features


def train_sen(config: PipelineConfig, force: bool = False) -> dict:
    """Train the sentence-level classifier and persist the best checkpoint."""
    work = WorkLayout(config.work_dir)
    warnings: list[str] = []
    _check_work_config(config, work, force, warnings)
    _require(work.corpus("validation"), "prepare (the dataset needs a validation split)")
    _, train_features = _featurized(config, work, "train")
    _, val_features = _featurized(config, work, "validation")
    word_matrix = _load_matrix(work, "word")
    char_matrix = _load_matrix(work, "char")

    model, result = sen_mod.train_sen(
        train_features,
        val_features,
        config.labels,
        config.sen,
        config.features,
        seed=config.seed,
        word_matrix=word_matrix,
        char_matrix=char_matrix,
        word_vocab_size=word_matrix.shape[0],
        char_vocab_size=char_matrix.shape[0],
    )
    meta = {
        "model": sen_mod.model_meta(model),
        "labels": list(config.labels.names),
        "seed": config.seed,
        "config_hash": config.identity_hash(),
        "best_epoch": result.best_epoch,
        "best_val_loss": result.best_val_loss,
        "best_val_f1": result.best_val_f1,
    }
    save_checkpoint(work.checkpoint("sen"), result.state, meta)
    _write_history(work, "sen", config, result)
    return _train_summary("sen", work, result, warnings)


def _write_history(work: WorkLayout, stage: str, config: PipelineConfig, result) -> None:
    payload = {
        "format": "medssc-history",
        "version": 1,
        "stage": stage,
        "config_hash": config.identity_hash(),
        "best_epoch": result.best_epoch,
        "best_val_loss": result.best_val_loss,
        "best_val_f1": result.best_val_f1,
        "history": [record.to_dict() for record in result.history],
    }
    work.history(stage).write_text(json.dumps(payload, sort_keys=True, indent=2))


def _train_summary(stage: str, work: WorkLayout, result, warnings: list) -> dict:
    return {
        "checkpoint": str(work.checkpoint(stage)),
        "history_file": str(work.history(stage)),
        "epochs": len(result.history),
        "best_epoch": result.best_epoch,
        "best_val_loss": result.best_val_loss,
        "best_val_f1": result.best_val_f1,
        "history": [record.to_dict() for record in result.history],
        "warnings": warnings,
    }


def _load_sen_model(config: PipelineConfig, work: WorkLayout):
    state, meta = load_checkpoint(_require(work.checkpoint("sen"), "train-sen"))
    if meta["model"]["n_labels"] != len(config.labels):
        raise PipelineError(
            f"sen checkpoint was trained with {meta['model']['n_labels']} labels but "
            f"dataset {config.dataset!r} has {len(config.labels)}"
        )
    model = sen_mod.build_sentence_model(meta["model"])
    sen_mod.load_state(model, state)
    model.eval()
    return model, meta


def extract_embeddings(config: PipelineConfig, force: bool = False) -> dict:
    """Extract per-sentence pre-softmax embeddings for every prepared split."""
    work = WorkLayout(config.work_dir)
    warnings: list[str] = []
    _check_work_config(config, work, force, warnings)
    model, meta = _load_sen_model(config, work)
    note = check_config_hash(meta, config.identity_hash(), work.checkpoint("sen"), force)
    if note:
        warnings.append(note)

    needs_pretrained = "pretrained" in meta["model"]["config"]["branches"]
    written = {}
    for split in SPLITS:
        if not work.corpus(split).exists():
            continue
        corpus, features = _featurized(
            config, work, split, need_pretrained=needs_pretrained
        )
        vectors = sen_mod.extract_sentence_embeddings(model, features, config.sen.batch_size)
        rows = (
            (abstract_id, index, vectors[row])
            for row, (abstract_id, index) in enumerate(features.keys)
        )
        write_embeddings(
            work.embeddings(split),
            {
                "split": split,
                "dim": model.n_labels,
                "labels": list(config.labels.names),
                "config_hash": config.identity_hash(),
            },
            rows,
        )
        written[split] = len(features)
    return {
        "files": {split: str(work.embeddings(split)) for split in written},
        "sentences": written,
        "dim": model.n_labels,
        "warnings": warnings,
    }


def _grouped(config: PipelineConfig, work: WorkLayout, split: str, force: bool = False):
    """Per-abstract embedding tensors and one-hot label rows for a split."""
    header, table = read_embeddings(_require(work.embeddings(split), "extract-embeddings"))
    note = check_config_hash(header, config.identity_hash(), work.embeddings(split), force)
    corpus = _load_corpus(work, split)
    tensors = abs_mod.group_by_abstract(table, corpus, config.abs.max_sentences)
    labels = abs_mod.abstract_label_matrices(corpus, config.labels, config.abs.max_sentences)
    return corpus, tensors, labels, note


def train_abs(config: PipelineConfig, force: bool = False) -> dict:
    """Train the abstract-level convolutional-recurrent model."""
    work = WorkLayout(config.work_dir)
    warnings: list[str] = []
    _check_work_config(config, work, force, warnings)
    _, train_tensors, train_labels, note = _grouped(config, work, "train", force)
    if note:
        warnings.append(note)
    _, val_tensors, val_labels, _ = _grouped(config, work, "validation", force)

    model, result = abs_mod.train_abs(
        train_tensors, train_labels, val_tensors, val_labels,
        config.labels, config.abs, seed=config.seed,
    )
    meta = {
        "model": abs_mod.model_meta(model),
        "labels": list(config.labels.names),
        "seed": config.seed,
        "config_hash": config.identity_hash(),
        "best_epoch": result.best_epoch,
        "best_val_loss": result.best_val_loss,
        "best_val_f1": result.best_val_f1,
    }
    save_checkpoint(work.checkpoint("abs"), result.state, meta)
    _write_history(work, "abs", config, result)
    return _train_summary("abs", work, result, warnings)


def train_seg(config: PipelineConfig, force: bool = False) -> dict:
    """Train the segment-level MLP on soft-labeled sliding windows."""
    work = WorkLayout(config.work_dir)
    warnings: list[str] = []
    _check_work_config(config, work, force, warnings)
    _, train_tensors, train_labels, note = _grouped(config, work, "train", force)
    if note:
        warnings.append(note)
    _, val_tensors, val_labels, _ = _grouped(config, work, "validation", force)

    size = config.seg.segment_size
    train_segments = [
        s
        for tensor, labels in zip(train_tensors, train_labels)
        for s in seg_mod.make_segments(tensor.matrix, labels, tensor.id, size)
    ]
    val_segments = [
        s
        for tensor, labels in zip(val_tensors, val_labels)
        for s in seg_mod.make_segments(tensor.matrix, labels, tensor.id, size)
    ]
    model, result = seg_mod.train_seg(
        train_segments, val_segments, config.labels, config.seg, seed=config.seed
    )
    meta = {
        "model": seg_mod.model_meta(model),
        "labels": list(config.labels.names),
        "seed": config.seed,
        "config_hash": config.identity_hash(),
        "best_epoch": result.best_epoch,
        "best_val_loss": result.best_val_loss,
        "best_val_f1": result.best_val_f1,
    }
    save_checkpoint(work.checkpoint("seg"), result.state, meta)
    _write_history(work, "seg", config, result)
    return _train_summary("seg", work, result, warnings)


def _predict_level(
    config: PipelineConfig, work: WorkLayout, level: str, split: str, force: bool
) -> tuple[list[PredictionMatrix], list[str]]:
    """Per-abstract prediction matrices for one level on one split."""
    warnings: list[str] = []
    if level == "sen":
        model, meta = _load_sen_model(config, work)
        note = check_config_hash(meta, config.identity_hash(), work.checkpoint("sen"), force)
        if note:
            warnings.append(note)
        corpus, features = _featurized(
            config, work, split,
            need_pretrained="pretrained" in meta["model"]["config"]["branches"],
        )
        probs = sen_mod.predict_proba(model, features, config.sen.batch_size)
        by_abstract: dict[str, list[np.ndarray]] = {}
        for row, (abstract_id, _) in enumerate(features.keys):
            by_abstract.setdefault(abstract_id, []).append(probs[row])
        return (
            [PredictionMatrix(id=a.id, scores=np.stack(by_abstract[a.id])) for a in corpus.abstracts],
            warnings,
        )

    if level == "abs":
        state, meta = load_checkpoint(_require(work.checkpoint("abs"), "train-abs"))
        note = check_config_hash(meta, config.identity_hash(), work.checkpoint("abs"), force)
        if note:
            warnings.append(note)
        model = abs_mod.build_abstract_model(meta["model"])
        abs_mod.load_state(model, state)
        _, tensors, _, _ = _grouped(config, work, split, force)
        return abs_mod.crnn_forward(model, tensors, config.abs.batch_size), warnings

    if level == "seg":
        state, meta = load_checkpoint(_require(work.checkpoint("seg"), "train-seg"))
        note = check_config_hash(meta, config.identity_hash(), work.checkpoint("seg"), force)
        if note:
            warnings.append(note)
        model = seg_mod.build_segment_model(meta["model"])
        seg_mod.load_state(model, state)
        _, tensors, _, _ = _grouped(config, work, split, force)
        size = meta["model"]["config"]["segment_size"]
        segments = [
            s
            for tensor in tensors
            for s in seg_mod.make_segments_unlabeled(tensor.matrix, tensor.id, size)
        ]
        probs = seg_mod.predict_segments(model, segments, config.seg.batch_size)
        lengths = {tensor.id: tensor.matrix.shape[0] for tensor in tensors}
        aggregated = seg_mod.aggregate_to_sentences(
            segments, probs, lengths, mode=config.seg.aggregation
        )
        return [aggregated[tensor.id] for tensor in tensors], warnings

    if level == "combine":
        abs_preds, warn_a = _predict_level(config, work, "abs", split, force)
        seg_preds, warn_s = _predict_level(config, work, "seg", split, force)
        seg_by_id = {pm.id: pm for pm in seg_preds}
        fused = [
            fuse(pm, seg_by_id[pm.id], FusionConfig(config.fusion.lambda_abs, config.fusion.lambda_seg))
            for pm in abs_preds
        ]
        return fused, warn_a + warn_s

    raise PipelineError(f"unknown level {level!r}; expected one of {LEVELS}")


def _write_prediction_file(
    config: PipelineConfig, work: WorkLayout, level: str, split: str,
    matrices: list[PredictionMatrix],
) -> Path:
    names = config.labels.names

    def rows():
        for pm in matrices:
            decoded = decode(pm)
            for index in range(pm.scores.shape[0]):
                yield pm.id, index, pm.scores[index], names[int(decoded[index])]

    path = work.predictions(level, split)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_predictions(
        path,
        {
            "level": level,
            "split": split,
            "labels": list(names),
            "config_hash": config.identity_hash(),
        },
        rows(),
    )
    return path


def predict(config: PipelineConfig, level: str, split: str, force: bool = False) -> dict:
    """Write per-sentence scores (and decoded labels) for a level and split."""
    split = canonical_split(split)
    work = WorkLayout(config.work_dir)
    warnings: list[str] = []
    _check_work_config(config, work, force, warnings)
    matrices, notes = _predict_level(config, work, level, split, force)
    warnings.extend(notes)
    path = _write_prediction_file(config, work, level, split, matrices)
    return {
        "prediction_file": str(path),
        "level": level,
        "split": split,
        "abstracts": len(matrices),
        "sentences": int(sum(pm.scores.shape[0] for pm in matrices)),
        "warnings": warnings,
    }


def evaluate_level(config: PipelineConfig, level: str, split: str, force: bool = False) -> dict:
    """Score a level's predictions against gold labels and write reports."""
    split = canonical_split(split)
    work = WorkLayout(config.work_dir)
    warnings: list[str] = []
    _check_work_config(config, work, force, warnings)
    matrices, notes = _predict_level(config, work, level, split, force)
    warnings.extend(notes)

    corpus = _load_corpus(work, split)
    gold_lookup = {
        (abstract.id, index): corpus.labels.index(sentence.label)
        for abstract, index, sentence in corpus.iter_sentences()
    }
    pred_indices, gold_indices = [], []
    for pm in matrices:
        decoded = decode(pm)
        for index in range(pm.scores.shape[0]):
            pred_indices.append(int(decoded[index]))
            gold_indices.append(gold_lookup[(pm.id, index)])

    exclude = ("OTHER",) if config.dataset == "nicta" else ()
    report = evaluate(pred_indices, gold_indices, corpus.labels, exclude=exclude)

    payload = {
        "format": "medssc-report",
        "version": 1,
        "level": level,
        "split": split,
        "dataset": config.dataset,
        "config_hash": config.identity_hash(),
        "report": report.to_dict(),
    }
    work.report(level, split, "json").parent.mkdir(parents=True, exist_ok=True)
    work.report(level, split, "json").write_text(json.dumps(payload, sort_keys=True, indent=2))
    text = report.to_text()
    work.report(level, split, "txt").write_text(text + "\n")
    prediction_file = _write_prediction_file(config, work, level, split, matrices)

    return {
        "level": level,
        "split": split,
        "report": report.to_dict(),
        "report_text": text,
        "report_files": {
            "json": str(work.report(level, split, "json")),
            "txt": str(work.report(level, split, "txt")),
        },
        "prediction_file": str(prediction_file),
        "warnings": warnings,
    }
