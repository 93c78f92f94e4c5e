"""Shared fixtures: a deterministic synthetic corpus in the PubMed release
format, scaled-down feature/model configs, and an acceptance-result
printer.
"""

from __future__ import annotations

import numpy as np
import pytest


def pytest_runtest_logreport(report):
    """One PASS/FAIL line per acceptance criterion."""
    if report.when != "call" or "test_acceptance" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    print(f"\n[acceptance] {name}: {'PASS' if report.passed else 'FAIL'}")

from medssc.config import FeatureConfig
from medssc.corpus import PUBMED_LABELS, parse_pubmed_rct

# label-specific word pools so tiny models have signal to learn
_POOLS = {
    "BACKGROUND": ["disease", "prevalence", "burden", "known", "evidence", "prior"],
    "OBJECTIVE": ["aim", "objective", "investigate", "assess", "evaluate", "whether"],
    "METHOD": ["randomized", "patients", "assigned", "measured", "protocol", "cohort"],
    "RESULT": ["significant", "increase", "observed", "ratio", "ci", "p"],
    "CONCLUSION": ["conclude", "suggests", "effective", "should", "clinical", "therefore"],
}
_FILLER = ["the", "of", "in", "we", "with", "was", "and", "to", "a", "for"]

_LABEL_FLOW = ["BACKGROUND", "OBJECTIVE", "METHOD", "RESULT", "CONCLUSION"]


def synthetic_sentence(rng: np.random.Generator, label: str) -> str:
    length = int(rng.integers(4, 12))
    pool = _POOLS[label]
    words = [
        pool[int(rng.integers(len(pool)))] if rng.random() < 0.5 else _FILLER[int(rng.integers(len(_FILLER)))]
        for _ in range(length)
    ]
    words[0] = words[0].capitalize()
    return " ".join(words) + "."


def synthetic_pubmed_text(n_abstracts: int, seed: int = 0, start_id: int = 1000) -> str:
    """Deterministic corpus text in the ###id + LABEL<TAB>text grammar."""
    rng = np.random.default_rng(seed)
    blocks = []
    for i in range(n_abstracts):
        lines = [f"###{start_id + i}"]
        for label in _LABEL_FLOW:
            for _ in range(int(rng.integers(1, 4))):
                lines.append(f"{label}\t{synthetic_sentence(rng, label)}")
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


@pytest.fixture(scope="session")
def tiny_corpus():
    text = synthetic_pubmed_text(10, seed=7)
    return parse_pubmed_rct(text.splitlines(), split="train", labels=PUBMED_LABELS)


@pytest.fixture(scope="session")
def small_features():
    return FeatureConfig(
        word_dim=16,
        char_dim=8,
        pretrained_dim=12,
        max_words=16,
        max_chars=90,
        stat_caps=(12, 12, 20),
    )


@pytest.fixture(scope="session")
def fixture_data_dir(tmp_path_factory):
    """A 10/4/4 abstract train/dev/test dataset on disk."""
    root = tmp_path_factory.mktemp("dataset")
    (root / "train.txt").write_text(synthetic_pubmed_text(10, seed=7, start_id=1000))
    (root / "dev.txt").write_text(synthetic_pubmed_text(4, seed=8, start_id=2000))
    (root / "test.txt").write_text(synthetic_pubmed_text(4, seed=9, start_id=3000))
    return root


_NICTA_LABELS = ["BACKGROUND", "INTERVENTION", "OUTCOME", "POPULATION", "STUDY DESIGN", "OTHER"]
_NICTA_WORDS = ["patients", "trial", "received", "placebo", "improved", "weeks", "group", "risk"]


def synthetic_nicta_csv(n_abstracts: int, seed: int = 0, start_id: int = 100) -> str:
    rng = np.random.default_rng(seed)
    rows = ["abstract_id,sentence_index,labels,text"]
    for i in range(n_abstracts):
        abstract_id = f"n{start_id + i}"
        for index in range(int(rng.integers(3, 8))):
            label = _NICTA_LABELS[int(rng.integers(len(_NICTA_LABELS)))]
            words = " ".join(
                _NICTA_WORDS[int(rng.integers(len(_NICTA_WORDS)))]
                for _ in range(int(rng.integers(4, 9)))
            )
            rows.append(f"{abstract_id},{index},{label},{words.capitalize()}.")
    return "\n".join(rows) + "\n"


@pytest.fixture(scope="session")
def nicta_data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("nicta")
    (root / "train.csv").write_text(synthetic_nicta_csv(8, seed=31, start_id=100))
    (root / "dev.csv").write_text(synthetic_nicta_csv(3, seed=32, start_id=200))
    (root / "test.csv").write_text(synthetic_nicta_csv(3, seed=33, start_id=300))
    return root


@pytest.fixture(scope="session")
def featurized_fixture(tiny_corpus, small_features):
    """Featurized train/validation splits with hash-encoded sentence vectors."""
    from medssc.features import HashEncoder, build_vocab, encode_pretrained_sentences
    from medssc.sentence_model import featurize_corpus

    val_corpus = parse_pubmed_rct(
        synthetic_pubmed_text(4, seed=8, start_id=2000).splitlines(),
        split="validation",
        labels=PUBMED_LABELS,
    )
    word_vocab = build_vocab(tiny_corpus, "word")
    char_vocab = build_vocab(tiny_corpus, "char")
    encoder = HashEncoder(dim=small_features.pretrained_dim)
    train = featurize_corpus(
        tiny_corpus, word_vocab, char_vocab, small_features,
        sentence_vectors=encode_pretrained_sentences(tiny_corpus, encoder),
    )
    val = featurize_corpus(
        val_corpus, word_vocab, char_vocab, small_features,
        sentence_vectors=encode_pretrained_sentences(val_corpus, encoder),
    )
    return {
        "train_corpus": tiny_corpus,
        "val_corpus": val_corpus,
        "train": train,
        "val": val,
        "word_vocab": word_vocab,
        "char_vocab": char_vocab,
    }
