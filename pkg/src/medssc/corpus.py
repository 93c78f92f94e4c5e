"""Dataset parsing and the typed corpus model.

Turns benchmark release files into a uniform structure: a corpus is an
ordered list of abstracts, each abstract an ordered list of labeled
sentences with word/char tokens and three positional statistics
(sentences in abstract, index in abstract, word count). Everything here
is pure and deterministic so parsing can run concurrently per file.
"""

from __future__ import annotations

import json
import re
from collections.abc import Iterable, Iterator
from dataclasses import dataclass, replace


class CorpusError(ValueError):
    """Raised for malformed input files or invalid corpus structure."""


class ParseError(CorpusError):
    """A parse failure tied to a specific line of an input file."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass(frozen=True)
class LabelSet:
    """Fixed, ordered set of sentence labels. Index = declaration order."""

    names: tuple[str, ...]
    aliases: dict[str, str] | None = None

    def __len__(self) -> int:
        return len(self.names)

    def __contains__(self, name: str) -> bool:
        return name in self.names

    def index(self, name: str) -> int:
        return self.names.index(name)

    def canonical(self, raw: str) -> str:
        """Map a raw file label to its canonical name.

        Accepts the canonical names themselves plus dataset-specific
        aliases (plural forms, underscore/hyphen variants). Raises
        KeyError for anything else.
        """
        name = raw.strip().upper()
        if name in self.names:
            return name
        if self.aliases and name in self.aliases:
            return self.aliases[name]
        normalized = re.sub(r"[-_]+", " ", name)
        if normalized in self.names:
            return normalized
        raise KeyError(raw)


# Canonical label sets. PubMed release files use plural headings for three
# classes; those are accepted as aliases of the canonical singular names.
PUBMED_LABELS = LabelSet(
    names=("BACKGROUND", "OBJECTIVE", "METHOD", "RESULT", "CONCLUSION"),
    aliases={"METHODS": "METHOD", "RESULTS": "RESULT", "CONCLUSIONS": "CONCLUSION"},
)

NICTA_LABELS = LabelSet(
    names=("BACKGROUND", "INTERVENTION", "OUTCOME", "POPULATION", "STUDY DESIGN", "OTHER"),
)


@dataclass(frozen=True)
class SentenceStats:
    """Positional statistics of a sentence within its abstract."""

    t1: int  # number of sentences in the abstract
    t2: int  # zero-based index of the sentence
    t3: int  # number of word tokens (pre-truncation)


@dataclass(frozen=True)
class Sentence:
    text: str
    label: str
    words: tuple[str, ...]
    chars: tuple[str, ...]
    stats: SentenceStats | None = None


@dataclass(frozen=True)
class Abstract:
    id: str
    sentences: tuple[Sentence, ...]

    def __len__(self) -> int:
        return len(self.sentences)


@dataclass(frozen=True)
class Corpus:
    split: str
    abstracts: tuple[Abstract, ...]
    labels: LabelSet

    @property
    def sentence_count(self) -> int:
        return sum(len(a) for a in self.abstracts)

    def iter_sentences(self) -> Iterator[tuple[Abstract, int, Sentence]]:
        for abstract in self.abstracts:
            for i, sentence in enumerate(abstract.sentences):
                yield abstract, i, sentence


_WORD_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """Split a sentence into lowercased word tokens and raw characters.

    Words are lowercased and split on whitespace and punctuation
    boundaries, with punctuation kept as its own token. The character
    sequence is the sentence verbatim, spaces included.
    """
    if not text.strip():
        raise CorpusError("cannot tokenize empty or all-whitespace text")
    words = tuple(_WORD_RE.findall(text.lower()))
    chars = tuple(text)
    return words, chars


def compute_stats(abstract: Abstract) -> Abstract:
    """Return the abstract with per-sentence statistics populated."""
    total = len(abstract.sentences)
    sentences = tuple(
        replace(s, stats=SentenceStats(t1=total, t2=i, t3=len(s.words)))
        for i, s in enumerate(abstract.sentences)
    )
    return replace(abstract, sentences=sentences)


def _make_abstract(abstract_id: str, labeled: list[tuple[str, str]]) -> Abstract:
    sentences = []
    for label, text in labeled:
        words, chars = tokenize(text)
        sentences.append(Sentence(text=text, label=label, words=words, chars=chars))
    return compute_stats(Abstract(id=abstract_id, sentences=tuple(sentences)))


def parse_pubmed_rct(
    lines: Iterable[str],
    split: str = "train",
    labels: LabelSet = PUBMED_LABELS,
) -> Corpus:
    """Parse the PubMed RCT plain-text release format.

    An abstract starts with a ``###<id>`` header, followed by one
    ``LABEL<TAB>sentence`` line per sentence, terminated by a blank line
    or the next header. Sentence order is file order.
    """
    abstracts: list[Abstract] = []
    current_id: str | None = None
    current: list[tuple[str, str]] = []
    header_line = 0

    def flush():
        nonlocal current_id, current
        if current_id is None:
            return
        if not current:
            raise ParseError(header_line, f"abstract {current_id!r} has no sentences")
        abstracts.append(_make_abstract(current_id, current))
        current_id, current = None, []

    line_no = 0
    for line_no, raw in enumerate(lines, start=1):
        line = raw.rstrip("\n")
        if line.startswith("###"):
            flush()
            current_id = line[3:].strip()
            header_line = line_no
            if not current_id:
                raise ParseError(line_no, "abstract header with empty id")
            continue
        if not line.strip():
            flush()
            continue
        if current_id is None:
            raise ParseError(line_no, "sentence line before any ### abstract header")
        if "\t" not in line:
            raise ParseError(line_no, "expected LABEL<TAB>text, no TAB found")
        raw_label, text = line.split("\t", 1)
        try:
            label = labels.canonical(raw_label)
        except KeyError:
            raise ParseError(line_no, f"unknown label {raw_label!r}") from None
        if not text.strip():
            raise ParseError(line_no, "sentence with empty text")
        current.append((label, text.strip()))
    flush()
    return Corpus(split=split, abstracts=tuple(abstracts), labels=labels)


def _resolve_column(fieldnames: list[str], candidates: tuple[str, ...]) -> str:
    lowered = {name.strip().lower(): name for name in fieldnames}
    for cand in candidates:
        if cand in lowered:
            return lowered[cand]
    raise CorpusError(
        f"CSV is missing a required column; expected one of {candidates}, got {fieldnames}"
    )


def parse_nicta(
    lines: Iterable[str],
    split: str = "train",
    labels: LabelSet = NICTA_LABELS,
) -> Corpus:
    """Parse a NICTA-PIBOSO release CSV into the shared corpus type.

    Expects a header row with an abstract-id column, a label column and a
    text column (several common spellings accepted). Multi-label cells
    use ``|`` separators and are reduced to the single label that comes
    first in the canonical label order. An optional sentence-index column
    orders sentences within an abstract; file order is used otherwise.
    """
    import csv

    reader = csv.DictReader(lines)
    if reader.fieldnames is None:
        return Corpus(split=split, abstracts=(), labels=labels)
    id_col = _resolve_column(reader.fieldnames, ("abstract_id", "doc_id", "docid", "id"))
    label_col = _resolve_column(reader.fieldnames, ("labels", "label", "prediction"))
    text_col = _resolve_column(reader.fieldnames, ("text", "sentence"))
    index_col = None
    for cand in ("sentence_index", "sentence_id", "sent_id"):
        try:
            index_col = _resolve_column(reader.fieldnames, (cand,))
            break
        except CorpusError:
            continue

    grouped: dict[str, list[tuple[int, str, str]]] = {}
    order: list[str] = []
    for row_no, row in enumerate(reader, start=2):
        abstract_id = (row[id_col] or "").strip()
        if not abstract_id:
            raise ParseError(row_no, "row with empty abstract id")
        raw_labels = (row[label_col] or "").strip()
        if not raw_labels:
            raise ParseError(row_no, "row with empty label cell")
        try:
            cands = [labels.canonical(part) for part in raw_labels.split("|") if part.strip()]
        except KeyError as exc:
            raise ParseError(row_no, f"unknown label {exc.args[0]!r}") from None
        label = min(cands, key=labels.index)
        text = (row[text_col] or "").strip()
        if not text:
            raise ParseError(row_no, "row with empty sentence text")
        if index_col is not None:
            try:
                position = int(row[index_col])
            except (TypeError, ValueError):
                raise ParseError(row_no, f"non-integer sentence index {row[index_col]!r}") from None
        else:
            position = row_no
        if abstract_id not in grouped:
            grouped[abstract_id] = []
            order.append(abstract_id)
        grouped[abstract_id].append((position, label, text))

    abstracts = []
    for abstract_id in order:
        rows = sorted(grouped[abstract_id], key=lambda item: item[0])
        abstracts.append(_make_abstract(abstract_id, [(lab, txt) for _, lab, txt in rows]))
    return Corpus(split=split, abstracts=tuple(abstracts), labels=labels)


def to_pubmed_text(corpus: Corpus) -> str:
    """Serialize a corpus back to the ``###id`` + ``LABEL<TAB>text`` grammar."""
    blocks = []
    for abstract in corpus.abstracts:
        lines = [f"###{abstract.id}"]
        lines.extend(f"{s.label}\t{s.text}" for s in abstract.sentences)
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + ("\n" if blocks else "")


def write_corpus_jsonl(corpus: Corpus, path, header_extra: dict | None = None) -> None:
    """Write the normalized one-record-per-abstract JSON-lines file."""
    header = {
        "format": "medssc-corpus",
        "version": 1,
        "split": corpus.split,
        "labels": list(corpus.labels.names),
    }
    if header_extra:
        header.update(header_extra)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for abstract in corpus.abstracts:
            record = {
                "id": abstract.id,
                "sentences": [{"label": s.label, "text": s.text} for s in abstract.sentences],
            }
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def read_corpus_jsonl(path) -> tuple[Corpus, dict]:
    """Read a normalized corpus file; returns (corpus, header)."""
    with open(path, encoding="utf-8") as fh:
        header_line = fh.readline()
        if not header_line:
            raise CorpusError(f"{path}: empty corpus file")
        header = json.loads(header_line)
        if header.get("format") != "medssc-corpus":
            raise CorpusError(f"{path}: not a corpus file (format={header.get('format')!r})")
        names = tuple(header["labels"])
        labels = PUBMED_LABELS if names == PUBMED_LABELS.names else (
            NICTA_LABELS if names == NICTA_LABELS.names else LabelSet(names)
        )
        abstracts = []
        for line in fh:
            if not line.strip():
                continue
            record = json.loads(line)
            labeled = [(s["label"], s["text"]) for s in record["sentences"]]
            abstracts.append(_make_abstract(record["id"], labeled))
    corpus = Corpus(split=header.get("split", "train"), abstracts=tuple(abstracts), labels=labels)
    for _, _, sentence in corpus.iter_sentences():
        if sentence.label not in labels:
            raise CorpusError(f"label {sentence.label!r} outside declared label set")
    return corpus, header
