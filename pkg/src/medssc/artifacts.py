"""Artifact persistence: versioned checkpoints and JSON-lines files.

Every artifact is self-describing (format name, version, config hash) and
written deterministically, so re-running a stage with the same config and
seed reproduces files byte for byte.
"""

from __future__ import annotations

import json
import os

import numpy as np


class ArtifactError(RuntimeError):
    """Raised for missing, malformed or mismatched artifact files."""


CHECKPOINT_VERSION = 1
_META_KEY = "__meta__"


def save_checkpoint(path, state: dict, meta: dict) -> None:
    """Persist parameter arrays plus a JSON metadata blob into one .npz."""
    arrays = {}
    for key, value in state.items():
        if key == _META_KEY:
            raise ArtifactError(f"parameter name {key!r} is reserved")
        arrays[key] = np.asarray(value)
    meta = {"checkpoint_version": CHECKPOINT_VERSION, **meta}
    payload = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **{_META_KEY: payload}, **arrays)


def load_checkpoint(path) -> tuple[dict, dict]:
    """Load a checkpoint; returns ({name: array}, meta)."""
    if not os.path.exists(path):
        raise ArtifactError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        if _META_KEY not in data:
            raise ArtifactError(f"{path}: not a medssc checkpoint (missing metadata)")
        meta = json.loads(str(data[_META_KEY]))
        state = {k: data[k] for k in data.files if k != _META_KEY}
    return state, meta


def write_jsonl(path, header: dict, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for record in records:
            fh.write(json.dumps(record) + "\n")


def read_jsonl(path, expected_format: str | None = None) -> tuple[dict, list[dict]]:
    if not os.path.exists(path):
        raise ArtifactError(f"artifact not found: {path}")
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        if not first:
            raise ArtifactError(f"{path}: empty artifact file")
        header = json.loads(first)
        if expected_format and header.get("format") != expected_format:
            raise ArtifactError(
                f"{path}: expected format {expected_format!r}, got {header.get('format')!r}"
            )
        records = [json.loads(line) for line in fh if line.strip()]
    return header, records


def write_embeddings(path, header_extra: dict, rows) -> None:
    """Write per-sentence embedding records {abstract_id, sentence_index, vector}."""
    header = {"format": "medssc-embeddings", "version": 1, **header_extra}
    write_jsonl(
        path,
        header,
        (
            {
                "abstract_id": abstract_id,
                "sentence_index": int(index),
                "vector": [float(x) for x in vector],
            }
            for abstract_id, index, vector in rows
        ),
    )


def read_embeddings(path) -> tuple[dict, dict[tuple[str, int], np.ndarray]]:
    header, records = read_jsonl(path, expected_format="medssc-embeddings")
    table = {}
    for record in records:
        key = (record["abstract_id"], int(record["sentence_index"]))
        table[key] = np.asarray(record["vector"], dtype=np.float32)
    return header, table


def write_predictions(path, header_extra: dict, rows) -> None:
    """Write per-sentence score records {abstract_id, sentence_index, scores, label}."""
    header = {"format": "medssc-predictions", "version": 1, **header_extra}
    write_jsonl(
        path,
        header,
        (
            {
                "abstract_id": abstract_id,
                "sentence_index": int(index),
                "scores": [float(x) for x in scores],
                "label": label,
            }
            for abstract_id, index, scores, label in rows
        ),
    )


def check_config_hash(header: dict, expected: str, path, force: bool = False) -> str | None:
    """Compare an artifact's embedded config hash against the current one.

    Returns a warning string when forced past a mismatch; raises otherwise.
    """
    found = header.get("config_hash")
    if found == expected:
        return None
    message = (
        f"{path}: artifact was produced under config {found!r} but the current "
        f"config hash is {expected!r}"
    )
    if force:
        return f"warning: {message} (continuing because of --force)"
    raise ArtifactError(message + "; re-run the producing stage or pass --force")
