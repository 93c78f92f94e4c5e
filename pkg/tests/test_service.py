"""Service endpoint and CLI client behavior: schema validation, dependency
errors with actionable messages, config-hash guards, and exit codes."""

import json

import pytest
from click.testing import CliRunner
from fastapi.testclient import TestClient

from medssc.cli import main
from medssc.service.app import create_app

SMALL_OVERRIDES = {
    "features.word_dim": 8,
    "features.char_dim": 6,
    "features.pretrained_dim": 8,
    "features.max_words": 12,
    "features.max_chars": 60,
    "features.stat_caps": [8, 8, 16],
    "sen.hidden": 8,
    "abs.rnn_hidden": 6,
    "seg.hidden_widths": [16, 12, 8, 8],
}

SMALL_FLAGS = [
    flag
    for key, value in SMALL_OVERRIDES.items()
    for flag in ("--set", f"{key}={json.dumps(value)}")
]


@pytest.fixture(scope="module")
def client():
    return TestClient(create_app())


class TestEndpoints:
    def test_health(self, client):
        response = client.get("/health")
        assert response.status_code == 200
        body = response.json()
        assert body["status"] == "ok"
        assert body["version"]

    def test_unknown_dataset_schema_error(self, client, tmp_path):
        response = client.post(
            "/prepare",
            json={"dataset": "nope", "work_dir": str(tmp_path), "data_dir": str(tmp_path)},
        )
        assert response.status_code == 422

    def test_unknown_override_key_is_config_error(self, client, tmp_path):
        response = client.post(
            "/prepare",
            json={
                "dataset": "pubmed20k",
                "work_dir": str(tmp_path / "w"),
                "data_dir": str(tmp_path),
                "overrides": {"sen.bogus": 1},
            },
        )
        assert response.status_code == 400
        assert "bogus" in response.json()["detail"]

    def test_missing_train_file(self, client, tmp_path):
        response = client.post(
            "/prepare",
            json={
                "dataset": "pubmed20k",
                "work_dir": str(tmp_path / "w"),
                "data_dir": str(tmp_path / "empty"),
            },
        )
        assert response.status_code == 409
        assert "train" in response.json()["detail"]

    def test_stage_dependency_error_names_producer(self, client, tmp_path):
        response = client.post(
            "/train/abs", json={"dataset": "pubmed20k", "work_dir": str(tmp_path / "w")}
        )
        assert response.status_code == 409
        assert "medssc prepare" in response.json()["detail"]

    def test_prepare_and_export_flow(self, client, fixture_data_dir, tmp_path):
        work = str(tmp_path / "work")
        payload = {
            "dataset": "pubmed20k",
            "work_dir": work,
            "data_dir": str(fixture_data_dir),
            "seed": 3,
            "overrides": SMALL_OVERRIDES,
        }
        response = client.post("/prepare", json=payload)
        assert response.status_code == 200, response.text
        body = response.json()
        assert body["splits"]["train"]["abstracts"] == 10
        assert body["splits"]["validation"]["abstracts"] == 4
        assert body["word_vocab_size"] > 2

        response = client.post("/export-sentence-vectors", json=payload)
        assert response.status_code == 200, response.text
        export = response.json()
        assert export["dim"] == SMALL_OVERRIDES["features.pretrained_dim"]
        assert export["encoder_id"].startswith("hash-")
        assert export["sentences"] > 0

        # training before extraction must point at the extract command
        response = client.post("/train/seg", json=payload)
        assert response.status_code == 409
        assert "extract-embeddings" in response.json()["detail"]

    def test_config_hash_guard(self, client, fixture_data_dir, tmp_path):
        work = str(tmp_path / "work")
        base = {
            "dataset": "pubmed20k",
            "work_dir": work,
            "data_dir": str(fixture_data_dir),
            "seed": 3,
            "overrides": SMALL_OVERRIDES,
        }
        assert client.post("/prepare", json=base).status_code == 200
        mismatched = dict(base, seed=4)
        response = client.post("/export-sentence-vectors", json=mismatched)
        assert response.status_code == 409
        assert "--force" in response.json()["detail"]
        forced = dict(mismatched, force=True)
        response = client.post("/export-sentence-vectors", json=forced)
        assert response.status_code == 200
        assert response.json()["warnings"]


class TestCli:
    def test_help(self):
        result = CliRunner().invoke(main, ["--help"])
        assert result.exit_code == 0
        for verb in (
            "prepare", "export-sentence-vectors", "train-sen", "extract-embeddings",
            "train-abs", "train-seg", "evaluate", "predict", "serve",
        ):
            assert verb in result.output

    def test_missing_upstream_nonzero_exit(self, tmp_path):
        result = CliRunner().invoke(
            main, ["train-abs", "--work-dir", str(tmp_path / "w")]
        )
        assert result.exit_code != 0
        assert "medssc prepare" in result.output

    def test_bad_override_syntax(self, tmp_path):
        result = CliRunner().invoke(
            main, ["prepare", "--work-dir", str(tmp_path), "--data-dir", str(tmp_path),
                   "--set", "not-a-pair"],
        )
        assert result.exit_code != 0
        assert "KEY=VALUE" in result.output

    def test_prepare_json_output(self, fixture_data_dir, tmp_path):
        result = CliRunner().invoke(
            main,
            ["prepare", "--work-dir", str(tmp_path / "w"), "--data-dir",
             str(fixture_data_dir), "--seed", "3", "--json"] + SMALL_FLAGS,
        )
        assert result.exit_code == 0, result.output
        body = json.loads(result.output)
        assert body["splits"]["test"]["abstracts"] == 4
        stored = json.loads((tmp_path / "w" / "config.json").read_text())
        assert stored["config"]["features"]["max_words"] == 12
        assert stored["config_hash"] == body["config_hash"]
