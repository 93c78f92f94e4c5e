"""Cross-stage pipeline behavior beyond the acceptance fixture: the NICTA
path (GRU decoder, six labels, OTHER-excluded aggregate), large-file
ingestion, and branch-ablation artifact flows."""

import json

import numpy as np
import pytest
from click.testing import CliRunner

from medssc.artifacts import load_checkpoint
from medssc.cli import main
from medssc.config import build_config
from medssc.pipeline import WorkLayout, prepare
from conftest import synthetic_pubmed_text

SMALL = [
    "--set", "features.word_dim=12",
    "--set", "features.char_dim=6",
    "--set", "features.pretrained_dim=8",
    "--set", "features.max_words=12",
    "--set", "features.max_chars=70",
    "--set", "features.stat_caps=[10,10,16]",
    "--set", "sen.hidden=12",
    "--set", "seg.hidden_widths=[16,12,8,8]",
]


def _invoke(runner, args):
    result = runner.invoke(main, args)
    assert result.exit_code == 0, f"{args[0]} failed:\n{result.output}"
    return result


@pytest.fixture(scope="module")
def nicta_work(nicta_data_dir, tmp_path_factory):
    work = tmp_path_factory.mktemp("nicta_work")
    runner = CliRunner()
    base = ["--dataset", "nicta", "--work-dir", str(work), "--seed", "2"] + SMALL
    _invoke(runner, ["prepare"] + base + ["--data-dir", str(nicta_data_dir)])
    _invoke(runner, ["export-sentence-vectors"] + base)
    _invoke(runner, ["train-sen"] + base + ["--epochs", "1"])
    _invoke(runner, ["extract-embeddings"] + base)
    _invoke(runner, ["train-abs"] + base + ["--epochs", "1"])
    _invoke(runner, ["train-seg"] + base + ["--epochs", "1"])
    _invoke(runner, ["evaluate"] + base + ["--level", "combine", "--split", "test"])
    return work


class TestNictaPath:
    def test_abs_model_uses_gru_preset(self, nicta_work):
        _, meta = load_checkpoint(WorkLayout(nicta_work).checkpoint("abs"))
        assert meta["model"]["config"]["rnn_cell"] == "gru"
        assert meta["model"]["config"]["rnn_hidden"] == 36
        assert meta["model"]["n_labels"] == 6

    def test_embeddings_are_six_wide(self, nicta_work):
        header = json.loads(
            (nicta_work / "embeddings" / "test.jsonl").read_text().splitlines()[0]
        )
        assert header["dim"] == 6
        assert len(header["labels"]) == 6

    def test_report_has_other_excluded_variant(self, nicta_work):
        payload = json.loads((nicta_work / "reports" / "combine_test.json").read_text())
        report = payload["report"]
        assert report["excluded"] == ["OTHER"]
        assert set(report["weighted_excluding"]) == {"precision", "recall", "f1"}
        assert len(report["confusion"]) == 6


class TestLargeIngest:
    def test_pubmed200k_preset_parses_bulk_file(self, tmp_path):
        # same grammar at larger volume; parse must stream through cleanly
        data = tmp_path / "data"
        data.mkdir()
        (data / "train.txt").write_text(synthetic_pubmed_text(600, seed=17))
        config = build_config(
            dataset="pubmed200k",
            work_dir=str(tmp_path / "work"),
            overrides={"data_dir": str(data)},
        )
        summary = prepare(config)
        assert summary["splits"]["train"]["abstracts"] == 600
        assert summary["splits"]["train"]["sentences"] > 3000


class TestPredictLevels:
    @pytest.mark.parametrize("level", ["sen", "abs", "seg", "combine"])
    def test_prediction_files_per_level(self, nicta_work, level):
        runner = CliRunner()
        base = ["--dataset", "nicta", "--work-dir", str(nicta_work), "--seed", "2"] + SMALL
        _invoke(runner, ["predict"] + base + ["--level", level, "--split", "test"])
        path = nicta_work / "predictions" / f"{level}_test.jsonl"
        lines = path.read_text().splitlines()
        header = json.loads(lines[0])
        assert header["level"] == level
        record = json.loads(lines[1])
        assert len(record["scores"]) == 6
        assert record["label"] in header["labels"]


class TestConfigFile:
    def test_yaml_config_layered_under_flags(self, fixture_data_dir, tmp_path):
        config_file = tmp_path / "run.yaml"
        config_file.write_text(
            "seed: 9\n"
            "features:\n  max_words: 11\n  word_dim: 12\n  char_dim: 6\n"
            "  pretrained_dim: 8\n  max_chars: 70\n  stat_caps: [10, 10, 16]\n"
            "sen:\n  hidden: 12\n  branches: [word]\n"
        )
        runner = CliRunner()
        work = tmp_path / "work"
        _invoke(runner, [
            "prepare", "--work-dir", str(work), "--data-dir", str(fixture_data_dir),
            "--config", str(config_file), "--set", "features.max_words=13",
        ])
        stored = json.loads((work / "config.json").read_text())
        assert stored["config"]["seed"] == 9  # from the file
        assert stored["config"]["features"]["max_words"] == 13  # flag wins
        assert stored["config"]["sen"]["branches"] == ["word"]


class TestDefaultDimensions:
    def test_full_width_model_trains_one_step(self, tiny_corpus, small_features):
        # the benchmark-default dims (hidden 128, word 300, char 50, caps
        # 35/35/100, pretrained 768) must wire up and take a gradient step
        import torch

        from medssc.config import FeatureConfig, SenModelConfig
        from medssc.features import HashEncoder, build_vocab, encode_pretrained_sentences
        from medssc.sentence_model import cce_loss, collate, featurize_corpus, sen_forward, SentenceClassifier
        from medssc.training import set_seed

        features = FeatureConfig()  # defaults
        word_vocab = build_vocab(tiny_corpus, "word")
        char_vocab = build_vocab(tiny_corpus, "char")
        vectors = encode_pretrained_sentences(tiny_corpus, HashEncoder(dim=768))
        data = featurize_corpus(tiny_corpus, word_vocab, char_vocab, features, vectors)
        set_seed(0)
        model = SentenceClassifier(
            n_labels=5, config=SenModelConfig(), features=features,
            word_vocab_size=word_vocab.size, char_vocab_size=char_vocab.size,
        )
        optimizer = torch.optim.Adam(model.parameters(), lr=1e-3)
        batch = collate(data, np.arange(8))
        probs = sen_forward(model, batch)
        assert probs.shape == (8, 5)
        loss = cce_loss(torch.as_tensor(data.label_onehot[:8]), probs)
        loss.backward()
        optimizer.step()
        assert float(loss.detach()) > 0


class TestLabelWidthGuard:
    def test_checkpoint_label_mismatch_rejected(self, fixture_data_dir, tmp_path):
        # a 5-label checkpoint must not silently serve a 6-label dataset
        runner = CliRunner()
        work = tmp_path / "work"
        base = ["--dataset", "pubmed20k", "--work-dir", str(work), "--seed", "4",
                "--set", 'sen.branches=["word"]'] + SMALL
        _invoke(runner, ["prepare"] + base + ["--data-dir", str(fixture_data_dir)])
        _invoke(runner, ["train-sen"] + base + ["--epochs", "0"])
        result = runner.invoke(
            main,
            ["extract-embeddings", "--dataset", "nicta", "--work-dir", str(work),
             "--seed", "4", "--set", 'sen.branches=["word"]', "--force"] + SMALL,
        )
        assert result.exit_code != 0
        assert "labels" in result.output


class TestBranchAblationFlow:
    def test_word_only_training_skips_sentence_cache(self, fixture_data_dir, tmp_path):
        runner = CliRunner()
        work = tmp_path / "work"
        base = [
            "--dataset", "pubmed20k", "--work-dir", str(work), "--seed", "4",
            "--set", 'sen.branches=["word"]',
        ] + SMALL
        _invoke(runner, ["prepare"] + base + ["--data-dir", str(fixture_data_dir)])
        # no export-sentence-vectors on purpose: the word-only model must not need it
        _invoke(runner, ["train-sen"] + base + ["--epochs", "1"])
        _invoke(runner, ["extract-embeddings"] + base)
        assert (work / "embeddings" / "test.jsonl").exists()
        _, meta = load_checkpoint(WorkLayout(work).checkpoint("sen"))
        assert meta["model"]["config"]["branches"] == ["word"]

    def test_extraction_reads_branches_from_checkpoint(self, fixture_data_dir, tmp_path):
        # train word-only via the request flag, then extract WITHOUT repeating
        # the override: the checkpoint's own branch set governs featurization
        runner = CliRunner()
        work = tmp_path / "work"
        base = ["--dataset", "pubmed20k", "--work-dir", str(work), "--seed", "4"] + SMALL
        _invoke(runner, ["prepare"] + base + ["--data-dir", str(fixture_data_dir)])
        _invoke(runner, ["train-sen"] + base + ["--epochs", "1", "--branches", "word,stat"])
        _invoke(runner, ["extract-embeddings"] + base)
        assert (work / "embeddings" / "train.jsonl").exists()
