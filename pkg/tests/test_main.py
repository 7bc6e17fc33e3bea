import json
import os

import pytest
from click.testing import CliRunner

from data_utils import load_corpus_archive
from main import cli

FAST_RUN = ["--max-epochs", "1", "--hidden", "2"]


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def synth_dir(runner, tmp_path):
    out = tmp_path / "synth"
    result = runner.invoke(cli, ["--quiet", "synth", "--m", "30", "--min-len", "2", "--max-len", "6",
                                 "--k-folds", "3", "--effect", "3.0", "--seed", "4", "--out", str(out)])
    assert result.exit_code == 0, result.output
    return out


def _read(path):
    with open(path, "rb") as f:
        return f.read()


def test_synth_writes_inputs_and_manifest(synth_dir):
    for name in ("signals.tsv", "annotations.jsonl", "dataset.jsonl", "plant_spec.json", "manifest.json"):
        assert (synth_dir / name).exists(), name
    manifest = json.loads((synth_dir / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["seed"] == 4
    assert "dataset" in manifest["fingerprints"]


def test_ingest_creates_loadable_archive(runner, synth_dir, tmp_path):
    out = tmp_path / "ingested"
    result = runner.invoke(cli, ["--quiet", "ingest", "--signals", str(synth_dir / "signals.tsv"),
                                 "--annotations", str(synth_dir / "annotations.jsonl"), "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert len(load_corpus_archive(str(out / "corpus.json"))) == 30
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    assert set(manifest["input_digests"]) == {"annotations", "signals"}


def test_run_then_report_is_byte_identical(runner, synth_dir, tmp_path):
    out = tmp_path / "runs"
    result = runner.invoke(cli, ["--quiet", "run", "--corpus", str(synth_dir), "--dataset",
                                 str(synth_dir / "dataset.jsonl"), "--signals", "eye", "--seed", "1",
                                 "--out", str(out), "--masking", *FAST_RUN])
    assert result.exit_code == 0, result.output
    run_dir = out / "Planted_eye_seed1"
    csvs = ["fold_metrics.csv", "class_metrics.csv", "attention.csv", "attention_stages.csv", "mask_curve.csv",
            "mask_series.csv"]
    before = {name: _read(run_dir / name) for name in csvs}
    assert sorted(os.listdir(run_dir / "checkpoints")) == ["fold0.json", "fold1.json", "fold2.json"]
    payload = json.loads((run_dir / "results.json").read_text(encoding="utf-8"))
    assert len(payload["folds"]) == 3
    assert len(payload["mask"]["features"]) == 17

    result = runner.invoke(cli, ["--quiet", "report", str(run_dir)])
    assert result.exit_code == 0, result.output
    for name in csvs:
        assert _read(run_dir / name) == before[name], name
    assert (run_dir / "attention_grid_eye.csv").exists()


def test_run_from_archive_with_task(runner, synth_dir, tmp_path):
    archive_dir = tmp_path / "ingested"
    runner.invoke(cli, ["--quiet", "ingest", "--signals", str(synth_dir / "signals.tsv"),
                        "--annotations", str(synth_dir / "annotations.jsonl"), "--out", str(archive_dir)])
    out = tmp_path / "runs"
    result = runner.invoke(cli, ["--quiet", "run", "--corpus", str(archive_dir / "corpus.json"), "--task", "SenLen",
                                 "--signals", "eeg", "--seed", "2", "--k-folds", "3", "--no-masking",
                                 "--no-encoder", "--out", str(out), *FAST_RUN])
    assert result.exit_code == 0, result.output
    run_dir = out / "SenLen_eeg_seed2"
    assert (run_dir / "results.json").exists()
    assert not (run_dir / "mask_curve.csv").exists()
    manifest = json.loads((run_dir / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["config"]["task"] == "SenLen"
    assert sorted(k for k in manifest["fingerprints"] if k.endswith("_normalization")) == [
        "fold0_normalization", "fold1_normalization", "fold2_normalization"]


def test_signal_type_mismatch_exits_with_input_error(runner, synth_dir, tmp_path):
    result = runner.invoke(cli, ["--quiet", "run", "--corpus", str(synth_dir), "--dataset",
                                 str(synth_dir / "dataset.jsonl"), "--signals", "eeg", "--seed", "1",
                                 "--out", str(tmp_path / "runs"), *FAST_RUN])
    assert result.exit_code == 2
    assert "输入错误" in result.output


def test_featsel_unknown_method_exits_with_input_error(runner, synth_dir, tmp_path):
    result = runner.invoke(cli, ["--quiet", "featsel", "--corpus", str(synth_dir), "--dataset",
                                 str(synth_dir / "dataset.jsonl"), "--signals", "eye", "--seed", "1",
                                 "--out", str(tmp_path / "runs"), "--methods", "mi,lasso"])
    assert result.exit_code == 2
    assert "lasso" in result.output


def test_featsel_attention_requires_prior_run(runner, synth_dir, tmp_path):
    result = runner.invoke(cli, ["--quiet", "featsel", "--corpus", str(synth_dir), "--dataset",
                                 str(synth_dir / "dataset.jsonl"), "--signals", "eye", "--seed", "1",
                                 "--out", str(tmp_path / "runs"), "--methods", "attention"])
    assert result.exit_code == 2
    assert "run" in result.output


def test_featsel_linear_grid(runner, synth_dir, tmp_path):
    out = tmp_path / "runs"
    result = runner.invoke(cli, ["--quiet", "featsel", "--corpus", str(synth_dir), "--dataset",
                                 str(synth_dir / "dataset.jsonl"), "--signals", "eye", "--seed", "1",
                                 "--out", str(out), "--methods", "mi,rf", "--k-sweep", "1,17",
                                 "--classifiers", "linear"])
    assert result.exit_code == 0, result.output
    featsel_dir = out / "Planted_eye_seed1" / "featsel"
    grid = (featsel_dir / "featsel_grid.csv").read_text(encoding="utf-8").splitlines()
    assert grid[0] == "method,k,classifier,features,mean_f1"
    assert len(grid) == 5
    assert (featsel_dir / "manifest.json").exists()


def test_synth_rejects_bad_dimension(runner, tmp_path):
    result = runner.invoke(cli, ["--quiet", "synth", "--d", "10", "--seed", "0", "--out", str(tmp_path / "bad")])
    assert result.exit_code == 2


def test_report_on_missing_results_is_input_error(runner, tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    result = runner.invoke(cli, ["--quiet", "report", str(empty)])
    assert result.exit_code == 2


def test_two_runs_with_same_seed_are_byte_identical(runner, synth_dir, tmp_path):
    csvs = ["fold_metrics.csv", "class_metrics.csv", "attention.csv", "attention_stages.csv", "mask_curve.csv"]
    contents = []
    for name in ("first", "second"):
        out = tmp_path / name
        result = runner.invoke(cli, ["--quiet", "run", "--corpus", str(synth_dir), "--dataset",
                                     str(synth_dir / "dataset.jsonl"), "--signals", "eye", "--seed", "5",
                                     "--out", str(out), "--masking", *FAST_RUN])
        assert result.exit_code == 0, result.output
        contents.append({csv: _read(out / "Planted_eye_seed5" / csv) for csv in csvs})
    assert contents[0] == contents[1]


def test_synth_reads_config_file_under_flags(runner, tmp_path):
    config = tmp_path / "synth.yaml"
    config.write_text("m: 45\neffect: 1.5\nmin_len: 2\nmax_len: 4\nk_folds: 3\n", encoding="utf-8")
    out = tmp_path / "synth"
    result = runner.invoke(cli, ["--quiet", "--config", str(config), "synth", "--m", "36", "--seed", "2",
                                 "--out", str(out)])
    assert result.exit_code == 0, result.output
    plant = json.loads((out / "plant_spec.json").read_text(encoding="utf-8"))
    assert (plant["m"], plant["effect"], plant["max_len"], plant["k_folds"]) == (36, 1.5, 4, 3)
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["config"]["effect"] == 1.5
