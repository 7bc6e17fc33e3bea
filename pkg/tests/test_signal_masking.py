from dataclasses import replace

import numpy as np
import pytest

from Bridging_Model import ModelConfig
from data_utils import Corpus, make_folds
from Experiment_Runner import ExperimentConfig, run_cv
from Feature_Selection import ImportanceScores, dataset_to_aggregated, selection_scores
from Signal_Masking import MaskReport, featsel_compare, linear_cv, mask_eval
from Task_Labels import build_dataset
from utils import BridgingInputError


def _constant_first_column(corpus):
    records = []
    for r in corpus.records:
        eye = r.eye.copy()
        eye[:, 0] = 5.0
        records.append(replace(r, eye=eye))
    return Corpus(records=tuple(records))


def _config(signal_type="eye", **overrides):
    kwargs = dict(task="SenLen", signal_type=signal_type, seed=0, k_folds=3, max_epochs=2, patience=1, jobs=1,
                  progress=False, model=ModelConfig(signal_type, "SenLen", hidden=3, seed=0))
    kwargs.update(overrides)
    return ExperimentConfig(**kwargs)


@pytest.fixture
def senlen_run(tiny_corpus):
    corpus = _constant_first_column(tiny_corpus)
    dataset = build_dataset("SenLen", corpus, "eye", make_folds(corpus, 3, seed=0))
    config = _config()
    results, scores = run_cv(config, dataset, corpus)
    return config, corpus, dataset, results, scores


def test_frozen_masking_covers_every_feature(senlen_run):
    config, corpus, dataset, results, scores = senlen_run
    report = mask_eval(config, dataset, corpus, results, scores, retrain=False)
    assert len(report.features) == dataset.d == 17
    assert sorted(report.features) == sorted(scores.feature_names)
    assert report.scores == sorted(report.scores, reverse=True)
    assert not report.retrained
    frame = report.to_frame()
    assert frame["rank"].tolist() == list(range(1, 18))
    assert frame["delta_f1"].tolist() == pytest.approx((frame["f1_after_masking"] - frame["baseline_f1"]).tolist())


def test_masking_a_constant_feature_changes_nothing(senlen_run):
    config, corpus, dataset, results, scores = senlen_run
    report = mask_eval(config, dataset, corpus, results, scores, retrain=False)
    position = report.features.index("FFD")
    assert report.f1_after[position] == pytest.approx(report.baseline_f1)


def test_retrained_masking_on_eeg(tiny_corpus):
    dataset = build_dataset("SenLen", tiny_corpus, "eeg", make_folds(tiny_corpus, 3, seed=0))
    config = _config("eeg", max_epochs=1)
    results, scores = run_cv(config, dataset, tiny_corpus)
    report = mask_eval(config, dataset, tiny_corpus, results, scores, retrain=True)
    assert report.retrained
    assert len(report.f1_after) == 8
    assert all(0.0 <= f1 <= 1.0 for f1 in report.f1_after)


def test_mask_eval_rejects_wrong_score_length(senlen_run):
    config, corpus, dataset, results, _ = senlen_run
    short = ImportanceScores("attention", np.full(3, 1 / 3), ["a", "b", "c"])
    with pytest.raises(BridgingInputError):
        mask_eval(config, dataset, corpus, results, short)


def test_mask_report_checks_lengths():
    with pytest.raises(BridgingInputError):
        MaskReport("LD", "eye", ["a", "b"], [0.5], [0.1, 0.2], 0.3)


def test_linear_classifier_finds_planted_feature(planted_small):
    _, dataset = planted_small
    assert linear_cv(dataset, [4]) > 0.8


def test_featsel_grid_shape_and_full_set_agreement(planted_small):
    corpus, dataset = planted_small
    data = dataset_to_aggregated(dataset, list(corpus.schema("eye").feature_names))
    method_scores = {m: selection_scores(m, data, seed=0) for m in ("mi", "rf")}
    config = ExperimentConfig(task="Planted", signal_type="eye", seed=0, k_folds=5, max_epochs=1, jobs=1,
                              progress=False, model=ModelConfig("eye", "Planted", hidden=2, seed=0))
    grid = featsel_compare(config, dataset, corpus, method_scores, [1, 17], ["linear"])
    assert list(grid.columns) == ["method", "k", "classifier", "features", "mean_f1"]
    assert len(grid) == 4
    full = grid[grid["k"] == 17]["mean_f1"].tolist()
    assert full[0] == full[1]
    assert grid[grid["k"] == 1]["features"].tolist() == ["MFD", "MFD"]

    recurrent = featsel_compare(config, dataset, corpus, {"mi": method_scores["mi"]}, [2], ["recurrent"])
    assert len(recurrent) == 1
    assert 0.0 <= recurrent["mean_f1"].iloc[0] <= 1.0


def test_featsel_rejects_bad_k_and_classifier(planted_small):
    corpus, dataset = planted_small
    scores = {"mi": ImportanceScores("mutual-information", np.full(17, 1 / 17), list(corpus.schema("eye").feature_names))}
    config = ExperimentConfig(task="Planted", signal_type="eye", seed=0, k_folds=5, jobs=1, progress=False)
    with pytest.raises(BridgingInputError):
        featsel_compare(config, dataset, corpus, scores, [18], ["linear"])
    with pytest.raises(BridgingInputError):
        featsel_compare(config, dataset, corpus, scores, [3], ["svm"])
