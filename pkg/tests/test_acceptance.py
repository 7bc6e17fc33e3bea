"""植入式合成语料上的端到端验收（耗时较长，默认跳过：pytest -m slow）"""

from dataclasses import replace

import numpy as np
import pytest

from Bridging_Model import ModelConfig
from Experiment_Runner import ExperimentConfig, run_cv
from Feature_Selection import dataset_to_aggregated, selection_scores
from Signal_Masking import CLASSIFIERS, featsel_compare, linear_cv, mask_eval
from synth_utils import PlantSpec, generate, recovery_rate
from utils import derive_seed

pytestmark = pytest.mark.slow

PLANTED = PlantSpec(d=17, planted=4, effect=2.0, noise=1.0, m=600, kind="three-class", seed=0)
TRAINING = {"max_epochs": 10, "patience": 3, "jobs": 1}


@pytest.mark.parametrize("method", ["mi", "rfe", "rf"])
def test_selection_methods_recover_planted_feature(method):
    assert recovery_rate(method, PLANTED, repetitions=10) >= 0.9


def test_attention_recovers_planted_feature():
    assert recovery_rate("attention", PLANTED, repetitions=10, experiment_overrides=TRAINING) >= 0.9


def test_attention_without_encoder_recovers_planted_feature():
    overrides = dict(TRAINING, model=ModelConfig("eye", "Planted", use_encoder=False))
    assert recovery_rate("attention", PLANTED, repetitions=10, experiment_overrides=overrides) >= 0.9


def test_no_effect_is_chance_level():
    assert recovery_rate("mi", replace(PLANTED, effect=0.0, m=120), repetitions=20) <= 0.3


def test_masking_top_feature_gives_largest_drop():
    hits, bottom_deltas = 0, []
    for r in range(10):
        spec = replace(PLANTED, seed=derive_seed(PLANTED.seed, "repetition", r))
        corpus, dataset = generate(spec)
        config = ExperimentConfig(task="Planted", signal_type="eye", seed=spec.seed, progress=False, **TRAINING)
        results, scores = run_cv(config, dataset, corpus)
        report = mask_eval(config, dataset, corpus, results, scores, retrain=False)
        drops = [-delta for delta in report.deltas]
        hits += int(np.argmax(drops) == 0)
        bottom_deltas.append(abs(report.deltas[-1]))
    assert hits >= 8
    assert np.mean(bottom_deltas) < 0.02


def test_featsel_comparison_on_planted_data():
    spec = replace(PLANTED, effect=3.0, m=300, seed=derive_seed(PLANTED.seed, "featsel"))
    corpus, dataset = generate(spec)
    names = list(corpus.schema("eye").feature_names)
    config = ExperimentConfig(task="Planted", signal_type="eye", seed=spec.seed, progress=False, **TRAINING)
    _, attention = run_cv(config, dataset, corpus)
    data = dataset_to_aggregated(dataset, names)
    method_scores = {"attention": attention}
    method_scores.update({m: selection_scores(m, data, seed=spec.seed) for m in ("mi", "rfe", "rf")})
    grid = featsel_compare(config, dataset, corpus, method_scores, [1, spec.d])
    assert len(grid) == len(method_scores) * 2 * len(CLASSIFIERS)

    for classifier in CLASSIFIERS:
        f1 = grid[grid["classifier"] == classifier].set_index(["method", "k"])["mean_f1"]
        full = [f1[(m, spec.d)] for m in method_scores]
        assert max(full) - min(full) <= 0.03, classifier
        top = {m: f1[(m, 1)] for m in method_scores}
        assert top["attention"] >= max(top.values()) - 0.03, (classifier, top)

    noise_f1 = linear_cv(dataset, [next(j for j in range(spec.d) if j != spec.planted)])
    linear = grid[(grid["classifier"] == "linear") & (grid["k"] == 1)].set_index("method")["mean_f1"]
    assert linear["attention"] - noise_f1 >= 0.1
    assert linear.min() - noise_f1 >= 0.1
