import itertools

import numpy as np
import pytest

import autograd_utils as ag
from autograd_utils import GradientError, Tensor2, finite_difference_check, init_params, zeros_param
from Bridging_Model import (
    AttentionParams, BridgingModel, CrfParams, EncoderParams, LstmParams, ModelConfig, crf_log_partition, crf_nll,
    crf_score, cross_entropy, encode, feature_attention, focal_loss, inverse_frequency_weights, load_checkpoint,
    save_checkpoint, viterbi_decode,
)
from data_utils import SignalMatrix
from utils import BridgingInputError


def _matrix(n, n_max, d, seed):
    H = np.zeros((n_max, d))
    H[:n] = np.random.default_rng(seed).normal(size=(n, d))
    return SignalMatrix(H, n, "eye")


def _crf(k, in_dim, seed):
    rng = np.random.default_rng(seed)
    return CrfParams(Tensor2(rng.normal(size=(in_dim, k)), True, "W_s"),
                     Tensor2(rng.normal(size=(1, k)), True, "b_s"),
                     Tensor2(rng.normal(size=(k + 1, k)), True, "T"))


def _path_score(E, T, tags):
    k = E.shape[1]
    prev = [k] + list(tags[:-1])
    return sum(T[p, t] + E[i, t] for i, (p, t) in enumerate(zip(prev, tags)))


def test_crf_forward_and_viterbi_match_enumeration():
    rng = np.random.default_rng(1)
    for draw in range(100):
        k, n = int(rng.integers(1, 5)), int(rng.integers(1, 6))
        params = _crf(k, 2, seed=draw)
        E = rng.normal(size=(n, k))
        T = params.T.data
        paths = list(itertools.product(range(k), repeat=n))
        scores = np.array([_path_score(E, T, p) for p in paths])

        log_z = crf_log_partition(ag.constant(E), params).item()
        assert log_z == pytest.approx(np.logaddexp.reduce(scores), abs=1e-8)
        assert viterbi_decode(E, T) == list(paths[int(scores.argmax())])


def test_viterbi_ties_prefer_lowest_tag():
    assert viterbi_decode(np.zeros((3, 4)), np.zeros((5, 4))) == [0, 0, 0]


def test_crf_nll_is_non_negative_and_checks_tags():
    params = _crf(3, 2, seed=2)
    H = ag.constant(np.random.default_rng(3).normal(size=(3, 2)))
    assert crf_nll(H, [0, 2, 1], params).item() >= 0.0
    with pytest.raises(BridgingInputError):
        crf_nll(H, [0, 3, 1], params)
    with pytest.raises(BridgingInputError):
        crf_nll(H, [0, 1], params)


GRADCHECK_CASES = [
    ("sequence", "cross-entropy", True),
    ("sequence", "cross-entropy", False),
    ("three-class", "cross-entropy", True),
    ("three-class", "focal", True),
    ("binary", "focal", False),
]


@pytest.mark.parametrize("kind,loss,use_encoder", GRADCHECK_CASES)
def test_model_gradients_match_finite_differences(kind, loss, use_encoder):
    d, n_max = 4, 5
    n_labels = 2 if kind == "binary" else 3
    config = ModelConfig(signal_type="eye", task="Planted", hidden=3, use_encoder=use_encoder, loss=loss, seed=1)
    weights = [0.5, 1.0, 1.5][:n_labels] if loss == "focal" else None
    model = BridgingModel(config, d, n_max, kind, n_labels, class_weights=weights)
    batch = [_matrix(n, n_max, d, seed=n) for n in (2, 3, 5)]
    if kind == "sequence":
        targets = [(0, 2), (1, 1, 0), (2, 0, 1, 1, 0)]
    else:
        targets = [0, n_labels - 1, 1]

    errors = finite_difference_check(
        lambda: ag.mean_of([model.loss(m, t) for m, t in zip(batch, targets)]),
        model.parameters().values())
    assert set(errors) == set(model.parameters())
    assert max(errors.values()) < 1e-5, errors


def test_attention_is_a_distribution_over_features():
    model = BridgingModel(ModelConfig("eye", "Planted", hidden=2, seed=0), 6, 4, "three-class", 3)
    for seed in range(1000):
        alpha = model.attention(_matrix(1 + seed % 4, 4, 6, seed=seed))
        assert alpha.shape == (6,)
        assert abs(alpha.sum() - 1.0) <= 1e-12
        assert np.all((alpha > 0) & (alpha < 1))


def test_zero_attention_vector_gives_uniform_weights():
    d, n_max = 5, 3
    params = AttentionParams(ag.constant(np.ones((d, n_max))), ag.constant(np.zeros((d, 1))),
                             ag.constant(np.zeros((d, 1))))
    matrix = _matrix(2, n_max, d, seed=4)
    alpha, H_att = feature_attention(matrix, params)
    np.testing.assert_allclose(alpha.data, np.full((1, d), 1.0 / d))
    assert H_att.shape == (2, d)
    np.testing.assert_allclose(H_att.data, matrix.H[:2] / d)


def test_focal_loss_reference_values():
    dist = ag.constant([[0.5, 0.5]])
    assert focal_loss(dist, 0, 2.0).item() == pytest.approx(-0.25 * np.log(0.5))
    skewed = ag.constant([[0.2, 0.7, 0.1]])
    assert focal_loss(skewed, 1, 0.0).item() == pytest.approx(cross_entropy(skewed, 1).item())
    assert focal_loss(skewed, 2, 0.0, [1.0, 1.0, 3.0]).item() == pytest.approx(-3.0 * np.log(0.1))
    with pytest.raises(BridgingInputError):
        focal_loss(dist, 0, -1.0)
    with pytest.raises(BridgingInputError):
        focal_loss(dist, 0, 2.0, [1.0, 0.0])


def test_inverse_frequency_weights_have_unit_mean():
    weights = inverse_frequency_weights([0, 0, 0, 1], 2)
    assert weights == pytest.approx([0.5, 1.5])


def test_no_encoder_variant_has_no_lstm_parameters():
    config = ModelConfig("eeg", "Planted", use_encoder=False, seed=0)
    model = BridgingModel(config, 8, 4, "three-class", 3)
    assert not any(name.startswith("lstm") for name in model.parameters())
    assert model.parameters()["W_p"].shape == (8, 3)
    assert model.predict(_matrix(4, 4, 8, seed=1)) in (0, 1, 2)


def test_model_without_attention_rejects_attention_query():
    model = BridgingModel(ModelConfig("eye", "Planted", hidden=2, use_attention=False), 3, 2, "binary", 2)
    assert "W_att" not in model.parameters()
    with pytest.raises(BridgingInputError):
        model.attention(_matrix(2, 2, 3, seed=0))


def test_shape_mismatch_is_rejected():
    model = BridgingModel(ModelConfig("eye", "Planted", hidden=2), 4, 3, "binary", 2)
    with pytest.raises(GradientError):
        model.predict(_matrix(2, 5, 4, seed=0))


def test_checkpoint_round_trip(tmp_path):
    config = ModelConfig("eye", "POS", hidden=3, seed=7)
    model = BridgingModel(config, 4, 5, "sequence", 3)
    model.fingerprint = "abc"
    path = tmp_path / "model.json"
    save_checkpoint(model, str(path))
    restored = load_checkpoint(str(path))
    assert restored.fingerprint == "abc"
    assert restored.config == config
    for name, value in model.state_dict().items():
        np.testing.assert_array_equal(restored.state_dict()[name], value)
    matrix = _matrix(4, 5, 4, seed=3)
    assert restored.predict(matrix) == model.predict(matrix)


def test_load_state_dict_rejects_unknown_or_misshaped():
    model = BridgingModel(ModelConfig("eye", "Planted", hidden=2), 4, 3, "binary", 2)
    with pytest.raises(BridgingInputError):
        model.load_state_dict({"nope": np.zeros((1, 1))})
    with pytest.raises(BridgingInputError):
        model.load_state_dict({"W_p": np.zeros((1, 1))})


def _shared_encoder(d, hidden, seed):
    lstm = LstmParams(init_params((d, 4 * hidden), seed, "W"), init_params((hidden, 4 * hidden), seed + 1, "U"),
                      zeros_param((1, 4 * hidden), "b"))
    return EncoderParams(forward=lstm, backward=lstm)


def test_encoder_keeps_all_zero_input_at_zero():
    params = _shared_encoder(d=4, hidden=3, seed=0)
    H_prime = encode(ag.constant(np.zeros((5, 4))), 5, params)
    assert H_prime.shape == (5, 6)
    np.testing.assert_array_equal(H_prime.data, np.zeros((5, 6)))


def test_reversed_sentence_swaps_encoder_directions():
    hidden = 3
    params = _shared_encoder(d=4, hidden=hidden, seed=2)
    X = np.random.default_rng(5).normal(size=(4, 4))
    original = encode(ag.constant(X), 4, params).data
    reversed_ = encode(ag.constant(X[::-1].copy()), 4, params).data
    np.testing.assert_allclose(reversed_[:, :hidden], original[::-1, hidden:], atol=1e-12)
    np.testing.assert_allclose(reversed_[:, hidden:], original[::-1, :hidden], atol=1e-12)


def test_crf_sequence_probabilities_sum_to_one():
    rng = np.random.default_rng(3)
    for k in (1, 2, 3):
        for n in (1, 2, 3, 4):
            params = _crf(k, 2, seed=10 * k + n)
            E = ag.constant(rng.normal(size=(n, k)))
            log_z = crf_log_partition(E, params).item()
            total = sum(np.exp(crf_score(E, list(tags), params).item() - log_z)
                        for tags in itertools.product(range(k), repeat=n))
            assert total == pytest.approx(1.0, abs=1e-8)


def test_attention_responds_to_scaling_one_feature():
    model = BridgingModel(ModelConfig("eye", "Planted", hidden=2, seed=1), 6, 4, "three-class", 3)
    matrix = _matrix(3, 4, 6, seed=9)
    scaled = matrix.H.copy()
    scaled[:, 2] *= 3.0
    before = model.attention(matrix)
    after = model.attention(SignalMatrix(scaled, matrix.n, "eye"))
    assert not np.allclose(before, after)
    assert after.sum() == pytest.approx(1.0)
