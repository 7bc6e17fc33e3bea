import json

import numpy as np
import pytest

from config import EYE_FEATURES, EEG_FEATURES
from data_utils import (
    EEG_SCHEMA, EYE_SCHEMA, assert_no_leakage, fit_stats, get_schema, load_corpus, load_corpus_archive,
    load_word_list, make_folds, normalize, pad, save_corpus_archive,
)
from utils import WARNING_COUNTS, BridgingInputError, file_digest


def _write_signals(path, rows):
    header = ["sentence_id", "token_index", "token"] + EYE_FEATURES + EEG_FEATURES
    lines = ["\t".join(header)]
    for sid, idx, token, values in rows:
        lines.append("\t".join([sid, str(idx), token] + [str(v) for v in values]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _values(x=1.0):
    return [x] * (len(EYE_FEATURES) + len(EEG_FEATURES))


def test_schema_orders_and_groups():
    assert EYE_SCHEMA.d == 17 and EEG_SCHEMA.d == 8
    assert EYE_SCHEMA.feature_names[:2] == ("FFD", "FPD")
    assert EYE_SCHEMA.stage_of("TRD") == "CONTEXT"
    assert EYE_SCHEMA.stage_of("NFIX") == "LATE"
    assert EEG_SCHEMA.groups["g2"] == (40.0, 49.5)
    with pytest.raises(BridgingInputError):
        get_schema("fmri")


def test_load_corpus_round_trip(tiny_files, tiny_corpus):
    corpus = load_corpus(*tiny_files)
    assert corpus.ids == tiny_corpus.ids
    first = corpus.records[0]
    assert first.tokens == tiny_corpus.records[0].tokens
    assert first.pos == tiny_corpus.records[0].pos
    np.testing.assert_allclose(first.eye, tiny_corpus.records[0].eye, atol=1e-6)


def test_pos_count_mismatch_names_sentence(tmp_path):
    signals = tmp_path / "s.tsv"
    annotations = tmp_path / "a.jsonl"
    _write_signals(signals, [("x1", 0, "a", _values()), ("x1", 1, "b", _values())])
    annotations.write_text(json.dumps({"sentence_id": "x1", "pos": ["DT", "NN", "VB"]}) + "\n", encoding="utf-8")
    with pytest.raises(BridgingInputError, match="x1"):
        load_corpus(str(signals), str(annotations))


def test_non_contiguous_token_index_rejected(tmp_path):
    signals = tmp_path / "s.tsv"
    annotations = tmp_path / "a.jsonl"
    _write_signals(signals, [("x1", 0, "a", _values()), ("x1", 2, "b", _values())])
    annotations.write_text("", encoding="utf-8")
    with pytest.raises(BridgingInputError, match="token_index"):
        load_corpus(str(signals), str(annotations))


def test_malformed_annotation_line_reports_line_number(tmp_path):
    signals = tmp_path / "s.tsv"
    annotations = tmp_path / "a.jsonl"
    _write_signals(signals, [("x1", 0, "a", _values())])
    annotations.write_text(json.dumps({"sentence_id": "x1"}) + "\n{broken\n", encoding="utf-8")
    with pytest.raises(BridgingInputError, match="第 2 行"):
        load_corpus(str(signals), str(annotations))


def test_empty_cells_become_zero_with_warning(tmp_path):
    signals = tmp_path / "s.tsv"
    annotations = tmp_path / "a.jsonl"
    values = _values(2.0)
    values[0] = ""
    _write_signals(signals, [("x1", 0, "a", values)])
    annotations.write_text("", encoding="utf-8")
    corpus = load_corpus(str(signals), str(annotations))
    assert corpus.records[0].eye[0, 0] == 0.0
    assert corpus.records[0].eye[0, 1] == 2.0
    assert WARNING_COUNTS["empty_signal_cells"] == 1


def test_unknown_feature_column_rejected(tmp_path):
    signals = tmp_path / "s.tsv"
    signals.write_text("sentence_id\ttoken_index\ttoken\tXYZ\nx1\t0\ta\t1\n", encoding="utf-8")
    annotations = tmp_path / "a.jsonl"
    annotations.write_text("", encoding="utf-8")
    with pytest.raises(BridgingInputError, match="XYZ"):
        load_corpus(str(signals), str(annotations))


def test_zscore_fit_on_subset_only(tiny_corpus):
    fit_ids = tiny_corpus.ids[:20]
    normalized = normalize(tiny_corpus, fit_ids)
    stacked = np.vstack([r.eye for r in normalized.records if r.sentence_id in set(fit_ids)])
    np.testing.assert_allclose(stacked.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(stacked.std(axis=0), 1.0, atol=1e-12)
    with pytest.raises(BridgingInputError):
        normalize(normalized, fit_ids)


def test_minmax_maps_fit_split_to_unit_interval(tiny_corpus):
    normalized = normalize(tiny_corpus, tiny_corpus.ids, method="minmax")
    stacked = np.vstack([r.eeg for r in normalized.records])
    assert stacked.min() == pytest.approx(0.0)
    assert stacked.max() == pytest.approx(1.0)


def test_fingerprint_and_leakage_check(tiny_corpus):
    stats = fit_stats(tiny_corpus, tiny_corpus.ids[:10])
    assert stats.fingerprint == fit_stats(tiny_corpus, reversed(tiny_corpus.ids[:10])).fingerprint
    assert_no_leakage(stats, tiny_corpus.ids[10:])
    with pytest.raises(AssertionError):
        assert_no_leakage(stats, tiny_corpus.ids[5:15])


def test_pad_keeps_true_length_and_zero_rows(tiny_corpus):
    record = tiny_corpus.records[0]
    matrix = pad(record, 10, "eye")
    assert matrix.H.shape == (10, 17)
    assert matrix.n == record.n
    np.testing.assert_array_equal(matrix.H[record.n:], 0.0)
    with pytest.raises(BridgingInputError):
        pad(record, record.n - 1, "eye")


def test_make_folds_balanced_and_deterministic(tiny_corpus):
    folds = make_folds(tiny_corpus, 4, seed=3)
    sizes = np.bincount(list(folds.values()))
    assert sizes.max() - sizes.min() <= 1
    assert folds == make_folds(tiny_corpus, 4, seed=3)
    with pytest.raises(BridgingInputError):
        make_folds(tiny_corpus, 1, seed=3)


def test_archive_is_deterministic(tmp_path, tiny_corpus):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    save_corpus_archive(tiny_corpus, str(a))
    save_corpus_archive(load_corpus_archive(str(a)), str(b))
    assert file_digest(str(a)) == file_digest(str(b))


def test_load_word_list_ignores_comments(tmp_path):
    path = tmp_path / "words.txt"
    path.write_text("# header\nThe\n\nin  addition\n", encoding="utf-8")
    assert load_word_list(str(path)) == {"the", "in addition"}
