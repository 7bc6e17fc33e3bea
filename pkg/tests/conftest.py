import numpy as np
import pytest

from data_utils import Corpus, SentenceRecord, write_corpus_files
from synth_utils import PlantSpec, generate
from utils import WARNING_COUNTS

WORDS = ["the", "cat", "sat", "on", "a", "mat", "however", "dogs", "will", "run", "quickly", "and"]
TAGS = ["DT", "NN", "VBD", "IN", "DT", "NN", "RB", "NNS", "MD", "VB", "RB", "CC"]


def make_record(i: int, n: int, rng: np.random.Generator, **overrides) -> SentenceRecord:
    """确定性的小句子：词与POS按下标轮转取"""
    tokens = tuple(WORDS[(i + t) % len(WORDS)] for t in range(n))
    pos = tuple(TAGS[(i + t) % len(TAGS)] for t in range(n))
    nouns = [t for t, tag in enumerate(pos) if tag in ("NN", "NNS")]
    fields = dict(
        sentence_id=f"s{i:03d}",
        tokens=tokens,
        eye=rng.normal(size=(n, 17)),
        eeg=rng.normal(size=(n, 8)),
        pos=pos,
        sense_counts=tuple(int(c) for c in rng.integers(1, 6, size=n)),
        complex_nominals=int(rng.integers(0, 4)),
        clauses=int(rng.integers(1, 4)),
        subject_index=nouns[0] if nouns else None,
        object_index=nouns[-1] if len(nouns) > 1 else None,
        tense=None,
    )
    fields.update(overrides)
    return SentenceRecord(**fields)


@pytest.fixture(autouse=True)
def reset_warning_counts():
    WARNING_COUNTS.clear()
    yield
    WARNING_COUNTS.clear()


@pytest.fixture
def tiny_corpus() -> Corpus:
    """30个句子，句长3~8"""
    rng = np.random.default_rng(0)
    return Corpus(records=tuple(make_record(i, 3 + i % 6, rng) for i in range(30)))


@pytest.fixture
def tiny_files(tmp_path, tiny_corpus):
    signals = tmp_path / "signals.tsv"
    annotations = tmp_path / "annotations.jsonl"
    write_corpus_files(tiny_corpus, str(signals), str(annotations))
    return str(signals), str(annotations)


@pytest.fixture
def planted_small():
    """小规模植入式语料（60句，植入特征4）"""
    return generate(PlantSpec(d=17, planted=4, effect=3.0, noise=1.0, m=60, min_len=3, max_len=5, seed=11))
