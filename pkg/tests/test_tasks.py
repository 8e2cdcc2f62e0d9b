import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chi2_contingency

from esftlab.model import ConfigError
from esftlab.tasks import (
    GENERATORS,
    Corpus,
    TaskSpec,
    WhitespaceVocab,
    byte_decode,
    byte_encode,
    gen_tasks,
    ingest,
)


def test_spec_validation():
    with pytest.raises(ConfigError):
        TaskSpec("x", (0, 4), weights=[0, 0, 0, 0])
    with pytest.raises(ConfigError):
        TaskSpec("x", (0, 4), weights=[1, -1, 1, 1])
    with pytest.raises(ConfigError):
        TaskSpec("x", (4, 4))
    with pytest.raises(ConfigError):
        TaskSpec("x", (0, 4), n_docs=0)
    with pytest.raises(ConfigError):
        TaskSpec("x", (0, 4), kind="poetry")
    with pytest.raises(ConfigError):
        TaskSpec.from_dict({"name": "x", "support": [0, 4], "colour": "red"})


@pytest.mark.parametrize("kind", GENERATORS)
def test_generators_respect_support_and_lengths(kind):
    spec = TaskSpec("t", (8, 16), kind, doc_length=(5, 9), n_docs=30, seed=1)
    c = gen_tasks([spec], 16)["t"]
    assert len(c) == 30
    assert c.token_set() <= set(range(8, 16))
    assert all(5 <= len(d) <= 9 for d in c.documents)


def test_disjoint_supports_give_disjoint_token_sets():
    a = TaskSpec("a", (0, 8), "categorical", seed=1)
    b = TaskSpec("b", (8, 16), "markov", seed=2)
    out = gen_tasks([a, b], 16)
    assert not out["a"].token_set() & out["b"].token_set()


def test_generation_is_deterministic():
    spec = TaskSpec("t", (0, 10), "template", seed=7)
    a, b = gen_tasks([spec], 10)["t"], gen_tasks([spec], 10)["t"]
    assert all(np.array_equal(x, y) for x, y in zip(a.documents, b.documents))


def test_gen_rejects_bad_task_sets():
    with pytest.raises(ConfigError):
        gen_tasks([TaskSpec("t", (0, 20))], 16)
    with pytest.raises(ConfigError):
        gen_tasks([TaskSpec("t", (0, 4)), TaskSpec("t", (4, 8))], 16)


def test_chi_square_separates_distributions():
    w1 = [8, 4, 2, 1, 1, 1, 1, 1]
    w2 = [1, 1, 1, 1, 1, 2, 4, 8]
    a = gen_tasks([TaskSpec("a", (0, 8), "categorical", weights=w1, n_docs=40, seed=1)], 8)["a"]
    b = gen_tasks([TaskSpec("b", (0, 8), "categorical", weights=w2, n_docs=40, seed=2)], 8)["b"]
    counts = [np.bincount(np.concatenate(c.documents), minlength=8) for c in (a, b)]
    assert chi2_contingency(np.array(counts)).pvalue < 0.01


def test_chi_square_same_distribution_not_separated():
    w = [3, 1, 2, 1, 1, 1, 2, 1]
    a = gen_tasks([TaskSpec("a", (0, 8), "categorical", weights=w, n_docs=40, seed=1)], 8)["a"]
    b = gen_tasks([TaskSpec("b", (0, 8), "categorical", weights=w, n_docs=40, seed=2)], 8)["b"]
    counts = [np.bincount(np.concatenate(c.documents), minlength=8) for c in (a, b)]
    assert chi2_contingency(np.array(counts)).pvalue > 0.01


def test_corpus_invariants():
    with pytest.raises(ValueError):
        Corpus([np.array([], dtype=int)], "x", 4)
    with pytest.raises(ValueError):
        Corpus([np.array([1, 4])], "x", 4)


def test_corpus_split_and_round_trip(tmp_path):
    c = gen_tasks([TaskSpec("t", (0, 6), n_docs=10, seed=3)], 6)["t"]
    a, b = c.split(0.5, seed=0)
    assert len(a) + len(b) == 10 and len(a) == 5
    c.save(tmp_path / "c.jsonl")
    back = Corpus.load(tmp_path / "c.jsonl")
    assert back.task_label == "t" and back.vocab_size == 6
    assert all(np.array_equal(x, y) for x, y in zip(back.documents, c.documents))


# ---------------------------------------------------------------- ingestion


def test_ingest_jsonl_records(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text("\n".join(json.dumps({"text": t}) for t in ("ab", "cde", "f")) + "\n")
    c = ingest(p)
    assert len(c) == 3 and c.vocab_size == 256
    assert byte_decode(c.documents[1]) == "cde"


def test_ingest_token_records(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text('{"tokens": [1, 2, 3]}\n{"tokens": [0]}\n')
    c = ingest(p, vocab_size=4)
    assert [d.tolist() for d in c.documents] == [[1, 2, 3], [0]]
    with pytest.raises(ValueError, match="line 1|:1:"):
        ingest(p, vocab_size=3)


def test_ingest_empty_file(tmp_path):
    p = tmp_path / "e.jsonl"
    p.write_text("")
    with pytest.raises(ValueError, match="no documents"):
        ingest(p)


def test_ingest_malformed_line_names_line(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text('{"text": "ok"}\n{oops\n')
    with pytest.raises(ValueError, match=":2:"):
        ingest(p)


def test_ingest_text_whitespace(tmp_path):
    p = tmp_path / "t.txt"
    p.write_text("a b a\n\nc b\n")
    c = ingest(p, "text", "whitespace")
    assert [d.tolist() for d in c.documents] == [[0, 1, 0], [2, 1]]
    with pytest.raises(ValueError, match="overflow"):
        ingest(p, "text", "whitespace", vocab_size=2)


def test_whitespace_vocab_round_trip():
    v = WhitespaceVocab()
    ids = v.encode("the cat the hat")
    assert v.decode(ids) == "the cat the hat"


@settings(max_examples=100, deadline=None)
@given(st.text(min_size=1, max_size=40))
def test_byte_round_trip(text):
    assert byte_decode(byte_encode(text)) == text


@settings(max_examples=30, deadline=None)
@given(st.lists(st.text(min_size=1, max_size=20).filter(lambda s: s.strip() == s and "\n" not in s and s),
                min_size=1, max_size=5))
def test_byte_round_trip_through_file(tmp_path_factory, texts):
    p = tmp_path_factory.mktemp("rt") / "d.jsonl"
    p.write_text("\n".join(json.dumps({"text": t}) for t in texts) + "\n", encoding="utf-8")
    c = ingest(p)
    assert [byte_decode(d) for d in c.documents] == texts
