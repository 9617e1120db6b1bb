"""Metric tests. Overlap metrics are checked against independent oracles
written in a different style (recursive LCS, exhaustive alignment search,
dense-vector consensus scoring); embedding metrics against hand-built
geometry."""

import json
import math
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from genref.metrics import (
    EmbeddingProvider,
    MetricReport,
    accuracy_report,
    accuracy_table,
    cider,
    classify_by_similarity,
    embedding_metrics,
    evaluate_corpus,
    meteor_lite,
    rouge_l,
)

WORDS = ["a", "b", "c", "d", "e", "f"]


def rand_sentence(rng, lo, hi, vocab=WORDS):
    n = int(rng.integers(lo, hi + 1))
    return [vocab[int(i)] for i in rng.integers(0, len(vocab), size=n)]


# ---------------------------------------------------------------------------
# rouge_l
# ---------------------------------------------------------------------------

def lcs_recursive(a, b):
    @lru_cache(maxsize=None)
    def f(i, j):
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + f(i + 1, j + 1)
        return max(f(i + 1, j), f(i, j + 1))

    return f(0, 0)


def rouge_from_lcs(lcs, nh, nr):
    if lcs == 0:
        return 0.0
    p = lcs / nh
    rec = lcs / nr
    b2 = 1.2 * 1.2
    return (1.0 + b2) * p * rec / (rec + b2 * p)


def test_rouge_identical_is_one():
    assert rouge_l("the red cube", "the red cube") == 1.0


def test_rouge_prefix_example():
    got = rouge_l("the cat sat", "the cat sat on the mat")
    assert abs(got - rouge_from_lcs(3, 3, 6)) == 0.0
    assert abs(got - 0.6289) < 5e-5


def test_rouge_disjoint_is_zero():
    assert rouge_l("a b c", "d e f") == 0.0


def test_rouge_rejects_empty():
    with pytest.raises(ValueError):
        rouge_l("", "a b")
    with pytest.raises(ValueError):
        rouge_l(["a"], [])


def test_rouge_matches_recursive_oracle_1000():
    rng = np.random.default_rng(42)
    for _ in range(1000):
        h = rand_sentence(rng, 1, 10)
        r = rand_sentence(rng, 1, 10)
        lcs = lcs_recursive(tuple(h), tuple(r))
        assert rouge_l(h, r) == rouge_from_lcs(lcs, len(h), len(r))


# ---------------------------------------------------------------------------
# cider
# ---------------------------------------------------------------------------

def cider_oracle(hyps, refs):
    """Dense-vector reimplementation over an explicit n-gram vocabulary."""
    hy = [h.split() if isinstance(h, str) else list(h) for h in hyps]
    rf = [r.split() if isinstance(r, str) else list(r) for r in refs]
    n_corpus = len(rf)

    def grams(toks, n):
        return [tuple(toks[i:i + n]) for i in range(len(toks) - n + 1)]

    out = []
    for h, r in zip(hy, rf):
        per_n = []
        for n in range(1, 5):
            vocab = sorted(set(grams(h, n)) | {g for s in rf for g in grams(s, n)})
            idx = {g: i for i, g in enumerate(vocab)}
            df = np.zeros(len(vocab))
            for s in rf:
                for g in set(grams(s, n)):
                    df[idx[g]] += 1
            idf = np.log(n_corpus / np.maximum(df, 1.0))
            hv = np.zeros(len(vocab))
            for g in grams(h, n):
                hv[idx[g]] += 1
            rv = np.zeros(len(vocab))
            for g in grams(r, n):
                rv[idx[g]] += 1
            hv *= idf
            rv *= idf
            nh, nr = np.linalg.norm(hv), np.linalg.norm(rv)
            per_n.append(0.0 if nh == 0 or nr == 0 else float(hv @ rv) / (nh * nr))
        out.append(sum(per_n) / 4)
    return out, sum(out) / len(out)


def test_cider_self_match_is_one():
    scores, mean = cider(["a b c d", "e f g h"], ["a b c d", "e f g h"])
    assert scores == [1.0, 1.0]
    assert mean == 1.0


def test_cider_disjoint_sample_is_zero():
    scores, _ = cider(["a b c d", "e f g h"], ["e f g h", "e f g h"])
    assert scores[0] == 0.0


def test_cider_corpus_order_invariance():
    hyps = ["a b c d", "b c d e", "c d e f"]
    refs = ["a b c e", "b c d e", "a d e f"]
    base, _ = cider(hyps, refs)
    perm = [2, 0, 1]
    permuted, _ = cider([hyps[i] for i in perm], [refs[i] for i in perm])
    for k, i in enumerate(perm):
        assert permuted[k] == pytest.approx(base[i], abs=1e-12)


def test_cider_rejects_small_corpus():
    with pytest.raises(ValueError, match="size < 2"):
        cider(["a b"], ["a b"])


def test_cider_rejects_mismatched_lists():
    with pytest.raises(ValueError, match="parallel"):
        cider(["a b", "c d"], ["a b"])


def test_cider_matches_dense_oracle_100_corpora():
    rng = np.random.default_rng(7)
    for _ in range(100):
        n = int(rng.integers(2, 7))
        refs = [" ".join(rand_sentence(rng, 4, 9)) for _ in range(n)]
        hyps = []
        for r in refs:
            roll = rng.random()
            if roll < 0.34:
                hyps.append(r)
            else:
                hyps.append(" ".join(rand_sentence(rng, 4, 9)))
        got, got_mean = cider(hyps, refs)
        want, want_mean = cider_oracle(hyps, refs)
        for g, w in zip(got, want):
            assert abs(g - w) < 1e-9
            assert -1e-12 <= g <= 1.0 + 1e-12
        assert abs(got_mean - want_mean) < 1e-9


# ---------------------------------------------------------------------------
# meteor_lite
# ---------------------------------------------------------------------------

def meteor_oracle(h, r):
    """Exhaustive alignment search: maximize matches, then minimize chunks."""
    best = [0, math.inf]

    def count_chunks(pairs):
        chunks = 0
        prev = None
        for i, j in pairs:
            if prev is None or not (i == prev[0] + 1 and j == prev[1] + 1):
                chunks += 1
            prev = (i, j)
        return chunks

    def rec(i, used, pairs):
        if i == len(h):
            m = len(pairs)
            c = count_chunks(pairs)
            if m > best[0] or (m == best[0] and c < best[1]):
                best[0], best[1] = m, c
            return
        rec(i + 1, used, pairs)
        for j in range(len(r)):
            if j not in used and r[j] == h[i]:
                rec(i + 1, used | {j}, pairs + [(i, j)])

    rec(0, frozenset(), [])
    m, chunks = best
    if m == 0:
        return 0.0
    p = m / len(h)
    rec_ = m / len(r)
    f = 10.0 * p * rec_ / (rec_ + 9.0 * p)
    return f * (1.0 - 0.5 * (chunks / m) ** 3)


def test_meteor_identical_four_tokens():
    assert meteor_lite("a b c d", "a b c d") == 0.9921875


def test_meteor_no_match_is_zero():
    assert meteor_lite("a b", "c d") == 0.0


def test_meteor_symmetric_on_identical():
    s = "red cube at r0c0"
    assert meteor_lite(s, s) == meteor_lite(s, s)


def test_meteor_two_chunk_hand_case():
    # hyp "a b c d" vs ref "a b x c d": 4 matches in 2 chunks
    p, r = 1.0, 4 / 5
    f = 10.0 * p * r / (r + 9.0 * p)
    want = f * (1.0 - 0.5 * (2 / 4) ** 3)
    assert meteor_lite("a b c d", "a b x c d") == pytest.approx(want, abs=1e-15)


def test_meteor_minimizes_chunks_not_greedy():
    # left-to-right first-fit pairing of "a b a" onto "a a b" yields 3 chunks;
    # the optimal alignment needs only 2
    f = 1.0
    want = f * (1.0 - 0.5 * (2 / 3) ** 3)
    assert meteor_lite("a b a", "a a b") == pytest.approx(want, abs=1e-15)


def test_meteor_crossed_pair():
    # two matches, both chunks of size one
    assert meteor_lite("b a", "a b") == pytest.approx(0.5, abs=1e-15)


def test_meteor_rejects_empty():
    with pytest.raises(ValueError):
        meteor_lite("", "a")


def test_meteor_matches_exhaustive_oracle():
    rng = np.random.default_rng(13)
    vocab = ["a", "b", "c"]
    for _ in range(150):
        h = rand_sentence(rng, 1, 5, vocab)
        r = rand_sentence(rng, 1, 5, vocab)
        got = meteor_lite(h, r)
        assert got == meteor_oracle(h, r)
        assert 0.0 <= got <= 1.0


# ---------------------------------------------------------------------------
# embedding metrics
# ---------------------------------------------------------------------------

@pytest.fixture()
def provider():
    return EmbeddingProvider.hashed(WORDS + ["red", "cube", "ball"], dim=16, seed=3)


def test_embedding_identical_all_one(provider):
    out = embedding_metrics("red cube a", "red cube a", provider)
    assert out["emb_avg"] == pytest.approx(1.0, abs=1e-12)
    assert out["vec_extrema"] == pytest.approx(1.0, abs=1e-12)
    assert out["greedy_match"] == pytest.approx(1.0, abs=1e-12)
    assert out["zero_norm"] is False


def test_embedding_orthogonal_avg_zero():
    table = {"u": [1.0, 0.0], "w": [0.0, 1.0]}
    p = EmbeddingProvider(table, unk=[1.0, 1.0])
    out = embedding_metrics("u", "w", p)
    assert out["emb_avg"] == pytest.approx(0.0, abs=1e-15)


def test_extrema_keeps_sign_of_largest_magnitude():
    table = {"u": [3.0, -1.0], "w": [-4.0, 2.0], "x": [-4.0, 2.0]}
    p = EmbeddingProvider(table, unk=[1.0, 1.0])
    # extrema of {u, w} is (-4, 2): dimension 0 takes w's -4 over u's 3
    out = embedding_metrics("u w", "x", p)
    assert out["vec_extrema"] == pytest.approx(1.0, abs=1e-12)


def test_greedy_match_symmetric(provider):
    a, b = "red cube a b", "ball c d"
    x = embedding_metrics(a, b, provider)["greedy_match"]
    y = embedding_metrics(b, a, provider)["greedy_match"]
    assert x == y


def test_zero_norm_flags_and_zeroes():
    table = {"z": [0.0, 0.0], "u": [1.0, 0.0]}
    p = EmbeddingProvider(table, unk=[1.0, 1.0])
    out = embedding_metrics("z", "u", p)
    assert out["zero_norm"] is True
    assert out["emb_avg"] == 0.0
    assert out["vec_extrema"] == 0.0


def test_unknown_token_uses_unk_vector(provider):
    a = embedding_metrics("zzzz", "qqqq", provider)
    assert a["emb_avg"] == pytest.approx(1.0, abs=1e-12)


def test_provider_validation():
    with pytest.raises(ValueError, match="empty"):
        EmbeddingProvider({})
    with pytest.raises(ValueError, match="dimension"):
        EmbeddingProvider({"a": [1.0, 0.0], "b": [1.0, 0.0, 0.0]})
    with pytest.raises(ValueError, match="unk"):
        EmbeddingProvider({"a": [1.0, 0.0]}, unk=[1.0])


# ---------------------------------------------------------------------------
# classification
# ---------------------------------------------------------------------------

def test_classify_exact_option(provider):
    options = ["a b", "c d", "red cube", "e f"]
    idx, scores = classify_by_similarity("red cube", options, provider)
    assert idx == 2
    assert scores[2] == pytest.approx(1.0, abs=1e-12)


def test_classify_tie_takes_lowest(provider):
    idx, _ = classify_by_similarity("a b", ["c d", "c d", "c d", "c d"], provider)
    assert idx == 0


def test_classify_scale_invariant():
    rng = np.random.default_rng(5)
    table = {w: rng.normal(size=8) for w in WORDS}
    doubled = {w: 2.0 * v for w, v in table.items()}
    p1 = EmbeddingProvider(table, unk=np.ones(8))
    p2 = EmbeddingProvider(doubled, unk=np.ones(8))
    options = ["a b c", "b c d", "c d e", "d e f"]
    for text in ("a c e", "f e d", "b b b"):
        assert classify_by_similarity(text, options, p1)[0] == \
            classify_by_similarity(text, options, p2)[0]


def test_classify_requires_four(provider):
    with pytest.raises(ValueError, match="4 options"):
        classify_by_similarity("a", ["a", "b"], provider)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def test_accuracy_report_example():
    flags = [
        {"answer_correct": True, "rationale_correct": False},
        {"answer_correct": True, "rationale_correct": True},
        {"answer_correct": False, "rationale_correct": True},
    ]
    rep = accuracy_report(flags)
    assert round(rep["answer_pct"], 2) == 66.67
    assert round(rep["rationale_pct"], 2) == 66.67
    assert round(rep["overall_pct"], 2) == 33.33


def test_accuracy_all_correct():
    rep = accuracy_report([{"answer_correct": True, "rationale_correct": True}] * 4)
    assert rep == {"answer_pct": 100.0, "rationale_pct": 100.0, "overall_pct": 100.0}


def test_accuracy_rejects_empty():
    with pytest.raises(ValueError):
        accuracy_report([])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=40))
def test_overall_never_exceeds_either(flag_pairs):
    flags = [{"answer_correct": a, "rationale_correct": r} for a, r in flag_pairs]
    rep = accuracy_report(flags)
    assert rep["overall_pct"] <= min(rep["answer_pct"], rep["rationale_pct"]) + 1e-12


def test_accuracy_table_layout():
    rep = accuracy_report([{"answer_correct": True, "rationale_correct": False}])
    tab = accuracy_table(rep)
    lines = tab.split("\n")
    assert len(lines) == 2
    assert "Answer" in lines[0] and "Rationale" in lines[0] and "Overall" in lines[0]
    assert len(lines[0]) == len(lines[1])


def test_evaluate_corpus_report(provider):
    hyps = ["a b c d", "red cube a b", "c d e f"]
    refs = ["a b c d", "red ball a b", "a b e f"]
    rep = evaluate_corpus(hyps, refs, provider)
    assert rep.per_sample["rouge_l"][0] == 1.0
    assert rep.per_sample["cider"][0] == 1.0
    for name, vals in rep.per_sample.items():
        assert len(vals) == 3
        assert rep.mean[name] == pytest.approx(sum(vals) / 3, abs=1e-15)
    parsed = json.loads(rep.to_json())
    assert set(parsed) == {"per_sample", "mean", "zero_norm_count"}
    lines = rep.table().split("\n")
    assert len(lines) == 5
    assert len({len(ln) for ln in lines}) == 1


def test_evaluate_corpus_deterministic(provider):
    hyps = ["a b c d", "b c d e"]
    refs = ["a b c e", "b c d e"]
    assert evaluate_corpus(hyps, refs, provider).to_json() == \
        evaluate_corpus(hyps, refs, provider).to_json()


def test_report_validates_ranges():
    per = {
        "rouge_l": [2.0], "cider": [0.5], "meteor_lite": [0.5],
        "emb_avg": [0.5], "vec_extrema": [0.5], "greedy_match": [0.5],
    }
    mean = {k: v[0] for k, v in per.items()}
    with pytest.raises(ValueError, match="rouge_l"):
        MetricReport(per_sample=per, mean=mean)
