"""Text-overlap and embedding-similarity metrics for generated sequences,
plus a similarity-based multiple-choice harness.

All functions are pure. Inputs may be whitespace-joined strings or token
sequences. The overlap metrics operate on surface tokens only: no stemming,
no synonymy, no pretrained encoders.
"""

import json
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .hashvec import hash_vector

ROUGE_BETA = 1.2
CIDER_MAX_N = 4


def _toks(x):
    toks = x.split() if isinstance(x, str) else list(x)
    if not toks:
        raise ValueError("empty input rejected")
    return toks


def _cosine(a, b):
    """Cosine with a zero-norm guard; returns (value, guard_tripped)."""
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0, True
    return float(np.dot(a, b) / (na * nb)), False


# ---------------------------------------------------------------------------
# overlap metrics
# ---------------------------------------------------------------------------

def _lcs_len(a, b):
    # one-row dynamic program
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(hyp, ref, beta=ROUGE_BETA):
    """Longest-common-subsequence F-measure:
    F = (1 + b^2) P R / (R + b^2 P), P = LCS/|hyp|, R = LCS/|ref|."""
    h, r = _toks(hyp), _toks(ref)
    lcs = _lcs_len(h, r)
    if lcs == 0:
        return 0.0
    p = lcs / len(h)
    rec = lcs / len(r)
    b2 = beta * beta
    return (1.0 + b2) * p * rec / (rec + b2 * p)


def _ngrams(toks, n):
    return Counter(tuple(toks[i:i + n]) for i in range(len(toks) - n + 1))


def cider(hyps, refs):
    """Consensus score: per n in 1..4, cosine between TF-IDF n-gram vectors,
    averaged over n. IDF = log(N / df) with df counted over the reference
    corpus; n-grams absent from every reference take df = 1. Zero-norm
    vectors score 0 for that n. Returns (per-sample scores, mean)."""
    hy = [_toks(h) for h in hyps]
    rf = [_toks(r) for r in refs]
    if len(hy) != len(rf):
        raise ValueError("hyps and refs must be parallel")
    n_corpus = len(rf)
    if n_corpus < 2:
        raise ValueError("corpus of size < 2 rejected: document frequencies need at least 2 samples")
    df = []
    for n in range(1, CIDER_MAX_N + 1):
        counts = Counter()
        for r in rf:
            counts.update(set(_ngrams(r, n)))
        df.append(counts)
    log_n = math.log(n_corpus)
    scores = []
    for h, r in zip(hy, rf):
        per_n = []
        for n in range(1, CIDER_MAX_N + 1):
            dfn = df[n - 1]

            def weigh(counts):
                return {g: c * (log_n - math.log(max(dfn[g], 1))) for g, c in counts.items()}

            hv = weigh(_ngrams(h, n))
            rv = weigh(_ngrams(r, n))
            norm_h = math.sqrt(sum(w * w for w in hv.values()))
            norm_r = math.sqrt(sum(w * w for w in rv.values()))
            if norm_h == 0.0 or norm_r == 0.0:
                per_n.append(0.0)
                continue
            dot = sum(w * rv[g] for g, w in hv.items() if g in rv)
            per_n.append(dot / (norm_h * norm_r))
        scores.append(sum(per_n) / CIDER_MAX_N)
    return scores, sum(scores) / len(scores)


def _max_matches(h, r):
    ch, cr = Counter(h), Counter(r)
    return sum(min(c, cr[w]) for w, c in ch.items())


def _min_chunks(h, r, m):
    """Minimum chunk count over alignments achieving the maximum match count.

    Exhaustive search over hyp positions with memoisation; a chunk continues
    exactly when position i goes to j and i-1 went to j-1. Exponential in the
    worst case, fine at the short sentence lengths this package produces.
    """
    if h == r:
        return 1
    n_h = len(h)
    memo = {}

    no_prev = -2  # distinct from j - 1 even at j = 0

    def go(i, mask, j_prev, matched):
        if matched == m:
            return 0
        if i == n_h or m - matched > n_h - i:
            return math.inf
        key = (i, mask, j_prev, matched)
        hit = memo.get(key)
        if hit is not None:
            return hit
        best = go(i + 1, mask, no_prev, matched)
        w = h[i]
        for j, y in enumerate(r):
            if y == w and not mask & (1 << j):
                cost = 0 if j_prev == j - 1 else 1
                best = min(best, cost + go(i + 1, mask | (1 << j), j, matched + 1))
        memo[key] = best
        return best

    return go(0, 0, no_prev, 0)


def meteor_lite(hyp, ref):
    """Exact-match unigram alignment score. Matches are maximised, then the
    number of contiguous aligned chunks is minimised. With m matches:
    P = m/|hyp|, R = m/|ref|, F = 10PR/(R + 9P), score = F(1 - 0.5(chunks/m)^3).
    """
    h, r = _toks(hyp), _toks(ref)
    m = _max_matches(h, r)
    if m == 0:
        return 0.0
    chunks = _min_chunks(h, r, m)
    p = m / len(h)
    rec = m / len(r)
    f = 10.0 * p * rec / (rec + 9.0 * p)
    penalty = 0.5 * (chunks / m) ** 3
    return f * (1.0 - penalty)


# ---------------------------------------------------------------------------
# embedding metrics
# ---------------------------------------------------------------------------

class EmbeddingProvider:
    """Fixed token-vector table with a deterministic fallback for unknown
    tokens and a mean-pooling sentence reducer."""

    def __init__(self, table, unk=None):
        if not table:
            raise ValueError("empty embedding table")
        self.table = {t: np.asarray(v, dtype=np.float64) for t, v in table.items()}
        dims = {v.shape for v in self.table.values()}
        if len(dims) != 1 or len(next(iter(dims))) != 1:
            raise ValueError("all embeddings must be 1-D vectors of one dimension")
        self.dim = next(iter(dims))[0]
        if unk is None:
            unk = hash_vector("emb:<unk>", self.dim, 0)
        self.unk = np.asarray(unk, dtype=np.float64)
        if self.unk.shape != (self.dim,):
            raise ValueError("unk vector dimension mismatch")

    @classmethod
    def hashed(cls, tokens, dim=32, seed=0):
        table = {t: hash_vector("emb:" + t, dim, seed) for t in tokens}
        return cls(table, unk=hash_vector("emb:<unk>", dim, seed))

    def vector(self, token):
        return self.table.get(token, self.unk)

    def sentence(self, tokens):
        return np.mean([self.vector(t) for t in _toks(tokens)], axis=0)


def embedding_metrics(hyp, ref, provider):
    """Cosine similarities of three sentence representations. A zero-norm
    vector anywhere forces that metric to 0 and sets the zero_norm flag."""
    h, r = _toks(hyp), _toks(ref)
    hv = np.stack([provider.vector(t) for t in h])
    rv = np.stack([provider.vector(t) for t in r])
    warned = False

    avg, w = _cosine(hv.mean(axis=0), rv.mean(axis=0))
    warned |= w

    def extrema(mat):
        idx = np.argmax(np.abs(mat), axis=0)
        return mat[idx, np.arange(mat.shape[1])]

    ext, w = _cosine(extrema(hv), extrema(rv))
    warned |= w

    def direction(a, b):
        nonlocal warned
        total = 0.0
        for va in a:
            best = -1.0
            for vb in b:
                c, w2 = _cosine(va, vb)
                warned |= w2
                best = max(best, c)
            total += best
        return total / len(a)

    greedy = 0.5 * (direction(hv, rv) + direction(rv, hv))
    return {"emb_avg": avg, "vec_extrema": ext, "greedy_match": greedy, "zero_norm": warned}


def classify_by_similarity(generated, options, provider):
    """Pick the option whose mean-vector cosine to the generated text is
    highest. Exactly 4 options; ties resolve to the lowest index.
    Returns (index, scores)."""
    if len(options) != 4:
        raise ValueError("exactly 4 options required")
    g = provider.sentence(generated)
    scores = [_cosine(g, provider.sentence(o))[0] for o in options]
    best = max(range(4), key=lambda i: (scores[i], -i))
    return best, scores


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

METRIC_NAMES = ("rouge_l", "cider", "meteor_lite", "emb_avg", "vec_extrema", "greedy_match")


@dataclass
class MetricReport:
    per_sample: dict
    mean: dict
    zero_norm_count: int = 0
    _eps = 1e-9

    def __post_init__(self):
        for name in METRIC_NAMES:
            if name not in self.per_sample or name not in self.mean:
                raise ValueError("report missing metric %r" % name)
        for name in ("rouge_l", "meteor_lite"):
            for v in self.per_sample[name]:
                if not -self._eps <= v <= 1.0 + self._eps:
                    raise ValueError("%s out of [0,1]: %r" % (name, v))
        for v in self.per_sample["cider"]:
            if v < -self._eps:
                raise ValueError("cider negative: %r" % v)
        for name in ("emb_avg", "vec_extrema", "greedy_match"):
            for v in self.per_sample[name]:
                if not -1.0 - self._eps <= v <= 1.0 + self._eps:
                    raise ValueError("%s out of [-1,1]: %r" % (name, v))

    def to_json(self):
        payload = {
            "per_sample": self.per_sample,
            "mean": self.mean,
            "zero_norm_count": self.zero_norm_count,
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    def table(self):
        """Aligned columns: one row per sample plus a mean row."""
        n = len(self.per_sample[METRIC_NAMES[0]])
        rows = [("sample",) + METRIC_NAMES]
        for i in range(n):
            rows.append((str(i),) + tuple("%.4f" % self.per_sample[m][i] for m in METRIC_NAMES))
        rows.append(("mean",) + tuple("%.4f" % self.mean[m] for m in METRIC_NAMES))
        widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
        return "\n".join("  ".join(cell.rjust(w) for cell, w in zip(row, widths)) for row in rows)


def evaluate_corpus(hyps, refs, provider):
    """Score parallel hypothesis/reference lists with every metric."""
    if len(hyps) != len(refs):
        raise ValueError("hyps and refs must be parallel")
    cider_scores, _ = cider(hyps, refs)
    per = {name: [] for name in METRIC_NAMES}
    per["cider"] = list(cider_scores)
    zero_norms = 0
    for h, r in zip(hyps, refs):
        per["rouge_l"].append(rouge_l(h, r))
        per["meteor_lite"].append(meteor_lite(h, r))
        emb = embedding_metrics(h, r, provider)
        zero_norms += int(emb.pop("zero_norm"))
        for k, v in emb.items():
            per[k].append(v)
    mean = {name: sum(vals) / len(vals) for name, vals in per.items()}
    return MetricReport(per_sample=per, mean=mean, zero_norm_count=zero_norms)


def accuracy_report(flags):
    """Percent of samples with correct answers, correct rationales, and both.

    Each flag is a mapping with boolean answer_correct and rationale_correct.
    """
    flags = list(flags)
    if not flags:
        raise ValueError("empty input rejected")
    n = len(flags)
    a = sum(bool(f["answer_correct"]) for f in flags)
    r = sum(bool(f["rationale_correct"]) for f in flags)
    both = sum(bool(f["answer_correct"]) and bool(f["rationale_correct"]) for f in flags)
    return {
        "answer_pct": 100.0 * a / n,
        "rationale_pct": 100.0 * r / n,
        "overall_pct": 100.0 * both / n,
    }


def accuracy_table(report):
    head = ("Answer", "Rationale", "Overall")
    vals = tuple("%.2f" % report[k] for k in ("answer_pct", "rationale_pct", "overall_pct"))
    widths = [max(len(h), len(v)) for h, v in zip(head, vals)]
    return (
        "  ".join(h.rjust(w) for h, w in zip(head, widths))
        + "\n"
        + "  ".join(v.rjust(w) for v, w in zip(vals, widths))
    )
