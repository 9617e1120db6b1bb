"""Synthetic multimodal dataset: attributed objects on a grid, templated
questions, and answers/rationales that are exact by construction.

Every sample is derivable from its scene, so ground truth needs no human
labels: `derive_answer` recomputes the stored answer from the scene and the
question text alone. Encodings are seeded hash embeddings, stable across
processes and platforms.
"""

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .encoder import MultimodalInput
from .hashvec import hash_vector
from .nn import TokenSeq, Vocab

GRAMMAR_VERSION = 2
SHAPES = ("cube", "ball", "cone")
COLORS = ("red", "blue", "green", "yellow")
SIZES = ("small", "big")
GRID = 4
QUESTION_TYPES = ("color", "shape", "position", "near")


def cell_name(row, col):
    return "r%dc%d" % (row, col)


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    size: str
    row: int
    col: int

    def __post_init__(self):
        if self.shape not in SHAPES or self.color not in COLORS or self.size not in SIZES:
            raise ValueError("unknown attribute on object: %r" % (self,))
        if not (0 <= self.row < GRID and 0 <= self.col < GRID):
            raise ValueError("object off the %dx%d grid" % (GRID, GRID))

    @property
    def cell(self):
        return cell_name(self.row, self.col)


@dataclass(frozen=True)
class Scene:
    objects: tuple

    def __post_init__(self):
        cells = [(o.row, o.col) for o in self.objects]
        if len(set(cells)) != len(cells):
            raise ValueError("two objects share a cell")
        if not self.objects:
            raise ValueError("empty scene")

    @property
    def k(self):
        return len(self.objects)

    def to_dict(self):
        return {
            "objects": [
                {"shape": o.shape, "color": o.color, "size": o.size, "row": o.row, "col": o.col}
                for o in self.objects
            ]
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(SceneObject(**o) for o in d["objects"]))


@dataclass(frozen=True)
class Sample:
    id: str
    scene: Scene
    question: str
    caption: str
    answer: str
    rationale: str

    def __post_init__(self):
        la = len(self.answer.split())
        lr = len(self.rationale.split())
        if not 4 <= la <= 8:
            raise ValueError("answer must be 4..8 tokens, got %d" % la)
        if not 6 <= lr <= 12:
            raise ValueError("rationale must be 6..12 tokens, got %d" % lr)

    def to_dict(self):
        return {
            "id": self.id,
            "scene": self.scene.to_dict(),
            "question": self.question,
            "caption": self.caption,
            "answer": self.answer,
            "rationale": self.rationale,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            id=d["id"],
            scene=Scene.from_dict(d["scene"]),
            question=d["question"],
            caption=d["caption"],
            answer=d["answer"],
            rationale=d["rationale"],
        )


# ---------------------------------------------------------------------------
# grammar
# ---------------------------------------------------------------------------

_FUNCTION_WORDS = (
    "what", "shape", "color", "is", "the", "where", "why", "near",
    "object", "a", "at", "and", "they", "are", "i", "see",
)


def grammar_vocabulary():
    """The closed set of tokens the grammar can emit, sorted."""
    cells = [cell_name(r, c) for r in range(GRID) for c in range(GRID)]
    return sorted(set(_FUNCTION_WORDS) | set(SHAPES) | set(COLORS) | set(SIZES) | set(cells))


def _vocab_hash():
    joined = ",".join(grammar_vocabulary()).encode()
    return hashlib.sha256(joined).hexdigest()[:16]


def _describe(o):
    return "a %s %s %s at %s" % (o.size, o.color, o.shape, o.cell)


def _rationale_single(o):
    return "i see a %s %s %s at %s" % (o.size, o.color, o.shape, o.cell)


def _unique_by(scene, key):
    hits = {}
    for o in scene.objects:
        hits.setdefault(key(o), []).append(o)
    return hits


def derive_answer(scene, question):
    """Recompute the answer from the scene and the question text alone.
    Raises if the question is malformed or its referent is not unique."""
    toks = question.split()
    if toks[:4] == ["what", "color", "is", "the"] and len(toks) == 5:
        shape = toks[4]
        hits = _unique_by(scene, lambda o: o.shape).get(shape, [])
        if len(hits) != 1:
            raise ValueError("shape %r is not a unique referent" % shape)
        return "the %s is %s" % (shape, hits[0].color)
    if toks[:4] == ["what", "shape", "is", "the"] and len(toks) == 6 and toks[5] == "object":
        color = toks[4]
        hits = _unique_by(scene, lambda o: o.color).get(color, [])
        if len(hits) != 1:
            raise ValueError("color %r is not a unique referent" % color)
        return "the %s object is a %s" % (color, hits[0].shape)
    if toks[:3] == ["where", "is", "the"] and len(toks) == 5:
        color, shape = toks[3], toks[4]
        hits = _unique_by(scene, lambda o: (o.color, o.shape)).get((color, shape), [])
        if len(hits) != 1:
            raise ValueError("descriptor %r %r is not a unique referent" % (color, shape))
        return "the %s %s is at %s" % (color, shape, hits[0].cell)
    if toks[:3] == ["why", "is", "the"] and len(toks) == 9 and toks[5] == "near" and toks[6] == "the":
        pairs = []
        for c, s in ((toks[3], toks[4]), (toks[7], toks[8])):
            hits = _unique_by(scene, lambda o: (o.color, o.shape)).get((c, s), [])
            if len(hits) != 1:
                raise ValueError("descriptor %r %r is not a unique referent" % (c, s))
            pairs.append(hits[0])
        # cells in row-major order, whichever way the question names the pair
        pairs.sort(key=lambda o: (o.row, o.col))
        return "they are at %s and %s" % (pairs[0].cell, pairs[1].cell)
    raise ValueError("unparseable question: %r" % question)


def _draw_cells(rng, k):
    flat = rng.choice(GRID * GRID, size=k, replace=False)
    return [(int(i) // GRID, int(i) % GRID) for i in flat]


def _build_scene(rng, k, qtype):
    """Scene construction guarantees the question's referent is unique:
    all (shape, color) combos are distinct, and the targeted attribute is
    additionally unique scene-wide where the template requires it."""
    combos = [(s, c) for s in SHAPES for c in COLORS]
    if qtype == "color":
        ts = SHAPES[rng.integers(len(SHAPES))]
        tc = COLORS[rng.integers(len(COLORS))]
        rest = [sc for sc in combos if sc[0] != ts]
        picked = [(ts, tc)] + [rest[int(i)] for i in rng.choice(len(rest), size=k - 1, replace=False)]
    elif qtype == "shape":
        ts = SHAPES[rng.integers(len(SHAPES))]
        tc = COLORS[rng.integers(len(COLORS))]
        rest = [sc for sc in combos if sc[1] != tc]
        picked = [(ts, tc)] + [rest[int(i)] for i in rng.choice(len(rest), size=k - 1, replace=False)]
    elif qtype == "near":
        # both descriptors must pick out their object scene-wide, so the two
        # crossed (shape, color) recombinations are banned from the rest
        t0, t1 = [combos[int(i)] for i in rng.choice(len(combos), size=2, replace=False)]
        banned = {t0, t1, (t0[0], t1[1]), (t1[0], t0[1])}
        rest = [sc for sc in combos if sc not in banned]
        picked = [t0, t1] + [rest[int(i)] for i in rng.choice(len(rest), size=k - 2, replace=False)]
    else:
        # position: distinct combos already make (color, shape) unique
        picked = [combos[int(i)] for i in rng.choice(len(combos), size=k, replace=False)]

    if qtype == "near":
        # targets occupy 4-adjacent cells; question asks why they are near
        r0, c0 = int(rng.integers(GRID)), int(rng.integers(GRID))
        moves = [(dr, dc) for dr, dc in ((0, 1), (0, -1), (1, 0), (-1, 0))
                 if 0 <= r0 + dr < GRID and 0 <= c0 + dc < GRID]
        dr, dc = moves[rng.integers(len(moves))]
        cells = [(r0, c0), (r0 + dr, c0 + dc)]
        others = [(r, c) for r in range(GRID) for c in range(GRID) if (r, c) not in cells]
        picks = rng.choice(len(others), size=k - 2, replace=False)
        cells += [others[int(i)] for i in picks]
    else:
        cells = _draw_cells(rng, k)

    objs = []
    for (shape, color), (row, col) in zip(picked, cells):
        size = SIZES[rng.integers(len(SIZES))]
        objs.append(SceneObject(shape=shape, color=color, size=size, row=row, col=col))
    # targets are objs[0] (and objs[1] for near); shuffle so region order
    # never leaks which row holds the referent
    order = rng.permutation(len(objs))
    scene = Scene(tuple(objs[int(i)] for i in order))
    targets = tuple(int(np.where(order == t)[0][0]) for t in range(2 if qtype == "near" else 1))
    return scene, targets


def _gen_sample(rng, idx, k):
    qtype = QUESTION_TYPES[rng.integers(len(QUESTION_TYPES))]
    scene, targets = _build_scene(rng, k, qtype)
    t0 = scene.objects[targets[0]]
    if qtype == "color":
        question = "what color is the %s" % t0.shape
        caption = _describe(t0)
        rationale = _rationale_single(t0)
    elif qtype == "shape":
        question = "what shape is the %s object" % t0.color
        caption = _describe(t0)
        rationale = _rationale_single(t0)
    elif qtype == "position":
        question = "where is the %s %s" % (t0.color, t0.shape)
        caption = _describe(t0)
        rationale = _rationale_single(t0)
    else:
        t1 = scene.objects[targets[1]]
        # the question names the pair in draw order; caption and rationale
        # present it row-major, matching the canonical answer
        question = "why is the %s %s near the %s %s" % (t0.color, t0.shape, t1.color, t1.shape)
        first, second = sorted((t0, t1), key=lambda o: (o.row, o.col))
        caption = "%s and %s" % (_describe(first), _describe(second))
        rationale = "%s %s is at %s and %s %s is at %s" % (
            first.color, first.shape, first.cell, second.color, second.shape, second.cell
        )
    answer = derive_answer(scene, question)
    return Sample(
        id="s%06d" % idx,
        scene=scene,
        question=question,
        caption=caption,
        answer=answer,
        rationale=rationale,
    )


# ---------------------------------------------------------------------------
# dataset container
# ---------------------------------------------------------------------------

@dataclass
class DatasetFile:
    header: dict
    samples: list

    def dumps(self):
        lines = [json.dumps(self.header, sort_keys=True, separators=(",", ":"))]
        lines += [
            json.dumps(s.to_dict(), sort_keys=True, separators=(",", ":")) for s in self.samples
        ]
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())
        return path

    @classmethod
    def loads(cls, text):
        lines = [ln for ln in text.split("\n") if ln]
        header = json.loads(lines[0])
        samples = [Sample.from_dict(json.loads(ln)) for ln in lines[1:]]
        return cls(header=header, samples=samples)

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            return cls.loads(fh.read())

    def __len__(self):
        return len(self.samples)


def generate_dataset(seed, n, k=6):
    if n < 1:
        raise ValueError("n must be >= 1")
    # k-1 distractors must avoid the target's shape (or color) while keeping
    # every (shape, color) combo distinct: 12 combos minus one full shape row
    # leaves 8, which caps k at 9
    if not 2 <= k <= 9:
        raise ValueError("k must be in 2..9, got %d" % k)
    rng = np.random.default_rng(seed)
    samples = [_gen_sample(rng, i, k) for i in range(n)]
    header = {
        "seed": int(seed),
        "n": int(n),
        "k": int(k),
        "grammar_version": GRAMMAR_VERSION,
        "vocab_hash": _vocab_hash(),
    }
    return DatasetFile(header=header, samples=samples)


def build_vocab(samples):
    texts = []
    for s in samples:
        texts += [s.question, s.caption, s.answer, s.rationale]
    return Vocab.from_corpus(texts)


# ---------------------------------------------------------------------------
# encodings
# ---------------------------------------------------------------------------

def _bag_embedding(text, dim, seed):
    total = np.zeros(dim)
    for tok in text.split():
        total += hash_vector("tok:" + tok, dim, seed)
    norm = np.linalg.norm(total)
    if norm == 0.0:
        raise ValueError("zero-norm bag embedding for %r" % text)
    return total / norm


def region_vector(obj, dim, seed):
    """Sum of the object's four attribute codes; informative and injective in
    practice under seeded hashes."""
    return (
        hash_vector("shape:" + obj.shape, dim, seed)
        + hash_vector("color:" + obj.color, dim, seed)
        + hash_vector("size:" + obj.size, dim, seed)
        + hash_vector("pos:" + obj.cell, dim, seed)
    )


def encode_sample(sample, k=6, d_dim=16, b_dim=32, seed=0):
    if sample.scene.k != k:
        raise ValueError("scene has %d objects, expected k=%d" % (sample.scene.k, k))
    v = np.stack([region_vector(o, d_dim, seed) for o in sample.scene.objects])
    q = _bag_embedding(sample.question, b_dim, seed)
    c = _bag_embedding(sample.caption, b_dim, seed)
    return MultimodalInput(V=v, Q=q, C=c, sample_id=sample.id)


def make_training_set(samples, vocab, k=6, d_dim=16, b_dim=32, seed=0,
                      l_a_max=10, l_r_max=16):
    """(inputs, gold answer, gold rationale) triples ready for the trainer."""
    out = []
    for s in samples:
        out.append((
            encode_sample(s, k=k, d_dim=d_dim, b_dim=b_dim, seed=seed),
            TokenSeq.from_text(vocab, s.answer, max_len=l_a_max),
            TokenSeq.from_text(vocab, s.rationale, max_len=l_r_max),
        ))
    return out


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def split(dataset, fractions, seed):
    """Seeded permutation split into train/val/test; disjoint, union-complete."""
    samples = dataset.samples if isinstance(dataset, DatasetFile) else list(dataset)
    if len(fractions) != 3:
        raise ValueError("need exactly three fractions")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    n = len(samples)
    n_train = int(fractions[0] * n)
    n_val = int(fractions[1] * n)
    sizes = {"train": n_train, "val": n_val, "test": n - n_train - n_val}
    for name, size in sizes.items():
        if size == 0 and fractions[("train", "val", "test").index(name)] > 0:
            raise ValueError("split %r would be empty at n=%d" % (name, n))
    order = np.random.default_rng(seed).permutation(n)
    train_ids = order[:n_train]
    val_ids = order[n_train:n_train + n_val]
    test_ids = order[n_train + n_val:]
    return {
        "train": [samples[int(i)] for i in train_ids],
        "val": [samples[int(i)] for i in val_ids],
        "test": [samples[int(i)] for i in test_ids],
    }
