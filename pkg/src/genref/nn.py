"""Neural building blocks: vocabulary, token sequences, embeddings, the LSTM
cell, dropout, and masked cross-entropy."""

import numpy as np

from .autodiff import Tensor, concat, gold_log_probs, lstm_gates, matmul, take_rows

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")


class Vocab:
    """Bijective token <-> id map with four reserved sentinels at ids 0..3."""

    def __init__(self, tokens):
        toks = [t for t in tokens if t not in RESERVED]
        if len(set(toks)) != len(toks):
            raise ValueError("duplicate tokens")
        if not toks:
            raise ValueError("vocabulary needs at least one real token")
        self._tokens = list(RESERVED) + list(toks)
        self._ids = {t: i for i, t in enumerate(self._tokens)}

    @classmethod
    def from_corpus(cls, texts):
        seen = set()
        for text in texts:
            seen.update(text.split())
        return cls(sorted(seen))

    def id_of(self, token):
        return self._ids.get(token, UNK)

    def token_of(self, idx):
        return self._tokens[idx]

    def encode(self, text):
        return [self.id_of(t) for t in text.split()]

    def decode(self, ids):
        return " ".join(self._tokens[i] for i in ids if i not in (PAD, BOS, EOS))

    def __len__(self):
        return len(self._tokens)

    def __contains__(self, token):
        return token in self._ids

    def tokens(self):
        return list(self._tokens)


class TokenSeq:
    """Vocabulary ids ending in EOS, PAD-extended on the right.

    true_length counts the non-PAD prefix, EOS included.
    """

    def __init__(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise ValueError("TokenSeq needs a nonempty 1-D id array")
        nonpad = np.nonzero(ids != PAD)[0]
        if nonpad.size == 0:
            raise ValueError("TokenSeq cannot be all PAD")
        tl = int(nonpad[-1]) + 1
        if (ids[:tl] == PAD).any():
            raise ValueError("PAD must only appear as a suffix")
        if ids[tl - 1] != EOS:
            raise ValueError("last non-PAD token must be EOS")
        self.ids = ids
        self.true_length = tl

    @classmethod
    def from_generated(cls, raw_ids, pad_to=None):
        """Normalize a raw greedy emission stream into a valid sequence: take
        tokens before the first EOS, drop non-lexical sentinel emissions, and
        close with EOS (forced when the stream ran to its length cap)."""
        body = []
        for t in np.asarray(raw_ids, dtype=np.int64):
            if t == EOS:
                break
            if t in (PAD, BOS, UNK):
                continue
            body.append(int(t))
        if pad_to is not None and len(body) > pad_to - 1:
            body = body[: pad_to - 1]
        ids = body + [EOS]
        if pad_to is not None:
            ids = ids + [PAD] * (pad_to - len(ids))
        return cls(np.array(ids, dtype=np.int64))

    @classmethod
    def from_text(cls, vocab, text, max_len=None):
        body = vocab.encode(text) + [EOS]
        if max_len is not None:
            if len(body) > max_len:
                raise ValueError("sequence of length %d exceeds max_len %d" % (len(body), max_len))
            body = body + [PAD] * (max_len - len(body))
        return cls(np.array(body, dtype=np.int64))

    def padded(self, length):
        if length < self.true_length:
            raise ValueError("cannot pad to below true_length")
        out = np.full(length, PAD, dtype=np.int64)
        out[: self.true_length] = self.ids[: self.true_length]
        return out

    def body_ids(self):
        """Ids before the EOS (the actual words)."""
        return self.ids[: self.true_length - 1]

    def text(self, vocab):
        return vocab.decode(self.ids[: self.true_length])

    def __eq__(self, other):
        return (
            isinstance(other, TokenSeq)
            and self.true_length == other.true_length
            and np.array_equal(self.ids[: self.true_length], other.ids[: other.true_length])
        )

    def __len__(self):
        return self.true_length

    def __repr__(self):
        return "TokenSeq(%s)" % self.ids[: self.true_length].tolist()


class EmbeddingTable:
    """Shared word embedding matrix, one row per vocabulary id."""

    def __init__(self, n_vocab, dim, rng):
        self.W_e = Tensor(xavier_uniform(rng, n_vocab, dim), name="W_e")
        self.dim = dim

    def lookup(self, ids):
        """Batched row lookup; ids is an int array (N,) -> (N, E) Tensor."""
        return take_rows(self.W_e, ids)


def embed(table, token_id):
    """Single-token embedding row as a (E,) Tensor node."""
    n = table.W_e.data.shape[0]
    if not (0 <= int(token_id) < n):
        raise IndexError("token id %d out of range [0, %d)" % (token_id, n))
    return take_rows(table.W_e, np.array([int(token_id)])).reshape((table.dim,))


def xavier_uniform(rng, fan_in, fan_out, shape=None):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    if shape is None:
        shape = (fan_in, fan_out)
    return rng.uniform(-limit, limit, size=shape)


class LstmParams:
    """Gated-cell parameters stored fused as (In+H, 4H) with gate order
    [input | forget | cell | output]; per-gate views exposed for inspection.
    Forget-gate bias starts at +1 so early steps keep their memory."""

    def __init__(self, in_size, hidden, rng, name="lstm"):
        self.in_size = in_size
        self.hidden = hidden
        w = np.empty((in_size + hidden, 4 * hidden))
        for g in range(4):
            w[:, g * hidden:(g + 1) * hidden] = xavier_uniform(
                rng, in_size + hidden, hidden
            )
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0
        self.W = Tensor(w, name=name + ".W")
        self.b = Tensor(b, name=name + ".b")

    def _gate(self, idx):
        h = self.hidden
        return self.W.data[:, idx * h:(idx + 1) * h], self.b.data[idx * h:(idx + 1) * h]

    @property
    def input_gate(self):
        return self._gate(0)

    @property
    def forget_gate(self):
        return self._gate(1)

    @property
    def cell_gate(self):
        return self._gate(2)

    @property
    def output_gate(self):
        return self._gate(3)

    def parameters(self):
        return [self.W, self.b]


def lstm_cell_step(x, h, c, p):
    """One gated-cell step. Accepts single vectors or (N, ·) batches."""
    single = x.ndim == 1
    if single:
        x, h, c = x.reshape((1, -1)), h.reshape((1, -1)), c.reshape((1, -1))
    if x.shape[1] != p.in_size or h.shape[1] != p.hidden or c.shape[1] != p.hidden:
        raise ValueError(
            "lstm_cell_step: got x %s h %s c %s for in_size=%d hidden=%d"
            % (x.shape, h.shape, c.shape, p.in_size, p.hidden)
        )
    z = matmul(concat([x, h], axis=1), p.W) + p.b
    h2, c2 = lstm_gates(z, c)
    if single:
        return h2.reshape((p.hidden,)), c2.reshape((p.hidden,))
    return h2, c2


def dropout(x, p, mode, rng):
    """Inverted dropout. p=0 or eval mode is the identity and draws nothing
    from rng, so turning it off cannot shift downstream random streams."""
    if not (0.0 <= p < 1.0):
        raise ValueError("dropout probability must lie in [0, 1)")
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    if mode == "eval" or p == 0.0:
        return x
    mask = (rng.random(x.shape) >= p).astype(np.float64) / (1.0 - p)
    return x.mul_const(mask)


def masked_cross_entropy(step_logits, golds, max_len=None):
    """Sum of negative gold log-probabilities over true (non-PAD) positions.

    step_logits: list of (N, |V|) Tensors, one per time step (or (|V|,) for a
    single sample). golds: TokenSeq or list of TokenSeq, one per batch row.
    Returns (loss, per_step_logps): loss is the batch mean of per-sample raw
    sums; per_step_logps are masked (N,) Tensors, exactly 0 at PAD positions.
    """
    if isinstance(golds, TokenSeq):
        golds = [golds]
    steps = len(step_logits)
    n = len(golds)
    if any(g.true_length > steps for g in golds):
        raise ValueError("gold true_length exceeds the number of logit steps")
    targets = np.stack([g.padded(steps) for g in golds])
    mask = np.zeros((n, steps))
    for r, g in enumerate(golds):
        mask[r, : g.true_length] = 1.0
    per_step = []
    total = None
    for t in range(steps):
        lt = step_logits[t]
        if lt.ndim == 1:
            lt = lt.reshape((1, -1))
        if lt.shape[0] != n:
            raise ValueError("logit batch size %d != gold count %d" % (lt.shape[0], n))
        lp = gold_log_probs(lt, targets[:, t]).mul_const(mask[:, t])
        per_step.append(lp)
        total = lp if total is None else total + lp
    loss = total.scale(-1.0).mean()
    return loss, per_step
