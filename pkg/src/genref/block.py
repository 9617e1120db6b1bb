"""One generation block: an attention LSTM stacked under a language LSTM with
soft spatial attention over region features, unrollable teacher-forced or
greedy. Four (or two, or six) of these chain into the full model."""

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat, matmul, no_grad, region_mix, where_mask
from .nn import BOS, EOS, PAD, LstmParams, TokenSeq, dropout, lstm_cell_step, xavier_uniform


class AttentionParams:
    """Region-scoring MLP, one shared instance across every block."""

    def __init__(self, d_dim, h_dim, a_dim, rng):
        self.d_dim, self.h_dim, self.a_dim = d_dim, h_dim, a_dim
        self.W_av = Tensor(xavier_uniform(rng, d_dim, a_dim), name="attn.W_av")
        self.W_ah = Tensor(xavier_uniform(rng, h_dim, a_dim), name="attn.W_ah")
        self.W_ay = Tensor(xavier_uniform(rng, a_dim, 1), name="attn.W_ay")

    def parameters(self):
        return [self.W_av, self.W_ah, self.W_ay]


class OutputHead:
    """Per-block projection from the language LSTM state to vocabulary logits."""

    def __init__(self, h_dim, n_vocab, rng, name):
        self.W_lh = Tensor(xavier_uniform(rng, h_dim, n_vocab), name=name + ".W_lh")
        self.b_lh = Tensor(np.zeros(n_vocab), name=name + ".b_lh")

    def parameters(self):
        return [self.W_lh, self.b_lh]


@dataclass
class BlockState:
    h_a: Tensor
    c_a: Tensor
    h_l: Tensor
    c_l: Tensor

    @classmethod
    def zeros(cls, n, h_dim):
        return cls(*(Tensor(np.zeros((n, h_dim)), requires_grad=False) for _ in range(4)))


@dataclass
class ModuleSummary:
    """Fixed-size hand-off between consecutive blocks: the producing block's
    final attention and language hidden states, concatenated. Zeros for the
    first block."""

    h_p: Tensor

    @classmethod
    def zeros(cls, n, h_dim):
        return cls(Tensor(np.zeros((n, 2 * h_dim)), requires_grad=False))


@dataclass
class BlockContext:
    """Per-batch constants every step consumes."""

    F: Tensor  # (N, D+L)
    T: Tensor  # (N, L)
    V: Tensor  # (N, k, D)
    has_image: bool
    # regions premultiplied by the shared attention map; step-invariant and
    # block-invariant, so computed once per forward
    proj_V: Tensor = None


def attention_step(h_a, v, params, proj_v=None):
    """Soft attention: scores y_i = W_ay^T tanh(W_av^T v_i + W_ah^T h_a),
    alpha = softmax(y), V-hat = sum_i alpha_i v_i.

    h_a: (H,) or (N, H); v: (k, D) or (N, k, D). proj_v, when given, must be
    matmul(v, params.W_av). Returns (alpha, V-hat).
    """
    single = h_a.ndim == 1
    if single:
        h_a = h_a.reshape((1, -1))
        v = v.reshape((1,) + tuple(v.shape))
        proj_v = None
    n, k = v.shape[0], v.shape[1]
    if k < 1:
        raise ValueError("attention over an empty region set")
    if proj_v is None:
        proj_v = matmul(v, params.W_av)
    proj_h = matmul(h_a, params.W_ah).reshape((n, 1, params.a_dim))
    scores = matmul((proj_v + proj_h).tanh(), params.W_ay).reshape((n, k))
    alpha = scores.softmax()
    v_hat = region_mix(alpha, v)
    if single:
        return alpha.reshape((k,)), v_hat.reshape((v.shape[2],))
    return alpha, v_hat


class Block:
    """Parameters for one generation block. The embedding table and attention
    MLP are shared across blocks and passed in; the two LSTMs and the output
    head are owned."""

    def __init__(self, name, h_dim, e_dim, d_dim, l_dim, n_vocab, embedding, attn, rng):
        self.name = name
        self.h_dim = h_dim
        self.embedding = embedding
        self.attn = attn
        f_dim = d_dim + l_dim
        self.att_lstm = LstmParams(2 * h_dim + h_dim + f_dim + e_dim, h_dim, rng, name + ".att")
        self.lang_lstm = LstmParams(2 * h_dim + d_dim + h_dim + l_dim, h_dim, rng, name + ".lang")
        self.head = OutputHead(h_dim, n_vocab, rng, name)
        self.d_dim = d_dim

    def parameters(self):
        return (
            self.att_lstm.parameters() + self.lang_lstm.parameters() + self.head.parameters()
        )

    def step(self, state, h_p, ctx, token_ids, mode="eval", drop_p=0.0, rng=None):
        """Advance one time step.

        token_ids: (N,) int array of input tokens. Returns (state', logits,
        alpha) where alpha is a plain (N, k) array (uniform when the image
        modality is off).
        """
        n = token_ids.shape[0]
        pi = self.embedding.lookup(token_ids)
        if mode == "train" and drop_p > 0.0:
            pi = dropout(pi, drop_p, "train", rng)
        x_a = concat([h_p.h_p, state.h_l, ctx.F, pi], axis=1)
        h_a2, c_a2 = lstm_cell_step(x_a, state.h_a, state.c_a, self.att_lstm)
        k = ctx.V.shape[1]
        if ctx.has_image:
            alpha, v_hat = attention_step(h_a2, ctx.V, self.attn, ctx.proj_V)
            alpha_out = alpha.data
        else:
            # disabled modality: no attention, attended vector pinned to zero
            alpha_out = np.full((n, k), 1.0 / k)
            v_hat = Tensor(np.zeros((n, self.d_dim)), requires_grad=False)
        x_l = concat([h_p.h_p, v_hat, h_a2, ctx.T], axis=1)
        h_l2, c_l2 = lstm_cell_step(x_l, state.h_l, state.c_l, self.lang_lstm)
        h_out = h_l2
        if mode == "train" and drop_p > 0.0:
            h_out = dropout(h_out, drop_p, "train", rng)
        logits = matmul(h_out, self.head.W_lh) + self.head.b_lh
        return BlockState(h_a2, c_a2, h_l2, c_l2), logits, alpha_out

    def _freeze(self, new, old, active_col):
        """Rows whose sequence already ended keep their previous state, so the
        final summary is each row's own end-of-sequence state even in a batch."""
        if np.all(active_col == 1.0):
            return new
        return BlockState(
            where_mask(active_col, new.h_a, old.h_a),
            where_mask(active_col, new.c_a, old.c_a),
            where_mask(active_col, new.h_l, old.h_l),
            where_mask(active_col, new.c_l, old.c_l),
        )

    def unroll_teacher(self, h_p, ctx, golds, mode="train", drop_p=0.0, rng=None):
        """Teacher-forced unroll over a batch of gold sequences.

        Step t consumes gold token t-1 (BOS at t=0) and should predict gold
        token t; runs max(true_length) steps with per-row freezing. Returns
        (logits_seq, summary, attn, steps).
        """
        n = len(golds)
        steps = max(g.true_length for g in golds)
        targets = np.stack([g.padded(steps) for g in golds])
        lengths = np.array([g.true_length for g in golds])
        uniform = lengths.min() == steps
        state = BlockState.zeros(n, self.h_dim)
        logits_seq = []
        attn = np.zeros((n, steps, ctx.V.shape[1]))
        for t in range(steps):
            token_ids = np.full(n, BOS, dtype=np.int64) if t == 0 else targets[:, t - 1]
            new_state, logits, alpha = self.step(state, h_p, ctx, token_ids, mode, drop_p, rng)
            if uniform:
                state = new_state
                attn[:, t, :] = alpha
            else:
                active = (t < lengths).astype(np.float64)[:, None]
                state = self._freeze(new_state, state, active)
                attn[:, t, :] = alpha * active
            logits_seq.append(logits)
        summary = ModuleSummary(concat([state.h_a, state.h_l], axis=1))
        return logits_seq, summary, attn, steps

    def unroll_greedy(self, h_p, ctx, max_len):
        """Greedy decode: feed back the argmax (ties to the lowest id), stop a
        row at its first EOS, force EOS at max_len. No randomness. Returns
        (seqs, raw, summary, attn, steps)."""
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        n = ctx.V.shape[0]
        with no_grad():
            state = BlockState.zeros(n, self.h_dim)
            raw = np.full((n, max_len), PAD, dtype=np.int64)
            alive = np.ones(n, dtype=bool)
            attn = np.zeros((n, max_len, ctx.V.shape[1]))
            prev = np.full(n, BOS, dtype=np.int64)
            steps = 0
            for t in range(max_len):
                new_state, logits, alpha = self.step(state, h_p, ctx, prev, "eval")
                steps += 1
                picks = np.argmax(logits.data, axis=1)
                raw[alive, t] = picks[alive]
                attn[:, t, :] = alpha * alive[:, None].astype(np.float64)
                active_col = alive.astype(np.float64)[:, None]
                state = self._freeze(new_state, state, active_col)
                alive = alive & (raw[:, t] != EOS)
                prev = raw[:, t].copy()
                if not alive.any():
                    break
            summary = ModuleSummary(concat([state.h_a, state.h_l], axis=1))
        seqs = [TokenSeq.from_generated(raw[r], pad_to=max_len) for r in range(n)]
        return seqs, raw, summary, attn, steps
