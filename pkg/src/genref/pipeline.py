"""The full generation-refinement model: an answer generator and rationale
generator, followed by zero, one, or two refinement rounds, all sharing one
embedding table and one attention MLP. Training is teacher-forced with a sum
of per-block cross-entropies; inference chains greedy unrolls through each
block's summary."""

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, matmul, no_grad
from .block import AttentionParams, Block, BlockContext, ModuleSummary
from .encoder import EncoderParams, build_common_input, fuse_question_caption, mean_pool_regions
from .nn import EmbeddingTable, TokenSeq, masked_cross_entropy

VARIANTS = ("qic", "qi", "qc")
BLOCK_NAMES = ("ag", "rg", "ar", "rr", "ar2", "rr2")


@dataclass
class PipelineConfig:
    vocab_size: int
    n_refine: int = 1
    input_variant: str = "qic"
    h_dim: int = 64
    a_dim: int = 32
    e_dim: int = 32
    d_dim: int = 16
    b_dim: int = 32
    l_dim: int = 24
    k_regions: int = 6
    l_a_max: int = 10
    l_r_max: int = 16
    dropout_p: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_refine not in (0, 1, 2):
            raise ValueError("n_refine must be 0, 1, or 2")
        if self.input_variant not in VARIANTS:
            raise ValueError("input_variant must be one of %s" % (VARIANTS,))
        if self.vocab_size < 5:
            raise ValueError("vocab_size must be >= 5")
        for name in ("h_dim", "a_dim", "e_dim", "d_dim", "b_dim", "l_dim", "k_regions",
                     "l_a_max", "l_r_max"):
            if getattr(self, name) < 1:
                raise ValueError("%s must be positive" % name)
        if not (0.0 <= self.dropout_p < 1.0):
            raise ValueError("dropout_p must lie in [0, 1)")

    @property
    def n_blocks(self):
        return 2 + 2 * self.n_refine

    @property
    def has_image(self):
        return self.input_variant in ("qic", "qi")

    @property
    def has_caption(self):
        return self.input_variant in ("qic", "qc")

    def to_dict(self):
        return {
            "vocab_size": self.vocab_size, "n_refine": self.n_refine,
            "input_variant": self.input_variant, "h_dim": self.h_dim,
            "a_dim": self.a_dim, "e_dim": self.e_dim, "d_dim": self.d_dim,
            "b_dim": self.b_dim, "l_dim": self.l_dim, "k_regions": self.k_regions,
            "l_a_max": self.l_a_max, "l_r_max": self.l_r_max,
            "dropout_p": self.dropout_p, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def configure_variant(n_refine, input_variant, vocab_size, **overrides):
    """Config factory for the ablation grid."""
    return PipelineConfig(
        vocab_size=vocab_size, n_refine=n_refine, input_variant=input_variant, **overrides
    )


@dataclass
class LossBreakdown:
    terms: dict            # block name -> float
    total: float
    tensor: Tensor         # differentiable total
    per_sample_loss: np.ndarray    # (N,)
    per_sample_factors: dict       # block name -> (N,) log-likelihood factors
    steps: int             # teacher-forced block_step count for the batch


@dataclass
class GenerationOutput:
    sequences: dict        # block name -> TokenSeq
    attention: dict        # block name -> (steps, k) array
    block_order: tuple

    @property
    def final_answer(self):
        answers = [n for n in self.block_order if BLOCK_NAMES.index(n) % 2 == 0]
        return self.sequences[answers[-1]]

    @property
    def final_rationale(self):
        rats = [n for n in self.block_order if BLOCK_NAMES.index(n) % 2 == 1]
        return self.sequences[rats[-1]]


class Pipeline:
    def __init__(self, config):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.embedding = EmbeddingTable(config.vocab_size, config.e_dim, rng)
        self.attn = AttentionParams(config.d_dim, config.h_dim, config.a_dim, rng)
        self.encoder = EncoderParams(config.b_dim, config.l_dim, rng)
        self.blocks = [
            Block(name, config.h_dim, config.e_dim, config.d_dim, config.l_dim,
                  config.vocab_size, self.embedding, self.attn, rng)
            for name in BLOCK_NAMES[: config.n_blocks]
        ]
        # dropout mask stream, independent of init draws
        self._drop_rng = np.random.default_rng((config.seed + 1) * 2654435761 % 2**63)

    # -- parameter registry --------------------------------------------------

    def parameters(self):
        """(name, Tensor) pairs in fixed declaration order; checkpoint layout
        and optimizer state follow this order exactly."""
        out = [("embedding.W_e", self.embedding.W_e)]
        out += [("attn.W_av", self.attn.W_av), ("attn.W_ah", self.attn.W_ah),
                ("attn.W_ay", self.attn.W_ay)]
        enc = self.encoder
        out += [("enc.W_q", enc.W_q), ("enc.W_c", enc.W_c), ("enc.W_t", enc.W_t),
                ("enc.W_g1", enc.W_g1), ("enc.b_g1", enc.b_g1),
                ("enc.W_g2", enc.W_g2), ("enc.b_g2", enc.b_g2)]
        for b in self.blocks:
            out += [(b.name + ".att.W", b.att_lstm.W), (b.name + ".att.b", b.att_lstm.b),
                    (b.name + ".lang.W", b.lang_lstm.W), (b.name + ".lang.b", b.lang_lstm.b),
                    (b.name + ".W_lh", b.head.W_lh), (b.name + ".b_lh", b.head.b_lh)]
        return out

    def param_count(self):
        return sum(t.size for _, t in self.parameters())

    # -- encoding -------------------------------------------------------------

    def make_input_tensors(self, batch):
        if not batch:
            raise ValueError("empty batch")
        cfg = self.config
        for m in batch:
            if m.V.shape != (cfg.k_regions, cfg.d_dim):
                raise ValueError("V shape %s != (%d, %d)" % (m.V.shape, cfg.k_regions, cfg.d_dim))
            if m.Q.shape != (cfg.b_dim,) or m.C.shape != (cfg.b_dim,):
                raise ValueError("Q/C width mismatch")
        return {
            "V": Tensor(np.stack([m.V for m in batch]), name="input.V"),
            "Q": Tensor(np.stack([m.Q for m in batch]), name="input.Q"),
            "C": Tensor(np.stack([m.C for m in batch]), name="input.C"),
        }

    def encode(self, tens):
        """Variant-gated fusion into the per-batch block context. A disabled
        modality never enters the graph, so its gradients are identically 0."""
        cfg = self.config
        n = tens["Q"].shape[0]
        if cfg.has_image:
            v_used = tens["V"]
            v_bar = mean_pool_regions(v_used)
        else:
            v_used = Tensor(np.zeros((n, cfg.k_regions, cfg.d_dim)), requires_grad=False)
            v_bar = Tensor(np.zeros((n, cfg.d_dim)), requires_grad=False)
        c_used = tens["C"] if cfg.has_caption else Tensor(
            np.zeros((n, cfg.b_dim)), requires_grad=False
        )
        t = fuse_question_caption(tens["Q"], c_used, self.encoder)
        f = build_common_input(v_bar, t)
        proj_v = matmul(v_used, self.attn.W_av) if cfg.has_image else None
        return BlockContext(F=f, T=t, V=v_used, has_image=cfg.has_image, proj_V=proj_v)

    # -- training forward ------------------------------------------------------

    def forward_from_tensors(self, tens, golds_a, golds_r, mode="train"):
        cfg = self.config
        n = tens["Q"].shape[0]
        if len(golds_a) != n or len(golds_r) != n:
            raise ValueError("gold count mismatch with batch size")
        ctx = self.encode(tens)
        h_p = ModuleSummary.zeros(n, cfg.h_dim)
        terms, factors = {}, {}
        total = None
        steps_total = 0
        drop = cfg.dropout_p if mode == "train" else 0.0
        per_sample = np.zeros(n)
        for i, block in enumerate(self.blocks):
            golds = golds_a if i % 2 == 0 else golds_r
            logits_seq, summary, _, steps = block.unroll_teacher(
                h_p, ctx, golds, mode=mode, drop_p=drop, rng=self._drop_rng
            )
            loss_i, per_step = masked_cross_entropy(logits_seq, golds)
            with no_grad():
                fac = np.zeros(n)
                for lp in per_step:
                    fac += lp.data
            factors[block.name] = fac
            per_sample -= fac
            terms[block.name] = float(loss_i.data)
            total = loss_i if total is None else total + loss_i
            steps_total += steps
            h_p = summary
        return LossBreakdown(
            terms=terms, total=float(total.data), tensor=total,
            per_sample_loss=per_sample, per_sample_factors=factors, steps=steps_total,
        )

    def forward_train(self, batch, golds_a, golds_r, mode="train"):
        return self.forward_from_tensors(self.make_input_tensors(batch), golds_a, golds_r, mode)

    def joint_log_likelihood(self, inp, gold_a, gold_r):
        """Per-block log-likelihood factors for one sample and their sum.
        The sum equals minus the per-sample loss by construction; returning
        both lets callers verify the factorization numerically."""
        with no_grad():
            lb = self.forward_train([inp], [gold_a], [gold_r], mode="eval")
        facs = {name: float(arr[0]) for name, arr in lb.per_sample_factors.items()}
        total = sum(facs.values())
        return {"factors": facs, "sum": total, "loss": float(lb.per_sample_loss[0])}

    # -- inference --------------------------------------------------------------

    def generate(self, batch, max_lens=None):
        """Greedy generation for a batch; each block consumes the previous
        block's summary. Returns one GenerationOutput per input."""
        cfg = self.config
        la, lr = max_lens if max_lens is not None else (cfg.l_a_max, cfg.l_r_max)
        with no_grad():
            tens = self.make_input_tensors(batch)
            ctx = self.encode(tens)
            n = len(batch)
            h_p = ModuleSummary.zeros(n, cfg.h_dim)
            seqs_by_block, attn_by_block = {}, {}
            for i, block in enumerate(self.blocks):
                cap = la if i % 2 == 0 else lr
                seqs, _, summary, attn, _ = block.unroll_greedy(h_p, ctx, cap)
                seqs_by_block[block.name] = seqs
                attn_by_block[block.name] = attn
                h_p = summary
        order = tuple(b.name for b in self.blocks)
        return [
            GenerationOutput(
                sequences={name: seqs_by_block[name][r] for name in order},
                attention={name: attn_by_block[name][r] for name in order},
                block_order=order,
            )
            for r in range(n)
        ]
