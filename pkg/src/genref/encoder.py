"""Fusion of region features, question, and caption into the text feature T
and the common input F fed to every generation block."""

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, concat, matmul
from .nn import xavier_uniform


@dataclass
class MultimodalInput:
    """One sample's raw features. A disabled modality is all zeros with its
    presence flag false."""

    V: np.ndarray  # (k, D) region features
    Q: np.ndarray  # (B,) question embedding
    C: np.ndarray  # (B,) caption embedding
    has_image: bool = True
    has_caption: bool = True
    sample_id: str = ""

    def __post_init__(self):
        self.V = np.asarray(self.V, dtype=np.float64)
        self.Q = np.asarray(self.Q, dtype=np.float64)
        self.C = np.asarray(self.C, dtype=np.float64)
        if self.V.ndim != 2 or self.V.shape[0] < 1:
            raise ValueError("V must be (k, D) with k >= 1")
        if self.Q.ndim != 1 or self.C.ndim != 1:
            raise ValueError("Q and C must be vectors")
        for a in (self.V, self.Q, self.C):
            if not np.isfinite(a).all():
                raise ValueError("non-finite feature values")


class EncoderParams:
    """Projections for T = g(W_t^T(tanh(W_q^T Q) + tanh(W_c^T C))) where g is
    a two-layer map with a final tanh; both layers emit L features."""

    def __init__(self, b_dim, l_dim, rng):
        self.b_dim = b_dim
        self.l_dim = l_dim
        self.W_q = Tensor(xavier_uniform(rng, b_dim, l_dim), name="enc.W_q")
        self.W_c = Tensor(xavier_uniform(rng, b_dim, l_dim), name="enc.W_c")
        self.W_t = Tensor(xavier_uniform(rng, 2 * l_dim, l_dim), name="enc.W_t")
        self.W_g1 = Tensor(xavier_uniform(rng, l_dim, l_dim), name="enc.W_g1")
        self.b_g1 = Tensor(np.zeros(l_dim), name="enc.b_g1")
        self.W_g2 = Tensor(xavier_uniform(rng, l_dim, l_dim), name="enc.W_g2")
        self.b_g2 = Tensor(np.zeros(l_dim), name="enc.b_g2")

    def parameters(self):
        return [self.W_q, self.W_c, self.W_t, self.W_g1, self.b_g1, self.W_g2, self.b_g2]


def fuse_question_caption(q, c, params):
    """Text fusion. q, c: (B,) or (N, B) Tensors -> (L,) or (N, L)."""
    single = q.ndim == 1
    if single:
        q, c = q.reshape((1, -1)), c.reshape((1, -1))
    if q.shape[1] != params.b_dim or c.shape[1] != params.b_dim:
        raise ValueError(
            "fuse: got Q %s C %s, expected width %d" % (q.shape, c.shape, params.b_dim)
        )
    u = concat([matmul(q, params.W_q).tanh(), matmul(c, params.W_c).tanh()], axis=1)
    x = matmul(u, params.W_t)
    hidden = (matmul(x, params.W_g1) + params.b_g1).relu()
    t = (matmul(hidden, params.W_g2) + params.b_g2).tanh()
    return t.reshape((params.l_dim,)) if single else t


def mean_pool_regions(v):
    """Arithmetic mean over the region axis. (k, D) -> (D,) or (N, k, D) -> (N, D)."""
    if v.ndim not in (2, 3):
        raise ValueError("mean_pool_regions expects (k, D) or (N, k, D)")
    k = v.shape[-2]
    if k < 1:
        raise ValueError("mean_pool_regions: empty region set")
    return v.sum_axis(v.ndim - 2).scale(1.0 / k)


def build_common_input(v_bar, t):
    """F = V-bar then T, concatenated on the feature axis."""
    if v_bar.ndim != t.ndim:
        raise ValueError("build_common_input: rank mismatch %s vs %s" % (v_bar.shape, t.shape))
    return concat([v_bar, t], axis=-1)
