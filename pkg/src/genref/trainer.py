"""Optimization loop: Adam with per-epoch learning-rate decay and global-norm
clipping, deterministic batching, binary checkpoints, and a finite-difference
check across every parameter of the assembled model."""

import json
import os
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .autodiff import backward, grad_check
from .encoder import MultimodalInput
from .nn import EOS, PAD, TokenSeq
from .pipeline import Pipeline, PipelineConfig

MAGIC = b"GRCK"
VERSION = 1


@dataclass
class TrainConfig:
    lr0: float = 4e-4
    decay: float = 0.9
    batch_size: int = 16
    epochs: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not (0.0 < self.decay <= 1.0):
            raise ValueError("decay must lie in (0, 1]")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size >= 1 and epochs >= 0 required")


@dataclass
class TrainingReport:
    train_losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    elapsed: float = 0.0
    epochs_run: int = 0
    checkpoint_path: str = ""


class Adam:
    """Moment state is kept flat, in the pipeline's parameter declaration
    order; the update itself runs in the fused kernel."""

    def __init__(self, params, tc):
        self.params = params
        self.tc = tc
        self.m = [np.zeros(t.size) for _, t in params]
        self.v = [np.zeros(t.size) for _, t in params]
        self.t = 0

    def step(self, gm, lr):
        tc = self.tc
        sq = 0.0
        grads = []
        for _, tensor in self.params:
            g = np.ascontiguousarray(gm.get(tensor).reshape(-1))
            grads.append(g)
            sq += float(g @ g)
        norm = np.sqrt(sq)
        scale = 1.0 if norm <= tc.clip_norm else tc.clip_norm / norm
        self.t += 1
        bc1 = 1.0 - tc.beta1 ** self.t
        bc2 = 1.0 - tc.beta2 ** self.t
        for (name, tensor), g, m, v in zip(self.params, grads, self.m, self.v):
            flat = tensor.data.reshape(-1)
            kernels.adam_step(flat, g, m, v, lr, tc.beta1, tc.beta2, tc.eps, bc1, bc2, scale)
        return norm


def _batched(seq, size):
    for start in range(0, len(seq), size):
        yield seq[start:start + size]


def _eval_loss(pipe, samples, batch_size):
    if not samples:
        return float("nan")
    total, n = 0.0, 0
    for chunk in _batched(samples, batch_size):
        inputs = [s[0] for s in chunk]
        lb = pipe.forward_train(inputs, [s[1] for s in chunk], [s[2] for s in chunk], mode="eval")
        total += lb.per_sample_loss.sum()
        n += len(chunk)
    return total / n


def train(pipe, dataset, tc, checkpoint_path="", callback=None):
    """Run the optimization loop.

    dataset: {"train": [(MultimodalInput, gold_answer, gold_rationale)], "val": [...]}
    callback(epoch, train_loss, val_loss) may return True to stop early.
    Deterministic for a fixed seed: shuffles, dropout, and updates all draw
    from seeded streams.
    """
    train_set = dataset["train"]
    if not train_set:
        raise ValueError("empty training set")
    val_set = dataset.get("val", [])
    rng = np.random.default_rng(tc.seed)
    opt = Adam(pipe.parameters(), tc)
    report = TrainingReport()
    lr = tc.lr0
    t0 = time.perf_counter()
    for epoch in range(tc.epochs):
        perm = rng.permutation(len(train_set))
        losses = []
        for bi, idx in enumerate(_batched(perm, tc.batch_size)):
            chunk = [train_set[i] for i in idx]
            lb = pipe.forward_train(
                [s[0] for s in chunk], [s[1] for s in chunk], [s[2] for s in chunk], mode="train"
            )
            if not np.isfinite(lb.total):
                raise RuntimeError(
                    "training diverged: non-finite loss at epoch %d batch %d" % (epoch, bi)
                )
            gm = backward(lb.tensor)
            opt.step(gm, lr)
            losses.append(lb.total)
        report.train_losses.append(float(np.mean(losses)))
        report.val_losses.append(_eval_loss(pipe, val_set, tc.batch_size))
        report.lrs.append(lr)
        report.epochs_run = epoch + 1
        lr *= tc.decay
        if callback is not None and callback(epoch, report.train_losses[-1], report.val_losses[-1]):
            break
    report.elapsed = time.perf_counter() - t0
    if checkpoint_path:
        save_checkpoint(pipe, checkpoint_path)
        report.checkpoint_path = checkpoint_path
    return report


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

class CheckpointError(ValueError):
    pass


def save_checkpoint(pipe, path):
    """Little-endian container: magic, format version, canonical-JSON config,
    then each parameter in declaration order as name + shape + float64 data."""
    cfg_json = json.dumps(pipe.config.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(cfg_json)), cfg_json]
    for name, tensor in pipe.parameters():
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", tensor.data.ndim))
        for d in tensor.data.shape:
            parts.append(struct.pack("<I", d))
        parts.append(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())
    blob = b"".join(parts)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return path


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.off = 0

    def take(self, n, what):
        if self.off + n > len(self.blob):
            raise CheckpointError("truncated checkpoint while reading %s" % what)
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def done(self):
        return self.off == len(self.blob)


def _parse_header(reader):
    if reader.take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic bytes: not a checkpoint file")
    version = reader.u32("version")
    if version != VERSION:
        raise CheckpointError("unsupported checkpoint version %d (expected %d)" % (version, VERSION))
    cfg_len = reader.u32("config length")
    try:
        cfg = json.loads(reader.take(cfg_len, "config").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError("corrupt config block: %s" % e) from None
    return cfg


def _load_params_into(pipe, reader):
    for name, tensor in pipe.parameters():
        nlen = reader.u32("name length")
        got = reader.take(nlen, "parameter name").decode()
        if got != name:
            raise CheckpointError("parameter order mismatch: stored %r, expected %r" % (got, name))
        ndim = reader.u32("ndim")
        shape = tuple(reader.u32("dim") for _ in range(ndim))
        if shape != tensor.data.shape:
            raise CheckpointError(
                "shape mismatch for %s: stored %s, model has %s" % (name, shape, tensor.data.shape)
            )
        raw = reader.take(8 * int(np.prod(shape, dtype=np.int64)) if shape else 8, "data")
        tensor.data[...] = np.frombuffer(raw, dtype="<f8").reshape(shape)
    if not reader.done():
        raise CheckpointError("trailing bytes after final parameter")


def load_checkpoint(path):
    """Rebuild a pipeline from a checkpoint file, config included."""
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())
    cfg = _parse_header(reader)
    pipe = Pipeline(PipelineConfig.from_dict(cfg))
    _load_params_into(pipe, reader)
    return pipe


def load_into(pipe, path):
    """Load parameters into an existing pipeline; the stored config must
    match the pipeline's exactly."""
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())
    cfg = _parse_header(reader)
    if cfg != pipe.config.to_dict():
        raise CheckpointError(
            "config mismatch: checkpoint %s vs pipeline %s" % (cfg, pipe.config.to_dict())
        )
    _load_params_into(pipe, reader)
    return pipe


# ---------------------------------------------------------------------------
# end-to-end gradient verification
# ---------------------------------------------------------------------------

def tiny_grad_config(**over):
    base = dict(
        vocab_size=20, n_refine=1, input_variant="qic", h_dim=8, a_dim=4, e_dim=5,
        d_dim=4, b_dim=6, l_dim=5, k_regions=3, l_a_max=3, l_r_max=4,
        dropout_p=0.0, seed=1234,
    )
    base.update(over)
    return PipelineConfig(**base)


def _random_gold(rng, n_words, vocab_size):
    return TokenSeq(np.array(rng.integers(4, vocab_size, size=n_words).tolist() + [EOS]))


def grad_check_pipeline(cfg=None, n_samples=1, epsilon=1e-4, include_inputs=True, seed=99):
    """Finite-difference comparison over every model parameter (and,
    optionally, the raw inputs) of the full teacher-forced loss.

    The default step is sized for this loss: it sums tens of cross-entropy
    terms, so some weights see gradients near 1e-9 and a smaller step would
    drown them in the probes' own rounding.  1e-4 keeps the quotient's
    truncation well under the 1e-4 acceptance bar."""
    if cfg is None:
        cfg = tiny_grad_config()
    pipe = Pipeline(cfg)
    rng = np.random.default_rng(seed)
    batch = [
        MultimodalInput(
            V=rng.normal(size=(cfg.k_regions, cfg.d_dim)),
            Q=rng.normal(size=cfg.b_dim),
            C=rng.normal(size=cfg.b_dim),
        )
        for _ in range(n_samples)
    ]
    golds_a = [_random_gold(rng, cfg.l_a_max - 1, cfg.vocab_size) for _ in range(n_samples)]
    golds_r = [_random_gold(rng, cfg.l_r_max - 1, cfg.vocab_size) for _ in range(n_samples)]
    tens = pipe.make_input_tensors(batch)
    params = dict(pipe.parameters())
    if include_inputs:
        params.update(tens)

    def scalar_fn():
        return pipe.forward_from_tensors(tens, golds_a, golds_r, mode="eval").tensor

    return grad_check(scalar_fn, params, epsilon)
