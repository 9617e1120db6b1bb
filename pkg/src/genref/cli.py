"""Command-line entry point.

Subcommands: data gen, train, generate, eval, ablate, gradcheck,
serve-ratings, attn-dump, bench. Every run writes a manifest with the
resolved configuration, seed, timestamps, and output paths next to its
outputs. Config precedence: flags > --config JSON file > built-in defaults.
"""

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass
from datetime import datetime, timezone

import numpy as np

from . import kernels
from .metrics import (
    EmbeddingProvider,
    accuracy_report,
    accuracy_table,
    classify_by_similarity,
    evaluate_corpus,
)
from .pipeline import Pipeline, PipelineConfig
from .ratings import RatingService, make_server
from .toyworld import DatasetFile, build_vocab, encode_sample, generate_dataset, split
from .trainer import (
    TrainConfig,
    grad_check_pipeline,
    load_checkpoint,
    save_checkpoint,
    tiny_grad_config,
    train,
)

GRADCHECK_BAR = 1e-4
VARIANTS = ("qic", "qi", "qc")
REFINES = (0, 1, 2)

# desk-scale model and optimization defaults; flags and --config override.
# d_dim 32 keeps the four per-region attribute codes separable, and the toy
# grammar is deterministic so dropout off converges fastest
TRAIN_DEFAULTS = {
    "h_dim": 64, "a_dim": 32, "e_dim": 32, "d_dim": 32, "b_dim": 32, "l_dim": 24,
    "l_a_max": 10, "l_r_max": 16, "dropout_p": 0.0,
    "lr0": 5e-3, "decay": 0.97, "batch_size": 16, "epochs": 10,
    "train_frac": 0.8, "val_frac": 0.1,
}


class CliError(Exception):
    pass


def _utcnow():
    return datetime.now(timezone.utc).isoformat()


def _write_json_atomic(path, payload):
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(payload, indent=2, sort_keys=True))
        fh.write("\n")
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return path


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    started_at: str
    finished_at: str
    outputs: list

    def write(self, out_dir):
        return _write_json_atomic(os.path.join(out_dir, "manifest.json"), {
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "outputs": self.outputs,
        })


class _Run:
    """Collects outputs during a command and writes the manifest at the end."""

    def __init__(self, args, command, config):
        self.command = command
        self.config = dict(config)
        self.seed = args.seed
        self.out_dir = args.out
        os.makedirs(self.out_dir, exist_ok=True)
        self.started = _utcnow()
        self.outputs = []

    def path(self, name):
        p = os.path.join(self.out_dir, name)
        self.outputs.append(p)
        return p

    def finish(self):
        RunManifest(
            command=self.command, config=self.config, seed=self.seed,
            started_at=self.started, finished_at=_utcnow(), outputs=self.outputs,
        ).write(self.out_dir)


def resolve_config(args, defaults, flag_map):
    """defaults <- config file <- explicitly passed flags."""
    cfg = dict(defaults)
    path = getattr(args, "config", None)
    if path:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError("cannot read config %s: %s" % (path, exc))
        unknown = sorted(set(file_cfg) - set(cfg))
        if unknown:
            raise CliError("unknown config keys: %s" % ", ".join(unknown))
        cfg.update(file_cfg)
    for flag, key in flag_map.items():
        val = getattr(args, flag, None)
        if val is not None:
            cfg[key] = val
    return cfg


# ---------------------------------------------------------------------------
# shared loading helpers
# ---------------------------------------------------------------------------

def _load_dataset(path):
    try:
        return DatasetFile.load(path)
    except OSError as exc:
        raise CliError("cannot read dataset %s: %s" % (path, exc))


def _splits(ds, train_frac, val_frac, ordered=True):
    rest = 1.0 - train_frac - val_frac
    if rest < -1e-9:
        raise CliError("train_frac + val_frac exceed 1")
    # split seed comes from the dataset so every command sees the same folds
    return split(ds, (train_frac, val_frac, max(rest, 0.0)), seed=ds.header["seed"])


def _encode_kwargs(ds, cfg):
    # feature hashes are seeded by the dataset, not the run, so train and
    # eval always agree on the encodings
    return dict(k=ds.header["k"], d_dim=cfg["d_dim"], b_dim=cfg["b_dim"],
                seed=ds.header["seed"])


def _vocab_tokens(vocab):
    return [vocab.token_of(i) for i in range(len(vocab))]


def _training_triples(samples, vocab, ds, cfg):
    from .nn import TokenSeq
    ek = _encode_kwargs(ds, cfg)
    out = []
    for s in samples:
        out.append((
            encode_sample(s, **ek),
            TokenSeq.from_text(vocab, s.answer, max_len=cfg["l_a_max"]),
            TokenSeq.from_text(vocab, s.rationale, max_len=cfg["l_r_max"]),
        ))
    return out


def _pipeline_config(cfg, vocab_size, k, n_refine, variant, seed):
    return PipelineConfig(
        vocab_size=vocab_size, n_refine=n_refine, input_variant=variant,
        h_dim=cfg["h_dim"], a_dim=cfg["a_dim"], e_dim=cfg["e_dim"],
        d_dim=cfg["d_dim"], b_dim=cfg["b_dim"], l_dim=cfg["l_dim"],
        k_regions=k, l_a_max=cfg["l_a_max"], l_r_max=cfg["l_r_max"],
        dropout_p=cfg["dropout_p"], seed=seed,
    )


def _text_or_placeholder(seq, vocab):
    # an empty generation would be rejected by the metrics; stand in a token
    # no reference sentence contains
    return seq.text(vocab) or "<none>"


def _generate_texts(pipe, samples, vocab, ds):
    cfg = {"d_dim": pipe.config.d_dim, "b_dim": pipe.config.b_dim}
    ek = _encode_kwargs(ds, cfg)
    batch = [encode_sample(s, **ek) for s in samples]
    outs = pipe.generate(batch)
    return outs, [
        {
            "sample_id": s.id,
            "question": s.question,
            "gold_answer": s.answer,
            "gold_rationale": s.rationale,
            "answer": _text_or_placeholder(o.final_answer, vocab),
            "rationale": _text_or_placeholder(o.final_rationale, vocab),
        }
        for s, o in zip(samples, outs)
    ]


def _checkpoint_pipeline(args, vocab, ds):
    try:
        pipe = load_checkpoint(args.checkpoint)
    except (OSError, ValueError) as exc:
        raise CliError("cannot load checkpoint %s: %s" % (args.checkpoint, exc))
    if pipe.config.vocab_size != len(vocab):
        raise CliError(
            "checkpoint vocabulary size %d does not match dataset vocabulary %d; "
            "wrong --data file?" % (pipe.config.vocab_size, len(vocab)))
    if pipe.config.k_regions != ds.header["k"]:
        raise CliError(
            "checkpoint expects k=%d regions but dataset has k=%d"
            % (pipe.config.k_regions, ds.header["k"]))
    return pipe


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_data_gen(args):
    run = _Run(args, "data gen", {"n": args.n, "k": args.k})
    ds = generate_dataset(seed=args.seed, n=args.n, k=args.k)
    path = run.path("toy.jsonl")
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(ds.dumps())
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    run.finish()
    print("wrote %d samples to %s" % (len(ds), path))
    return 0


def _train_one(ds, vocab, cfg, n_refine, variant, seed, checkpoint_path, quiet=False):
    parts = _splits(ds, cfg["train_frac"], cfg["val_frac"])
    dataset = {
        "train": _training_triples(parts["train"], vocab, ds, cfg),
        "val": _training_triples(parts["val"], vocab, ds, cfg),
    }
    pipe = Pipeline(_pipeline_config(cfg, len(vocab), ds.header["k"], n_refine, variant, seed))
    tc = TrainConfig(lr0=cfg["lr0"], decay=cfg["decay"],
                     batch_size=cfg["batch_size"], epochs=cfg["epochs"], seed=seed)

    def progress(epoch, tr, va):
        if not quiet:
            print("epoch %d  train %.4f  val %.4f" % (epoch, tr, va))
        return False

    report = train(pipe, dataset, tc, checkpoint_path=checkpoint_path, callback=progress)
    return pipe, report, parts


def cmd_train(args):
    cfg = resolve_config(args, TRAIN_DEFAULTS, {
        "epochs": "epochs", "batch": "batch_size", "lr": "lr0",
    })
    run = _Run(args, "train", dict(cfg, variant=args.variant, refine=args.refine,
                                   data=args.data))
    ds = _load_dataset(args.data)
    vocab = build_vocab(ds.samples)
    ckpt = run.path("model.grck")
    pipe, report, _ = _train_one(ds, vocab, cfg, args.refine, args.variant,
                                 args.seed, ckpt)
    _write_json_atomic(run.path("training.json"), {
        "train_losses": report.train_losses,
        "val_losses": report.val_losses,
        "lrs": report.lrs,
        "epochs_run": report.epochs_run,
        "config": pipe.config.to_dict(),
    })
    run.finish()
    print("final val loss %.4f; checkpoint at %s" % (report.val_losses[-1], ckpt))
    return 0


def cmd_generate(args):
    run = _Run(args, "generate", {"n": args.n, "split": args.split,
                                  "checkpoint": args.checkpoint, "data": args.data})
    ds = _load_dataset(args.data)
    vocab = build_vocab(ds.samples)
    pipe = _checkpoint_pipeline(args, vocab, ds)
    parts = _splits(ds, TRAIN_DEFAULTS["train_frac"], TRAIN_DEFAULTS["val_frac"])
    samples = parts[args.split][: args.n]
    if not samples:
        raise CliError("split %r has no samples" % args.split)
    outs, records = _generate_texts(pipe, samples, vocab, ds)
    for rec, out in zip(records, outs):
        rec["blocks"] = {name: _text_or_placeholder(out.sequences[name], vocab)
                         for name in out.block_order}
    _write_json_atomic(run.path("generations.json"), records)
    run.finish()
    for rec in records[:3]:
        print("Q: %s\nA: %s\nR: %s\n" % (rec["question"], rec["answer"], rec["rationale"]))
    print("wrote %d generations" % len(records))
    return 0


def _classification_flags(records, provider, seed):
    """Four-option harness: the reference plus three distractors drawn from
    other samples; correct means the generated text selects the reference."""
    rng = np.random.default_rng(seed)
    flags = []
    for field_a, field_g in (("answer", "gold_answer"), ("rationale", "gold_rationale")):
        pools = [r[field_g] for r in records]
        side = []
        for i, rec in enumerate(records):
            gold = rec[field_g]
            distinct = sorted({t for j, t in enumerate(pools) if j != i and t != gold})
            if len(distinct) < 3:
                raise CliError("need at least 3 distinct distractor texts for %s" % field_a)
            picks = [distinct[int(x)] for x in rng.choice(len(distinct), size=3, replace=False)]
            gold_pos = int(rng.integers(4))
            options = picks[:gold_pos] + [gold] + picks[gold_pos:]
            chosen, _ = classify_by_similarity(rec[field_a], options, provider)
            side.append(chosen == gold_pos)
        flags.append(side)
    return [
        {"answer_correct": a, "rationale_correct": r}
        for a, r in zip(flags[0], flags[1])
    ]


def cmd_eval(args):
    run = _Run(args, "eval", {"n": args.n, "split": args.split,
                              "checkpoint": args.checkpoint, "data": args.data})
    ds = _load_dataset(args.data)
    vocab = build_vocab(ds.samples)
    pipe = _checkpoint_pipeline(args, vocab, ds)
    parts = _splits(ds, TRAIN_DEFAULTS["train_frac"], TRAIN_DEFAULTS["val_frac"])
    samples = parts[args.split]
    if args.n:
        samples = samples[: args.n]
    if len(samples) < 2:
        raise CliError("need at least 2 samples to evaluate (split %r has %d)"
                       % (args.split, len(samples)))
    _, records = _generate_texts(pipe, samples, vocab, ds)
    provider = EmbeddingProvider.hashed(_vocab_tokens(vocab), dim=32, seed=0)
    rep_a = evaluate_corpus([r["answer"] for r in records],
                            [r["gold_answer"] for r in records], provider)
    rep_r = evaluate_corpus([r["rationale"] for r in records],
                            [r["gold_rationale"] for r in records], provider)
    exact_a = sum(r["answer"] == r["gold_answer"] for r in records) / len(records)
    exact_r = sum(r["rationale"] == r["gold_rationale"] for r in records) / len(records)
    flags = _classification_flags(records, provider, args.seed)
    acc = accuracy_report(flags)
    _write_json_atomic(run.path("eval.json"), {
        "n": len(records),
        "answer_metrics": json.loads(rep_a.to_json()),
        "rationale_metrics": json.loads(rep_r.to_json()),
        "exact_match": {"answer": exact_a, "rationale": exact_r},
        "accuracy": acc,
    })
    run.finish()
    if len(records) <= 12:
        print("answers:")
        print(rep_a.table())
        print("\nrationales:")
        print(rep_r.table())
    else:
        print(mean_table(rep_a, rep_r))
    print("\nexact match: answer %.1f%%  rationale %.1f%%" % (100 * exact_a, 100 * exact_r))
    print("\nfour-option classification:")
    print(accuracy_table(acc))
    return 0


def mean_table(rep_a, rep_r):
    from .metrics import METRIC_NAMES
    rows = [("", ) + METRIC_NAMES,
            ("answers",) + tuple("%.4f" % rep_a.mean[m] for m in METRIC_NAMES),
            ("rationales",) + tuple("%.4f" % rep_r.mean[m] for m in METRIC_NAMES)]
    widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in rows)


def cmd_ablate(args):
    cfg = resolve_config(args, TRAIN_DEFAULTS, {
        "epochs": "epochs", "batch": "batch_size", "lr": "lr0",
    })
    run = _Run(args, "ablate", dict(cfg, data=args.data))
    ds = _load_dataset(args.data)
    vocab = build_vocab(ds.samples)
    provider = EmbeddingProvider.hashed(_vocab_tokens(vocab), dim=32, seed=0)
    grid = {}
    for n_refine in REFINES:
        for variant in VARIANTS:
            t0 = time.perf_counter()
            pipe, report, parts = _train_one(ds, vocab, cfg, n_refine, variant,
                                             args.seed, "", quiet=True)
            val = parts["val"]
            if len(val) < 2:
                raise CliError("validation split too small for evaluation")
            _, records = _generate_texts(pipe, val, vocab, ds)
            rep_a = evaluate_corpus([r["answer"] for r in records],
                                    [r["gold_answer"] for r in records], provider)
            rep_r = evaluate_corpus([r["rationale"] for r in records],
                                    [r["gold_rationale"] for r in records], provider)
            cell = {
                "cider": rep_a.mean["cider"],
                "rouge_l": rep_a.mean["rouge_l"],
                "rationale_cider": rep_r.mean["cider"],
                "rationale_rouge_l": rep_r.mean["rouge_l"],
                "val_loss": report.val_losses[-1],
                "seconds": time.perf_counter() - t0,
            }
            grid["%d,%s" % (n_refine, variant)] = cell
            print("refine=%d variant=%-3s  cider %.3f  rouge_l %.3f  val loss %.3f"
                  % (n_refine, variant, cell["cider"], cell["rouge_l"], cell["val_loss"]))
    deltas = {}
    for variant in VARIANTS:
        one = grid["1,%s" % variant]
        zero = grid["0,%s" % variant]
        deltas[variant] = {
            "cider": one["cider"] - zero["cider"],
            "rouge_l": one["rouge_l"] - zero["rouge_l"],
        }
    _write_json_atomic(run.path("ablation.json"), {"grid": grid, "deltas": deltas})
    print()
    print(ablation_table(grid))
    print()
    for variant, d in deltas.items():
        print("refinement 1 vs 0 (%s): cider %+.3f, rouge_l %+.3f"
              % (variant, d["cider"], d["rouge_l"]))
    run.finish()
    return 0


def ablation_table(grid):
    rows = [("refine",) + VARIANTS]
    for n_refine in REFINES:
        cells = []
        for variant in VARIANTS:
            cell = grid["%d,%s" % (n_refine, variant)]
            cells.append("cider %.3f / rouge %.3f" % (cell["cider"], cell["rouge_l"]))
        rows.append((str(n_refine),) + tuple(cells))
    widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip()
                     for row in rows)


def cmd_gradcheck(args):
    run = _Run(args, "gradcheck", {"tiny": args.tiny, "refine": args.refine,
                                   "variant": args.variant, "epsilon": args.epsilon})
    if args.tiny:
        cfg = tiny_grad_config(n_refine=args.refine, input_variant=args.variant)
    else:
        cfg = tiny_grad_config(
            n_refine=args.refine, input_variant=args.variant,
            h_dim=4, a_dim=2, e_dim=3, d_dim=3, b_dim=4, l_dim=3,
            k_regions=2, l_a_max=2, l_r_max=3, vocab_size=12,
        )
    t0 = time.perf_counter()
    err = float(grad_check_pipeline(cfg, n_samples=1, epsilon=args.epsilon, seed=args.seed))
    elapsed = time.perf_counter() - t0
    ok = err < GRADCHECK_BAR
    _write_json_atomic(run.path("gradcheck.json"), {
        "max_rel_err": err, "bar": GRADCHECK_BAR, "epsilon": args.epsilon,
        "seconds": elapsed, "passed": ok, "config": cfg.to_dict(),
    })
    run.finish()
    print("max relative error: %.6e  (%.1f s)" % (err, elapsed))
    if not ok:
        print("FAIL: exceeds %.0e" % GRADCHECK_BAR, file=sys.stderr)
        return 1
    print("PASS: below %.0e" % GRADCHECK_BAR)
    return 0


def build_rating_pools(pipe, samples, vocab, ds):
    """Model-output and reference pools over the same samples."""
    _, records = _generate_texts(pipe, samples, vocab, ds)
    generated = [
        {"sample_id": r["sample_id"], "question": r["question"],
         "answer": r["answer"], "rationale": r["rationale"]}
        for r in records
    ]
    ground_truth = [
        {"sample_id": r["sample_id"], "question": r["question"],
         "answer": r["gold_answer"], "rationale": r["gold_rationale"]}
        for r in records
    ]
    return generated, ground_truth


def cmd_serve_ratings(args):
    run = _Run(args, "serve-ratings", {
        "port": args.port, "playlist_size": args.playlist_size,
        "gt_ratio": args.gt_ratio, "pool": args.pool,
        "checkpoint": args.checkpoint, "data": args.data,
    })
    ds = _load_dataset(args.data)
    vocab = build_vocab(ds.samples)
    pipe = _checkpoint_pipeline(args, vocab, ds)
    parts = _splits(ds, TRAIN_DEFAULTS["train_frac"], TRAIN_DEFAULTS["val_frac"])
    samples = parts["val"][: args.pool]
    generated, ground_truth = build_rating_pools(pipe, samples, vocab, ds)
    service = RatingService(
        generated, ground_truth, playlist_size=args.playlist_size,
        gt_ratio=args.gt_ratio, seed=args.seed, log_path=run.path("ratings.jsonl"),
    )
    server = make_server(service, port=args.port)
    run.finish()
    print("rating service on http://%s:%d" % server.server_address)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
        service.close()
    return 0


def cmd_attn_dump(args):
    run = _Run(args, "attn-dump", {"n": args.n, "split": args.split,
                                   "checkpoint": args.checkpoint, "data": args.data})
    ds = _load_dataset(args.data)
    vocab = build_vocab(ds.samples)
    pipe = _checkpoint_pipeline(args, vocab, ds)
    parts = _splits(ds, TRAIN_DEFAULTS["train_frac"], TRAIN_DEFAULTS["val_frac"])
    samples = parts[args.split][: args.n]
    if not samples:
        raise CliError("split %r has no samples" % args.split)
    outs, records = _generate_texts(pipe, samples, vocab, ds)
    dump = []
    for rec, out, sample in zip(records, outs, samples):
        blocks = {}
        for name in out.block_order:
            seq = out.sequences[name]
            n_steps = seq.true_length
            # one attention row per decode step, the EOS step included
            toks = [vocab.token_of(int(t)) for t in seq.ids[:n_steps]]
            weights = out.attention[name][:n_steps]
            blocks[name] = {
                "tokens": toks,
                "weights": [[float(w) for w in row] for row in weights],
            }
        dump.append({
            "sample_id": rec["sample_id"],
            "question": rec["question"],
            "regions": [{"shape": o.shape, "color": o.color, "size": o.size,
                         "cell": o.cell} for o in sample.scene.objects],
            "blocks": blocks,
        })
    _write_json_atomic(run.path("attention.json"), dump)
    run.finish()
    print("wrote attention maps for %d samples" % len(dump))
    return 0


# ---------------------------------------------------------------------------
# kernel benchmark
# ---------------------------------------------------------------------------

def _bench_inputs(name, rng, batch=64, h=64, vocab=60):
    z = rng.normal(size=(batch, 4 * h))
    c = rng.normal(size=(batch, h))
    if name in ("lstm_pointwise", "lstm_pointwise_value"):
        return (z, c)
    if name == "lstm_bwd_from_h":
        _, c2, i, f, g, o, tc = kernels.lstm_pointwise_np(z, c)
        gh = rng.normal(size=(batch, h))
        return (gh, i, f, g, o, tc, c)
    if name == "lstm_bwd_from_c":
        _, c2, i, f, g, o, tc = kernels.lstm_pointwise_np(z, c)
        gc2 = rng.normal(size=(batch, h))
        return (gc2, i, f, g, c)
    if name in ("gold_logp", "gold_logp_value"):
        logits = rng.normal(size=(batch, vocab))
        ids = rng.integers(0, vocab, size=batch)
        return (logits, ids)
    if name == "gold_logp_bwd":
        logits = rng.normal(size=(batch, vocab))
        ids = rng.integers(0, vocab, size=batch)
        _, probs = kernels.gold_logp_np(logits, ids)
        glp = rng.normal(size=batch)
        return (probs, ids, glp)
    if name == "softmax_rows":
        return (rng.normal(size=(batch, vocab)),)
    if name == "adam_step":
        n = 4096
        return (rng.normal(size=n), rng.normal(size=n),
                rng.normal(size=n), np.abs(rng.normal(size=n)),
                1e-3, 0.9, 0.999, 1e-8, 0.9, 0.999, 1.0)
    raise KeyError(name)


def _as_tuple(x):
    return x if isinstance(x, tuple) else (x,)


def _copy_args(inputs):
    return tuple(a.copy() if isinstance(a, np.ndarray) else a for a in inputs)


def bench_kernels(reps=200, seed=0):
    """Time the pure-numpy and jitted twin of every hot kernel on desk-scale
    shapes, and verify they agree. adam_step mutates its arrays, so both
    sides pay one copy per rep."""
    rng = np.random.default_rng(seed)
    rows = []
    for name, (fn_np, fn_nb) in kernels.TWINS.items():
        inputs = _bench_inputs(name, rng)
        mutates = name == "adam_step"
        # agreement check on fresh copies
        in_a, in_b = _copy_args(inputs), _copy_args(inputs)
        out_np = _as_tuple(fn_np(*in_a))
        out_nb = _as_tuple(fn_nb(*in_b))
        if mutates:
            out_np, out_nb = in_a[:4], in_b[:4]
        agree = all(
            np.allclose(a, b, rtol=1e-10, atol=1e-12)
            for a, b in zip(out_np, out_nb)
        ) and len(out_np) == len(out_nb)

        def clock(fn):
            t0 = time.perf_counter()
            for _ in range(reps):
                fn(*(_copy_args(inputs) if mutates else inputs))
            return (time.perf_counter() - t0) / reps * 1e6

        fn_nb(*_copy_args(inputs))  # jit warm-up outside the timed loop
        t_np = clock(fn_np)
        t_nb = clock(fn_nb)
        rows.append({
            "kernel": name,
            "numpy_us": t_np,
            "numba_us": t_nb,
            "speedup": t_np / t_nb if t_nb > 0 else float("inf"),
            "agree": agree,
        })
    return rows


def bench_table(rows):
    table = [("kernel", "numpy µs", "numba µs", "speedup", "agree")]
    for r in rows:
        table.append((r["kernel"], "%.1f" % r["numpy_us"], "%.1f" % r["numba_us"],
                      "%.2fx" % r["speedup"], "yes" if r["agree"] else "NO"))
    widths = [max(len(row[c]) for row in table) for c in range(5)]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip()
                     for row in table)


def cmd_bench(args):
    run = _Run(args, "bench", {"reps": args.reps})
    rows = bench_kernels(reps=args.reps, seed=args.seed)
    _write_json_atomic(run.path("bench.json"), {
        "backend_active": kernels.BACKEND,
        "numba_available": kernels.HAS_NUMBA,
        "reps": args.reps,
        "kernels": rows,
    })
    run.finish()
    print("active backend: %s (numba %s)"
          % (kernels.BACKEND, "available" if kernels.HAS_NUMBA else "missing"))
    print(bench_table(rows))
    if not all(r["agree"] for r in rows):
        print("kernel twins disagree", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _common(sub, command):
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--out", default=os.path.join("genref-out", command))
    sub.add_argument("--config", default=None, help="JSON config file")


def build_parser():
    parser = argparse.ArgumentParser(prog="genref")
    subs = parser.add_subparsers(dest="command")

    p_data = subs.add_parser("data", help="dataset tools")
    data_subs = p_data.add_subparsers(dest="data_command")
    p_gen = data_subs.add_parser("gen", help="generate a synthetic dataset")
    _common(p_gen, "data-gen")
    p_gen.add_argument("--n", type=int, default=100)
    p_gen.add_argument("--k", type=int, default=6)
    p_gen.set_defaults(func=cmd_data_gen)

    p_train = subs.add_parser("train", help="train a model")
    _common(p_train, "train")
    p_train.add_argument("--data", required=True)
    p_train.add_argument("--variant", choices=VARIANTS, default="qic")
    p_train.add_argument("--refine", type=int, choices=REFINES, default=1)
    p_train.add_argument("--epochs", type=int, default=None)
    p_train.add_argument("--batch", type=int, default=None)
    p_train.add_argument("--lr", type=float, default=None)
    p_train.set_defaults(func=cmd_train)

    p_generate = subs.add_parser("generate", help="greedy decoding from a checkpoint")
    _common(p_generate, "generate")
    p_generate.add_argument("--checkpoint", required=True)
    p_generate.add_argument("--data", required=True)
    p_generate.add_argument("--split", choices=("train", "val", "test"), default="val")
    p_generate.add_argument("--n", type=int, default=10)
    p_generate.set_defaults(func=cmd_generate)

    p_eval = subs.add_parser("eval", help="score generations against references")
    _common(p_eval, "eval")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--split", choices=("train", "val", "test"), default="val")
    p_eval.add_argument("--n", type=int, default=None)
    p_eval.set_defaults(func=cmd_eval)

    p_ablate = subs.add_parser("ablate", help="refinement x input-variant grid")
    _common(p_ablate, "ablate")
    p_ablate.add_argument("--data", required=True)
    p_ablate.add_argument("--epochs", type=int, default=None)
    p_ablate.add_argument("--batch", type=int, default=None)
    p_ablate.add_argument("--lr", type=float, default=None)
    p_ablate.set_defaults(func=cmd_ablate)

    p_grad = subs.add_parser("gradcheck", help="finite-difference gradient audit")
    _common(p_grad, "gradcheck")
    p_grad.add_argument("--tiny", action="store_true",
                        help="reference configuration (H=8, A=4, k=3)")
    p_grad.add_argument("--refine", type=int, choices=REFINES, default=1)
    p_grad.add_argument("--variant", choices=VARIANTS, default="qic")
    p_grad.add_argument("--epsilon", type=float, default=1e-4)
    p_grad.set_defaults(func=cmd_gradcheck)

    p_serve = subs.add_parser("serve-ratings", help="blinded rating service")
    _common(p_serve, "serve-ratings")
    p_serve.add_argument("--checkpoint", required=True)
    p_serve.add_argument("--data", required=True)
    p_serve.add_argument("--port", type=int, default=8077)
    p_serve.add_argument("--playlist-size", type=int, default=10)
    p_serve.add_argument("--gt-ratio", type=float, default=0.34)
    p_serve.add_argument("--pool", type=int, default=40,
                         help="validation samples per pool")
    p_serve.set_defaults(func=cmd_serve_ratings)

    p_attn = subs.add_parser("attn-dump", help="write per-step attention maps")
    _common(p_attn, "attn-dump")
    p_attn.add_argument("--checkpoint", required=True)
    p_attn.add_argument("--data", required=True)
    p_attn.add_argument("--split", choices=("train", "val", "test"), default="val")
    p_attn.add_argument("--n", type=int, default=5)
    p_attn.set_defaults(func=cmd_attn_dump)

    p_bench = subs.add_parser("bench", help="time jitted kernels against numpy twins")
    _common(p_bench, "bench")
    p_bench.add_argument("--reps", type=int, default=200)
    p_bench.set_defaults(func=cmd_bench)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "func", None) is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.func(args)
    except CliError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1
    except (ValueError, OSError, RuntimeError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
