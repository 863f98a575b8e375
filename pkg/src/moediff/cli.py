"""Command-line entry point.

Subcommands: train, sample, gradcheck, bench, make-toy, eval. Every run
resolves its full configuration (defaults -> --config file -> --set pairs
-> dedicated flags) and writes it to `<logdir>/resolved.cfg` next to its
outputs. The log directory defaults to `runs/<command>` and can be forced
globally with the MOEDIFF_LOGDIR environment variable.

Exit codes: 0 success, 1 invalid configuration or inputs, 2 I/O problems
(missing or malformed files), 3 numeric failures (NaN loss, failed
gradient check).
"""

import argparse
import os
import sys
from dataclasses import replace

from .attention import SparseAttentionConfig
from .checkpoint import load_checkpoint, load_into_model, save_model
from .config import RunConfig, load_config, parse_config_text, parse_value
from .data import Vocab, batchify, load_corpus, make_toy_task
from .denoiser import DenoiserModel
from .diffusion import build_sqrt_schedule
from .errors import (
    BatchError,
    CheckpointError,
    ConfigError,
    CorpusError,
    EvalError,
    NumericError,
    OrderingError,
    ShapeError,
    VocabularyError,
)
from .metrics import bench_attention, evaluate_corpus, write_bench_report
from .sampler import sample
from .training import gradient_check, train

_VALIDATION_ERRORS = (
    ConfigError,
    VocabularyError,
    BatchError,
    EvalError,
    OrderingError,
    ShapeError,
)
_IO_ERRORS = (CorpusError, CheckpointError, OSError)


def _logdir_for(args):
    return (
        os.environ.get("MOEDIFF_LOGDIR")
        or getattr(args, "logdir", None)
        or os.path.join("runs", args.command)
    )


def _resolve_config(args, flag_items=()):
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = load_config(args.config, base=cfg)
    items = list(flag_items)
    for assignment in getattr(args, "set", None) or []:
        if "=" not in assignment:
            raise ConfigError(f"--set expects key=value, got {assignment!r}")
        key, raw = assignment.split("=", 1)
        items.append((key.strip(), raw))
    return cfg.with_items(items)


def _write_resolved(cfg, logdir):
    os.makedirs(logdir, exist_ok=True)
    with open(os.path.join(logdir, "resolved.cfg"), "w", encoding="utf-8") as fh:
        fh.write(cfg.resolved_text())


def _flag_items(args, mapping):
    items = []
    for attr, key in mapping:
        value = getattr(args, attr, None)
        if value is not None:
            items.append((key, str(value)))
    return items


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args):
    flag_map = [
        ("corpus", "paths.corpus"),
        ("checkpoint", "paths.checkpoint"),
        ("steps", "training.steps"),
        ("lr", "training.lr"),
        ("batch_size", "training.batch_size"),
        ("seed", "training.seed"),
        ("window", "model.window"),
        ("diffusion_steps", "model.diffusion_steps"),
        ("attention", "model.attention"),
        ("staged", "training.staged"),
    ]
    cfg = _resolve_config(args, _flag_items(args, flag_map))
    logdir = _logdir_for(args)
    if not cfg.corpus:
        raise ConfigError("training needs paths.corpus (or --corpus)")
    pairs = load_corpus(cfg.corpus)
    if not pairs:
        raise CorpusError(f"{cfg.corpus} contains no pairs")
    vocab = Vocab(list(cfg.vocab_chars)) if cfg.vocab_chars else Vocab.from_pairs(pairs)

    schedule = build_sqrt_schedule(cfg.diffusion_steps, p_max=cfg.p_max)
    cfg = replace(
        cfg,
        vocab_chars="".join(vocab.id_to_char[4:]),
        vocab_size=cfg.vocab_size or vocab.size,
        schedule_checksum=schedule.checksum(),
        logdir=logdir,
    ).validated()
    _write_resolved(cfg, logdir)

    holdout = None
    if cfg.eval_every:
        n_hold = min(cfg.eval_samples, max(1, len(pairs) // 10))
        holdout, pairs = pairs[:n_hold], pairs[n_hold:]

    def log_fn(record):
        print("\t".join(f"{k}={v}" for k, v in record.items()))

    result = train(
        cfg, pairs, holdout=holdout, logdir=logdir,
        log_fn=log_fn if args.verbose else None,
        config_text=cfg.resolved_text(),
    )
    final_path = cfg.checkpoint or os.path.join(logdir, "model.mdsq")
    save_model(final_path, cfg.resolved_text(), result.model)
    print(f"final_loss={result.final_loss!r}")
    print(f"checkpoint={final_path}")
    if result.eval_history:
        print(f"exact_match={result.eval_history[-1]['exact_match']}")
    return 0


def _load_checkpointed_model(path, overrides):
    config_text, _ = load_checkpoint(path)
    stored = parse_config_text(config_text)
    # model/schedule keys are pinned by the checkpoint; differing overrides
    # are a compatibility error rather than a silent reinterpretation
    from .config import SCHEMA

    for key, raw in overrides:
        if key.startswith(("model.", "schedule.")) and key != "schedule.checksum":
            attr = SCHEMA[key][0]
            if parse_value(key, raw) != getattr(stored, attr):
                raise ConfigError(
                    f"checkpoint pins {key} = {getattr(stored, attr)}, "
                    f"cannot override with {raw!r}"
                )
    if not stored.vocab_chars:
        raise CheckpointError("checkpoint carries no vocabulary")
    vocab = Vocab(list(stored.vocab_chars))
    model = DenoiserModel(stored.model_config(), seed=stored.seed)
    load_into_model(path, model)
    schedule = build_sqrt_schedule(stored.diffusion_steps, p_max=stored.p_max)
    if stored.schedule_checksum and schedule.checksum() != stored.schedule_checksum:
        raise CheckpointError(
            "rebuilt noise schedule does not match the checkpoint checksum"
        )
    return stored, model, vocab, schedule


def cmd_sample(args):
    overrides = []
    for assignment in args.set or []:
        if "=" not in assignment:
            raise ConfigError(f"--set expects key=value, got {assignment!r}")
        key, raw = assignment.split("=", 1)
        overrides.append((key.strip(), raw))
    stored, model, vocab, schedule = _load_checkpointed_model(args.checkpoint, overrides)
    cfg = stored.with_items(overrides)
    flag_map = [
        ("num_steps", "sampler.num_steps"),
        ("seed", "sampler.seed"),
        ("max_len", "sampler.max_len"),
    ]
    cfg = cfg.with_items(_flag_items(args, flag_map)).validated()
    logdir = _logdir_for(args)
    _write_resolved(cfg, logdir)

    source = vocab.encode(args.input)
    trace_path = args.trace or None
    ids = sample(source, model, schedule, cfg.sampler_config(), trace_path=trace_path)
    print(vocab.decode(ids))
    return 0


def cmd_gradcheck(args):
    cfg = _resolve_config(args)
    if cfg.width > 16:
        raise ConfigError(
            f"gradcheck runs on tiny configs only (width <= 16), got {cfg.width}"
        )
    logdir = _logdir_for(args)
    cfg = cfg.validated()
    _write_resolved(cfg, logdir)

    pairs = make_toy_task("copy", cfg.batch_size, (3, 6), 8, args.seed)
    vocab = Vocab.from_pairs(pairs)
    batch = batchify(pairs, vocab, cfg.max_seq_len, cfg.batch_size)[0]
    model = DenoiserModel(cfg.model_config(vocab_size=vocab.size), seed=args.seed)
    schedule = build_sqrt_schedule(cfg.diffusion_steps, p_max=cfg.p_max)
    reports = gradient_check(
        model, batch, schedule,
        loss_seed=args.seed,
        n_per_group=args.n_per_group,
        lambda_reg=cfg.lambda_reg,
        rounding_weight=cfg.rounding_weight,
        pick_seed=args.seed,
    )
    failed = []
    for report in reports:
        status = "PASS" if report.passed else "FAIL"
        print(
            f"{status} {report.group}: {report.checked} params, worst rel err "
            f"{report.worst_rel_err:.3e} at {report.worst_param}"
        )
        if not report.passed:
            failed.append(report)
    if failed:
        print(f"gradient check failed: {', '.join(r.worst_param for r in failed)}")
        return 3
    return 0


def cmd_bench(args):
    cfg = _resolve_config(
        args,
        _flag_items(args, [("window", "model.window"), ("dilation", "model.dilation")]),
    )
    logdir = _logdir_for(args)
    _write_resolved(cfg, logdir)
    seq_lens = [int(p) for p in args.seq_lens.split(",") if p.strip()]
    attn_cfg = SparseAttentionConfig(
        window_w=cfg.window,
        dilation_d=cfg.dilation,
        num_heads=cfg.num_heads,
        head_dim=cfg.head_dim,
        num_layers_l=cfg.num_layers,
    )
    report = bench_attention(seq_lens, attn_cfg, runs=args.runs)
    path = os.path.join(logdir, "bench.tsv")
    write_bench_report(report, path)
    for row in report.rows:
        print(
            f"n={row.seq_len} kind={row.attention_kind} pairs={row.pair_count} "
            f"wall={row.wall_time:.6f}s"
        )
    for kind, slope in sorted(report.slopes.items()):
        print(f"slope {kind}: {slope:.3f}")
    print(f"report={path}")
    return 0


def cmd_make_toy(args):
    pairs = make_toy_task(
        args.kind, args.n_pairs, (args.min_len, args.max_len), args.vocab_size, args.seed
    )
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    with open(args.out, "w", encoding="utf-8") as fh:
        for source, target in pairs:
            fh.write(f"{source}\t{target}\n")
    print(f"wrote {len(pairs)} pairs to {args.out}")
    return 0


def cmd_eval(args):
    def read_lines(path):
        with open(path, "r", encoding="utf-8") as fh:
            return [line.rstrip("\n") for line in fh if line.strip()]

    candidates = read_lines(args.candidates)
    references = read_lines(args.references)
    if args.mode == "words":
        candidates = [c.split() for c in candidates]
        references = [r.split() for r in references]
    report = evaluate_corpus(candidates, references, max_n=args.max_n)
    logdir = _logdir_for(args)
    os.makedirs(logdir, exist_ok=True)
    path = os.path.join(logdir, "eval.tsv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(report.lines()) + "\n")
    for line in report.lines():
        print(line)
    return 0


# ---------------------------------------------------------------------------
# argument plumbing


def build_parser():
    parser = argparse.ArgumentParser(
        prog="moediff",
        description="sparse-attention mixture-of-experts sequence diffusion",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument(
            "--set", action="append", metavar="KEY=VALUE",
            help="override one config key (repeatable)",
        )
        p.add_argument("--logdir", help="output directory (default runs/<command>)")

    p = sub.add_parser("train", help="train a model on a corpus")
    common(p)
    p.add_argument("--corpus", help="tab-separated source/target pairs")
    p.add_argument("--checkpoint", help="path for the final checkpoint")
    p.add_argument("--steps", type=int, help="optimizer steps")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--window", type=int, help="attention window (ablation axis)")
    p.add_argument(
        "--diffusion-steps", dest="diffusion_steps", type=int,
        help="schedule length T (ablation axis)",
    )
    p.add_argument(
        "--attention", choices=("sparse", "standard"),
        help="attention kind (ablation axis)",
    )
    p.add_argument("--staged", choices=("true", "false"), help="staged curriculum")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="generate text from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="source text")
    p.add_argument("--num-steps", dest="num_steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-len", dest="max_len", type=int)
    p.add_argument("--trace", help="write a per-step trace file")
    p.add_argument(
        "--set", action="append", metavar="KEY=VALUE",
        help="override sampler keys; model keys must match the checkpoint",
    )
    p.add_argument("--logdir")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("gradcheck", help="compare analytic and numeric gradients")
    common(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-per-group", dest="n_per_group", type=int, default=20)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("bench", help="attention pair-count and timing bench")
    common(p)
    p.add_argument("--seq-lens", dest="seq_lens", default="128,256,512,1024,2048")
    p.add_argument("--window", type=int)
    p.add_argument("--dilation", type=int)
    p.add_argument("--runs", type=int, default=3)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("make-toy", help="generate a toy corpus file")
    p.add_argument("--kind", choices=("copy", "reverse", "sort"), required=True)
    p.add_argument("--n-pairs", dest="n_pairs", type=int, default=512)
    p.add_argument("--min-len", dest="min_len", type=int, default=1)
    p.add_argument("--max-len", dest="max_len", type=int, default=16)
    p.add_argument("--vocab-size", dest="vocab_size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_make_toy)

    p = sub.add_parser("eval", help="score candidates against references")
    p.add_argument("--candidates", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--mode", choices=("chars", "words"), default="chars")
    p.add_argument("--max-n", dest="max_n", type=int, default=2)
    p.add_argument("--logdir")
    p.set_defaults(fn=cmd_eval)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except _IO_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
