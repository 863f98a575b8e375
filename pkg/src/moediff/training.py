"""Training loop, optimizer, and the analytic-vs-numeric gradient checker."""

import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import PAD_ID, Vocab, batchify, encode_pair
from .diffusion import build_sqrt_schedule, diffusion_loss
from .denoiser import DenoiserModel
from .errors import ConfigError, NumericError
from .metrics import exact_match
from .sampler import sample_batch


class Adam:
    """Adaptive-moment optimizer over a named parameter dict."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = {}
        self._v = {}

    def step(self, params):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.step_count
        bias2 = 1.0 - b2 ** self.step_count
        for name, p in params.items():
            if p.grad is None:
                continue
            m = self._m.setdefault(name, np.zeros_like(p.data))
            v = self._v.setdefault(name, np.zeros_like(p.data))
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad * p.grad
            p.data -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


@dataclass
class TrainResult:
    model: DenoiserModel
    schedule: object
    vocab: Vocab
    history: list = field(default_factory=list)
    eval_history: list = field(default_factory=list)
    final_loss: float = float("nan")
    stopped_early: bool = False


def _stage_plan(cfg):
    """(steps, window, seq_cap) per stage. The staged curriculum spends
    `stage_fraction` of the budget at half window / half sequence length."""
    if not cfg.staged:
        return [(cfg.train_steps, cfg.window, cfg.max_seq_len)]
    first = int(round(cfg.train_steps * cfg.stage_fraction))
    first = min(max(first, 0), cfg.train_steps)
    half_window = max(2, (cfg.window // 2) & ~1)
    plan = []
    if first:
        plan.append((first, half_window, max(4, cfg.max_seq_len // 2)))
    if cfg.train_steps - first:
        plan.append((cfg.train_steps - first, cfg.window, cfg.max_seq_len))
    return plan


def _fits(pair, vocab, cap):
    try:
        encode_pair(pair[0], pair[1], vocab, cap)
        return True
    except Exception:
        return False


def _holdout_exact_match(model, schedule, holdout, vocab, cfg):
    """Greedy decode of held-out pairs, grouped by source length."""
    sampler_cfg = cfg.sampler_config()
    by_len = {}
    for source, target in holdout:
        by_len.setdefault(len(source), []).append((source, target))
    outputs, targets = [], []
    for length, group in sorted(by_len.items()):
        sources = [vocab.encode(s) for s, _ in group]
        ids = sample_batch(sources, model, schedule, sampler_cfg)
        outputs.extend(vocab.decode(row) for row in ids)
        targets.extend(t for _, t in group)
    return exact_match(outputs, targets)


def train(cfg, pairs, holdout=None, logdir=None, log_fn=None, config_text=None):
    """Minimize the diffusion loss over `pairs` with the configured staged
    curriculum; returns the trained model plus history.

    A NaN loss raises `NumericError` immediately. When `holdout` pairs and
    `cfg.eval_every` are given, held-out exact match is measured
    periodically and training stops early once it reaches
    `cfg.stop_exact_match` (if that threshold is nonzero). Periodic
    checkpoints are written when `cfg.checkpoint_every`, `logdir` and
    `config_text` are all provided.
    """
    vocab = Vocab(list(cfg.vocab_chars)) if cfg.vocab_chars else Vocab.from_pairs(pairs)
    inferred = vocab.size
    if cfg.vocab_size and cfg.vocab_size < inferred:
        raise ConfigError(
            f"model.vocab_size {cfg.vocab_size} is smaller than the corpus needs "
            f"({inferred})"
        )
    vocab_size = cfg.vocab_size or inferred
    model = DenoiserModel(cfg.model_config(vocab_size=vocab_size), seed=cfg.seed)
    schedule = build_sqrt_schedule(cfg.diffusion_steps, p_max=cfg.p_max)
    optimizer = Adam(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    rng = np.random.default_rng(cfg.seed)

    result = TrainResult(model=model, schedule=schedule, vocab=vocab)
    log_file = None
    if logdir:
        os.makedirs(logdir, exist_ok=True)
        log_file = open(os.path.join(logdir, "train_log.tsv"), "w", encoding="utf-8")
        log_file.write("step\tloss\tema\tmse\treg\trounding\taux\texpert_counts\n")

    ema = None
    step = 0
    try:
        for stage_steps, window, seq_cap in _stage_plan(cfg):
            model.window = window
            usable = [p for p in pairs if _fits(p, vocab, seq_cap)]
            if not usable:
                raise ConfigError(
                    f"no training pairs fit the stage sequence cap {seq_cap}"
                )
            batches = []
            done = 0
            while done < stage_steps:
                if not batches:
                    batches = batchify(
                        usable, vocab, seq_cap, cfg.batch_size,
                        seed=int(rng.integers(2**31)),
                    )
                batch = batches.pop(0)
                stats = {}
                tape = T.GradTape()
                model.attach(tape)
                try:
                    loss = diffusion_loss(
                        batch, model, schedule, rng,
                        lambda_reg=cfg.lambda_reg,
                        rounding_weight=cfg.rounding_weight,
                        stats_out=stats,
                    )
                    value = loss.item()
                    if not np.isfinite(value):
                        raise NumericError(f"loss became {value} at step {step}")
                    tape.backward(loss)
                finally:
                    tape.release()
                model.emb.grad[PAD_ID] = 0.0  # pad row stays frozen at zero
                optimizer.step(model.parameters())
                model.zero_grad()

                ema = value if ema is None else 0.95 * ema + 0.05 * value
                result.final_loss = value
                step += 1
                done += 1

                if cfg.log_every and (step % cfg.log_every == 0 or step == 1):
                    counts = "|".join(
                        ",".join(str(c) for c in layer.counts)
                        for layer in stats.get("routing", [])
                    )
                    record = {
                        "step": step,
                        "loss": value,
                        "ema": ema,
                        "mse": stats.get("mse", 0.0),
                        "reg": stats.get("regularizer", 0.0),
                        "rounding": stats.get("rounding", 0.0),
                        "aux": stats.get("aux", 0.0),
                        "expert_counts": counts,
                    }
                    result.history.append(record)
                    if log_file:
                        log_file.write(
                            f"{step}\t{value!r}\t{ema!r}\t{record['mse']!r}\t"
                            f"{record['reg']!r}\t{record['rounding']!r}\t"
                            f"{record['aux']!r}\t{counts}\n"
                        )
                        log_file.flush()
                    if log_fn:
                        log_fn(record)

                if (
                    cfg.checkpoint_every
                    and logdir
                    and config_text is not None
                    and step % cfg.checkpoint_every == 0
                ):
                    from .checkpoint import save_model

                    save_model(
                        os.path.join(logdir, f"ckpt_{step}.mdsq"), config_text, model
                    )

                if (
                    holdout
                    and cfg.eval_every
                    and step % cfg.eval_every == 0
                ):
                    em = _holdout_exact_match(
                        model, schedule, holdout[: cfg.eval_samples], vocab, cfg
                    )
                    result.eval_history.append({"step": step, "exact_match": em})
                    if log_fn:
                        log_fn({"step": step, "exact_match": em})
                    if cfg.stop_exact_match and em >= cfg.stop_exact_match:
                        result.stopped_early = True
                        return result
    finally:
        if log_file:
            log_file.close()
    return result


# ---------------------------------------------------------------------------
# gradient checking


GRADCHECK_GROUPS = ("embeddings", "attention", "gates", "experts", "head")


def _group_of(name):
    if name in ("emb", "pos"):
        return "embeddings"
    if ".attn." in name or ".ln1." in name:
        return "attention"
    if name.endswith("moe.gate"):
        return "gates"
    if ".moe.experts." in name or ".ff." in name or ".ln2." in name:
        return "experts"
    return "head"  # final_ln.*, out.*, untied head


@dataclass
class GroupReport:
    group: str
    checked: int
    worst_rel_err: float
    worst_param: str
    passed: bool


def gradient_check(
    model,
    batch,
    schedule,
    loss_seed=0,
    n_per_group=20,
    h=1e-5,
    tol=1e-5,
    lambda_reg=1.0,
    rounding_weight=1.0,
    pick_seed=0,
):
    """Compare backward() against central finite differences on randomly
    chosen parameters in each group.

    The loss rng is reseeded identically for every evaluation, so the
    objective is a deterministic function of the parameters. The error is
    relative to the gradient magnitude with a 1e-3 floor, which demands
    1e-8 absolute agreement for near-zero gradients.
    """

    def loss_value():
        loss = diffusion_loss(
            batch, model, schedule, np.random.default_rng(loss_seed),
            lambda_reg=lambda_reg, rounding_weight=rounding_weight,
        )
        return float(loss.data)

    params = model.parameters()
    tape = T.GradTape()
    model.attach(tape)
    try:
        loss = diffusion_loss(
            batch, model, schedule, np.random.default_rng(loss_seed),
            lambda_reg=lambda_reg, rounding_weight=rounding_weight,
        )
        tape.backward(loss)
    finally:
        tape.release()
    analytic = {name: p.grad.copy() for name, p in params.items()}
    model.zero_grad()

    by_group = {g: [] for g in GRADCHECK_GROUPS}
    for name in params:
        by_group[_group_of(name)].append(name)

    rng = np.random.default_rng(pick_seed)
    reports = []
    for group in GRADCHECK_GROUPS:
        names = by_group[group]
        if not names:
            continue
        sizes = np.array([params[n].size for n in names])
        worst = (0.0, "")
        checked = 0
        for _ in range(n_per_group):
            name = names[int(rng.choice(len(names), p=sizes / sizes.sum()))]
            flat = params[name].data.reshape(-1)
            idx = int(rng.integers(flat.size))
            orig = flat[idx]
            flat[idx] = orig + h
            f_plus = loss_value()
            flat[idx] = orig - h
            f_minus = loss_value()
            flat[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = analytic[name].reshape(-1)[idx]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-3)
            checked += 1
            if rel > worst[0]:
                worst = (rel, f"{name}[{idx}]")
        reports.append(
            GroupReport(
                group=group,
                checked=checked,
                worst_rel_err=worst[0],
                worst_param=worst[1],
                passed=worst[0] < tol,
            )
        )
    return reports
