"""Text-generation metrics and the attention-complexity bench.

Metric inputs are token sequences. A plain string works as a sequence of
characters (the natural unit for the toy corpora); pass `text.split()` for
word-level scoring. BLEU uses standard clipped n-gram counting with a
brevity penalty and no smoothing: any empty n-gram bucket zeroes the
geometric mean, so score short strings with a small `max_n`.
"""

import time
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .attention import (
    build_window_mask,
    count_attended_pairs,
    dense_mask,
    masked_multihead_attention,
)
from .errors import EvalError


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates, references, max_n=4):
    """Corpus BLEU with uniform weights up to `max_n`."""
    if len(candidates) != len(references):
        raise EvalError(
            f"got {len(candidates)} candidates for {len(references)} references"
        )
    if not candidates:
        raise EvalError("cannot score an empty corpus")
    cand_len = 0
    ref_len = 0
    matched = [0] * max_n
    total = [0] * max_n
    for cand, ref in zip(candidates, references):
        cand = list(cand)
        ref = list(ref)
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            cgrams = _ngrams(cand, n)
            rgrams = _ngrams(ref, n)
            matched[n - 1] += sum(min(c, rgrams[g]) for g, c in cgrams.items())
            total[n - 1] += max(len(cand) - n + 1, 0)
    if cand_len == 0:
        return 0.0
    # orders with no candidate n-grams at all are unmeasurable and skipped
    # (so identical corpora score 1.0 regardless of length); an order with
    # candidates but zero matches still zeroes the geometric mean
    precisions = [m / t for m, t in zip(matched, total) if t]
    if not precisions or min(precisions) == 0.0:
        return 0.0
    log_mean = sum(np.log(p) for p in precisions) / len(precisions)
    brevity = 1.0 if cand_len > ref_len else np.exp(1.0 - ref_len / cand_len)
    return float(brevity * np.exp(log_mean))


def _lcs_length(a, b):
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference):
    """LCS-based F1 (beta = 1); 0.0 when both sides are empty."""
    cand = list(candidate)
    ref = list(reference)
    if not cand or not ref:
        return 0.0
    lcs = _lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    precision = lcs / len(cand)
    recall = lcs / len(ref)
    return 2.0 * precision * recall / (precision + recall)


def distinct2(candidates):
    """Unique bigrams over total bigrams across the whole candidate set."""
    total = 0
    seen = set()
    for cand in candidates:
        cand = list(cand)
        for i in range(len(cand) - 1):
            total += 1
            seen.add((cand[i], cand[i + 1]))
    return len(seen) / total if total else 0.0


def exact_match(candidates, references):
    if len(candidates) != len(references):
        raise EvalError(
            f"got {len(candidates)} candidates for {len(references)} references"
        )
    if not candidates:
        raise EvalError("cannot score an empty corpus")
    hits = sum(list(c) == list(r) for c, r in zip(candidates, references))
    return hits / len(candidates)


@dataclass
class EvalReport:
    bleu: float
    rouge_l: float
    distinct2: float
    exact_match: float
    n_samples: int

    def lines(self):
        return [
            f"n_samples\t{self.n_samples}",
            f"bleu\t{self.bleu:.6f}",
            f"rouge_l\t{self.rouge_l:.6f}",
            f"distinct2\t{self.distinct2:.6f}",
            f"exact_match\t{self.exact_match:.6f}",
        ]


def evaluate_corpus(candidates, references, max_n=2):
    """Bundle all metrics over one candidate/reference corpus."""
    scores = EvalReport(
        bleu=bleu(candidates, references, max_n=max_n),
        rouge_l=float(
            np.mean([rouge_l(c, r) for c, r in zip(candidates, references)])
        ),
        distinct2=distinct2(candidates),
        exact_match=exact_match(candidates, references),
        n_samples=len(candidates),
    )
    for name in ("bleu", "rouge_l", "distinct2", "exact_match"):
        value = getattr(scores, name)
        if not 0.0 <= value <= 1.0:
            raise EvalError(f"{name} fell outside [0, 1]: {value}")
    return scores


# ---------------------------------------------------------------------------
# complexity bench


@dataclass
class BenchRow:
    seq_len: int
    attention_kind: str
    pair_count: int
    wall_time: float


@dataclass
class BenchReport:
    rows: list = field(default_factory=list)
    slopes: dict = field(default_factory=dict)

    def pair_counts(self, kind):
        return [(r.seq_len, r.pair_count) for r in self.rows if r.attention_kind == kind]


def _loglog_slope(points):
    n = np.log([p[0] for p in points])
    y = np.log([float(p[1]) for p in points])
    return float(np.polyfit(n, y, 1)[0])


def bench_attention(seq_lens, cfg, runs=3, rng_seed=0):
    """Exact pair counts plus median attention wall time for the sparse
    config against the dense baseline, with fitted log-log growth slopes."""
    seq_lens = list(seq_lens)
    if seq_lens != sorted(seq_lens):
        raise EvalError("seq_lens must be sorted ascending")
    rng = np.random.default_rng(rng_seed)
    width = cfg.model_width
    report = BenchReport()
    for n in seq_lens:
        q, k, v = (rng.normal(size=(n, width)) for _ in range(3))
        for kind, mask in (
            ("sparse", build_window_mask(n, cfg)),
            ("dense", dense_mask(n)),
        ):
            times = []
            for _ in range(runs):
                start = time.perf_counter()
                masked_multihead_attention(q, k, v, mask, cfg.num_heads)
                times.append(time.perf_counter() - start)
            report.rows.append(
                BenchRow(
                    seq_len=n,
                    attention_kind=kind,
                    pair_count=count_attended_pairs(mask),
                    wall_time=float(np.median(times)),
                )
            )
    if len(seq_lens) >= 2:
        for kind in ("sparse", "dense"):
            report.slopes[kind] = _loglog_slope(report.pair_counts(kind))
    return report


def write_bench_report(report, path):
    """Tab-delimited rows plus slope footer comments."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("seq_len\tattention_kind\tpair_count\twall_time\n")
        for r in report.rows:
            fh.write(f"{r.seq_len}\t{r.attention_kind}\t{r.pair_count}\t{r.wall_time!r}\n")
        for kind, slope in sorted(report.slopes.items()):
            fh.write(f"# slope\t{kind}\t{slope!r}\n")


def read_bench_report(path):
    report = BenchReport()
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().strip().split("\n")
    for line in lines[1:]:
        if line.startswith("# slope"):
            _, kind, slope = line.split("\t")
            report.slopes[kind] = float(slope)
            continue
        n, kind, pairs, wall = line.split("\t")
        report.rows.append(
            BenchRow(
                seq_len=int(n),
                attention_kind=kind,
                pair_count=int(pairs),
                wall_time=float(wall),
            )
        )
    return report
