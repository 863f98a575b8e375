"""Sparse attention: windowed/dilated masks, global tokens, masked MHA.

A mask is a dense boolean matrix at desk scale (rows are queries, columns
are keys). Query i may attend key j iff

    |i - j| <= (w/2) * d  and  (i - j) % d == 0,

i.e. a symmetric window of w/2 attended keys on each side, spaced d apart,
or if either endpoint is a designated global position (global attention is
bidirectional). The self pair i == j is always allowed.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class SparseAttentionConfig:
    """Window geometry plus the head/layer counts that depend on it."""

    window_w: int
    dilation_d: int = 1
    global_positions: frozenset = field(default_factory=frozenset)
    num_heads: int = 1
    head_dim: int = 1
    num_layers_l: int = 1

    def __post_init__(self):
        problems = []
        if self.window_w < 2 or self.window_w % 2 != 0:
            problems.append(f"window_w must be even and >= 2, got {self.window_w}")
        if self.dilation_d < 1:
            problems.append(f"dilation_d must be >= 1, got {self.dilation_d}")
        if self.num_heads < 1 or self.head_dim < 1 or self.num_layers_l < 1:
            problems.append("num_heads, head_dim and num_layers_l must be >= 1")
        if any(p < 0 for p in self.global_positions):
            problems.append("global_positions must be non-negative")
        if problems:
            raise ConfigError("; ".join(problems))
        object.__setattr__(self, "global_positions", frozenset(self.global_positions))

    @property
    def model_width(self):
        return self.num_heads * self.head_dim


class AttentionMask:
    """Boolean attention pattern with a cached pair count."""

    __slots__ = ("seq_len", "allowed", "pair_count")

    def __init__(self, allowed):
        allowed = np.asarray(allowed, dtype=bool)
        if allowed.ndim != 2 or allowed.shape[0] != allowed.shape[1]:
            raise ShapeError(f"attention mask must be square, got {allowed.shape}")
        if not allowed.diagonal().all():
            raise ConfigError("every query must at least attend to itself")
        self.seq_len = allowed.shape[0]
        self.allowed = allowed
        self.pair_count = int(allowed.sum())


def build_window_mask(seq_len, cfg):
    """Dilated sliding-window mask, optionally with global rows/columns."""
    if seq_len < 1:
        raise ConfigError(f"seq_len must be >= 1, got {seq_len}")
    if any(g >= seq_len for g in cfg.global_positions):
        raise ConfigError(
            f"global position out of range for seq_len={seq_len}: "
            f"{sorted(cfg.global_positions)}"
        )
    idx = np.arange(seq_len)
    diff = idx[:, None] - idx[None, :]
    half_span = (cfg.window_w // 2) * cfg.dilation_d
    allowed = (np.abs(diff) <= half_span) & (diff % cfg.dilation_d == 0)
    if cfg.global_positions:
        is_global = np.zeros(seq_len, dtype=bool)
        is_global[sorted(cfg.global_positions)] = True
        allowed |= is_global[:, None] | is_global[None, :]
    return AttentionMask(allowed)


def dense_mask(seq_len):
    """All-pairs mask; the quadratic baseline."""
    return AttentionMask(np.ones((seq_len, seq_len), dtype=bool))


def count_attended_pairs(mask):
    """Exact number of (query, key) pairs the mask admits."""
    return mask.pair_count


def receptive_field(cfg):
    """Nominal receptive field of a stack: layers * dilation * window."""
    return cfg.num_layers_l * cfg.dilation_d * cfg.window_w


def reachability_span(seq_len, cfg):
    """Per-token count of input positions reachable after `num_layers_l`
    hops of the one-layer mask (boolean relational composition).

    Away from the sequence edges and with no global tokens, the center
    token reaches exactly l*w + 1 positions spaced d apart, spanning an
    inclusive extent of l*d*w + 1 columns; `receptive_field` reports the
    matching l*d*w product.
    """
    one = build_window_mask(seq_len, cfg).allowed
    reach = one.copy()
    for _ in range(cfg.num_layers_l - 1):
        reach = (reach.astype(np.uint8) @ one.astype(np.uint8)) > 0
    return reach.sum(axis=1)


def masked_multihead_attention(q, k, v, mask, num_heads):
    """Scaled dot-product attention per head under a boolean mask.

    `q`, `k`, `v` are `[..., seq, width]` with width divisible by
    `num_heads`; masked pairs receive a large negative bias before the
    softmax so they contribute an exact zero weight and no gradient.
    """
    q, k, v = T.as_tensor(q), T.as_tensor(k), T.as_tensor(v)
    if q.shape != k.shape or q.shape != v.shape:
        raise ShapeError(f"q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    width = q.shape[-1]
    if width % num_heads != 0:
        raise ShapeError(f"width {width} not divisible by {num_heads} heads")
    if q.shape[-2] != mask.seq_len:
        raise ShapeError(
            f"mask covers {mask.seq_len} positions but sequence has {q.shape[-2]}"
        )
    head_dim = width // num_heads
    outputs = []
    for h in range(num_heads):
        lo, hi = h * head_dim, (h + 1) * head_dim
        qh = T.slice_lastdim(q, lo, hi)
        kh = T.slice_lastdim(k, lo, hi)
        vh = T.slice_lastdim(v, lo, hi)
        scores = T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / np.sqrt(head_dim))
        weights = T.softmax_lastdim(scores, mask=mask.allowed)
        outputs.append(T.matmul(weights, vh))
    return T.concat_lastdim(outputs)
