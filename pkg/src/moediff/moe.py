"""Mixture-of-experts feed-forward layer with softmax gating.

The gate is a linear map to expert logits followed by a softmax. Routing
takes the top-k experts per token and renormalizes their probabilities by
taking a masked softmax over the same logits, which reproduces
p_i / sum_{j in topk} p_j exactly and keeps every unselected weight an
exact zero (so unselected experts receive no gradient for that token).
With top_k == num_experts the layer is the plain dense mixture
sum_i p_i * E_i(x).

The auxiliary loss is the usual load-balance penalty:
num_experts * sum_i fraction_routed(i) * mean_gate_prob(i), scaled by the
layer coefficient. Ties in the gate route to the lower expert index.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError


class FeedForward:
    """Two-layer relu MLP (width -> hidden -> width); one expert."""

    def __init__(self, width, hidden, rng):
        self.w1 = T.Tensor(rng.normal(0.0, 1.0 / np.sqrt(width), (width, hidden)))
        self.b1 = T.Tensor(np.zeros(hidden))
        self.w2 = T.Tensor(rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, width)))
        self.b2 = T.Tensor(np.zeros(width))

    def __call__(self, x):
        h = T.relu(T.add(T.matmul(x, self.w1), self.b1))
        return T.add(T.matmul(h, self.w2), self.b2)

    def parameters(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


class MoELayer:
    """Gate weights plus a bank of identically shaped experts."""

    def __init__(self, width, num_experts, top_k, hidden, rng, aux_loss_coeff=0.01):
        if not 1 <= top_k <= num_experts:
            raise ConfigError(
                f"top_k must be in [1, num_experts], got {top_k} of {num_experts}"
            )
        if aux_loss_coeff < 0:
            raise ConfigError(f"aux_loss_coeff must be >= 0, got {aux_loss_coeff}")
        self.width = width
        self.num_experts = num_experts
        self.top_k = top_k
        self.aux_loss_coeff = aux_loss_coeff
        # near-zero gate init keeps early routing close to uniform
        self.gate_weights = T.Tensor(rng.normal(0.0, 0.01, (width, num_experts)))
        self.experts = [FeedForward(width, hidden, rng) for _ in range(num_experts)]

    def parameters(self):
        params = {"gate": self.gate_weights}
        for i, expert in enumerate(self.experts):
            for name, p in expert.parameters().items():
                params[f"experts.{i}.{name}"] = p
        return params


@dataclass
class RoutingStats:
    """Per-expert accounting for one routed tensor of tokens."""

    counts: np.ndarray       # tokens routed to each expert; sums to n_tokens * top_k
    mean_gate_prob: np.ndarray
    n_tokens: int
    top_k: int


class ForwardTrace:
    """Side channel filled during a denoiser forward pass: the auxiliary
    losses and routing stats of every expert layer the pass touched."""

    def __init__(self):
        self.aux_losses = []
        self.routing = []

    def add(self, aux, stats):
        self.aux_losses.append(aux)
        self.routing.append(stats)

    def total_aux(self):
        total = None
        for aux in self.aux_losses:
            total = aux if total is None else T.add(total, aux)
        return total

    def expert_counts(self):
        return [stats.counts.tolist() for stats in self.routing]


def _gate_logits(x, layer):
    if x.shape[-1] != layer.width:
        raise ShapeError(
            f"input width {x.shape[-1]} does not match gate width {layer.width}"
        )
    return T.matmul(x, layer.gate_weights)


def gate(x, layer):
    """Expert selection probabilities for token(s) `x`."""
    x = T.as_tensor(x)
    if x.ndim == 1:
        probs = T.softmax_lastdim(_gate_logits(T.reshape(x, (1, -1)), layer))
        return T.reshape(probs, (layer.num_experts,))
    return T.softmax_lastdim(_gate_logits(x, layer))


def topk_mask(probs, k):
    """Boolean top-k selection along the last axis; ties keep the lower
    expert index (stable sort on negated probabilities)."""
    order = np.argsort(-np.asarray(probs), axis=-1, kind="stable")
    mask = np.zeros(np.asarray(probs).shape, dtype=bool)
    np.put_along_axis(mask, order[..., :k], True, axis=-1)
    return mask


def _apply(x, layer):
    """Shared forward: returns (output, aux_loss, RoutingStats)."""
    x = T.as_tensor(x)
    logits = _gate_logits(x, layer)
    probs = T.softmax_lastdim(logits)
    selected = topk_mask(probs.data, layer.top_k)
    weights = T.softmax_lastdim(logits, mask=selected)

    out = None
    for i, expert in enumerate(layer.experts):
        w_i = T.reshape(T.slice_lastdim(weights, i, i + 1), x.shape[:-1])
        term = T.rowscale(expert(x), w_i)
        out = term if out is None else T.add(out, term)

    flat_probs = probs.data.reshape(-1, layer.num_experts)
    counts = selected.reshape(-1, layer.num_experts).sum(axis=0)
    n_tokens = flat_probs.shape[0]
    stats = RoutingStats(
        counts=counts,
        mean_gate_prob=flat_probs.mean(axis=0),
        n_tokens=n_tokens,
        top_k=layer.top_k,
    )

    # load balance: num_experts * sum_i f_i * P_i, with f_i the fraction of
    # routing slots taken by expert i (so sum_i f_i == 1) and P_i the mean
    # full-softmax gate probability
    fractions = counts / (n_tokens * layer.top_k)
    penalty = T.scale(
        T.tsum(T.mul(probs, T.Tensor(fractions))), layer.num_experts / n_tokens
    )
    aux = T.scale(penalty, layer.aux_loss_coeff)
    return out, aux, stats


def moe_forward(x, layer):
    """Route `x` (`[..., seq, width]`) through the expert bank.

    Returns the combined expert output and the (coefficient-scaled)
    load-balance auxiliary loss.
    """
    out, aux, _ = _apply(x, layer)
    return out, aux


def routing_stats(x, layer):
    """Routing accounting for `x` without touching any tape."""
    x = T.Tensor(np.asarray(x if not isinstance(x, T.Tensor) else x.data))
    _, _, stats = _apply(x, layer)
    return stats
