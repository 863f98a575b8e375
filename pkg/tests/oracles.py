"""Independent reference implementations used as test oracles.

Nothing here imports from the package's compute paths beyond the Tensor
container itself; every function is a standalone numpy (or pure python)
re-derivation of the quantity it checks.
"""

import numpy as np


def finite_diff_grad(f, x, h=1e-5):
    """Central finite differences of a scalar function wrt ndarray `x`.

    `f` takes no arguments and closes over `x`; entries of `x` are perturbed
    in place and restored.
    """
    grad = np.zeros_like(x)
    flat_x = x.ravel()
    flat_g = grad.ravel()
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + h
        f_plus = f()
        flat_x[i] = orig - h
        f_minus = f()
        flat_x[i] = orig
        flat_g[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def max_rel_err(a, b, floor=1e-8):
    """Worst-case relative error between two gradient arrays."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def dense_attention(q, k, v, allowed, num_heads):
    """Naive multi-head attention with a -inf additive mask.

    Completely independent of the package's masked-softmax path: plain
    numpy, explicit per-head loop, exp/normalize written out directly.
    """
    q, k, v = (np.asarray(a, dtype=float) for a in (q, k, v))
    seq, width = q.shape
    dk = width // num_heads
    out = np.zeros((seq, width))
    for h in range(num_heads):
        sl = slice(h * dk, (h + 1) * dk)
        scores = q[:, sl] @ k[:, sl].T / np.sqrt(dk)
        scores = np.where(allowed, scores, -np.inf)
        scores = scores - scores.max(axis=1, keepdims=True)
        weights = np.exp(scores)
        weights = weights / weights.sum(axis=1, keepdims=True)
        out[:, sl] = weights @ v[:, sl]
    return out


def bfs_reachable(allowed, start, n_layers):
    """Set of input positions reachable from `start` through `n_layers`
    applications of the attention graph (BFS over the mask)."""
    frontier = {start}
    for _ in range(n_layers):
        nxt = set()
        for i in frontier:
            nxt.update(np.nonzero(allowed[i])[0].tolist())
        frontier = nxt
    return frontier


def dense_mixture(x, gate_w, expert_weights):
    """Full mixture-of-experts forward: softmax gate over all experts,
    output = sum_i p_i * E_i(x), every expert evaluated densely."""
    x = np.asarray(x, dtype=float)
    logits = x @ gate_w
    logits = logits - logits.max(axis=-1, keepdims=True)
    probs = np.exp(logits)
    probs = probs / probs.sum(axis=-1, keepdims=True)
    out = np.zeros_like(x)
    for i, (w1, b1, w2, b2) in enumerate(expert_weights):
        hidden = np.maximum(x @ w1 + b1, 0.0)
        out += probs[..., i:i + 1] * (hidden @ w2 + b2)
    return out
