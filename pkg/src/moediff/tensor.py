"""Dense float64 tensors with reverse-mode autodiff on an explicit tape.

Everything in this package computes with `Tensor`, a thin wrapper around a
row-major float64 ndarray. Differentiable operations are free functions
(`matmul`, `softmax_lastdim`, ...) that record themselves on a `GradTape`
when any operand is attached to one; operands without a tape are treated as
constants. A tape is explicit and single-use: attach the leaves you care
about, build the graph, call `backward` on a scalar, and drop the tape.

Broadcasting is deliberately restricted to leading-dimension expansion: two
operands must either have identical shapes or the smaller shape must equal a
trailing suffix of the larger one (e.g. adding a `[width]` bias to a
`[batch, seq, width]` activation). Anything fancier raises `ShapeError`.
"""

import numpy as np

from .errors import DegenerateRowError, ShapeError

# Additive mask bias: large enough that exp() underflows to an exact 0.0
# after max-subtraction, small enough to stay finite in float64.
MASK_BIAS = -1e30


class Tensor:
    """A float64 array plus an optional gradient and tape handle."""

    __slots__ = ("data", "grad", "tape", "tape_id")

    def __init__(self, data, tape=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.tape = None
        self.tape_id = None
        if tape is not None:
            tape.watch(self)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        taped = "" if self.tape is None else ", taped"
        return f"Tensor(shape={self.data.shape}{taped})"


class GradTape:
    """Ordered record of one forward pass.

    Nodes are appended in construction order, so parents always precede
    children and the reverse sweep is a single pass that visits each node
    exactly once. A tape can run `backward` once; afterwards every watched
    leaf holds its gradient (zeros if unused) and is detached again.
    """

    def __init__(self):
        self._nodes = []  # (parent ids, backward closure); closure None for leaves
        self._leaves = []
        self._consumed = False

    def watch(self, tensor):
        """Register `tensor` as a differentiable leaf of this tape."""
        if tensor.tape is self:
            return tensor
        if tensor.tape is not None:
            raise ValueError("tensor is already attached to another tape")
        if self._consumed:
            raise ValueError("tape has already been consumed by backward()")
        tensor.tape = self
        tensor.tape_id = self._record((), None)
        self._leaves.append(tensor)
        return tensor

    def _record(self, parent_ids, backward_fn):
        if self._consumed:
            raise ValueError("tape has already been consumed by backward()")
        self._nodes.append((parent_ids, backward_fn))
        return len(self._nodes) - 1

    def release(self):
        """Detach all leaves without running backward (e.g. after a
        value-only evaluation or a failed forward pass)."""
        for leaf in self._leaves:
            leaf.tape = None
            leaf.tape_id = None

    def backward(self, loss):
        """Run the reverse sweep from scalar `loss`; fill `grad` on every
        watched leaf (zeros for leaves the loss does not depend on)."""
        if self._consumed:
            raise ValueError("tape has already been consumed by backward()")
        if loss.tape is not self:
            raise ValueError("loss tensor is not on this tape")
        if loss.data.size != 1:
            raise ShapeError(
                f"backward() needs a scalar loss, got shape {loss.data.shape}"
            )
        self._consumed = True
        grads = [None] * len(self._nodes)
        grads[loss.tape_id] = np.ones_like(loss.data)
        for nid in range(loss.tape_id, -1, -1):
            gout = grads[nid]
            if gout is None:
                continue
            parent_ids, backward_fn = self._nodes[nid]
            if backward_fn is None:
                continue
            for pid, pgrad in zip(parent_ids, backward_fn(gout)):
                if pid is None or pgrad is None:
                    continue
                if grads[pid] is None:
                    grads[pid] = pgrad
                else:
                    grads[pid] = grads[pid] + pgrad
        for leaf in self._leaves:
            g = grads[leaf.tape_id]
            leaf.grad = np.zeros_like(leaf.data) if g is None else g
            leaf.tape = None
            leaf.tape_id = None
        grads.clear()


def backward(loss):
    """Reverse sweep from `loss` on whatever tape it was built on."""
    if not isinstance(loss, Tensor) or loss.tape is None:
        raise ValueError("loss is not attached to an active tape")
    loss.tape.backward(loss)


# ---------------------------------------------------------------------------
# op plumbing


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*tensors):
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ValueError("operands live on different tapes")
    return tape


def _make(data, parents, backward_fn):
    """Wrap `data`; record the op if any parent is taped."""
    out = Tensor(data)
    tape = _tape_of(*parents)
    if tape is not None:
        ids = tuple(p.tape_id for p in parents)

        def guarded(gout):
            grads = backward_fn(gout)
            return tuple(
                g if pid is not None else None for pid, g in zip(ids, grads)
            )

        out.tape = tape
        out.tape_id = tape._record(ids, guarded)
    return out


def _check_suffix_broadcast(a_shape, b_shape):
    """Validate the leading-expansion broadcast rule; return output shape."""
    if a_shape == b_shape:
        return a_shape
    big, small = (a_shape, b_shape) if len(a_shape) >= len(b_shape) else (b_shape, a_shape)
    if len(big) == len(small) or big[len(big) - len(small):] != small:
        raise ShapeError(
            f"shapes {a_shape} and {b_shape} are incompatible: only "
            "leading-dimension expansion is supported"
        )
    return big


def _unbroadcast(grad, shape):
    """Sum a gradient over the leading axes introduced by broadcasting."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


# ---------------------------------------------------------------------------
# core ops


def matmul(a, b):
    """Matrix product over the last two axes.

    Leading (batch) dimensions must match exactly, or one operand may be a
    plain 2-D matrix shared across the other's batch.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    if a.shape[:-2] != b.shape[:-2] and a.ndim != 2 and b.ndim != 2:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def backward_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(data, (a, b), backward_fn)


def transpose(x):
    """Swap the last two axes."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"transpose needs rank >= 2, got {x.shape}")
    return _make(
        np.swapaxes(x.data, -1, -2),
        (x,),
        lambda g: (np.swapaxes(g, -1, -2),),
    )


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix_broadcast(a.shape, b.shape)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix_broadcast(a.shape, b.shape)

    def backward_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward_fn)


def scale(x, c):
    """Multiply by a python scalar constant."""
    x = as_tensor(x)
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,))


def relu(x):
    x = as_tensor(x)
    keep = x.data > 0
    return _make(np.where(keep, x.data, 0.0), (x,), lambda g: (g * keep,))


def sqdiff(a, b):
    """Elementwise squared difference (a - b)**2."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sqdiff needs equal shapes, got {a.shape} and {b.shape}")
    diff = a.data - b.data

    def backward_fn(g):
        d = 2.0 * diff * g
        return d, -d

    return _make(diff * diff, (a, b), backward_fn)


def tsum(x):
    """Full reduction to a scalar."""
    x = as_tensor(x)
    return _make(
        np.asarray(x.data.sum()),
        (x,),
        lambda g: (np.broadcast_to(g, x.shape).copy(),),
    )


def tmean(x):
    x = as_tensor(x)
    n = x.data.size
    return _make(
        np.asarray(x.data.mean()),
        (x,),
        lambda g: (np.broadcast_to(g / n, x.shape).copy(),),
    )


def reshape(x, shape):
    x = as_tensor(x)
    data = x.data.reshape(shape)
    return _make(data, (x,), lambda g: (g.reshape(x.shape),))


def slice_lastdim(x, start, stop):
    """Contiguous slice along the last axis."""
    x = as_tensor(x)

    def backward_fn(g):
        gx = np.zeros(x.shape)
        gx[..., start:stop] = g
        return (gx,)

    return _make(x.data[..., start:stop].copy(), (x,), backward_fn)


def concat_lastdim(parts):
    """Concatenate along the last axis."""
    parts = [as_tensor(p) for p in parts]
    widths = [p.shape[-1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def backward_fn(g):
        return tuple(
            g[..., offsets[i]:offsets[i + 1]].copy() for i in range(len(parts))
        )

    return _make(np.concatenate([p.data for p in parts], axis=-1), parts, backward_fn)


def rowscale(x, s):
    """Scale each last-axis row of `x` by the matching entry of `s`
    (`s.shape == x.shape[:-1]`)."""
    x, s = as_tensor(x), as_tensor(s)
    if s.shape != x.shape[:-1]:
        raise ShapeError(f"rowscale needs s shaped {x.shape[:-1]}, got {s.shape}")
    sd = s.data[..., None]

    def backward_fn(g):
        return g * sd, (g * x.data).sum(axis=-1)

    return _make(x.data * sd, (x, s), backward_fn)


def select_rows(row_mask, a, b):
    """Per-row selection: rows of `a` where `row_mask` is true, rows of `b`
    elsewhere. Selection copies bits exactly; gradients follow the mask."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"select_rows needs equal shapes, got {a.shape} and {b.shape}")
    mask = np.asarray(row_mask, dtype=bool)
    if mask.shape != a.shape[:-1]:
        raise ShapeError(
            f"select_rows mask must be shaped {a.shape[:-1]}, got {mask.shape}"
        )
    m = mask[..., None]

    def backward_fn(g):
        return np.where(m, g, 0.0), np.where(m, 0.0, g)

    return _make(np.where(m, a.data, b.data), (a, b), backward_fn)


def broadcast_rows(v, leading_shape):
    """Replicate a vector `v` across new leading dimensions."""
    v = as_tensor(v)
    if v.ndim != 1:
        raise ShapeError(f"broadcast_rows needs a vector, got {v.shape}")
    shape = tuple(leading_shape) + v.shape
    axes = tuple(range(len(leading_shape)))

    def backward_fn(g):
        return (g.sum(axis=axes) if axes else g,)

    return _make(np.broadcast_to(v.data, shape).copy(), (v,), backward_fn)


def gather_rows(table, ids):
    """Row lookup `table[ids]`; the embedding primitive.

    `table` is 2-D `[rows, width]`, `ids` any-shape integers; the result has
    shape `ids.shape + (width,)`. Backward scatter-adds into the table.
    """
    table = as_tensor(table)
    if table.ndim != 2:
        raise ShapeError(f"gather_rows table must be 2-D, got {table.shape}")
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("gather_rows ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"gather_rows id out of range for table with {table.shape[0]} rows"
        )
    width = table.shape[1]

    def backward_fn(g):
        gt = np.zeros(table.shape)
        np.add.at(gt, ids.ravel(), g.reshape(-1, width))
        return (gt,)

    return _make(table.data[ids], (table,), backward_fn)


def layernorm_lastdim(x, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance (no affine).

    `eps` is added to the variance, so a constant row maps to exact zeros.
    """
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def backward_fn(g):
        g_mean = g.mean(axis=-1, keepdims=True)
        gy_mean = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - g_mean - y * gy_mean),)

    return _make(y, (x,), backward_fn)


def _mask_for(x_shape, mask):
    mask = np.asarray(mask, dtype=bool)
    _check_suffix_broadcast(x_shape, mask.shape)
    if not mask.any(axis=-1).all():
        raise DegenerateRowError("softmax row has no unmasked entries")
    return mask


def softmax_lastdim(x, mask=None):
    """Row softmax over the last axis, optionally masked.

    Masking adds a large negative bias before the (max-subtracted) softmax
    and then forces masked entries to an exact 0.0, so unmasked entries of
    every row sum to 1 and no gradient leaks through masked pairs. A row
    with no unmasked entries raises `DegenerateRowError`.
    """
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        mask = _mask_for(x.shape, mask)
        z = z + np.where(mask, 0.0, MASK_BIAS)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - inner),)

    return _make(y, (x,), backward_fn)


def log_softmax_lastdim(x):
    """Numerically stable log-softmax over the last axis."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse
    sm = np.exp(y)

    def backward_fn(g):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return _make(y, (x,), backward_fn)
