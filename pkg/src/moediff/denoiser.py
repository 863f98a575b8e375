"""The denoising network: embeddings, sparse-attention blocks with expert
feed-forwards, and the rounding head.

Architecture (pre-layernorm residual blocks):

    h = z_t + time_sinusoid(t / T) + learned_position_rows
    repeat num_layers times:
        h += W_o . attention(W_q a, W_k a, W_v a)   with a = affine(ln(h))
        h += experts(affine(ln(h)))                  (routed, or plain FF)
    out = W_out . affine(ln(h)) + b_out              (predicted clean embeddings)

The rounding head maps predicted embeddings to vocabulary logits; it is
tied to the embedding table unless configured otherwise. The pad embedding
row is pinned at zero (its gradient is dropped by the trainer).
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .attention import (
    SparseAttentionConfig,
    build_window_mask,
    dense_mask,
    masked_multihead_attention,
)
from .data import MASK_ID, PAD_ID
from .errors import ConfigError, VocabularyError
from .moe import FeedForward, ForwardTrace, MoELayer, _apply as _moe_apply


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    width: int = 128
    num_layers: int = 4
    num_heads: int = 4
    head_dim: int = 32
    window: int = 32
    dilation: object = 1            # int, or one int per layer
    global_positions: tuple = ()
    attention_kind: str = "sparse"  # "sparse" | "standard" (dense)
    num_experts: int = 4
    moe_top_k: int = 2
    moe_hidden: int = 0             # 0 -> 4 * width
    moe_every_layer: bool = True    # False -> experts on odd layers only
    aux_loss_coeff: float = 0.01
    T: int = 2048
    max_seq_len: int = 256
    tie_output_head: bool = True

    def __post_init__(self):
        problems = self.validate()
        if problems:
            raise ConfigError("; ".join(problems))
        object.__setattr__(self, "global_positions", tuple(self.global_positions))

    def validate(self):
        problems = []
        if self.vocab_size < 5:
            problems.append(f"vocab_size must cover the 4 reserved ids, got {self.vocab_size}")
        if self.width != self.num_heads * self.head_dim:
            problems.append(
                f"width {self.width} != num_heads {self.num_heads} * head_dim {self.head_dim}"
            )
        if self.num_layers < 1:
            problems.append(f"num_layers must be >= 1, got {self.num_layers}")
        if self.window < 2 or self.window % 2:
            problems.append(f"window must be even and >= 2, got {self.window}")
        for d in self.dilations():
            if d < 1:
                problems.append(f"dilation must be >= 1, got {d}")
        if len(tuple(self.dilations())) != self.num_layers:
            problems.append("dilation must be scalar or one value per layer")
        if self.attention_kind not in ("sparse", "standard"):
            problems.append(f"attention_kind must be sparse|standard, got {self.attention_kind}")
        if not 1 <= self.moe_top_k <= self.num_experts:
            problems.append(
                f"moe_top_k must be in [1, num_experts={self.num_experts}], got {self.moe_top_k}"
            )
        if self.aux_loss_coeff < 0:
            problems.append(f"aux_loss_coeff must be >= 0, got {self.aux_loss_coeff}")
        if self.T < 2:
            problems.append(f"T must be >= 2, got {self.T}")
        if self.max_seq_len < 2:
            problems.append(f"max_seq_len must be >= 2, got {self.max_seq_len}")
        if any(g < 0 or g >= self.max_seq_len for g in self.global_positions):
            problems.append("global_positions must lie in [0, max_seq_len)")
        return problems

    def dilations(self):
        if isinstance(self.dilation, int):
            return (self.dilation,) * self.num_layers
        return tuple(int(d) for d in self.dilation)

    @property
    def hidden(self):
        return self.moe_hidden if self.moe_hidden else 4 * self.width

    def has_moe(self, layer_index):
        return self.moe_every_layer or layer_index % 2 == 1

    def attention_config(self, layer_index, window=None):
        return SparseAttentionConfig(
            window_w=window or self.window,
            dilation_d=self.dilations()[layer_index],
            global_positions=frozenset(self.global_positions),
            num_heads=self.num_heads,
            head_dim=self.head_dim,
            num_layers_l=self.num_layers,
        )


def count_parameters(cfg):
    """Closed-form parameter count for a config.

    emb V*W + pos S*W
    + per layer: 2W (ln1) + 4(W^2+W) (q,k,v,o) + 2W (ln2)
                 + [W*E + E*(W*H + H + H*W + W)]  (expert layers)
                 or [W*H + H + H*W + W]           (plain FF layers)
    + 2W (final ln) + W^2 + W (output projection)
    + W*V if the rounding head is untied.
    """
    w, h, e = cfg.width, cfg.hidden, cfg.num_experts
    ff = w * h + h + h * w + w
    total = cfg.vocab_size * w + cfg.max_seq_len * w
    for i in range(cfg.num_layers):
        total += 2 * w + 4 * (w * w + w) + 2 * w
        total += (w * e + e * ff) if cfg.has_moe(i) else ff
    total += 2 * w + w * w + w
    if not cfg.tie_output_head:
        total += w * cfg.vocab_size
    return total


def time_embedding(t, total_steps, width):
    """Sinusoidal features of the normalized step t / T."""
    pos = 1000.0 * float(t) / float(total_steps)
    half = (width + 1) // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    angles = pos * freqs
    vec = np.concatenate([np.sin(angles), np.cos(angles)])[:width]
    return vec


class _Affine:
    """Layernorm gain/bias pair."""

    def __init__(self, width):
        self.g = T.Tensor(np.ones(width))
        self.b = T.Tensor(np.zeros(width))

    def __call__(self, x):
        return T.add(T.mul(T.layernorm_lastdim(x), self.g), self.b)

    def parameters(self):
        return {"g": self.g, "b": self.b}


class _Block:
    def __init__(self, cfg, layer_index, rng):
        w = cfg.width
        std = 1.0 / np.sqrt(w)
        self.ln1 = _Affine(w)
        self.attn = {
            "wq": T.Tensor(rng.normal(0, std, (w, w))),
            "bq": T.Tensor(np.zeros(w)),
            "wk": T.Tensor(rng.normal(0, std, (w, w))),
            "bk": T.Tensor(np.zeros(w)),
            "wv": T.Tensor(rng.normal(0, std, (w, w))),
            "bv": T.Tensor(np.zeros(w)),
            "wo": T.Tensor(rng.normal(0, std, (w, w))),
            "bo": T.Tensor(np.zeros(w)),
        }
        self.ln2 = _Affine(w)
        if cfg.has_moe(layer_index):
            self.moe = MoELayer(
                w, cfg.num_experts, cfg.moe_top_k, cfg.hidden, rng, cfg.aux_loss_coeff
            )
            self.ff = None
        else:
            self.moe = None
            self.ff = FeedForward(w, cfg.hidden, rng)

    def parameters(self):
        params = {}
        for name, p in self.ln1.parameters().items():
            params[f"ln1.{name}"] = p
        for name, p in self.attn.items():
            params[f"attn.{name}"] = p
        for name, p in self.ln2.parameters().items():
            params[f"ln2.{name}"] = p
        if self.moe is not None:
            for name, p in self.moe.parameters().items():
                params[f"moe.{name}"] = p
        else:
            for name, p in self.ff.parameters().items():
                params[f"ff.{name}"] = p
        return params


class DenoiserModel:
    """f_theta plus its embedding tables and rounding head."""

    def __init__(self, cfg, seed=0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.emb = T.Tensor(rng.normal(0.0, 0.5, (cfg.vocab_size, cfg.width)))
        self.emb.data[PAD_ID] = 0.0
        self.pos = T.Tensor(rng.normal(0.0, 0.02, (cfg.max_seq_len, cfg.width)))
        self.blocks = [_Block(cfg, i, rng) for i in range(cfg.num_layers)]
        self.final_ln = _Affine(cfg.width)
        std = 1.0 / np.sqrt(cfg.width)
        self.out_w = T.Tensor(rng.normal(0, std, (cfg.width, cfg.width)))
        self.out_b = T.Tensor(np.zeros(cfg.width))
        self.head = (
            None
            if cfg.tie_output_head
            else T.Tensor(rng.normal(0, std, (cfg.width, cfg.vocab_size)))
        )
        # runtime attention knobs; the staged curriculum narrows the window
        self.window = cfg.window
        self.attention_kind = cfg.attention_kind
        self._mask_cache = {}

    # -- parameters ---------------------------------------------------------

    def parameters(self):
        params = {"emb": self.emb, "pos": self.pos}
        for i, block in enumerate(self.blocks):
            for name, p in block.parameters().items():
                params[f"layers.{i}.{name}"] = p
        for name, p in self.final_ln.parameters().items():
            params[f"final_ln.{name}"] = p
        params["out.w"] = self.out_w
        params["out.b"] = self.out_b
        if self.head is not None:
            params["head"] = self.head
        return params

    def attach(self, tape):
        for p in self.parameters().values():
            tape.watch(p)
        return tape

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None

    def num_parameters(self):
        return sum(p.size for p in self.parameters().values())

    # -- pieces -------------------------------------------------------------

    def embed(self, tokens):
        tokens = np.asarray(tokens)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size):
            raise VocabularyError(
                f"token id outside vocabulary of size {self.cfg.vocab_size}"
            )
        return T.gather_rows(self.emb, tokens)

    def mask_vector(self):
        """The learned absorbing-state embedding row."""
        return T.reshape(T.gather_rows(self.emb, np.array([MASK_ID])), (self.cfg.width,))

    def logits(self, z0_hat):
        if self.head is None:
            return T.matmul(z0_hat, T.transpose(self.emb))
        return T.matmul(z0_hat, self.head)

    def mask_for(self, seq_len, layer_index):
        if self.attention_kind == "standard":
            key = (seq_len, "standard")
            if key not in self._mask_cache:
                self._mask_cache[key] = dense_mask(seq_len)
            return self._mask_cache[key]
        cfg = self.cfg.attention_config(layer_index, window=self.window)
        key = (seq_len, cfg.window_w, cfg.dilation_d, cfg.global_positions)
        if key not in self._mask_cache:
            self._mask_cache[key] = build_window_mask(seq_len, cfg)
        return self._mask_cache[key]

    # -- forward ------------------------------------------------------------

    def forward(self, z_t, t, trace=None):
        """Predict clean embeddings from noisy ones at step(s) `t`.

        `z_t` is `[seq, width]` or `[batch, seq, width]`; `t` is an int in
        [0, T], or one int per batch row. Expert auxiliary losses and
        routing stats are collected into `trace` when given.
        """
        z_t = T.as_tensor(z_t)
        seq_len = z_t.shape[-2]
        if seq_len > self.cfg.max_seq_len:
            raise ConfigError(
                f"sequence length {seq_len} exceeds max_seq_len {self.cfg.max_seq_len}"
            )
        t_arr = np.asarray(t)
        if np.any(t_arr < 0) or np.any(t_arr > self.cfg.T):
            raise ConfigError(f"t must lie in [0, {self.cfg.T}], got {t}")
        if t_arr.ndim == 0:
            time_rows = time_embedding(int(t_arr), self.cfg.T, self.cfg.width)
        else:
            vecs = np.stack(
                [time_embedding(int(ti), self.cfg.T, self.cfg.width) for ti in t_arr]
            )
            time_rows = np.broadcast_to(vecs[:, None, :], z_t.shape).copy()

        h = T.add(z_t, T.Tensor(time_rows))
        h = T.add(h, T.gather_rows(self.pos, np.arange(seq_len)))

        for i, block in enumerate(self.blocks):
            a = block.ln1(h)
            q = T.add(T.matmul(a, block.attn["wq"]), block.attn["bq"])
            k = T.add(T.matmul(a, block.attn["wk"]), block.attn["bk"])
            v = T.add(T.matmul(a, block.attn["wv"]), block.attn["bv"])
            mixed = masked_multihead_attention(
                q, k, v, self.mask_for(seq_len, i), self.cfg.num_heads
            )
            h = T.add(h, T.add(T.matmul(mixed, block.attn["wo"]), block.attn["bo"]))

            m_in = block.ln2(h)
            if block.moe is not None:
                ff_out, aux, stats = _moe_apply(m_in, block.moe)
                if trace is not None:
                    trace.add(aux, stats)
            else:
                ff_out = block.ff(m_in)
            h = T.add(h, ff_out)

        out = self.final_ln(h)
        return T.add(T.matmul(out, self.out_w), self.out_b)


def f_theta(z_t, t, model, trace=None):
    """Functional alias for the denoiser forward pass."""
    return model.forward(z_t, t, trace=trace)


def round_to_tokens(z0_hat, model):
    """Project predicted embeddings to vocabulary logits and take argmax
    ids (ties resolve to the lowest id)."""
    logits = model.logits(z0_hat)
    ids = np.argmax(logits.data, axis=-1)
    return ids, logits


def nearest_embedding_ids(z, emb_table):
    """Ids of the euclidean-nearest embedding rows for each row of `z`."""
    z = np.asarray(z)
    norms = (emb_table * emb_table).sum(axis=1)
    scores = 2.0 * (z @ emb_table.T) - norms
    return np.argmax(scores, axis=-1)
