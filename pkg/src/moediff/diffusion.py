"""Noise schedule, forward corruption with a soft absorbing state, loss.

The forward process lives in embedding space:

    z_t = sqrt(abar_t) * z_0 + sqrt(1 - abar_t) * eps

with abar following a square-root decay, and each still-clean target
position independently replaced by a dedicated learned mask embedding with
probability absorb_prob[t]. Conditioning (source) positions and padding are
never touched: their rows pass through bit-identical.

The training loss anchors the denoised prediction to the target token
embeddings (MSE), adds an embedding-norm regularizer, a rounding
negative-log-likelihood through the output head, and the expert layers'
load-balance terms.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import BatchError, ConfigError
from .moe import ForwardTrace

SCHEDULE_SHIFT = 1e-4
ALPHA_FLOOR = 1e-4
ALPHA_CEIL = 1.0 - 1e-4


@dataclass
class NoiseSchedule:
    """Per-step signal levels and absorbing probabilities, length T+1."""

    alpha_bar: np.ndarray
    absorb_prob: np.ndarray

    def __post_init__(self):
        self.alpha_bar = np.asarray(self.alpha_bar, dtype=np.float64)
        self.absorb_prob = np.asarray(self.absorb_prob, dtype=np.float64)
        problems = []
        if self.alpha_bar.ndim != 1 or len(self.alpha_bar) < 3:
            problems.append("alpha_bar must be a vector of length T+1 >= 3")
        elif self.alpha_bar.shape != self.absorb_prob.shape:
            problems.append("alpha_bar and absorb_prob lengths differ")
        else:
            if not np.all(np.diff(self.alpha_bar) < 0):
                problems.append("alpha_bar must be strictly decreasing")
            if self.alpha_bar[0] < 0.98:
                problems.append(f"alpha_bar[0] must be >= 0.98, got {self.alpha_bar[0]}")
            if self.alpha_bar[-1] > 0.05:
                problems.append(f"alpha_bar[T] must be <= 0.05, got {self.alpha_bar[-1]}")
            if np.any(self.absorb_prob < 0) or np.any(self.absorb_prob > 1):
                problems.append("absorb_prob must lie in [0, 1]")
            if not np.all(np.diff(self.absorb_prob) >= 0):
                problems.append("absorb_prob must be non-decreasing")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def T(self):
        return len(self.alpha_bar) - 1

    def checksum(self):
        """Hex digest of the exact schedule contents; used to assert that
        training and sampling consume the same schedule."""
        h = hashlib.sha256()
        h.update(self.alpha_bar.tobytes())
        h.update(self.absorb_prob.tobytes())
        return h.hexdigest()

    def dump(self, path):
        """Write `t <TAB> alpha_bar <TAB> absorb_prob` rows for plotting."""
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("t\talpha_bar\tabsorb_prob\n")
            for t in range(self.T + 1):
                fh.write(
                    f"{t}\t{float(self.alpha_bar[t])!r}\t{float(self.absorb_prob[t])!r}\n"
                )


def build_sqrt_schedule(T, p_max=0.1):
    """Square-root decay `abar_t = 1 - sqrt(t/T + 1e-4)` clamped into
    (1e-4, 1 - 1e-4), with a linear absorbing ramp `p_max * t / T`.

    For very large T the floor clamp would tie the last few entries at
    1e-4; those are spread linearly so the schedule stays strictly
    decreasing while keeping abar_T == 1e-4 exactly.
    """
    if T < 2:
        raise ConfigError(f"schedule needs T >= 2, got {T}")
    if not 0.0 <= p_max <= 1.0:
        raise ConfigError(f"p_max must be in [0, 1], got {p_max}")
    t = np.arange(T + 1, dtype=np.float64)
    raw = 1.0 - np.sqrt(t / T + SCHEDULE_SHIFT)
    alpha_bar = np.clip(raw, ALPHA_FLOOR, ALPHA_CEIL)
    clamped = np.nonzero(raw <= ALPHA_FLOOR)[0]
    if clamped.size > 1:
        k = int(clamped[0])
        alpha_bar[k:] = np.linspace(alpha_bar[k - 1], ALPHA_FLOOR, T - k + 2)[1:]
    absorb = p_max * t / T
    return NoiseSchedule(alpha_bar=alpha_bar, absorb_prob=absorb)


def _alpha_for(schedule, t):
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.T):
        raise ConfigError(f"t must lie in [1, T]={schedule.T}, got {t}")
    return schedule.alpha_bar[t], t


def forward_noise(z0, t, schedule, rng, keep_mask=None):
    """Corrupt `z0` to step `t` with fresh Gaussian noise.

    `t` is a single step index or one per leading row of a batched input.
    Rows flagged in `keep_mask` (conditioning and padding) are returned
    bit-identical; everything is differentiable back into `z0`.
    """
    z0 = T.as_tensor(z0)
    alpha, t = _alpha_for(schedule, t)
    eps = rng.standard_normal(z0.shape)
    if t.ndim == 0:
        signal = T.scale(z0, float(np.sqrt(alpha)))
        noise = np.sqrt(1.0 - alpha) * eps
    else:
        rows = np.broadcast_to(np.sqrt(alpha)[:, None], z0.shape[:-1]).copy()
        signal = T.rowscale(z0, T.Tensor(rows))
        noise = np.sqrt(1.0 - alpha)[:, None, None] * eps
    noised = T.add(signal, T.Tensor(noise))
    if keep_mask is None:
        return noised
    return T.select_rows(np.asarray(keep_mask, dtype=bool), z0, noised)


@dataclass
class DiffusionState:
    """Latents mid-corruption plus the bookkeeping masks."""

    z: T.Tensor
    t: object                      # step index, or one per batch row
    absorbed: np.ndarray = None
    source_mask: np.ndarray = None

    def __post_init__(self):
        rows = self.z.shape[:-1]
        if self.absorbed is None:
            self.absorbed = np.zeros(rows, dtype=bool)
        if self.source_mask is None:
            self.source_mask = np.zeros(rows, dtype=bool)
        self.absorbed = np.asarray(self.absorbed, dtype=bool)
        self.source_mask = np.asarray(self.source_mask, dtype=bool)
        if np.any(self.absorbed & self.source_mask):
            raise BatchError("conditioning positions can never be absorbed")


def apply_absorbing_state(state, schedule, mask_embedding, rng):
    """Independently absorb eligible positions with probability
    absorb_prob[t], replacing their rows with the mask embedding.

    Absorption is monotone: already-absorbed positions stay absorbed, and
    source positions are never eligible. With absorb_prob[t] == 0 the
    state passes through untouched (no random draws are consumed).
    """
    t = np.asarray(state.t)
    prob = schedule.absorb_prob[t]
    absorbed = state.absorbed
    if np.any(prob > 0):
        draw_prob = np.broadcast_to(
            prob[:, None] if t.ndim else prob, absorbed.shape
        )
        eligible = ~state.source_mask & ~absorbed
        absorbed = absorbed | (eligible & (rng.random(absorbed.shape) < draw_prob))
    z = state.z
    if absorbed.any():
        rows = T.broadcast_rows(mask_embedding, z.shape[:-1])
        z = T.select_rows(absorbed, rows, z)
    return DiffusionState(z=z, t=state.t, absorbed=absorbed, source_mask=state.source_mask)


def diffusion_loss(
    batch,
    model,
    schedule,
    rng,
    lambda_reg=1.0,
    rounding_weight=1.0,
    stats_out=None,
):
    """One training-loss evaluation on a batch.

    Draws one step t ~ Uniform[2, T] per example, corrupts the target span
    (Gaussian noise then absorbing replacements), runs the denoiser, and
    scores: anchor MSE against the target token embeddings, the
    lambda-weighted embedding-norm regularizer, the rounding NLL through
    the output head, and the expert layers' load-balance terms. All terms
    average over scored (non-source, non-pad) positions only.

    The rng is split into independent streams for the step draw, the
    Gaussian noise, and the absorbing draws, so a p_max = 0 schedule
    reduces bit-exactly to the pure Gaussian process.
    """
    tokens = np.asarray(batch.tokens)
    frozen = np.asarray(batch.source_mask, dtype=bool) | np.asarray(
        batch.pad_mask, dtype=bool
    )
    scored = ~frozen
    if not scored.any(axis=-1).all():
        bad = int(np.nonzero(~scored.any(axis=-1))[0][0])
        raise BatchError(f"batch row {bad} has no target positions to score")

    rng_t, rng_noise, rng_absorb = rng.spawn(3)
    t = rng_t.integers(2, schedule.T + 1, size=tokens.shape[0])

    z0 = model.embed(tokens)
    z_t = forward_noise(z0, t, schedule, rng_noise, keep_mask=frozen)
    state = DiffusionState(z=z_t, t=t, source_mask=frozen)
    state = apply_absorbing_state(state, schedule, model.mask_vector(), rng_absorb)

    trace = ForwardTrace()
    predicted = model.forward(state.z, t, trace=trace)

    n_scored = int(scored.sum())
    width = z0.shape[-1]
    scored_f = scored.astype(np.float64)

    mse = T.scale(
        T.tsum(T.rowscale(T.sqdiff(predicted, z0), T.Tensor(scored_f))),
        1.0 / (n_scored * width),
    )
    reg = T.scale(
        T.tsum(T.rowscale(T.mul(z0, z0), T.Tensor(scored_f))),
        lambda_reg / (n_scored * width),
    )

    logits = model.logits(predicted)
    log_probs = T.log_softmax_lastdim(logits)
    picked = np.zeros(logits.shape)
    np.put_along_axis(picked, tokens[..., None], 1.0, axis=-1)
    picked *= scored_f[..., None]
    rounding = T.scale(
        T.tsum(T.mul(log_probs, T.Tensor(picked))),
        -rounding_weight / n_scored,
    )

    loss = T.add(T.add(mse, reg), rounding)
    aux = trace.total_aux()
    if aux is not None:
        loss = T.add(loss, aux)

    if stats_out is not None:
        stats_out.update(
            mse=mse.item(),
            regularizer=reg.item(),
            rounding=rounding.item(),
            aux=0.0 if aux is None else aux.item(),
            t=t.copy(),
            routing=trace.routing,
        )
    return loss
