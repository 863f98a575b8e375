"""Deterministic reverse diffusion from noise to token ids.

Each step predicts clean embeddings zhat0 = f_theta(z_t, t), recovers the
implied noise direction, and moves to the earlier step s:

    eps_hat = (z_t - sqrt(abar_t) * zhat0) / sqrt(1 - abar_t)
    z_s     = sqrt(abar_s) * zhat0 + sqrt(1 - abar_s) * eps_hat

The reverse grid treats step 0 as fully clean (abar = 1), so with a perfect
denoiser the update telescopes to the true z_0 for any grid. Conditioning
rows are re-anchored to their clean embeddings after every step, and the
final target span is rounded to token ids. Everything is a pure function of
(model, schedule, seed): fixed seeds give bit-identical outputs.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import BOS_ID, EOS_ID
from .denoiser import nearest_embedding_ids, round_to_tokens
from .errors import ConfigError, OrderingError


@dataclass
class SamplerConfig:
    num_steps: int
    clamp_each_step: bool = True
    seed: int = 0
    max_len: int = 32

    def validate(self, T_total):
        problems = []
        if not 2 <= self.num_steps <= T_total:
            problems.append(
                f"num_steps must be in [2, T={T_total}], got {self.num_steps}"
            )
        if self.max_len < 1:
            problems.append(f"max_len must be >= 1, got {self.max_len}")
        return problems


def step_grid(total_steps, num_steps):
    """Uniformly spaced decreasing step indices from T down to 0."""
    if num_steps > total_steps:
        raise ConfigError(
            f"num_steps {num_steps} exceeds schedule length {total_steps}"
        )
    if num_steps < 1:
        raise ConfigError(f"num_steps must be >= 1, got {num_steps}")
    grid = [total_steps - (k * total_steps) // num_steps for k in range(num_steps + 1)]
    return np.asarray(grid, dtype=np.int64)


def _abar(schedule, t):
    # the reverse grid's endpoint is fully clean
    return 1.0 if t == 0 else float(schedule.alpha_bar[t])


def _reverse_update(z_t, t, s, model, schedule, clamp):
    if s >= t:
        raise OrderingError(f"reverse step needs s < t, got s={s}, t={t}")
    if t > schedule.T:
        raise ConfigError(f"t={t} exceeds schedule length {schedule.T}")
    z_t = np.asarray(z_t, dtype=np.float64)
    zhat0 = model.forward(T.Tensor(z_t), t).data
    if clamp:
        ids = nearest_embedding_ids(zhat0.reshape(-1, zhat0.shape[-1]), model.emb.data)
        zhat0 = model.emb.data[ids].reshape(zhat0.shape)
    ab_t, ab_s = _abar(schedule, t), _abar(schedule, s)
    eps_hat = (z_t - np.sqrt(ab_t) * zhat0) / np.sqrt(1.0 - ab_t)
    return np.sqrt(ab_s) * zhat0 + np.sqrt(1.0 - ab_s) * eps_hat, zhat0


def reverse_step(z_t, t, s, model, schedule, clamp=False):
    """One deterministic update from step t to step s < t."""
    z_s, _ = _reverse_update(z_t, t, s, model, schedule, clamp)
    return z_s


def sample(source_tokens, model, schedule, cfg, trace_path=None):
    """Generate target token ids conditioned on raw source content ids.

    The working sequence is `bos + source + eos` followed by `cfg.max_len`
    generated positions. Target latents start as standard normal noise;
    source rows are replaced with their clean embeddings after every
    reverse step. Returns the rounded ids of the target span.
    """
    ids = sample_batch([list(source_tokens)], model, schedule, cfg, trace_path)
    return ids[0]


def sample_batch(sources, model, schedule, cfg, trace_path=None):
    """Batched `sample` for equal-length sources; one shared trajectory."""
    problems = cfg.validate(schedule.T)
    if problems:
        raise ConfigError("; ".join(problems))
    lengths = {len(s) for s in sources}
    if len(lengths) != 1:
        raise ConfigError("sample_batch needs equal-length sources")
    src_len = lengths.pop()
    prefix_len = src_len + 2
    seq_len = prefix_len + cfg.max_len
    if seq_len > model.cfg.max_seq_len:
        raise ConfigError(
            f"source plus max_len needs {seq_len} positions, model allows "
            f"{model.cfg.max_seq_len}"
        )
    prefix = np.asarray(
        [[BOS_ID] + list(s) + [EOS_ID] for s in sources], dtype=np.int64
    )
    clean_prefix = model.embed(prefix).data

    rng = np.random.default_rng(cfg.seed)
    z = rng.standard_normal((len(sources), seq_len, model.cfg.width))
    z[:, :prefix_len, :] = clean_prefix

    grid = step_grid(schedule.T, cfg.num_steps)
    trace = []
    prev_zhat = None
    for t, s in zip(grid[:-1], grid[1:]):
        z, zhat = _reverse_update(
            z, int(t), int(s), model, schedule, cfg.clamp_each_step
        )
        z[:, :prefix_len, :] = clean_prefix
        if trace_path is not None:
            if prev_zhat is None:
                delta = float("nan")
            else:
                delta = float(np.linalg.norm(zhat - prev_zhat, axis=-1).mean())
            trace.append((int(t), delta))
            prev_zhat = zhat
    if trace_path is not None:
        with open(trace_path, "w", encoding="utf-8") as fh:
            fh.write("t\tmean_zhat_change\n")
            for t, delta in trace:
                fh.write(f"{t}\t{delta}\n")
    target = T.Tensor(z[:, prefix_len:, :])
    ids, _ = round_to_tokens(target, model)
    return [row for row in ids]
