"""Flat key=value run configuration.

A config file is plain text, one `key = value` per line, `#` comments and
blank lines ignored. Keys are namespaced with dots but the format itself is
flat; unknown keys are rejected with the offending name. `resolved_text`
serializes every key (defaults included) in sorted order, and that exact
text is what training writes next to its outputs and into checkpoints.
"""

import json
from dataclasses import dataclass, replace

from .denoiser import ModelConfig
from .errors import ConfigError
from .sampler import SamplerConfig

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def _parse(kind, raw, key):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            lowered = raw.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(raw)
        if kind == "ints":
            return tuple(int(p) for p in raw.split(",") if p.strip()) if raw else ()
        if kind == "jsonstr":
            # JSON-quoted so arbitrary characters survive the flat format
            return json.loads(raw) if raw.startswith('"') else raw
        return raw
    except (ValueError, json.JSONDecodeError):
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None


def _format(kind, value):
    if kind == "bool":
        return "true" if value else "false"
    if kind == "ints":
        return ",".join(str(v) for v in value)
    if kind == "float":
        return repr(float(value))
    if kind == "jsonstr":
        return json.dumps(value)
    return str(value)


def parse_value(key, raw):
    """Parse one raw string for a known schema key."""
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    attr, kind = SCHEMA[key]
    return _parse(kind, raw, key)


# key -> (RunConfig attribute, kind)
SCHEMA = {
    "model.vocab_size": ("vocab_size", "int"),
    "model.width": ("width", "int"),
    "model.num_layers": ("num_layers", "int"),
    "model.num_heads": ("num_heads", "int"),
    "model.head_dim": ("head_dim", "int"),
    "model.window": ("window", "int"),
    "model.dilation": ("dilation", "int"),
    "model.global_positions": ("global_positions", "ints"),
    "model.attention": ("attention_kind", "str"),
    "model.num_experts": ("num_experts", "int"),
    "model.moe_top_k": ("moe_top_k", "int"),
    "model.moe_hidden": ("moe_hidden", "int"),
    "model.moe_every_layer": ("moe_every_layer", "bool"),
    "model.diffusion_steps": ("diffusion_steps", "int"),
    "model.max_seq_len": ("max_seq_len", "int"),
    "model.tie_output_head": ("tie_output_head", "bool"),
    "schedule.p_max": ("p_max", "float"),
    "schedule.lambda": ("lambda_reg", "float"),
    "schedule.rounding_weight": ("rounding_weight", "float"),
    "schedule.checksum": ("schedule_checksum", "str"),
    "training.lr": ("lr", "float"),
    "training.beta1": ("beta1", "float"),
    "training.beta2": ("beta2", "float"),
    "training.batch_size": ("batch_size", "int"),
    "training.steps": ("train_steps", "int"),
    "training.seed": ("seed", "int"),
    "training.staged": ("staged", "bool"),
    "training.stage_fraction": ("stage_fraction", "float"),
    "training.log_every": ("log_every", "int"),
    "training.checkpoint_every": ("checkpoint_every", "int"),
    "training.eval_every": ("eval_every", "int"),
    "training.eval_samples": ("eval_samples", "int"),
    "training.stop_exact_match": ("stop_exact_match", "float"),
    "sampler.num_steps": ("num_steps", "int"),
    "sampler.clamp": ("clamp_each_step", "bool"),
    "sampler.seed": ("sample_seed", "int"),
    "sampler.max_len": ("sample_max_len", "int"),
    "paths.corpus": ("corpus", "str"),
    "paths.checkpoint": ("checkpoint", "str"),
    "paths.logdir": ("logdir", "str"),
    "data.vocab_chars": ("vocab_chars", "jsonstr"),
}

_ATTR_TO_KEY = {attr: key for key, (attr, _) in SCHEMA.items()}


@dataclass
class RunConfig:
    # model
    vocab_size: int = 0            # 0 -> inferred from the corpus
    width: int = 128
    num_layers: int = 4
    num_heads: int = 4
    head_dim: int = 32
    window: int = 32
    dilation: int = 1
    global_positions: tuple = ()
    attention_kind: str = "sparse"
    num_experts: int = 4
    moe_top_k: int = 2
    moe_hidden: int = 0
    moe_every_layer: bool = True
    diffusion_steps: int = 2048
    max_seq_len: int = 256
    tie_output_head: bool = True
    # schedule / loss weights
    p_max: float = 0.1
    lambda_reg: float = 1.0
    rounding_weight: float = 1.0
    schedule_checksum: str = ""
    # training
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 16
    train_steps: int = 1000
    seed: int = 0
    staged: bool = False
    stage_fraction: float = 0.5
    log_every: int = 25
    checkpoint_every: int = 0
    eval_every: int = 0
    eval_samples: int = 50
    stop_exact_match: float = 0.0
    # sampler
    num_steps: int = 32
    clamp_each_step: bool = True
    sample_seed: int = 0
    sample_max_len: int = 32
    # paths / data
    corpus: str = ""
    checkpoint: str = ""
    logdir: str = ""
    vocab_chars: str = ""

    # -- derived pieces ------------------------------------------------------

    def model_config(self, vocab_size=None):
        return ModelConfig(
            vocab_size=vocab_size if vocab_size is not None else self.vocab_size,
            width=self.width,
            num_layers=self.num_layers,
            num_heads=self.num_heads,
            head_dim=self.head_dim,
            window=self.window,
            dilation=self.dilation,
            global_positions=self.global_positions,
            attention_kind=self.attention_kind,
            num_experts=self.num_experts,
            moe_top_k=self.moe_top_k,
            moe_hidden=self.moe_hidden,
            moe_every_layer=self.moe_every_layer,
            aux_loss_coeff=0.01,
            T=self.diffusion_steps,
            max_seq_len=self.max_seq_len,
            tie_output_head=self.tie_output_head,
        )

    def sampler_config(self):
        return SamplerConfig(
            num_steps=self.num_steps,
            clamp_each_step=self.clamp_each_step,
            seed=self.sample_seed,
            max_len=self.sample_max_len,
        )

    # -- validation -----------------------------------------------------------

    def problems(self):
        """Every violated constraint, one message each."""
        issues = []
        try:
            self.model_config(vocab_size=self.vocab_size or 5)
        except ConfigError as exc:
            issues.extend(str(exc).split("; "))
        if self.window > 2 * self.max_seq_len:
            issues.append(
                f"model.window {self.window} exceeds the useful bound "
                f"2 * max_seq_len = {2 * self.max_seq_len}"
            )
        if not 0.0 <= self.p_max <= 1.0:
            issues.append(f"schedule.p_max must be in [0, 1], got {self.p_max}")
        if self.lambda_reg < 0:
            issues.append(f"schedule.lambda must be >= 0, got {self.lambda_reg}")
        if self.rounding_weight < 0:
            issues.append(
                f"schedule.rounding_weight must be >= 0, got {self.rounding_weight}"
            )
        if self.lr <= 0:
            issues.append(f"training.lr must be > 0, got {self.lr}")
        if not 0 < self.beta1 < 1 or not 0 < self.beta2 < 1:
            issues.append("training.beta1/beta2 must lie in (0, 1)")
        if self.batch_size < 1:
            issues.append(f"training.batch_size must be >= 1, got {self.batch_size}")
        if self.train_steps < 0:
            issues.append(f"training.steps must be >= 0, got {self.train_steps}")
        if not 0.0 <= self.stage_fraction <= 1.0:
            issues.append(
                f"training.stage_fraction must be in [0, 1], got {self.stage_fraction}"
            )
        if not 2 <= self.num_steps <= self.diffusion_steps:
            issues.append(
                f"sampler.num_steps must be in [2, model.diffusion_steps="
                f"{self.diffusion_steps}], got {self.num_steps}"
            )
        if self.sample_max_len < 1:
            issues.append(f"sampler.max_len must be >= 1, got {self.sample_max_len}")
        return issues

    def validated(self):
        issues = self.problems()
        if issues:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(issues))
        return self

    # -- serialization ---------------------------------------------------------

    def resolved_text(self):
        lines = []
        for key in sorted(SCHEMA):
            attr, kind = SCHEMA[key]
            lines.append(f"{key} = {_format(kind, getattr(self, attr))}")
        return "\n".join(lines) + "\n"

    def with_items(self, items):
        """New config with `key -> raw string` assignments applied."""
        updates = {}
        for key, raw in items:
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            attr, kind = SCHEMA[key]
            updates[attr] = _parse(kind, raw, key)
        return replace(self, **updates)


def parse_config_text(text, base=None):
    cfg = base or RunConfig()
    items = []
    for lineno, line in enumerate(text.split("\n"), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = stripped.split("=", 1)
        items.append((key.strip(), raw))
    return cfg.with_items(items)


def load_config(path, base=None):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, base=base)
