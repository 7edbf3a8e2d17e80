"""Hyperparameters and derived context quantities.

All context lengths (``l_att``, ``c``, ``r``) are expressed in post-subsample
frames: one frame is 80 ms of audio at the 8x subsampling used here, so a
chunk of 128 frames covers roughly 10.24 s. Configuration files are flat JSON
documents whose keys mirror the dataclass field names exactly; unknown keys
are rejected so typos fail loudly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields


class ConfigError(ValueError):
    """Invalid or inconsistent configuration. Carries every violation found."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass(frozen=True)
class ContextConfig:
    """Attention/conv context geometry: left cache, chunk size, right context."""

    l_att: int = 16
    c: int = 8
    r: int = 8


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    kernel_size: int = 15
    subsample_factor: int = 8
    vocab_size: int = 29
    l_max: int = 64
    seed: int = 0

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads


def derive_r_rel(ctx: ContextConfig, n_layers: int) -> int:
    """Total future frames the input must include so every layer sees its
    full right context for the emitted chunks: r + max(c, r) * (N - 1)."""
    if n_layers < 1:
        raise ConfigError(f"n_layers must be >= 1, got {n_layers}")
    return ctx.r + max(ctx.c, ctx.r) * (n_layers - 1)


def derive_l_conv(kernel_size: int) -> int:
    """Convolution cache length (kernel_size - 1) / 2 for a symmetric kernel."""
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ConfigError(f"kernel_size must be odd and >= 1, got {kernel_size}")
    return (kernel_size - 1) // 2


def required_lookahead(ctx: ContextConfig, n_layers: int, l_conv: int) -> int:
    """Lookahead frames a decode step must append so the emitted chunks come
    out exactly equal to the full-sequence computation.

    Attention validity is chunk-quantized (a frame is exact only if its whole
    chunk window was exact) and the depthwise conv consumes l_conv extra
    frames per layer, so the per-layer requirement is
    u <- r + c * ceil((u + l_conv) / c). Equals derive_r_rel when l_conv = 0
    and either c >= r or r is a multiple of c.
    """
    if n_layers < 0:
        raise ConfigError(f"n_layers must be >= 0, got {n_layers}")
    u = 0
    for _ in range(n_layers):
        u = ctx.r + ctx.c * math.ceil((u + l_conv) / ctx.c)
    return u


def validate(model: ModelConfig, ctx: ContextConfig) -> list[str]:
    """Check every invariant; returns all violations, not just the first."""
    problems = []
    if ctx.c < 1:
        problems.append(f"c must be >= 1, got {ctx.c}")
    if ctx.l_att < 0:
        problems.append(f"l_att must be >= 0, got {ctx.l_att}")
    if ctx.r < 0:
        problems.append(f"r must be >= 0, got {ctx.r}")
    if model.n_layers < 0:
        problems.append(f"n_layers must be >= 0, got {model.n_layers}")
    if model.d_model < 2 or model.d_model % 2 != 0:
        problems.append(f"d_model must be a positive even number, got {model.d_model}")
    if model.n_heads < 1:
        problems.append(f"n_heads must be >= 1, got {model.n_heads}")
    elif model.d_model % model.n_heads != 0:
        problems.append(
            f"d_model ({model.d_model}) not divisible by n_heads ({model.n_heads})"
        )
    if model.d_ff < 1:
        problems.append(f"d_ff must be >= 1, got {model.d_ff}")
    if model.kernel_size < 1 or model.kernel_size % 2 == 0:
        problems.append(f"kernel_size must be odd and >= 1, got {model.kernel_size}")
    if model.subsample_factor != 8:
        problems.append(f"subsample_factor must be 8, got {model.subsample_factor}")
    if model.vocab_size < 2:
        problems.append(f"vocab_size must be >= 2 (blank + tokens), got {model.vocab_size}")
    span = ctx.l_att + ctx.c + ctx.r
    if model.l_max < span:
        problems.append(
            f"l_max ({model.l_max}) must cover l_att + c + r = {span} so every "
            "relative distance used by attention has an encoding row"
        )
    return problems


def require_valid(model: ModelConfig, ctx: ContextConfig) -> None:
    problems = validate(model, ctx)
    if problems:
        raise ConfigError(problems)


def context_from_string(spec: str) -> ContextConfig:
    """Parse an "l_att,c,r" triple, e.g. "128,64,128"."""
    parts = spec.split(",")
    if len(parts) != 3:
        raise ConfigError(f"context must be 'l_att,c,r', got {spec!r}")
    try:
        l_att, c, r = (int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"context values must be integers, got {spec!r}") from None
    return ContextConfig(l_att=l_att, c=c, r=r)


_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_CTX_KEYS = {f.name for f in fields(ContextConfig)}


def load_config(path) -> tuple[ModelConfig, ContextConfig]:
    """Load a flat JSON config; unknown keys are errors."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a flat JSON object")
    problems = []
    unknown = sorted(set(raw) - _MODEL_KEYS - _CTX_KEYS)
    for key in unknown:
        problems.append(f"unknown config key {key!r}")
    for key, value in raw.items():
        if key in unknown:
            continue
        if not isinstance(value, int) or isinstance(value, bool):
            problems.append(f"config key {key!r} must be an integer, got {value!r}")
    if problems:
        raise ConfigError(problems)
    model = ModelConfig(**{k: v for k, v in raw.items() if k in _MODEL_KEYS})
    ctx = ContextConfig(**{k: v for k, v in raw.items() if k in _CTX_KEYS})
    return model, ctx
