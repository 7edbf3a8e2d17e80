"""Chunk carving, overlapping chunk rows, validity masks, and the scheduler.

An audio is treated as a batch of equal-sized chunks of c post-subsample
frames. Sequential operators (attention, depthwise conv) see overlapping rows
[start - l, start + c + r) gathered from a flat per-audio sequence; positions
outside the gatherable extent carry a false mask bit and a 0.0 value, so
randomizing masked positions can never change downstream results bit-wise.

The scheduler packs pending chunks from several audios into one step, in
audio order then chunk order, up to a row budget. Every audio that continues
past the step also gets a lookahead tail; the tail is re-derived from the raw
input next step rather than cached, so only left contexts persist as caches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import ContextConfig, ConfigError, required_lookahead


class ChunkingError(ValueError):
    """Empty input or malformed chunk geometry."""


class SchedulerError(RuntimeError):
    """Internal scheduling inconsistency (duplicate or non-contiguous rows)."""


@dataclass(frozen=True)
class ChunkPlan:
    audio_id: str
    chunk_index: int
    valid_frames: int
    is_final: bool


@dataclass
class ChunkBatch:
    """B gathered rows of l + c + r positions with a validity mask.

    rows[b][p] is 0.0 wherever mask[b][p] is False; consumers re-apply the
    mask defensively so poisoned masked values never reach any output.
    """

    rows: np.ndarray   # (B, l + c + r, d)
    mask: np.ndarray   # (B, l + c + r) bool
    plans: list[ChunkPlan]
    l: int
    c: int
    r: int

    @property
    def width(self) -> int:
        return self.l + self.c + self.r


@dataclass
class StreamState:
    """Per-audio decoding state: caches and progress counters.

    Cache arrays hold only frames that actually exist; before warm-up they are
    shorter than their nominal lengths and the missing history shows up as
    masked row positions, never as fabricated zero history.
    """

    audio_id: str
    total_frames: int                      # post-subsample frames in the audio
    frames_consumed: int = 0
    raw_cache: np.ndarray | None = None    # (<=l_raw, n_mels) raw fbank tail
    att_caches: list[np.ndarray] = field(default_factory=list)  # per layer (<=l_att, d)
    conv_caches: list[np.ndarray] = field(default_factory=list) # per layer (<=l_conv, d)
    ctc_carry: int = 0                     # last argmax id, blank at audio start

    @property
    def done(self) -> bool:
        return self.frames_consumed >= self.total_frames


@dataclass
class StepSchedule:
    """One decode step: scheduled chunk rows plus per-audio lookahead frames."""

    rows: list[ChunkPlan]
    lookahead: dict[str, int]

    def rows_for(self, audio_id: str) -> list[ChunkPlan]:
        return [p for p in self.rows if p.audio_id == audio_id]

    def audio_order(self) -> list[str]:
        seen: dict[str, None] = {}
        for p in self.rows:
            seen.setdefault(p.audio_id, None)
        return list(seen)


def carve_chunks(total_frames: int, c: int, audio_id: str = "audio") -> list[ChunkPlan]:
    """Split total_frames into ceil(T/c) chunk plans; only the last is partial."""
    if c < 1:
        raise ConfigError(f"c must be >= 1, got {c}")
    if total_frames < 1:
        raise ChunkingError(f"cannot carve an empty input (T={total_frames})")
    count = math.ceil(total_frames / c)
    plans = []
    for i in range(count):
        valid = min(c, total_frames - i * c)
        plans.append(ChunkPlan(audio_id, i, valid, is_final=(i == count - 1)))
    return plans


def oct_segment(flat: np.ndarray, starts, l: int, c: int, r: int,
                plans: list[ChunkPlan] | None = None) -> ChunkBatch:
    """Gather overlapping rows [s - l, s + c + r) from a flat sequence.

    Indices outside [0, len(flat)) are masked and zero-filled; in-range
    positions are exact copies. ``starts`` are indices into ``flat`` of each
    chunk's first frame.
    """
    if l < 0 or r < 0:
        raise ConfigError(f"context lengths must be >= 0, got l={l}, r={r}")
    if c < 1:
        raise ConfigError(f"c must be >= 1, got {c}")
    flat = np.asarray(flat)
    starts = np.asarray(list(starts), dtype=np.int64)
    n = flat.shape[0]
    idx = starts[:, None] + np.arange(-l, c + r, dtype=np.int64)[None, :]
    mask = (idx >= 0) & (idx < n)
    safe = np.clip(idx, 0, max(n - 1, 0))
    rows = flat[safe] if n > 0 else np.zeros(idx.shape + flat.shape[1:], flat.dtype)
    rows = np.where(mask[..., None], rows, np.zeros((), dtype=flat.dtype))
    if plans is None:
        plans = [ChunkPlan("audio", int(i), c, False) for i in range(len(starts))]
    return ChunkBatch(rows=rows, mask=mask, plans=list(plans), l=l, c=c, r=r)


def build_masks(plans: list[ChunkPlan], l: int, c: int, r: int,
                boundaries: dict[str, tuple[int, int]]) -> np.ndarray:
    """Row masks for chunks of several audios packed into one flat stream.

    ``boundaries`` maps audio_id -> (frames_decoded_before_step, total_frames).
    A row position is active iff its absolute frame index lies inside its own
    audio: the right side is masked from the audio length (chunk padding and
    lookahead past the end), the left side from the audio start. Windows never
    cross an audio boundary because positions are resolved per audio.
    """
    width = l + c + r
    mask = np.zeros((len(plans), width), dtype=bool)
    next_expected: dict[str, int] = {}
    for b, plan in enumerate(plans):
        if plan.audio_id not in boundaries:
            raise SchedulerError(f"no boundary entry for audio {plan.audio_id!r}")
        decoded, total = boundaries[plan.audio_id]
        expected = next_expected.get(plan.audio_id, decoded // c if decoded % c == 0
                                     else -1)
        if decoded % c != 0:
            raise SchedulerError(
                f"audio {plan.audio_id!r}: decoded prefix {decoded} is not a "
                f"multiple of the chunk size {c}"
            )
        if plan.chunk_index != expected:
            raise SchedulerError(
                f"audio {plan.audio_id!r}: chunk {plan.chunk_index} scheduled "
                f"out of order (expected {expected}); rows would overlap or skip"
            )
        next_expected[plan.audio_id] = plan.chunk_index + 1
        frames = plan.chunk_index * c + np.arange(-l, c + r)
        mask[b] = (frames >= 0) & (frames < total)
    return mask


def schedule_step(states: list[StreamState], plans: dict[str, list[ChunkPlan]],
                  m_budget: int, ctx: ContextConfig, n_layers: int,
                  l_conv: int) -> StepSchedule | None:
    """Pick the next chunks across audios, audio order then chunk order.

    At most ``m_budget`` chunk rows are scheduled. Each scheduled audio that
    still has frames past its scheduled chunks gets a lookahead tail of
    required_lookahead frames (clipped to what remains); the tail is computed
    but never emitted. Returns None when nothing is pending.
    """
    if m_budget < 1:
        raise ConfigError(f"m_budget must be >= 1, got {m_budget}")
    rows: list[ChunkPlan] = []
    lookahead: dict[str, int] = {}
    la = required_lookahead(ctx, n_layers, l_conv)
    for state in states:
        if state.done or len(rows) >= m_budget:
            continue
        pending = [p for p in plans[state.audio_id]
                   if p.chunk_index * ctx.c >= state.frames_consumed]
        take = pending[: m_budget - len(rows)]
        if not take:
            continue
        rows.extend(take)
        emitted = sum(p.valid_frames for p in take)
        remaining = state.total_frames - state.frames_consumed - emitted
        if remaining > 0:
            lookahead[state.audio_id] = min(la, remaining)
    if not rows:
        return None
    return StepSchedule(rows=rows, lookahead=lookahead)
