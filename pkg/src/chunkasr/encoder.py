"""Subsampling front block, the chunked encoder stack, and the step driver.

The engine processes audio as decode steps. A step covers the scheduled
chunks (emitted) plus a lookahead tail (computed, discarded, re-derived from
raw input next step). Within a step, every layer gathers overlapping chunk
rows from per-audio flat sequences (left edges come from the per-layer
caches), runs one batched attention and one batched convolution over all rows
of all audios, and scatters the per-chunk outputs back. A per-audio validity
frontier tracks how many lookahead frames are still exact: attention
quantizes validity to whole chunk windows and the depthwise conv consumes
l_conv more frames per layer. The scheduler sizes the lookahead so every
emitted frame stays exact, which makes multi-step, batched, and single-step
runs agree on emitted frames.

Checkpoint container ("CFKW"): magic, u32 version, u32 tensor count, then per
tensor {u16 name length, name bytes, u8 rank, u32 dims..., float32
little-endian payload}. Tensor names are fixed strings:

    subsample.b{j}.dw_w / pw_w / pw_b          j in 0..2
    subsample.out_w / out_b
    layer{i}.ff1.ln_g / ln_b / w1 / b1 / w2 / b2
    layer{i}.att.ln_g / ln_b / wq / wk / wv / wr / u / v / wo / bo
    layer{i}.conv.ln_g / ln_b / pw_in_w / pw_in_b / dw_w / dw_ln_g / dw_ln_b
                / pw_out_w / pw_out_b
    layer{i}.ff2.ln_g / ln_b / w1 / b1 / w2 / b2
    layer{i}.out_ln_g / out_ln_b
    after_ln_g / after_ln_b
    ctc.w / ctc.b
    vocab.utf8                                  newline-joined tokens as bytes
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import attention as att
from . import chunking
from . import conv as convmod
from .attention import AttentionParams, RelPosTable, build_rel_pos_table, chunk_attention
from .chunking import ChunkBatch, SchedulerError, StepSchedule, StreamState
from .config import ContextConfig, ModelConfig, derive_l_conv, require_valid
from .conv import ConvParams, conv_module_forward
from .ctc import CtcHead, Vocab, default_vocab
from .frontend import N_MELS
from .functional import ff_forward, layer_norm, swish

CHECKPOINT_MAGIC = b"CFKW"
CHECKPOINT_VERSION = 1
RAW_CACHE_FRAMES = 7  # stride-2 kernel-3 stack reads 7 raw frames left of a block


class CheckpointError(ValueError):
    """Unknown/missing tensor names, shape mismatches, or truncation."""


@dataclass
class FeedForwardParams:
    ln_g: np.ndarray
    ln_b: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def astype(self, dtype):
        return FeedForwardParams(*(getattr(self, f).astype(dtype, copy=False)
                                   for f in ("ln_g", "ln_b", "w1", "b1", "w2", "b2")))


@dataclass
class LayerWeights:
    ff1: FeedForwardParams
    att_ln_g: np.ndarray
    att_ln_b: np.ndarray
    att: AttentionParams
    conv_ln_g: np.ndarray
    conv_ln_b: np.ndarray
    conv: ConvParams
    ff2: FeedForwardParams
    out_ln_g: np.ndarray
    out_ln_b: np.ndarray

    def astype(self, dtype):
        return LayerWeights(
            ff1=self.ff1.astype(dtype),
            att_ln_g=self.att_ln_g.astype(dtype, copy=False),
            att_ln_b=self.att_ln_b.astype(dtype, copy=False),
            att=self.att.astype(dtype),
            conv_ln_g=self.conv_ln_g.astype(dtype, copy=False),
            conv_ln_b=self.conv_ln_b.astype(dtype, copy=False),
            conv=self.conv.astype(dtype),
            ff2=self.ff2.astype(dtype),
            out_ln_g=self.out_ln_g.astype(dtype, copy=False),
            out_ln_b=self.out_ln_b.astype(dtype, copy=False),
        )


@dataclass
class SubsampleBlock:
    dw_w: np.ndarray  # (3, ch_in) stride-2 depthwise kernel
    pw_w: np.ndarray  # (ch_in, ch_out)
    pw_b: np.ndarray  # (ch_out,)

    def astype(self, dtype):
        return SubsampleBlock(*(getattr(self, f).astype(dtype, copy=False)
                                for f in ("dw_w", "pw_w", "pw_b")))


@dataclass
class SubsampleWeights:
    blocks: list[SubsampleBlock]  # three stride-2 depthwise-separable blocks
    out_w: np.ndarray             # (d_model, d_model)
    out_b: np.ndarray

    def astype(self, dtype):
        return SubsampleWeights(blocks=[b.astype(dtype) for b in self.blocks],
                                out_w=self.out_w.astype(dtype, copy=False),
                                out_b=self.out_b.astype(dtype, copy=False))


@dataclass
class EncoderWeights:
    subsample: SubsampleWeights
    layers: list[LayerWeights]
    after_ln_g: np.ndarray
    after_ln_b: np.ndarray

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def d_model(self) -> int:
        return self.after_ln_g.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.layers[0].conv.kernel_size if self.layers else 1

    def astype(self, dtype):
        return EncoderWeights(subsample=self.subsample.astype(dtype),
                              layers=[l.astype(dtype) for l in self.layers],
                              after_ln_g=self.after_ln_g.astype(dtype, copy=False),
                              after_ln_b=self.after_ln_b.astype(dtype, copy=False))


def post_frames(t_raw: int) -> int:
    """Post-subsample length for t_raw feature frames: ceil(t_raw / 8)."""
    return -(-t_raw // 8)


# ---------------------------------------------------------------------------
# weight init / checkpoint container
# ---------------------------------------------------------------------------

def _uniform(rng, shape, fan_in, dtype=np.float32):
    a = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-a, a, size=shape).astype(dtype)


def _init_ff(rng, d, d_ff):
    return FeedForwardParams(
        ln_g=np.ones(d, np.float32), ln_b=np.zeros(d, np.float32),
        w1=_uniform(rng, (d, d_ff), d), b1=_uniform(rng, (d_ff,), d),
        w2=_uniform(rng, (d_ff, d), d_ff), b2=_uniform(rng, (d,), d_ff),
    )


def init_weights(model: ModelConfig, seed: int | None = None) -> EncoderWeights:
    """Deterministic uniform(-a, a) init, a = 1/sqrt(fan_in), fixed draw order:
    subsample blocks then layers 0..N-1 (ff1, attention, conv, ff2)."""
    rng = np.random.default_rng(model.seed if seed is None else seed)
    d, k = model.d_model, model.kernel_size
    blocks = []
    ch_in = N_MELS
    for _ in range(3):
        blocks.append(SubsampleBlock(
            dw_w=_uniform(rng, (3, ch_in), 3),
            pw_w=_uniform(rng, (ch_in, d), ch_in),
            pw_b=_uniform(rng, (d,), ch_in),
        ))
        ch_in = d
    sub = SubsampleWeights(blocks=blocks,
                           out_w=_uniform(rng, (d, d), d),
                           out_b=_uniform(rng, (d,), d))
    layers = []
    for _ in range(model.n_layers):
        ff1 = _init_ff(rng, d, model.d_ff)
        attp = AttentionParams(
            wq=_uniform(rng, (d, d), d), wk=_uniform(rng, (d, d), d),
            wv=_uniform(rng, (d, d), d), wr=_uniform(rng, (d, d), d),
            u=_uniform(rng, (d,), d), v=_uniform(rng, (d,), d),
            wo=_uniform(rng, (d, d), d), bo=_uniform(rng, (d,), d),
        )
        cp = ConvParams(
            pw_in_w=_uniform(rng, (d, 2 * d), d), pw_in_b=_uniform(rng, (2 * d,), d),
            dw=_uniform(rng, (k, d), k),
            ln_scale=np.ones(d, np.float32), ln_shift=np.zeros(d, np.float32),
            pw_out_w=_uniform(rng, (d, d), d), pw_out_b=_uniform(rng, (d,), d),
        )
        ff2 = _init_ff(rng, d, model.d_ff)
        layers.append(LayerWeights(
            ff1=ff1,
            att_ln_g=np.ones(d, np.float32), att_ln_b=np.zeros(d, np.float32),
            att=attp,
            conv_ln_g=np.ones(d, np.float32), conv_ln_b=np.zeros(d, np.float32),
            conv=cp,
            ff2=ff2,
            out_ln_g=np.ones(d, np.float32), out_ln_b=np.zeros(d, np.float32),
        ))
    return EncoderWeights(subsample=sub, layers=layers,
                          after_ln_g=np.ones(d, np.float32),
                          after_ln_b=np.zeros(d, np.float32))


def init_model(model: ModelConfig, seed: int | None = None,
               vocab: Vocab | None = None) -> tuple[EncoderWeights, CtcHead, Vocab]:
    """Encoder weights plus CTC head and vocabulary from one seeded stream."""
    seed = model.seed if seed is None else seed
    weights = init_weights(model, seed)
    rng = np.random.default_rng(seed + 1)
    if vocab is None:
        vocab = default_vocab(model.vocab_size)
    d = model.d_model
    head = CtcHead(w=_uniform(rng, (d, len(vocab.tokens)), d),
                   b=_uniform(rng, (len(vocab.tokens),), d))
    return weights, head, vocab


def _tensor_map(weights: EncoderWeights, head: CtcHead, vocab: Vocab) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    for j, blk in enumerate(weights.subsample.blocks):
        tensors[f"subsample.b{j}.dw_w"] = blk.dw_w
        tensors[f"subsample.b{j}.pw_w"] = blk.pw_w
        tensors[f"subsample.b{j}.pw_b"] = blk.pw_b
    tensors["subsample.out_w"] = weights.subsample.out_w
    tensors["subsample.out_b"] = weights.subsample.out_b
    for i, lw in enumerate(weights.layers):
        pre = f"layer{i}"
        for tag, ff in (("ff1", lw.ff1), ("ff2", lw.ff2)):
            for name in ("ln_g", "ln_b", "w1", "b1", "w2", "b2"):
                tensors[f"{pre}.{tag}.{name}"] = getattr(ff, name)
        tensors[f"{pre}.att.ln_g"] = lw.att_ln_g
        tensors[f"{pre}.att.ln_b"] = lw.att_ln_b
        for name in ("wq", "wk", "wv", "wr", "u", "v", "wo", "bo"):
            tensors[f"{pre}.att.{name}"] = getattr(lw.att, name)
        tensors[f"{pre}.conv.ln_g"] = lw.conv_ln_g
        tensors[f"{pre}.conv.ln_b"] = lw.conv_ln_b
        tensors[f"{pre}.conv.pw_in_w"] = lw.conv.pw_in_w
        tensors[f"{pre}.conv.pw_in_b"] = lw.conv.pw_in_b
        tensors[f"{pre}.conv.dw_w"] = lw.conv.dw
        tensors[f"{pre}.conv.dw_ln_g"] = lw.conv.ln_scale
        tensors[f"{pre}.conv.dw_ln_b"] = lw.conv.ln_shift
        tensors[f"{pre}.conv.pw_out_w"] = lw.conv.pw_out_w
        tensors[f"{pre}.conv.pw_out_b"] = lw.conv.pw_out_b
        tensors[f"{pre}.out_ln_g"] = lw.out_ln_g
        tensors[f"{pre}.out_ln_b"] = lw.out_ln_b
    tensors["after_ln_g"] = weights.after_ln_g
    tensors["after_ln_b"] = weights.after_ln_b
    tensors["ctc.w"] = head.w
    tensors["ctc.b"] = head.b
    for tok in vocab.tokens:
        if "\n" in tok:
            raise CheckpointError(f"token {tok!r} contains a newline")
    blob = "\n".join(vocab.tokens).encode("utf-8")
    tensors["vocab.utf8"] = np.frombuffer(blob, dtype=np.uint8).astype(np.float32)
    return tensors


def save_checkpoint(path, weights: EncoderWeights, head: CtcHead, vocab: Vocab) -> None:
    tensors = _tensor_map(weights, head, vocab)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def _read_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint container")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 12
    tensors: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", blob, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            end = off + 4 * size
            if end > len(blob):
                raise CheckpointError(f"{path}: truncated payload for tensor {name!r}")
            tensors[name] = np.frombuffer(blob[off:end], dtype="<f4").reshape(dims).copy()
            off = end
    except struct.error:
        raise CheckpointError(f"{path}: truncated tensor table") from None
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes")
    return tensors


def load_checkpoint(path) -> tuple[EncoderWeights, CtcHead, Vocab]:
    """Parse a checkpoint; save -> load is a bitwise identity.

    The expected tensor-name set is reconstructed from the layer count found
    in the file; missing and unknown names are both reported.
    """
    tensors = _read_tensors(path)
    layer_ids = set()
    for name in tensors:
        if name.startswith("layer"):
            layer_ids.add(int(name.split(".", 1)[0][5:]))
    n_layers = (max(layer_ids) + 1) if layer_ids else 0
    missing: list[str] = []

    def take(name):
        if name not in tensors:
            missing.append(name)
            return np.zeros(0, np.float32)
        return tensors.pop(name)

    blocks = [SubsampleBlock(dw_w=take(f"subsample.b{j}.dw_w"),
                             pw_w=take(f"subsample.b{j}.pw_w"),
                             pw_b=take(f"subsample.b{j}.pw_b")) for j in range(3)]
    sub = SubsampleWeights(blocks=blocks, out_w=take("subsample.out_w"),
                           out_b=take("subsample.out_b"))
    layers = []
    for i in range(n_layers):
        pre = f"layer{i}"
        ff1 = FeedForwardParams(*(take(f"{pre}.ff1.{n}")
                                  for n in ("ln_g", "ln_b", "w1", "b1", "w2", "b2")))
        ff2 = FeedForwardParams(*(take(f"{pre}.ff2.{n}")
                                  for n in ("ln_g", "ln_b", "w1", "b1", "w2", "b2")))
        attp = AttentionParams(*(take(f"{pre}.att.{n}")
                                 for n in ("wq", "wk", "wv", "wr", "u", "v", "wo", "bo")))
        cp = ConvParams(pw_in_w=take(f"{pre}.conv.pw_in_w"),
                        pw_in_b=take(f"{pre}.conv.pw_in_b"),
                        dw=take(f"{pre}.conv.dw_w"),
                        ln_scale=take(f"{pre}.conv.dw_ln_g"),
                        ln_shift=take(f"{pre}.conv.dw_ln_b"),
                        pw_out_w=take(f"{pre}.conv.pw_out_w"),
                        pw_out_b=take(f"{pre}.conv.pw_out_b"))
        layers.append(LayerWeights(
            ff1=ff1,
            att_ln_g=take(f"{pre}.att.ln_g"), att_ln_b=take(f"{pre}.att.ln_b"),
            att=attp,
            conv_ln_g=take(f"{pre}.conv.ln_g"), conv_ln_b=take(f"{pre}.conv.ln_b"),
            conv=cp,
            ff2=ff2,
            out_ln_g=take(f"{pre}.out_ln_g"), out_ln_b=take(f"{pre}.out_ln_b"),
        ))
    weights = EncoderWeights(subsample=sub, layers=layers,
                             after_ln_g=take("after_ln_g"),
                             after_ln_b=take("after_ln_b"))
    head = CtcHead(w=take("ctc.w"), b=take("ctc.b"))
    vocab_arr = take("vocab.utf8")
    if missing:
        raise CheckpointError(f"{path}: missing tensors: {', '.join(sorted(missing))}")
    if tensors:
        raise CheckpointError(f"{path}: unknown tensors: {', '.join(sorted(tensors))}")
    vocab = Vocab(tokens=vocab_arr.astype(np.uint8).tobytes().decode("utf-8").split("\n"))
    if head.w.shape[1] != len(vocab.tokens):
        raise CheckpointError(
            f"{path}: ctc head vocab dim {head.w.shape[1]} != {len(vocab.tokens)} tokens"
        )
    return weights, head, vocab


def check_shapes(weights: EncoderWeights, model: ModelConfig) -> list[str]:
    """Mismatches between loaded tensors and a model configuration."""
    problems = []
    if weights.n_layers != model.n_layers:
        problems.append(f"checkpoint has {weights.n_layers} layers, config says "
                        f"{model.n_layers}")
    if weights.d_model != model.d_model:
        problems.append(f"checkpoint d_model {weights.d_model} != config "
                        f"{model.d_model}")
    if weights.layers and weights.kernel_size != model.kernel_size:
        problems.append(f"checkpoint kernel {weights.kernel_size} != config "
                        f"{model.kernel_size}")
    if weights.layers and weights.layers[0].ff1.w1.shape[1] != model.d_ff:
        problems.append(f"checkpoint d_ff {weights.layers[0].ff1.w1.shape[1]} != "
                        f"config {model.d_ff}")
    return problems


# ---------------------------------------------------------------------------
# subsampling
# ---------------------------------------------------------------------------

def _dw_stride2(buf: np.ndarray, buf_start: int, out_start: int, out_len: int,
                kernel: np.ndarray, in_limit: int) -> np.ndarray:
    """Stride-2 depthwise conv on an absolute-indexed buffer.

    out[j] = sum_k kernel[k] * in[2 * (out_start + j) - 1 + k], where ``in`` is
    zero outside [0, in_limit). The buffer must physically cover every
    in-range position it is asked for.
    """
    pos = 2 * (out_start + np.arange(out_len))[:, None] + np.arange(3)[None, :] - 1
    valid = (pos >= 0) & (pos < in_limit)
    rel = pos - buf_start
    if np.any(valid & ((rel < 0) | (rel >= buf.shape[0]))):
        raise SchedulerError("insufficient margin frames for the subsample stack")
    rel = np.clip(rel, 0, max(buf.shape[0] - 1, 0))
    vals = np.where(valid[..., None], buf[rel], np.zeros((), dtype=buf.dtype))
    return np.einsum("tkc,kc->tc", vals, kernel.astype(buf.dtype, copy=False))


def subsample_forward(raw_buf: np.ndarray, buf_start: int, post_start: int,
                      post_end: int, sub: SubsampleWeights, t_raw: int,
                      dtype=np.float32) -> np.ndarray:
    """Post-subsample frames [post_start, post_end) from a raw feature buffer.

    raw_buf covers absolute raw frames [buf_start, ...); padding past t_raw is
    neutralized by the per-level validity limits, so its content cannot affect
    the output. Three stride-2 depthwise-separable blocks (kernel 3, swish)
    then a linear projection; chunk-wise output equals full-sequence
    subsampling exactly because post frame t only reads raw [8t - 7, 8t + 7].
    """
    s = sub.astype(dtype)
    lv = np.asarray(raw_buf, dtype=dtype)
    lv_start = buf_start
    spans = [(4 * post_start - 3, 4 * post_end),
             (2 * post_start - 1, 2 * post_end),
             (post_start, post_end)]
    limits = [t_raw, -(-t_raw // 2), -(-t_raw // 4)]
    for (a, b), blk, lim in zip(spans, s.blocks, limits):
        y = _dw_stride2(lv, lv_start, a, b - a, blk.dw_w, lim)
        lv = swish(y @ blk.pw_w + blk.pw_b)
        lv_start = a
    return lv @ s.out_w + s.out_b


# ---------------------------------------------------------------------------
# layer engine
# ---------------------------------------------------------------------------

@dataclass
class _AudioStep:
    state: StreamState
    start: int            # post frames consumed before this step
    emit: int             # frames emitted this step
    cov: int              # current-region frames including lookahead
    final: bool           # coverage reaches the audio end
    n_rows: int
    x: np.ndarray         # (cov, d) current flat values
    valid: int            # exact prefix length of the current region
    new_att: list = field(default_factory=list)
    new_conv: list = field(default_factory=list)


def _shrunk_validity(valid: int, cov: int, final: bool, c: int, r: int) -> int:
    """Attention-output validity: whole chunk windows only, unless the region
    ends at the real audio end (windows then clip semantically)."""
    if final:
        return cov
    if valid < r:
        return 0
    return min(cov, c * ((valid - r) // c))


def _layer_pass(steps: list[_AudioStep], lw: LayerWeights, table: RelPosTable,
                ctx: ContextConfig, model: ModelConfig, layer_idx: int,
                dtype) -> None:
    """One encoder layer over every audio of the step, rows batched together.

    Composition: half-step FF, relative MHSA over chunk rows, convolution
    module, half-step FF, per-layer output norm; residuals throughout."""
    c, l_att, r = ctx.c, ctx.l_att, ctx.r
    l_conv = (lw.conv.kernel_size - 1) // 2
    w = lw.astype(dtype)

    for a in steps:
        h = ff_forward(layer_norm(a.x, w.ff1.ln_g, w.ff1.ln_b),
                       w.ff1.w1, w.ff1.b1, w.ff1.w2, w.ff1.b2)
        a.x = a.x + 0.5 * h

    # attention: per-audio gathers, one batched computation over all rows
    exts = []
    batches = []
    for a in steps:
        cache = a.state.att_caches[layer_idx].astype(dtype, copy=False)
        ext = np.concatenate([cache, a.x], axis=0)
        ln_ext = layer_norm(ext, w.att_ln_g, w.att_ln_b)
        batches.append(chunking.oct_segment(
            ln_ext[: cache.shape[0] + a.valid],
            cache.shape[0] + c * np.arange(a.n_rows), l_att, c, r))
        exts.append(ext)
    big = ChunkBatch(rows=np.concatenate([b.rows for b in batches]),
                     mask=np.concatenate([b.mask for b in batches]),
                     plans=[p for b in batches for p in b.plans],
                     l=l_att, c=c, r=r)
    out = chunk_attention(big, lw.att, table, model.n_heads)
    offset = 0
    for a, ext in zip(steps, exts):
        rows_out = out[offset: offset + a.n_rows]
        offset += a.n_rows
        cache_len = ext.shape[0] - a.cov
        x2 = a.x.copy()
        for j in range(a.n_rows):
            take = min(c, a.cov - j * c)
            x2[j * c: j * c + take] += rows_out[j, :take]
        a.new_att.append(att.update_att_cache(ext[: cache_len + a.emit], l_att))
        a.x = x2

    # convolution: symmetric l_conv margins gathered from the step flats
    exts2 = []
    batches2 = []
    v_atts = []
    for a in steps:
        cache = a.state.conv_caches[layer_idx].astype(dtype, copy=False)
        ext2 = np.concatenate([cache, a.x], axis=0)
        ln_ext2 = layer_norm(ext2, w.conv_ln_g, w.conv_ln_b)
        v_att = _shrunk_validity(a.valid, a.cov, a.final, c, r)
        batches2.append(chunking.oct_segment(
            ln_ext2[: cache.shape[0] + v_att],
            cache.shape[0] + c * np.arange(a.n_rows), l_conv, c, l_conv))
        exts2.append(ext2)
        v_atts.append(v_att)
    rows2 = np.concatenate([b.rows for b in batches2])
    mask2 = np.concatenate([b.mask for b in batches2])
    out2 = conv_module_forward(rows2, lw.conv, mask2)
    offset = 0
    for a, ext2, v_att in zip(steps, exts2, v_atts):
        rows_out = out2[offset: offset + a.n_rows]
        offset += a.n_rows
        cache_len = ext2.shape[0] - a.cov
        x3 = a.x.copy()
        for j in range(a.n_rows):
            take = min(c, a.cov - j * c)
            x3[j * c: j * c + take] += rows_out[j, :take]
        a.new_conv.append(convmod.update_conv_cache(ext2[: cache_len + a.emit], l_conv))
        a.x = x3
        new_valid = a.cov if a.final else max(0, v_att - l_conv)
        if new_valid < a.emit:
            raise SchedulerError(
                "lookahead shortfall: emitted frames lost exactness "
                f"(valid {new_valid} < emit {a.emit})"
            )
        a.valid = new_valid

    for a in steps:
        h = ff_forward(layer_norm(a.x, w.ff2.ln_g, w.ff2.ln_b),
                       w.ff2.w1, w.ff2.b1, w.ff2.w2, w.ff2.b2)
        a.x = layer_norm(a.x + 0.5 * h, w.out_ln_g, w.out_ln_b)


def _empty_caches(model: ModelConfig, dtype):
    d = model.d_model
    return [np.zeros((0, d), dtype) for _ in range(model.n_layers)]


def encoder_layer_forward(flat_x: np.ndarray, layer: LayerWeights,
                          table: RelPosTable, ctx: ContextConfig,
                          model: ModelConfig, *, att_cache: np.ndarray | None = None,
                          conv_cache: np.ndarray | None = None,
                          emit: int | None = None, final: bool = True,
                          valid: int | None = None,
                          ) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    """One layer over one audio's flat step region.

    Returns (outputs, new attention cache, new conv cache, output validity).
    Chunk starts land every c frames from the region start; ``final`` marks a
    region that ends at the true audio end.
    """
    dtype = np.asarray(flat_x).dtype
    cov = flat_x.shape[0]
    d = model.d_model
    st = StreamState(audio_id="_", total_frames=cov)
    st.att_caches = [att_cache.astype(dtype) if att_cache is not None
                     else np.zeros((0, d), dtype)]
    st.conv_caches = [conv_cache.astype(dtype) if conv_cache is not None
                      else np.zeros((0, d), dtype)]
    a = _AudioStep(state=st, start=0, emit=cov if emit is None else emit, cov=cov,
                   final=final, n_rows=-(-cov // ctx.c),
                   x=np.array(flat_x, dtype=dtype),
                   valid=cov if valid is None else valid)
    _layer_pass([a], layer, table, ctx, model, 0, dtype)
    return a.x, a.new_att[0], a.new_conv[0], a.valid


# ---------------------------------------------------------------------------
# step driver
# ---------------------------------------------------------------------------

def encode_step(states: dict[str, StreamState], schedule: StepSchedule,
                features: dict[str, np.ndarray], weights: EncoderWeights,
                ctx: ContextConfig, model: ModelConfig, table: RelPosTable,
                dtype=np.float32) -> dict[str, np.ndarray]:
    """Run one scheduled step; returns the emitted hidden frames per audio.

    Only the scheduled chunks' outputs are emitted; lookahead outputs are
    discarded and re-derived from raw input next step. Caches are updated from
    the flattened per-layer inputs at the emit frontier.
    """
    steps: list[_AudioStep] = []
    for aid in schedule.audio_order():
        st = states[aid]
        rows = schedule.rows_for(aid)
        start = st.frames_consumed
        if rows[0].chunk_index * ctx.c != start:
            raise SchedulerError(
                f"audio {aid!r}: first scheduled chunk {rows[0].chunk_index} does "
                f"not continue at frame {start}"
            )
        for p, q in zip(rows, rows[1:]):
            if q.chunk_index != p.chunk_index + 1:
                raise SchedulerError(f"audio {aid!r}: non-contiguous chunks scheduled")
        emit = sum(p.valid_frames for p in rows)
        la = min(schedule.lookahead.get(aid, 0), st.total_frames - start - emit)
        cov = emit + la
        final = (start + cov == st.total_frames)
        feats = features[aid]
        t_raw = feats.shape[0]
        raw_start, raw_end = 8 * start, 8 * (start + cov)
        cache = st.raw_cache if st.raw_cache is not None else \
            np.zeros((0, feats.shape[1]), feats.dtype)
        fresh = feats[raw_start: min(raw_end, t_raw)]
        pad = (raw_end - raw_start) - fresh.shape[0]
        if pad > 0:
            fresh = np.concatenate([fresh,
                                    np.zeros((pad, feats.shape[1]), feats.dtype)])
        buf = np.concatenate([cache, fresh])
        hidden = subsample_forward(buf, raw_start - cache.shape[0], start,
                                   start + cov, weights.subsample, t_raw, dtype)
        end_raw = 8 * (start + emit)
        st.raw_cache = feats[max(0, end_raw - RAW_CACHE_FRAMES):
                             min(end_raw, t_raw)].copy()
        if not st.att_caches and model.n_layers:
            st.att_caches = _empty_caches(model, dtype)
            st.conv_caches = _empty_caches(model, dtype)
        steps.append(_AudioStep(state=st, start=start, emit=emit, cov=cov,
                                final=final, n_rows=-(-cov // ctx.c), x=hidden,
                                valid=cov))
    for k in range(model.n_layers):
        _layer_pass(steps, weights.layers[k], table, ctx, model, k, dtype)
    out: dict[str, np.ndarray] = {}
    for a in steps:
        x = a.x
        if model.n_layers:
            x = layer_norm(x, weights.after_ln_g.astype(dtype, copy=False),
                           weights.after_ln_b.astype(dtype, copy=False))
        out[a.state.audio_id] = x[: a.emit].copy()
        a.state.frames_consumed += a.emit
        for k in range(model.n_layers):
            a.state.att_caches[k] = a.new_att[k]
            a.state.conv_caches[k] = a.new_conv[k]
    return out


def encode_full(features: dict[str, np.ndarray], weights: EncoderWeights,
                ctx: ContextConfig, model: ModelConfig, budget: int = 16,
                dtype=np.float32, on_emit=None) -> dict[str, np.ndarray]:
    """Decode every audio to hidden frames with masked-batch endless decoding.

    Loops schedule and step until all chunks are emitted; deterministic for
    fixed weights and inputs. ``on_emit`` is called as
    on_emit(audio_id, block, start_frame) after each step.
    """
    require_valid(model, ctx)
    l_conv = derive_l_conv(model.kernel_size)
    table = build_rel_pos_table(ctx.l_att, ctx.c, ctx.r, model.d_model, model.l_max)
    plans: dict[str, list] = {}
    states: dict[str, StreamState] = {}
    blocks: dict[str, list[np.ndarray]] = {}
    for aid, feats in features.items():
        t_post = post_frames(feats.shape[0])
        plans[aid] = chunking.carve_chunks(t_post, ctx.c, aid)
        states[aid] = StreamState(audio_id=aid, total_frames=t_post)
        blocks[aid] = []
    while True:
        sched = chunking.schedule_step(list(states.values()), plans, budget, ctx,
                                       model.n_layers, l_conv)
        if sched is None:
            break
        emitted = encode_step(states, sched, features, weights, ctx, model,
                              table, dtype)
        for aid, block in emitted.items():
            if on_emit is not None:
                on_emit(aid, block, states[aid].frames_consumed - block.shape[0])
            blocks[aid].append(block)
    return {aid: (np.concatenate(parts) if parts
                  else np.zeros((0, model.d_model), dtype))
            for aid, parts in blocks.items()}


def layer_stack_forward(hidden: np.ndarray, weights: EncoderWeights,
                        ctx: ContextConfig, model: ModelConfig,
                        dtype=np.float32) -> np.ndarray:
    """Run the layer stack over an already-subsampled sequence in one step.

    Single audio, every chunk scheduled, no lookahead machinery; windows clip
    at the sequence ends. Useful for isolating the stack's receptive field.
    """
    require_valid(model, ctx)
    table = build_rel_pos_table(ctx.l_att, ctx.c, ctx.r, model.d_model, model.l_max)
    x = np.asarray(hidden, dtype=dtype)
    cov = x.shape[0]
    st = StreamState(audio_id="_", total_frames=cov)
    st.att_caches = _empty_caches(model, dtype)
    st.conv_caches = _empty_caches(model, dtype)
    a = _AudioStep(state=st, start=0, emit=cov, cov=cov, final=True,
                   n_rows=-(-cov // ctx.c), x=x.copy(), valid=cov)
    for k in range(model.n_layers):
        _layer_pass([a], weights.layers[k], table, ctx, model, k, dtype)
    out = a.x
    if model.n_layers:
        out = layer_norm(out, weights.after_ln_g.astype(dtype, copy=False),
                         weights.after_ln_b.astype(dtype, copy=False))
    return out
