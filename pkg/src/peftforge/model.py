"""Decoder-only transformer base model and classification head.

A small LLaMA-style stack: RMSNorm pre-normalization, rotary position
embeddings, multi-head causal attention, SwiGLU feed-forward, untied LM
output projection. Every parameter is frozen by default; adapters and the
classifier head are the trainable surface.

Forward functions accept an optional adapter stack (duck-typed, see
``stacking``) which can add low-rank deltas to attention projections,
prepend virtual tokens to the input embeddings, prepend per-layer prefix
key/value rows, and mix in zero-gated prompt attention.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .data import PAD_ID, TaskSpec
from .tensor import Tensor

INIT_STD = 0.02
ROTARY_BASE = 10000.0


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 512
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 128
    rms_eps: float = 1e-5

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.max_seq_len < 1:
            raise ValueError("max_seq_len must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if (self.d_model // self.n_heads) % 2 != 0:
            raise ValueError("head dim must be even for rotary embeddings")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


ATTN_PROJECTIONS = ("wq", "wk", "wv", "wo")


class BaseModel:
    """The frozen transformer parameters plus their architecture config."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        rng = T.make_rng(seed)
        self.params: dict[str, Tensor] = {}
        for name, shape in self.param_manifest(config):
            if name.endswith("norm.weight"):
                self.params[name] = T.full(shape, 1.0, dtype=dtype)
            else:
                self.params[name] = T.gaussian(shape, 0.0, INIT_STD, rng, dtype=dtype)

    @staticmethod
    def param_manifest(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
        """Named shapes of every parameter, in storage order. No allocation."""
        d, ff, v = config.d_model, config.d_ff, config.vocab_size
        entries: list[tuple[str, tuple[int, ...]]] = [("embed.weight", (v, d))]
        for i in range(config.n_layers):
            p = f"layers.{i}."
            entries += [
                (p + "attn_norm.weight", (d,)),
                (p + "wq", (d, d)),
                (p + "wk", (d, d)),
                (p + "wv", (d, d)),
                (p + "wo", (d, d)),
                (p + "ffn_norm.weight", (d,)),
                (p + "w_gate", (d, ff)),
                (p + "w_up", (d, ff)),
                (p + "w_down", (ff, d)),
            ]
        entries += [("final_norm.weight", (d,)), ("lm_head.weight", (d, v))]
        return entries

    @classmethod
    def param_count(cls, config: ModelConfig) -> int:
        return sum(int(np.prod(shape)) for _, shape in cls.param_manifest(config))

    def named_params(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.params.items()

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag

    @property
    def trainable(self) -> bool:
        return any(p.requires_grad for p in self.params.values())

    def layer(self, i: int, name: str) -> Tensor:
        return self.params[f"layers.{i}.{name}"]


class ClassifierHead:
    """Linear projection from the pooled hidden state to task outputs."""

    def __init__(self, d_model: int, task: TaskSpec, seed: int = 0, dtype=np.float32):
        self.task = task
        rng = T.make_rng(seed)
        self.w = T.gaussian([d_model, task.n_outputs], 0.0, INIT_STD, rng, dtype=dtype, requires_grad=True)
        self.b = T.zeros([task.n_outputs], dtype=dtype, requires_grad=True)

    @property
    def n_outputs(self) -> int:
        return self.task.n_outputs

    def named_params(self) -> Iterator[tuple[str, Tensor]]:
        yield "w", self.w
        yield "b", self.b

    def set_trainable(self, flag: bool) -> None:
        self.w.requires_grad = flag
        self.b.requires_grad = flag


# ---------------------------------------------------------------------------
# Architecture pieces
# ---------------------------------------------------------------------------


def rmsnorm(x: Tensor, weight: Tensor, eps: float) -> Tensor:
    """x / sqrt(mean(x^2) + eps) scaled per-channel by ``weight``."""
    w = T.expand_leading(weight, x.shape[:-1]) if weight.shape != x.shape else weight
    return T.mul(T.mul(x, T.rsqrt_meansq(x, eps)), w)


def rotary_tables(positions: np.ndarray, head_dim: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    if head_dim % 2 != 0:
        raise ValueError("rotary embeddings need an even head dim")
    half = head_dim // 2
    freqs = ROTARY_BASE ** (-np.arange(half, dtype=np.float64) * 2.0 / head_dim)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * freqs[None, :]
    cos = np.concatenate([np.cos(angles), np.cos(angles)], axis=-1).astype(dtype)
    sin = np.concatenate([np.sin(angles), np.sin(angles)], axis=-1).astype(dtype)
    return cos, sin


def _rotate_half(x: Tensor) -> Tensor:
    half = x.shape[-1] // 2
    lo = T.narrow(x, x.data.ndim - 1, 0, half)
    hi = T.narrow(x, x.data.ndim - 1, half, half)
    return T.concat([T.neg(hi), lo], axis=x.data.ndim - 1)


def rotary_apply(q: Tensor, k: Tensor, positions: np.ndarray) -> tuple[Tensor, Tensor]:
    """Rotate query/key head vectors by position-dependent angles.

    Half-split layout: dimension pairs (i, i + hd/2) form the rotation
    planes, with angle ``pos * base^(-2i/hd)`` in plane i. Position 0 is the
    identity; attention scores depend only on relative offsets.
    """
    cos_np, sin_np = rotary_tables(positions, q.shape[-1], q.dtype)
    shape = q.shape  # [B, H, S, hd]
    cos = T.constant(np.broadcast_to(cos_np, shape).copy())
    sin = T.constant(np.broadcast_to(sin_np, shape).copy())

    def rot(x: Tensor) -> Tensor:
        return T.add(T.mul(x, cos), T.mul(_rotate_half(x), sin))

    return rot(q), rot(k)


def causal_mask(n_query: int, n_prefix: int = 0, dtype=np.float32) -> np.ndarray:
    """[n_query, n_prefix + n_query] additive mask: 0 visible, -1e9 hidden.

    Prefix columns are visible to every query position; the rest is lower
    triangular.
    """
    mask = np.full((n_query, n_prefix + n_query), -1e9, dtype=dtype)
    mask[:, :n_prefix] = 0.0
    mask[:, n_prefix:][np.tril(np.ones((n_query, n_query), dtype=bool))] = 0.0
    return mask


def attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask: np.ndarray,
    prefix_kv: tuple[Tensor, Tensor] | None = None,
    gated_prompt: tuple[Tensor, Tensor, Tensor] | None = None,
) -> Tensor:
    """Scaled dot-product attention over [B, H, T, hd] tensors.

    ``prefix_kv`` prepends trainable key/value rows visible to all queries.
    ``gated_prompt`` is (K_p, V_p, gate): a second softmax attention over
    prompt rows whose context is scaled by tanh(gate) and added in.
    """
    hd = q.shape[-1]
    inv_sqrt = 1.0 / float(np.sqrt(hd))
    if prefix_kv is not None:
        kp, vp = prefix_kv
        k = T.concat([kp, k], axis=2)
        v = T.concat([vp, v], axis=2)
    if k.shape[-2] != mask.shape[-1] or q.shape[-2] != mask.shape[-2]:
        raise ValueError(f"mask shape {mask.shape} does not cover q={q.shape}, k={k.shape}")
    scores = T.scale(T.matmul(q, T.permute(k, (0, 1, 3, 2))), inv_sqrt)
    mask_t = T.constant(np.broadcast_to(mask, scores.shape).copy())
    ctx = T.matmul(T.softmax_lastdim(T.add(scores, mask_t)), v)
    if gated_prompt is not None:
        kg, vg, gate = gated_prompt
        gscores = T.scale(T.matmul(q, T.permute(kg, (0, 1, 3, 2))), inv_sqrt)
        gctx = T.matmul(T.softmax_lastdim(gscores), vg)
        ctx = T.add(ctx, T.mul(gctx, T.tanh(gate)))
    return ctx


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, s, d = x.shape
    return T.permute(T.reshape(x, (b, s, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, s, hd = x.shape
    return T.reshape(T.permute(x, (0, 2, 1, 3)), (b, s, h * hd))


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def _project(model: BaseModel, layer: int, name: str, x: Tensor, stack, train: bool, rng) -> Tensor:
    out = T.matmul(x, model.layer(layer, name))
    if stack is not None:
        delta = stack.lora_delta_sum(layer, name, x, train=train, rng=rng)
        if delta is not None:
            out = T.add(out, delta)
    return out


def _batchify(rows: Tensor, batch: int, n_heads: int) -> Tensor:
    # [N, d] trainable rows -> [B, H, N, hd]
    return _split_heads(T.expand_leading(rows, (batch,)), n_heads)


def _encode(model: BaseModel, tokens: np.ndarray, stack, train: bool, rng) -> tuple[Tensor, int]:
    """Run the transformer trunk; returns final hidden states and the number
    of virtual positions prepended at the input."""
    cfg = model.config
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError("tokens must be a [batch, seq] array")
    b, t = tokens.shape
    if t < 1:
        raise ValueError("empty sequences are not supported")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ValueError(f"token id out of range [0, {cfg.vocab_size})")

    x = T.gather_rows(model.params["embed.weight"], tokens)  # [B, T, d]

    n_virtual = 0
    if stack is not None:
        rows = stack.virtual_rows(train=train, rng=rng)
        if rows is not None:
            n_virtual = rows.shape[0]
            x = T.concat([T.expand_leading(rows, (b,)), x], axis=1)
    s = t + n_virtual
    if s > cfg.max_seq_len:
        raise ValueError(f"sequence length {s} (incl. {n_virtual} virtual tokens) "
                         f"exceeds max_seq_len {cfg.max_seq_len}")

    positions = np.arange(s)
    for i in range(cfg.n_layers):
        h = rmsnorm(x, model.layer(i, "attn_norm.weight"), cfg.rms_eps)
        q = _split_heads(_project(model, i, "wq", h, stack, train, rng), cfg.n_heads)
        k = _split_heads(_project(model, i, "wk", h, stack, train, rng), cfg.n_heads)
        v = _split_heads(_project(model, i, "wv", h, stack, train, rng), cfg.n_heads)
        q, k = rotary_apply(q, k, positions)

        prefix_kv = None
        n_prefix = 0
        if stack is not None:
            pk = stack.prefix_rows(i)
            if pk is not None:
                kp_rows, vp_rows = pk
                n_prefix = kp_rows.shape[0]
                prefix_kv = (_batchify(kp_rows, b, cfg.n_heads), _batchify(vp_rows, b, cfg.n_heads))

        gated = None
        if stack is not None:
            ap = stack.adaption_terms(i)
            if ap is not None:
                rows, gate = ap  # [L, d] prompt rows share the layer's k/v path
                kg = _project(model, i, "wk", rows, stack, train, rng)
                vg = _project(model, i, "wv", rows, stack, train, rng)
                gated = (_batchify(kg, b, cfg.n_heads), _batchify(vg, b, cfg.n_heads), gate)

        mask = causal_mask(s, n_prefix, dtype=model.dtype)
        ctx = attention(q, k, v, mask, prefix_kv=prefix_kv, gated_prompt=gated)
        x = T.add(x, _project(model, i, "wo", _merge_heads(ctx), stack, train, rng))

        h2 = rmsnorm(x, model.layer(i, "ffn_norm.weight"), cfg.rms_eps)
        ff = T.matmul(T.mul(T.silu(T.matmul(h2, model.layer(i, "w_gate"))),
                            T.matmul(h2, model.layer(i, "w_up"))),
                      model.layer(i, "w_down"))
        x = T.add(x, ff)

    return rmsnorm(x, model.params["final_norm.weight"], cfg.rms_eps), n_virtual


def forward_lm(model: BaseModel, tokens: np.ndarray, stack=None,
               train: bool = False, rng=None) -> tuple[Tensor, int]:
    """Next-token logits, causal: position t sees only positions <= t.

    Returns (logits [B, n_virtual + T, vocab], n_virtual); logits at virtual
    positions exist but are meant to be masked out of any loss.
    """
    hidden, n_virtual = _encode(model, tokens, stack, train, rng)
    return T.matmul(hidden, model.params["lm_head.weight"]), n_virtual


def last_content_positions(tokens: np.ndarray) -> np.ndarray:
    """Index of the last non-padding token per row; error on all-pad rows."""
    tokens = np.asarray(tokens)
    content = tokens != PAD_ID
    if not content.any(axis=1).all():
        raise ValueError("batch contains a zero-length (all padding) sequence")
    return tokens.shape[1] - 1 - np.argmax(content[:, ::-1], axis=1)


def forward_classify(model: BaseModel, head: ClassifierHead, tokens: np.ndarray,
                     stack=None, train: bool = False, rng=None) -> Tensor:
    """Task logits [B, n_outputs] from the last non-padding token's state."""
    hidden, n_virtual = _encode(model, tokens, stack, train, rng)
    pooled = T.select_time(hidden, n_virtual + last_content_positions(tokens))
    logits = T.matmul(pooled, head.w)
    return T.add(logits, T.expand_leading(head.b, (tokens.shape[0],)))
